import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Optional

from core.errors import VdwCoherenceError
from core.logger import get_logger


class Worker:
    def __init__(self, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> None:
        self.fn = fn
        self.args = args
        self.kwargs = kwargs
        self.error: Optional[str] = None
        self.exception: Optional[BaseException] = None

    def run(self) -> Any:
        try:
            return self.fn(*self.args, **self.kwargs)
        except Exception as exc:
            self.exception = exc
            self.error = traceback.format_exc()
            return None


class WorkerPool:
    """Runs workers on a thread pool and hands results back in submission order.

    Callers reduce the returned list by index, so the outcome never depends on
    the number of threads or on scheduling.
    """

    def __init__(self, threads: int = 1) -> None:
        self.threads = max(1, int(threads))
        self.logger = get_logger()

    def map(self, fn: Callable[..., Any], items: Iterable[Any]) -> list[Any]:
        return self.run([Worker(fn, item) for item in items])

    def run(self, workers: list[Worker]) -> list[Any]:
        if self.threads == 1 or len(workers) <= 1:
            results = [worker.run() for worker in workers]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                results = list(executor.map(Worker.run, workers))

        for worker in workers:
            if worker.exception is not None:
                self.logger.error("Worker failed: %s", worker.error)
                if isinstance(worker.exception, VdwCoherenceError):
                    raise worker.exception
                raise RuntimeError(worker.error) from worker.exception
        return results
