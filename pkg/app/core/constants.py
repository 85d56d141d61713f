"""Physical constants in the internal unit system.

Lengths are in Angstrom, magnetic fields in Gauss, times in ms, and every
Hamiltonian is an angular frequency in rad/ms with hbar = 1. Gyromagnetic
ratios are stored in rad/ms/G.
"""

import numpy as np
from scipy import constants as cnst

# rad/s/T -> rad/ms/G
GAMMA_SI_TO_INTERNAL = 1e-3 * 1e-4

# (mu0 / 4pi) * hbar * gamma_i * gamma_j / r^3 in rad/ms when gammas are in
# rad/ms/G and r in Angstrom. Shared by nuclear dipolar and hyperfine tensors.
HBAR_MU0_O4PI = (
    cnst.mu_0 / (4 * np.pi) * cnst.hbar / GAMMA_SI_TO_INTERNAL**2 * 1e-3 * 1e30
)

ELECTRON_GAMMA = -cnst.physical_constants["electron gyromag. ratio"][0] * GAMMA_SI_TO_INTERNAL

# e * (1 barn) * (1 a.u. of EFG) / hbar, in rad/ms.
EFG_BARN_AU_TO_RAD_PER_MS = (
    cnst.e
    * 1e-28
    * cnst.physical_constants["atomic unit of electric field gradient"][0]
    / cnst.hbar
    * 1e-3
)

EXCLUSION_RADIUS_A = 0.5
MIN_PAIR_DISTANCE_A = 0.1
MIN_SITE_SEPARATION_A = 0.3
DEFAULT_FIELD_GAUSS = 3000.0
DEFAULT_BATH_RADIUS_A = 50.0
DEFAULT_R_DIPOLE_A = 8.0
DEFAULT_GAP_A = 3.0
DEFAULT_MAX_CLUSTER_DIM = 4096
DIVISOR_FLOOR = 1e-10
CLIP_CEILING = 1.000001
