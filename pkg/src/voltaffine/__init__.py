"""Inhomogeneous affine Volterra processes.

Simulation of kernel-driven Volterra SDEs, Riccati-Volterra transform
machinery, the inhomogeneous (rough) Volterra-Heston model, Fourier option
pricing, and built-in deterministic-vs-Monte-Carlo cross-validation.
"""

__version__ = "0.1.0"

from .affine import AffineCoefficients, TimeFunction
from .heston import (
    HestonParams,
    charfn_batch,
    charfn_time_zero,
    solve_heston_psi,
    to_affine,
    validate_admissibility,
)
from .kernels import (
    DiagonalConvolutionKernel,
    FractionalKernel,
    GeneralKernel,
    IdentityKernel,
    ResolventFirstKind,
    TimeGrid,
    convolution_identity_residual,
    eval_kernel,
    kernel_interval_integral,
    resolvent_first_kind,
    scheme_consistent_resolvent,
    rl_derivative,
    rl_integral,
    shifted_kernel_convolution,
    sup_l2_norm,
)
from .pricing import OptionSpec, black_scholes_call, implied_vol, price_european, price_ladder
from .riccati import (
    FLParams,
    PastPathWeights,
    RiccatiSolution,
    past_path_weights,
    phi_chi,
    solve_riccati_fractional,
    solve_riccati_general,
    y0_direct,
    y_forward_path,
    y_past_path,
)
from .simulate import (
    MCEstimate,
    PathEnsemble,
    martingale_check,
    mc_fourier_laplace,
    mean_path_deterministic,
    moment_estimate,
    read_ensemble,
    simulate_heston,
    simulate_volterra,
    write_ensemble,
)

__all__ = [name for name in dir() if not name.startswith("_")]
