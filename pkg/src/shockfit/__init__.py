"""Shock-fitted solver and verifier for scalar balance laws with singular
convolution sources."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    ConvergenceError,
    DegenerateJumpError,
    DomainError,
    HorizonError,
    InadmissibleStateError,
    IntegrationInvariantError,
    NoCertificateError,
    PreconditionError,
    RangeError,
    ShockfitError,
    StiffnessError,
)
from .kernels import (  # noqa: F401
    CutoffFunction,
    Kernel,
    kernel_eval,
    lambda_eval,
    make_custom_kernel,
    make_kernel,
    phi_eval,
    phi_xb_eval,
)
