"""Finite symbolic models and switching controllers for stochastic switched systems."""

__version__ = "0.1.0"

from .model import BoxUnion, ModeDynamics, SwitchedSystem, validate_system, lipschitz_of_linear_diffusion
from .certificates import (CertificateSet, QuadraticCertificate, build_certificates, compute_mu,
                           max_kappa_hat, verify_lmi)
from .flow import FlowConfig, nominal_flow
from .quantizer import GridParams, SeqParams, InfeasibleError
from .abstraction import build_grid, build_grid_dwell, build_seq, build_seq_dwell
from .synthesis import Spec, synthesize
