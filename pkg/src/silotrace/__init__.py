"""Multi-source privacy-preserving contact tracing: unified data format,
granularity adaptation, PSI / PSI-CA, secure aggregation and a party simulator."""

from .unified_format import OpaqueId, canonicalize, make_opaque_id
from .psi import PsiMode, run_psi
from .simnet import run_scenario

__all__ = ["OpaqueId", "PsiMode", "canonicalize", "make_opaque_id", "run_psi", "run_scenario"]
__version__ = "0.1.0"
