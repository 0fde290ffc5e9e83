"""Verification oracles, gradient checking, the invariant suite and the CLI."""

from lvt.toolkit.gradcheck import check_gradients, finite_diff_grad, relative_error
from lvt.toolkit.oracles import OracleSizeError, oracle_forward
from lvt.toolkit.suite import CheckReport, run_invariant_suite

__all__ = [
    "CheckReport",
    "OracleSizeError",
    "check_gradients",
    "finite_diff_grad",
    "oracle_forward",
    "relative_error",
    "run_invariant_suite",
]
