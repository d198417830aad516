from .bnb import DEFAULT_TIME_LIMIT, Stats, Verdict, VerifyResult, branch_and_bound
from .encoding import (
    AffineLayer, BoundsTable, MilpModel, affine_layers, dump_lp, encode_milp, interval_bounds,
)
from .lp import LinearProgram, LPNumericalError, LPResult, solve_lp
from .verify import brute_force_verify, verify_closest, verify_worst

__all__ = [
    "AffineLayer", "BoundsTable", "DEFAULT_TIME_LIMIT", "LPNumericalError", "LPResult", "LinearProgram",
    "MilpModel", "Stats", "Verdict", "VerifyResult", "affine_layers", "branch_and_bound",
    "brute_force_verify", "dump_lp", "encode_milp", "interval_bounds", "solve_lp", "verify_closest",
    "verify_worst",
]
