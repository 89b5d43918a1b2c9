"""Numeric substrate: tensors, tape, seeded PRNG, gradient checking, allocation counts."""
from .alloc import (AllocStats, InstrumentationError, alloc_report, enable_instrumentation,
                    instrument, reset_alloc)
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .ops import (add, arcsin, broadcast_to, clamp, constant, cos, cross_entropy, custom, div,
                  dropout, exp, gelu, inverse_softplus, layer_norm, less_equal, linear_apply,
                  log, log_softmax, matmul, mean, mul, neg, pairwise_sq_dist, reshape, sin,
                  softmax, softplus, sqrt, square, stable_softmax, sub, sum, tag, take_rows,
                  topk_mask, transpose, where)
from .rng import SeededRng, derive_seed, sample_gaussian
from .tensor import (NonFiniteError, ShapeError, Tape, Tensor, active_tape, as_tensor,
                     default_dtype, finite_checks, precision)

__all__ = [name for name in dir() if not name.startswith("_")]
