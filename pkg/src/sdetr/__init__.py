"""sdetr: desk-scale detection transformer with encoder token sparsification.

Everything runs on a small numpy-backed reverse-mode autodiff core; the
package trains and evaluates end-to-end on a synthetic shape benchmark.
"""

from .tensor import ContractError, FormatError, ShapeError, Tensor, Tape, no_grad, tape

__all__ = [
    "ContractError",
    "FormatError",
    "ShapeError",
    "Tensor",
    "Tape",
    "no_grad",
    "tape",
]
