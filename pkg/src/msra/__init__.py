"""Multi-sequence 2D-CTC: lattice loss, decoding, metrics and toy training."""

from msra.core import (
    BLANK,
    Alphabet,
    collapse,
    extend_label,
    softmax_grid,
    validate_grid,
)
from msra.lattice import (
    InfeasibleTarget,
    LambdaParams,
    backward,
    forward,
    grad_wrt_logits,
    grad_wrt_probs,
    sequence_log_prob,
    set_loss,
)

__version__ = "0.1.0"

__all__ = [
    "BLANK",
    "Alphabet",
    "InfeasibleTarget",
    "LambdaParams",
    "backward",
    "collapse",
    "extend_label",
    "forward",
    "grad_wrt_logits",
    "grad_wrt_probs",
    "sequence_log_prob",
    "set_loss",
    "softmax_grid",
    "validate_grid",
]
