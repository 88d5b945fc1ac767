"""Dense float64 tensors with recorded reverse-mode differentiation."""

from fifo_desk.tensorcore import ops
from fifo_desk.tensorcore.gradcheck import grad_check
from fifo_desk.tensorcore.tensor import Tape, TapeEntry, Tensor, active_tape, frozen, no_record
from fifo_desk.tensorcore.tensorio import decode_tensor, encode_tensor, load_tensor, save_tensor

__all__ = [
    "Tape",
    "TapeEntry",
    "Tensor",
    "active_tape",
    "decode_tensor",
    "encode_tensor",
    "frozen",
    "grad_check",
    "load_tensor",
    "no_record",
    "ops",
    "save_tensor",
]
