from .distributions import gauss_log_prob, gauss_sample_reparam, kl_diag_gauss
from .nn import (STD_FLOOR, MLP, DiagGaussianHead, GRUCell, Linear, LSTMCell,
                 bidirectional_forward, make_cell, recurrent_forward)
from .params import (Adam, NonFiniteGradientError, ParameterSet, adam_step, load_checkpoint,
                     read_checkpoint, save_checkpoint)
from .tensor import Tensor, as_tensor, backward, grad, parameter, zero_grads

__all__ = [
    "Adam", "DiagGaussianHead", "GRUCell", "LSTMCell", "Linear", "MLP", "NonFiniteGradientError",
    "ParameterSet", "STD_FLOOR", "Tensor", "adam_step", "as_tensor", "backward",
    "bidirectional_forward", "gauss_log_prob", "gauss_sample_reparam", "grad", "kl_diag_gauss",
    "load_checkpoint", "make_cell", "parameter", "read_checkpoint", "recurrent_forward",
    "save_checkpoint", "zero_grads",
]
