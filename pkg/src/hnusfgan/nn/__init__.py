from . import functional
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_into, save_checkpoint
from .module import Conv1d, Module, Parameter, PDConv1d, cast_parameters
from .optim import Adam, adam_step
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    check_finite,
    concat,
    exp,
    leaky_relu,
    log,
    maximum,
    no_grad,
    pad1d,
    relu,
    sigmoid,
    sqrt,
    square,
    tabs,
    tanh,
)
