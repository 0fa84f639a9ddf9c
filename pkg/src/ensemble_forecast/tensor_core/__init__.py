"""Float64 tensors, reverse-mode autodiff and the layers the forecasters are built from."""

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .gradcheck import GradCheckResult, gradcheck, relative_error
from .nn import (
    BatchNorm1d,
    BatchNormState,
    LayerNorm,
    Linear,
    Mode,
    batch_norm_1d,
    dropout,
    full_param,
    glorot_uniform,
    layer_norm,
    lstm_scan,
    zeros_param,
)
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .rng import RngStream
from .tensor import (
    AutodiffError,
    AutodiffTape,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    finite_checks,
    grad_enabled,
    log,
    matmul,
    mean,
    mse,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    set_finite_checks,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)
