from gridslide.numerics.tensor import (
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    parameters_from,
    reshape,
    fused_attention,
    softmax,
    softmax_rows,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    zero_grads,
)
from gridslide.numerics.optim import (
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    ema_update,
    global_grad_norm,
)
from gridslide.numerics.schedule import Schedule, schedule_value
from gridslide.numerics.checkpoint import load_checkpoint, save_checkpoint
from gridslide.numerics.gradcheck import check_gradients, numeric_grad, relative_error
