from .engine import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    conv1d,
    div,
    exp,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    take_along_axis,
    tanh,
    transpose,
    where,
)
from .nn import (
    ConfigError,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    parameter,
    scaled_dot_product_attention,
    truncated_normal,
    uniform_fan_in,
)
from .optim import (
    LrSchedule,
    Optimizer,
    OptimizerState,
    adam_step,
    adamw_step,
    clip_gradients,
    global_grad_norm,
    lr_at,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
