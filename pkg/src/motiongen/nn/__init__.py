from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    cross_entropy,
    default_dtype,
    div,
    embedding_lookup,
    exp,
    l1_loss,
    layer_norm,
    linear,
    log,
    matmul,
    mse_loss,
    mul,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    set_default_dtype,
    smooth_l1,
    softmax,
    sqrt,
    sub,
    tmean,
    transpose,
    tsum,
    upsample_nearest,
)
from .layers import Conv1d, Embedding, LayerNorm, Linear, Module, fan_in_uniform, load_params
from .optim import AdamW, MissingGradientError
from .gradcheck import grad_check
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
