from .tensor import (
    Tensor,
    tensor,
    backward,
    add,
    sub,
    mul,
    div,
    neg,
    add_scalar,
    mul_scalar,
    relu,
    sigmoid,
    log,
    exp,
    clamp,
    tsum,
    tmean,
    sum_per_sample,
    softmax1d,
)
from .nnops import (
    conv2d,
    conv2d_reference,
    pool2d,
    upsample_bilinear,
    batchnorm2d,
    dropout_channels,
    concat_channels,
    scale_spatial,
    scale_by_index,
)
from .optim import AdamWState, OptimizerError, adamw_step, clip_grad_global_norm
from .gradcheck import gradient_check, spread_values
