from ndgrad.errors import AxisError, NdgradError, NonScalarRootError, ShapeMismatchError
from ndgrad.tensor import (
    Graph,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    elementwise,
    exp,
    flatten,
    log,
    matmul,
    mul,
    neg,
    reduce,
    relu,
    reshape,
    sigmoid,
    sub,
    tanh,
)
from ndgrad.conv import conv2d, maxpool2, upsample2
from ndgrad.losses import losses, per_sample_task_loss
from ndgrad.gradcheck import grad_check
