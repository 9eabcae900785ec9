"""Keypoint-supervised attention pooling on a small numpy autodiff core."""

from .tensor import (
    Tape,
    Tensor,
    backward,
    default_dtype,
    grad_check,
    load_tensor,
    no_grad,
    save_tensor,
    set_default_dtype,
    using_dtype,
)

__version__ = "0.1.0"
