from .tensor import DiffTensor, active_dtype, backward, set_verify, verify_mode
from .ops import (add, add_const, add_rowvec, batch_item, batchnorm2d,
                  bce_with_logits, check_finite, concat_channels, conv2d,
                  elementwise, matmul, maxpool2, mean_all, mul, relu, reshape,
                  rowsoftmax, scale, sigmoid, sigmoid_np, stack_batch, sub,
                  sum_all, tanh, transpose2, upconv2)
from .optim import AdamWState, adamw_step, trainable, zero_grads
from .gradcheck import FiniteDiffReport, finite_diff_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "DiffTensor", "active_dtype", "backward", "set_verify", "verify_mode",
    "add", "add_const", "add_rowvec", "batch_item", "batchnorm2d",
    "bce_with_logits", "check_finite", "concat_channels", "conv2d",
    "elementwise", "matmul", "maxpool2", "mean_all", "mul", "relu", "reshape",
    "rowsoftmax", "scale", "sigmoid", "sigmoid_np", "stack_batch", "sub",
    "sum_all", "tanh", "transpose2", "upconv2",
    "AdamWState", "adamw_step", "trainable", "zero_grads",
    "FiniteDiffReport", "finite_diff_check",
    "load_checkpoint", "save_checkpoint",
]
