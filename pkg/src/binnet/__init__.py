"""Binary neural network toolkit.

Trains small convolutional nets whose middle layers carry 1-bit weights and
activations, with per-channel scale factors learned jointly with the latent
real-valued weights, and runs inference through a bit-packed XNOR/popcount
convolution kernel.
"""

from binnet.binary import (
    PackedBinaryTensor,
    ScaleDiag,
    approxsign_backward,
    binary_conv_forward,
    pack_bits,
    sign_forward,
    ste_backward,
    unpack_bits,
    xnor_popcount_dot,
)
from binnet.bilinear import (
    bilinear_residual,
    grad_G_wrt_A,
    grad_G_wrt_w,
    grad_L_wrt_A,
    objective_G,
)
from binnet.tensor_ops import ShapeError, conv2d, matmul
from binnet.updates import (
    BacktrackState,
    DensityMask,
    backtrack_w,
    density_mask,
    drelu,
    grad_U,
    trace_backtrack_oracle,
    update_A,
    update_U,
)

__all__ = [
    "BacktrackState",
    "DensityMask",
    "PackedBinaryTensor",
    "ScaleDiag",
    "ShapeError",
    "approxsign_backward",
    "backtrack_w",
    "bilinear_residual",
    "binary_conv_forward",
    "conv2d",
    "density_mask",
    "drelu",
    "grad_G_wrt_A",
    "grad_G_wrt_w",
    "grad_L_wrt_A",
    "grad_U",
    "matmul",
    "objective_G",
    "pack_bits",
    "sign_forward",
    "ste_backward",
    "trace_backtrack_oracle",
    "unpack_bits",
    "update_A",
    "update_U",
    "xnor_popcount_dot",
]
