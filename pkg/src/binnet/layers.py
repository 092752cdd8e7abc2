"""Network layers with explicit forward/backward passes.

Layers cache whatever the backward pass needs during a training-mode
forward. Parameters live in numpy arrays owned by the layer; gradients are
stored on the layer after backward(). The binary convolution keeps its
latent real-valued weights, per-channel scale diagonal and backtracking
state together, and exposes the task gradients the update engine consumes.
"""

import numpy as np

from binnet.binary import (
    ScaleDiag,
    approxsign_backward,
    binary_conv_integer,
    pack_bits,
    packed_weight_rows,
    sign_forward,
    ste_backward,
)
from binnet.tensor_ops import ShapeError, col2im, conv_output_size, im2col
from binnet.updates import BacktrackState

ESTIMATORS = {"ste": ste_backward, "approxsign": approxsign_backward}


class Layer:
    kind = "base"
    trainable = False

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def params(self):
        return {}

    def grads(self):
        return {}


class RealConv2d(Layer):
    kind = "real-conv"
    trainable = True

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None,
                 dtype=np.float32):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng()
        fan_in = c_in * kernel * kernel
        self.w = (rng.standard_normal((c_out, c_in, kernel, kernel))
                  * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gw = self.gb = None
        self._cache = None

    def forward(self, x, train):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape}")
        b, _, h, w = x.shape
        patches = im2col(x, self.kernel, self.stride, self.padding)
        out = patches @ self.w.reshape(self.c_out, -1).T + self.b
        h_out = conv_output_size(h, self.kernel, self.stride, self.padding)
        w_out = conv_output_size(w, self.kernel, self.stride, self.padding)
        if train:
            self._cache = (patches, x.shape)
        return out.transpose(0, 2, 1).reshape(b, self.c_out, h_out, w_out)

    def backward(self, grad_out):
        patches, x_shape = self._cache
        b = grad_out.shape[0]
        g2 = grad_out.reshape(b, self.c_out, -1).transpose(0, 2, 1)  # (B, P, O)
        gflat = np.ascontiguousarray(g2).reshape(-1, self.c_out)
        pflat = patches.reshape(-1, patches.shape[-1])
        self.gw = (gflat.T @ pflat).reshape(self.w.shape)
        self.gb = gflat.sum(axis=0)
        gx_patches = g2 @ self.w.reshape(self.c_out, -1)
        return col2im(gx_patches, x_shape, self.kernel, self.stride, self.padding)

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}


class BinaryConv2d(Layer):
    """1-bit convolution: sign-binarized activations and weights, per-channel
    scaling by alpha_i = 1 / inv_alpha_i.

    Training-mode forward computes the integer +-1 convolution through a
    float GEMM (exactly integer-valued); eval mode runs the packed
    XNOR/popcount kernel, which agrees bit-exactly after scaling.
    """

    kind = "binary-conv"
    trainable = True

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None,
                 dtype=np.float32, estimator="ste"):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng()
        fan_in = c_in * kernel * kernel
        self.w = (rng.standard_normal((c_out, c_in, kernel, kernel))
                  * np.sqrt(2.0 / fan_in)).astype(dtype)
        # Scale entries are kept float32-representable so checkpoints
        # (32-bit payloads) round-trip bit-exactly.
        init = ScaleDiag.from_weights(self.w).inv_alpha.astype(np.float32)
        floor32 = np.nextafter(np.float32(1e-8), np.float32(1.0))
        self.scale = ScaleDiag(np.maximum(init, floor32).astype(np.float64))
        self.state = BacktrackState.fresh(c_out)
        self.estimator = estimator
        # Overridable for smooth-surrogate gradient checks.
        self.weight_binarize = sign_forward
        self.weight_estimator = ESTIMATORS[estimator]
        self.act_binarize = sign_forward
        self.act_estimator = ESTIMATORS[estimator]
        self.use_packed_eval = True
        self.gw_task = None   # d L_S / d w, (I, J) float64
        self.gA_task = None   # task part of d L / d inv_alpha, (I,) float64
        self._cache = None
        self._packed_w_rows = None

    @property
    def j(self):
        return self.c_in * self.kernel * self.kernel

    def w2d(self):
        return self.w.reshape(self.c_out, -1)

    def _alpha(self, dtype):
        return (1.0 / self.scale.inv_alpha).astype(dtype)

    def forward(self, x, train):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape}")
        b, _, h, w = x.shape
        h_out = conv_output_size(h, self.kernel, self.stride, self.padding)
        w_out = conv_output_size(w, self.kernel, self.stride, self.padding)
        if not train and self.use_packed_eval:
            return self._forward_packed(x, b, h_out, w_out)
        a_sign = self.act_binarize(x)
        patches = im2col(a_sign, self.kernel, self.stride, self.padding)
        w_sign = self.weight_binarize(self.w).reshape(self.c_out, -1)
        intconv = patches @ w_sign.T  # (B, P, O), integer-valued
        out = intconv * self._alpha(intconv.dtype)
        if train:
            self._cache = (x, patches, intconv, w_sign)
        return out.transpose(0, 2, 1).reshape(b, self.c_out, h_out, w_out)

    def _forward_packed(self, x, b, h_out, w_out):
        w_packed = pack_bits(sign_forward(self.w.astype(np.float64)))
        w_rows = packed_weight_rows(w_packed)
        alpha = self._alpha(x.dtype)
        out = np.empty((b, self.c_out, h_out, w_out), dtype=x.dtype)
        for n in range(b):
            a_packed = pack_bits(sign_forward(x[n].astype(np.float64)))
            ints = binary_conv_integer(
                a_packed, w_packed, self.stride, self.padding, w_rows=w_rows
            )
            out[n] = ints.astype(x.dtype) * alpha[:, None, None]
        return out

    def backward(self, grad_out):
        x, patches, intconv, w_sign = self._cache
        b = grad_out.shape[0]
        g2 = grad_out.reshape(b, self.c_out, -1).transpose(0, 2, 1)  # (B, P, O)
        inv = self.scale.inv_alpha
        contraction = (g2 * intconv).sum(axis=(0, 1)).astype(np.float64)
        self.gA_task = -contraction / (inv ** 2)
        gflat = np.ascontiguousarray(g2).reshape(-1, self.c_out)
        pflat = patches.reshape(-1, patches.shape[-1])
        ghat = (gflat.T @ pflat).astype(np.float64)
        self.gw_task = self.weight_estimator(
            (1.0 / inv)[:, None] * ghat, self.w2d().astype(np.float64)
        )
        wb_scaled = w_sign * self._alpha(w_sign.dtype)[:, None]
        gx_patches = g2 @ wb_scaled
        gx_sign = col2im(gx_patches, x.shape, self.kernel, self.stride, self.padding)
        return self.act_estimator(gx_sign, x)

    def params(self):
        return {"w": self.w}

    def grads(self):
        return {"w": self.gw_task}


class BatchNorm2d(Layer):
    kind = "batchnorm"
    trainable = True

    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.g_gamma = self.g_beta = None
        self._cache = None

    def forward(self, x, train):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape}")
        axes = (0, 2, 3)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None]) * invstd[:, None, None]
        if train:
            self._cache = (xhat, invstd)
        return self.gamma[:, None, None] * xhat + self.beta[:, None, None]

    def backward(self, grad_out):
        xhat, invstd = self._cache
        axes = (0, 2, 3)
        n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        self.g_gamma = np.sum(grad_out * xhat, axis=axes)
        self.g_beta = np.sum(grad_out, axis=axes)
        gxhat = grad_out * self.gamma[:, None, None]
        gx = (gxhat - gxhat.mean(axis=axes)[:, None, None]
              - xhat * (gxhat * xhat).mean(axis=axes)[:, None, None])
        return gx * invstd[:, None, None]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.g_gamma, "beta": self.g_beta}


class PReLU(Layer):
    kind = "prelu"
    trainable = True

    def __init__(self, channels, dtype=np.float32, init=0.25):
        self.channels = channels
        self.slope = np.full(channels, init, dtype=dtype)
        self.g_slope = None
        self._cache = None

    def forward(self, x, train):
        pos = x > 0
        out = np.where(pos, x, x * self.slope[:, None, None])
        if train:
            self._cache = (x, pos)
        return out

    def backward(self, grad_out):
        x, pos = self._cache
        self.g_slope = np.sum(grad_out * np.where(pos, 0.0, x), axis=(0, 2, 3))
        return grad_out * np.where(pos, 1.0, self.slope[:, None, None])

    def params(self):
        return {"slope": self.slope}

    def grads(self):
        return {"slope": self.g_slope}


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, size=2):
        self.size = size
        self._cache = None

    def forward(self, x, train):
        b, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(f"pooling size {s} does not divide input {x.shape}")
        win = x.reshape(b, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // s, w // s, s * s)
        idx = np.argmax(win, axis=-1)
        if train:
            self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        idx, x_shape = self._cache
        b, c, h, w = x_shape
        s = self.size
        gwin = np.zeros((b, c, h // s, w // s, s * s), dtype=grad_out.dtype)
        np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=-1)
        gwin = gwin.reshape(b, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return gwin.reshape(x_shape)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Linear(Layer):
    kind = "real-linear"
    trainable = True

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.n_in, self.n_out = n_in, n_out
        self.w = (rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.gw = self.gb = None
        self._cache = None

    def forward(self, x, train):
        if x.shape[1] != self.n_in:
            raise ShapeError(f"expected {self.n_in} features, got {x.shape}")
        if train:
            self._cache = x
        return x @ self.w.T + self.b

    def backward(self, grad_out):
        x = self._cache
        self.gw = grad_out.T @ x
        self.gb = grad_out.sum(axis=0)
        return grad_out @ self.w

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}
