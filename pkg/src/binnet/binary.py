"""Sign binarization, gradient estimators, bit packing and the
XNOR/popcount convolution kernel.

Packing convention: one bit per element (1 = +1, 0 = -1), elements taken in
row-major order, LSB-first within each 64-bit word. Bits past ``valid_bits``
in the last word are always zero, so packed values compare bit-exactly.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from binnet.tensor_ops import ShapeError, conv_output_size

EPS_A = 1e-8  # floor for inv_alpha entries


@dataclass(frozen=True)
class PackedBinaryTensor:
    """Sign bits of a +-1 tensor packed into uint64 words."""

    logical_shape: tuple
    words: np.ndarray
    valid_bits: int

    def __eq__(self, other):
        return (
            isinstance(other, PackedBinaryTensor)
            and self.logical_shape == other.logical_shape
            and self.valid_bits == other.valid_bits
            and np.array_equal(self.words, other.words)
        )


@dataclass
class ScaleDiag:
    """Per-output-channel scale factors, stored as the diagonal 1/alpha_i."""

    inv_alpha: np.ndarray

    def __post_init__(self):
        self.inv_alpha = np.asarray(self.inv_alpha, dtype=np.float64).copy()
        if self.inv_alpha.ndim != 1:
            raise ShapeError(f"inv_alpha must be 1-D, got shape {self.inv_alpha.shape}")
        if not np.all(self.inv_alpha >= EPS_A):
            raise ValueError("inv_alpha entries must be >= 1e-8")

    @property
    def alpha(self):
        return 1.0 / self.inv_alpha

    def __len__(self):
        return len(self.inv_alpha)

    @classmethod
    def from_weights(cls, w):
        """XNOR-Net style initialization: alpha_i = ||w_i||_1 / J."""
        w2d = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
        j = w2d.shape[1]
        return cls(np.maximum(j / np.sum(np.abs(w2d), axis=1), EPS_A))


def sign_forward(x):
    """Entrywise sign with sign(0) = +1."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def ste_backward(grad_out, x):
    """Straight-through estimator: pass the gradient where |x| < 1."""
    grad_out = np.asarray(grad_out)
    x = np.asarray(x)
    if grad_out.shape != x.shape:
        raise ShapeError(f"shape mismatch: {grad_out.shape} vs {x.shape}")
    return grad_out * (np.abs(x) < 1)


def approxsign_backward(grad_out, a):
    """Piecewise-linear sign surrogate derivative: 2+2a on [-1,0),
    2-2a on [0,1), zero elsewhere."""
    grad_out = np.asarray(grad_out)
    a = np.asarray(a)
    if grad_out.shape != a.shape:
        raise ShapeError(f"shape mismatch: {grad_out.shape} vs {a.shape}")
    factor = np.where(a < 0, 2 + 2 * a, 2 - 2 * a)
    factor = np.where((a >= -1) & (a < 1), factor, 0.0)
    return grad_out * factor


def _pack_flat_bits(bits):
    """bits: uint8 array of 0/1. Returns uint64 words, LSB-first."""
    n = bits.size
    packed = np.packbits(bits, bitorder="little")
    pad = (-packed.size) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.view("<u8").copy()


def pack_bits(x):
    """Pack a +-1 tensor into a PackedBinaryTensor."""
    x = np.asarray(x)
    flat = x.reshape(-1)
    if not np.all(np.abs(flat) == 1):
        raise ValueError("pack_bits requires all entries in {-1, +1}")
    bits = (flat > 0).astype(np.uint8)
    return PackedBinaryTensor(tuple(x.shape), _pack_flat_bits(bits), int(flat.size))


def unpack_bits(p):
    """Inverse of pack_bits: recover the +-1 float array."""
    raw = np.unpackbits(p.words.view(np.uint8), bitorder="little")[: p.valid_bits]
    return (raw.astype(np.float64) * 2 - 1).reshape(p.logical_shape)


def _tail_mask(valid_bits, n_words):
    """Word-level mask zeroing bits past valid_bits."""
    mask = np.full(n_words, ~np.uint64(0), dtype=np.uint64)
    rem = valid_bits % 64
    if rem:
        mask[-1] = (np.uint64(1) << np.uint64(rem)) - np.uint64(1)
    return mask


def xnor_popcount_dot(a, b):
    """Dot product of two +-1 vectors via XNOR and popcount:
    2 * popcount(XNOR(a, b)) - n."""
    if a.valid_bits != b.valid_bits:
        raise ShapeError(f"length mismatch: {a.valid_bits} vs {b.valid_bits}")
    n = a.valid_bits
    xnor = ~(a.words ^ b.words) & _tail_mask(n, len(a.words))
    return int(2 * int(np.bitwise_count(xnor).sum()) - n)


@njit(cache=True, inline="always")
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + (
        (x >> np.uint64(2)) & np.uint64(0x3333333333333333)
    )
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit(cache=True)
def _xnor_gemm(a_words, v_words, w_words, valid_counts, out):
    """Integer XNOR/popcount GEMM.

    a_words: (P, D) packed patch bits; v_words: (P, D) patch validity bits
    (zero marks padding); w_words: (I, D) packed filter rows;
    valid_counts[p] = popcount of v_words[p]. out: (P, I) int64.
    """
    n_p, n_d = a_words.shape
    n_i = w_words.shape[0]
    for p in range(n_p):
        for i in range(n_i):
            acc = np.uint64(0)
            for d in range(n_d):
                acc += _popcount64(~(a_words[p, d] ^ w_words[i, d]) & v_words[p, d])
            out[p, i] = 2 * np.int64(acc) - valid_counts[p]


def _pack_rows(bits2d):
    """Pack each row of a 0/1 uint8 matrix into uint64 words."""
    n_rows, n_bits = bits2d.shape
    packed = np.packbits(bits2d, axis=1, bitorder="little")
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros((n_rows, pad), dtype=np.uint8)], axis=1
        )
    return np.ascontiguousarray(packed.view("<u8"))


def _pack_channel_words(bits_hwc):
    """Pack the trailing channel axis of a (..., C) 0/1 array into uint64
    words, LSB-first, zero-padded to whole words."""
    packed = np.packbits(np.ascontiguousarray(bits_hwc), axis=-1, bitorder="little")
    pad = (-packed.shape[-1]) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    return np.ascontiguousarray(packed).view("<u8")


def _channel_valid_words(c_in):
    """Per-pixel validity words for a channel-packed pixel: all c_in channel
    bits set, padding bits clear."""
    d_c = (c_in + 63) // 64
    words = np.full(d_c, ~np.uint64(0), dtype=np.uint64)
    rem = c_in % 64
    if rem:
        words[-1] = (np.uint64(1) << np.uint64(rem)) - np.uint64(1)
    return words


def _window_words(word_img, kernel, stride):
    """Gather (k, k) word windows: (Hp, Wp, D_c) -> (P, k*k*D_c)."""
    win = np.lib.stride_tricks.sliding_window_view(
        word_img, (kernel, kernel), axis=(0, 1)
    )[::stride, ::stride]
    # win: (H_out, W_out, D_c, k, k) -> patch word order (ki, kj, dc)
    h_out, w_out = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h_out * w_out, -1)
    return np.ascontiguousarray(cols), h_out, w_out


def _packed_patches(sign_bits, c_in, h, w, kernel, stride, padding):
    """Build word-packed im2col matrices for one image.

    Channels are packed into uint64 words per pixel, so patch extraction is
    a word gather rather than a per-bit repack. Zero-padding pixels carry
    all-zero validity words. Returns (a_words, v_words, valid_counts,
    h_out, w_out); word order within a patch row is (ki, kj, channel word).
    """
    pixel_words = _pack_channel_words(sign_bits.transpose(1, 2, 0))  # (H, W, D_c)
    d_c = pixel_words.shape[-1]
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding:
        padded = np.zeros((hp, wp, d_c), dtype=np.uint64)
        padded[padding : padding + h, padding : padding + w] = pixel_words
    else:
        padded = pixel_words
    valid_img = np.zeros((hp, wp, d_c), dtype=np.uint64)
    valid_img[padding : padding + h, padding : padding + w] = _channel_valid_words(c_in)
    a_words, h_out, w_out = _window_words(padded, kernel, stride)
    v_words, _, _ = _window_words(valid_img, kernel, stride)
    counts = np.bitwise_count(v_words).sum(axis=1).astype(np.int64)
    return a_words, v_words, counts, h_out, w_out


def packed_weight_rows(w_packed):
    """Repack a whole-tensor packed weight into per-filter word rows whose
    word order matches _packed_patches: (ki, kj, channel word)."""
    c_out, c_in, k, k2 = w_packed.logical_shape
    raw = np.unpackbits(w_packed.words.view(np.uint8), bitorder="little")
    bits = raw[: w_packed.valid_bits].reshape(c_out, c_in, k, k2).astype(np.uint8)
    words = _pack_channel_words(bits.transpose(0, 2, 3, 1))  # (c_out, k, k, D_c)
    return np.ascontiguousarray(words.reshape(c_out, -1))


def binary_conv_integer(a_packed, w_packed, stride=1, padding=0, w_rows=None):
    """XNOR/popcount convolution before scaling. Returns int64
    (C_out, H_out, W_out) equal to conv2d(sign(a), sign(w)) exactly
    (zero padding contributes nothing)."""
    if len(a_packed.logical_shape) != 3 or len(w_packed.logical_shape) != 4:
        raise ShapeError(
            f"expected 3-D activation and 4-D weight, got {a_packed.logical_shape} "
            f"and {w_packed.logical_shape}"
        )
    c, h, w = a_packed.logical_shape
    c_out, c_in, k, k2 = w_packed.logical_shape
    if c != c_in or k != k2:
        raise ShapeError(
            f"shape mismatch: activation {a_packed.logical_shape} vs "
            f"weight {w_packed.logical_shape}"
        )
    raw = np.unpackbits(a_packed.words.view(np.uint8), bitorder="little")
    sign_bits = raw[: a_packed.valid_bits].reshape(c, h, w).astype(np.uint8)
    a_words, v_words, counts, h_out, w_out = _packed_patches(
        sign_bits, c, h, w, k, stride, padding
    )
    if w_rows is None:
        w_rows = packed_weight_rows(w_packed)
    out = np.empty((a_words.shape[0], c_out), dtype=np.int64)
    _xnor_gemm(a_words, v_words, w_rows, counts, out)
    return np.ascontiguousarray(out.T.reshape(c_out, h_out, w_out))


def binary_conv_forward(a_packed, w_packed, scale, stride=1, padding=0, w_rows=None):
    """Bit-packed binary convolution with per-channel scaling: the integer
    XNOR/popcount result of channel i multiplied by alpha_i."""
    c_out = w_packed.logical_shape[0]
    if len(scale) != c_out:
        raise ShapeError(f"scale length {len(scale)} != C_out {c_out}")
    ints = binary_conv_integer(a_packed, w_packed, stride, padding, w_rows=w_rows)
    return ints.astype(np.float64) * scale.alpha[:, None, None]
