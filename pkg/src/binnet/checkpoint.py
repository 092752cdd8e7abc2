"""Checkpoint persistence.

File layout: magic "RBON", uint32 version, uint32 record count, then
length-prefixed records. Each record is [uint64 payload length][payload]
[uint32 crc32]. The first record carries the network geometry as JSON;
subsequent records hold one layer each: kind tag, JSON geometry header, and
named float32 little-endian array payloads. Every numeric parameter kind is
stored, including the scale diagonal, backtracking gains and the
previous-iteration weight snapshot, so a resumed run continues without a
gradient gap.
"""

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from binnet.binary import ScaleDiag
from binnet.layers import (
    BatchNorm2d,
    BinaryConv2d,
    Flatten,
    Linear,
    MaxPool2d,
    PReLU,
    RealConv2d,
)
from binnet.training import Network

MAGIC = b"RBON"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def _pack_record(payload):
    return struct.pack("<Q", len(payload)) + payload + struct.pack(
        "<I", zlib.crc32(payload)
    )


def _pack_arrays(arrays):
    out = [struct.pack("<H", len(arrays))]
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode()
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", arr32.ndim))
        out.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        out.append(arr32.tobytes())
    return b"".join(out)


def _layer_record(layer):
    kind = layer.kind
    meta = {}
    arrays = {}
    if isinstance(layer, RealConv2d):
        meta = {"c_in": layer.c_in, "c_out": layer.c_out, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding}
        arrays = {"w": layer.w, "b": layer.b}
    elif isinstance(layer, BinaryConv2d):
        meta = {"c_in": layer.c_in, "c_out": layer.c_out, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding,
                "estimator": layer.estimator,
                "has_w_prev": layer.state.w_prev is not None}
        arrays = {"w": layer.w, "inv_alpha": layer.scale.inv_alpha,
                  "U": layer.state.U}
        if layer.state.w_prev is not None:
            arrays["w_prev"] = layer.state.w_prev
    elif isinstance(layer, BatchNorm2d):
        meta = {"channels": layer.channels}
        arrays = {"gamma": layer.gamma, "beta": layer.beta,
                  "running_mean": layer.running_mean,
                  "running_var": layer.running_var}
    elif isinstance(layer, PReLU):
        meta = {"channels": layer.channels}
        arrays = {"slope": layer.slope}
    elif isinstance(layer, MaxPool2d):
        meta = {"size": layer.size}
    elif isinstance(layer, Linear):
        meta = {"n_in": layer.n_in, "n_out": layer.n_out}
        arrays = {"w": layer.w, "b": layer.b}
    elif isinstance(layer, Flatten):
        meta = {}
    else:
        raise CheckpointError(f"cannot serialize layer kind {kind!r}")
    kind_b = kind.encode()
    meta_b = json.dumps(meta, sort_keys=True).encode()
    payload = (struct.pack("<H", len(kind_b)) + kind_b
               + struct.pack("<H", len(meta_b)) + meta_b
               + _pack_arrays(arrays))
    return _pack_record(payload)


def save_checkpoint(net, path):
    """Atomic whole-file write: temp file then rename."""
    header = json.dumps({"input_shape": list(net.input_shape),
                         "n_classes": net.n_classes}, sort_keys=True).encode()
    blob = [MAGIC, struct.pack("<II", VERSION, len(net.layers) + 1),
            _pack_record(header)]
    blob.extend(_layer_record(layer) for layer in net.layers)
    data = b"".join(blob)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def record(self):
        (length,) = struct.unpack("<Q", self.take(8, "record length"))
        payload = self.take(length, "record payload")
        (crc,) = struct.unpack("<I", self.take(4, "record checksum"))
        if zlib.crc32(payload) != crc:
            raise CheckpointError("record checksum mismatch (corrupt payload)")
        return payload


def _unpack_arrays(reader):
    (count,) = struct.unpack("<H", reader.take(2, "array count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2, "array name length"))
        name = reader.take(name_len, "array name").decode()
        (ndim,) = struct.unpack("<B", reader.take(1, "array ndim"))
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, "array shape"))
        size = int(np.prod(shape)) if ndim else 1
        raw = reader.take(4 * size, f"array {name!r} payload")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return arrays


def _parse_layer(payload):
    r = _Reader(payload)
    (kind_len,) = struct.unpack("<H", r.take(2, "kind length"))
    kind = r.take(kind_len, "kind").decode()
    (meta_len,) = struct.unpack("<H", r.take(2, "meta length"))
    meta = json.loads(r.take(meta_len, "meta"))
    arrays = _unpack_arrays(r)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in layer record")
    return kind, meta, arrays


def _restore_layer(kind, meta, arrays):
    rng = np.random.default_rng(0)
    if kind == "real-conv":
        layer = RealConv2d(meta["c_in"], meta["c_out"], meta["kernel"],
                           meta["stride"], meta["padding"], rng=rng)
        layer.w, layer.b = arrays["w"], arrays["b"]
    elif kind == "binary-conv":
        layer = BinaryConv2d(meta["c_in"], meta["c_out"], meta["kernel"],
                             meta["stride"], meta["padding"], rng=rng,
                             estimator=meta["estimator"])
        layer.w = arrays["w"]
        layer.scale = ScaleDiag(arrays["inv_alpha"].astype(np.float64))
        layer.state.U = arrays["U"].astype(np.float64)
        if meta["has_w_prev"]:
            layer.state.w_prev = arrays["w_prev"].astype(np.float64)
    elif kind == "batchnorm":
        layer = BatchNorm2d(meta["channels"])
        layer.gamma = arrays["gamma"]
        layer.beta = arrays["beta"]
        layer.running_mean = arrays["running_mean"]
        layer.running_var = arrays["running_var"]
    elif kind == "prelu":
        layer = PReLU(meta["channels"])
        layer.slope = arrays["slope"]
    elif kind == "maxpool":
        layer = MaxPool2d(meta["size"])
    elif kind == "flatten":
        layer = Flatten()
    elif kind == "real-linear":
        layer = Linear(meta["n_in"], meta["n_out"], rng=rng)
        layer.w, layer.b = arrays["w"], arrays["b"]
    else:
        raise CheckpointError(f"unknown layer kind {kind!r}")
    return layer


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, n_records = struct.unpack("<II", r.take(8, "version header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(r.record())
    layers = []
    for _ in range(n_records - 1):
        kind, meta, arrays = _parse_layer(r.record())
        layers.append(_restore_layer(kind, meta, arrays))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after final record")
    return Network(layers, tuple(header["input_shape"]), header["n_classes"])
