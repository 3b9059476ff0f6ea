"""A trainable stack of layers plus its binary checkpoint format.

Checkpoint layout (little-endian)::

    "NNET" u32 version u32 n_layers
    per leaf layer:  u32 len, tag bytes, u32 n_arrays,
                     per array: u32 len, name bytes, u32 ndim, u32 dims..., f64 data
"""
import struct

import numpy as np

from ..exceptions import FormatError
from .layers import Sequential
from .losses import softmax

CHECKPOINT_MAGIC = b"NNET"
CHECKPOINT_VERSION = 1


class Network(Sequential):
    """Ordered layers with parameter traversal and checkpointing."""

    def leaves(self):
        def walk(layer):
            kids = layer.children()
            if not kids:
                yield layer
            for k in kids:
                yield from walk(k)

        for layer in self.layers:
            yield from walk(layer)

    def named_parameters(self):
        """Yield ``(qualified_name, layer, key)`` for every learnable array."""
        for i, layer in enumerate(self.leaves()):
            for key in layer.params:
                yield f"{i}.{type(layer).__name__}.{key}", layer, key

    def n_parameters(self):
        return sum(layer.params[key].size for _, layer, key in self.named_parameters())

    def predict_proba(self, x):
        return softmax(self.forward(x, train=False))

    def feature_shape(self, input_shape, depth):
        """Output shape after the first ``depth`` top-level layers."""
        shape = tuple(input_shape)
        for layer in self.layers[:depth]:
            shape = layer.output_shape(shape)
        return shape

    def save(self, path):
        leaves = list(self.leaves())
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4s2I", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(leaves)))
            for layer in leaves:
                tag = type(layer).__name__.encode("ascii")
                arrays = list(layer.params.items()) + list(layer.buffers.items())
                fh.write(struct.pack("<I", len(tag)) + tag)
                fh.write(struct.pack("<I", len(arrays)))
                for name, arr in arrays:
                    nb = name.encode("ascii")
                    fh.write(struct.pack("<I", len(nb)) + nb)
                    fh.write(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def load(self, path):
        """Load parameters into this (identically built) network."""
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 12:
            raise FormatError(f"{path}: truncated header", offset=len(raw))
        magic, version, n_layers = struct.unpack_from("<4s2I", raw, 0)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}", offset=4)
        leaves = list(self.leaves())
        if n_layers != len(leaves):
            raise FormatError(f"{path}: {n_layers} layers stored, network has {len(leaves)}", offset=8)
        off = 12

        def read_str(off):
            (n,) = struct.unpack_from("<I", raw, off)
            return raw[off + 4: off + 4 + n].decode("ascii"), off + 4 + n

        try:
            for layer in leaves:
                start = off
                tag, off = read_str(off)
                if tag != type(layer).__name__:
                    raise FormatError(f"{path}: layer tag {tag} where {type(layer).__name__} expected", offset=start)
                (n_arr,) = struct.unpack_from("<I", raw, off)
                off += 4
                for _ in range(n_arr):
                    name, off = read_str(off)
                    (ndim,) = struct.unpack_from("<I", raw, off)
                    shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
                    off += 4 + 4 * ndim
                    count = int(np.prod(shape))
                    if off + 8 * count > len(raw):
                        raise FormatError(f"{path}: truncated array {name}", offset=off)
                    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
                    off += 8 * count
                    target = layer.params if name in layer.params else layer.buffers
                    if name not in target or target[name].shape != arr.shape:
                        raise FormatError(f"{path}: unexpected array {name} {shape} in {tag}", offset=off)
                    target[name] = arr
        except struct.error as exc:
            raise FormatError(f"{path}: truncated ({exc})", offset=off) from exc
        if off != len(raw):
            raise FormatError(f"{path}: trailing bytes", offset=off)
        return self
