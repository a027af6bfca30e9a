"""LDBN weight container.

Layout (all integers little-endian)::

    b"LDBN"  u32 version
    u32 arch_len  arch_len bytes of UTF-8 JSON: {"input_shape": [...], "layers": [...]}
    u32 n_tensors
    n_tensors x record:
        u16 name_len, name (UTF-8), u8 label, u8 rank, rank x u32 dims,
        prod(dims) x f32 data

Labels: 0 frozen, 1 bn_affine, 2 bn_stat.
"""

import io
import json
import struct

import numpy as np

from .errors import FormatError
from .nn import BN_AFFINE, BN_STAT, FROZEN, LAYER_TYPES, LayerStack

MAGIC = b"LDBN"
VERSION = 1
LABEL_CODES = {FROZEN: 0, BN_AFFINE: 1, BN_STAT: 2}
CODE_LABELS = {v: k for k, v in LABEL_CODES.items()}


def to_bytes(stack):
    arch = {"input_shape": list(stack.input_shape),
            "layers": [{"kind": l.kind, **l.config()} for l in stack.layers]}
    arch_raw = json.dumps(arch, sort_keys=True).encode()
    params = list(stack.named_params())
    out = [MAGIC, struct.pack("<II", VERSION, len(arch_raw)), arch_raw,
           struct.pack("<I", len(params))]
    for name, arr, label in params:
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", LABEL_CODES[label], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_weights(stack, sink):
    data = to_bytes(stack)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", offset=len(self.data))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _build_layer(spec):
    spec = dict(spec)
    kind = spec.pop("kind")
    cls = LAYER_TYPES[kind]
    if kind == "batchnorm2d":
        return cls(spec["channels"], eps=spec["eps"], momentum=spec["momentum"])
    if kind == "conv2d":
        return cls(spec["cin"], spec["cout"], spec["k"], spec["stride"], spec["pad"])
    if kind == "linear":
        return cls(spec["din"], spec["dout"], bias=spec["bias"])
    if kind == "reshape":
        return cls(spec["shape"])
    return cls()


def from_bytes(data):
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (arch_len,) = r.unpack("<I", "architecture length")
    at = r.pos
    try:
        arch = json.loads(r.take(arch_len, "architecture"))
        layers = [_build_layer(s) for s in arch["layers"]]
        stack = LayerStack(layers, arch["input_shape"])
    except FormatError:
        raise
    except Exception as e:  # malformed JSON or layer description
        raise FormatError(f"bad architecture block: {e}", offset=at) from None
    expected = {name: (arr.shape, label) for name, arr, label in stack.named_params()}
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise FormatError(f"tensor count {count} != architecture's {len(expected)}",
                          offset=r.pos - 4)
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", "replace")
        label_code, rank = r.unpack("<BB", "tensor header")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r}", offset=at)
        shape, label = expected[name]
        if tuple(dims) != shape or CODE_LABELS.get(label_code) != label:
            raise FormatError(f"tensor {name!r} header does not match architecture", offset=at)
        n = int(np.prod(dims))
        raw = r.take(4 * n, f"tensor {name!r} data")
        stack.param(name)[...] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", offset=r.pos)
    return stack


def load_weights(source):
    if isinstance(source, (bytes, bytearray)):
        return from_bytes(source)
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return from_bytes(source.read())
    with open(source, "rb") as fh:
        return from_bytes(fh.read())
