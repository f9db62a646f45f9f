"""Layers, layer stacks and the checkpoint format."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import ops
from .errors import MalformedFile, ShapeMismatch
from .tensor import Tensor, read_tensor, tensor_to_bytes


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, slope: float = ops.LEAKY_SLOPE) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + slope**2) * fan_in))
    return rng.uniform(-bound, bound, shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        raise NotImplementedError

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def describe(self) -> dict:
        return {"kind": self.kind}


class Conv3x3(Layer):
    kind = "conv3x3"

    def __init__(self, cin: int, cout: int, rng: Optional[np.random.Generator] = None, slope: float = ops.LEAKY_SLOPE):
        super().__init__()
        self.cin, self.cout = cin, cout
        w = np.zeros((cout, cin, 3, 3)) if rng is None else kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9, slope)
        self.params["weight"] = Tensor(w, requires_grad=True)

    def forward(self, x, train, update_stats=True):
        return ops.conv2d(x, self.params["weight"], pad=1)

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.cin:
            raise ShapeMismatch(f"conv3x3 expects ({self.cin}, H, W), got {shape}")
        return (self.cout,) + tuple(shape[1:])

    def describe(self):
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout}


class ConvTranspose3x3(Layer):
    """Transposed 3x3 conv; weight layout (cin, cout, 3, 3), the adjoint of a cout->cin conv."""

    kind = "conv_transpose3x3"

    def __init__(self, cin: int, cout: int, rng: Optional[np.random.Generator] = None, slope: float = ops.LEAKY_SLOPE):
        super().__init__()
        self.cin, self.cout = cin, cout
        w = np.zeros((cin, cout, 3, 3)) if rng is None else kaiming_uniform(rng, (cin, cout, 3, 3), cin * 9, slope)
        self.params["weight"] = Tensor(w, requires_grad=True)

    def forward(self, x, train, update_stats=True):
        return ops.conv2d_transpose(x, self.params["weight"], pad=1)

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.cin:
            raise ShapeMismatch(f"conv_transpose3x3 expects ({self.cin}, H, W), got {shape}")
        return (self.cout,) + tuple(shape[1:])

    def describe(self):
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout}


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = Tensor(np.ones(channels), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train, update_stats=True):
        return ops.batch_norm(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            train=train,
            update_stats=update_stats,
        )

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeMismatch(f"batch_norm over {self.channels} channels got {shape}")
        return shape

    def describe(self):
        return {"kind": self.kind, "channels": self.channels}


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = ops.LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train, update_stats=True):
        return ops.leaky_relu(x, self.slope)

    def describe(self):
        return {"kind": self.kind, "slope": self.slope}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, update_stats=True):
        return ops.relu(x)


class AvgPool2(Layer):
    kind = "avg_pool2"

    def forward(self, x, train, update_stats=True):
        return ops.avg_pool2(x)

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"avg_pool2 needs even extents, got {shape}")
        return (c, h // 2, w // 2)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x, train, update_stats=True):
        return ops.mean(x, axes=(2, 3))

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeMismatch(f"global_avg_pool expects (C, H, W), got {shape}")
        return (shape[0],)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train, update_stats=True):
        return ops.reshape(x, (x.shape[0], -1))

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, din: int, dout: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.din, self.dout = din, dout
        w = np.zeros((din, dout)) if rng is None else kaiming_uniform(rng, (din, dout), din)
        self.params["weight"] = Tensor(w, requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x, train, update_stats=True):
        n = x.shape[0]
        y = ops.matmul(x, self.params["weight"])
        bias = ops.broadcast_to(ops.reshape(self.params["bias"], (1, self.dout)), (n, self.dout))
        return ops.add(y, bias)

    def out_shape(self, shape):
        if shape != (self.din,):
            raise ShapeMismatch(f"dense expects ({self.din},), got {shape}")
        return (self.dout,)

    def describe(self):
        return {"kind": self.kind, "din": self.din, "dout": self.dout}


class LayerStack:
    """An ordered list of layers with named tap points.

    ``taps`` maps a name to the index of the layer whose *output* is exposed.
    Shapes exclude the batch axis.
    """

    def __init__(self, layers: list, input_shape: tuple, taps: Optional[dict] = None, name: str = "net"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.taps = dict(taps or {})
        self.name = name
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        self.shapes = shapes
        for tap, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ShapeMismatch(f"tap {tap!r} points at layer {idx} of {len(self.layers)}")

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    def tap_shape(self, tap: str) -> tuple:
        return self.shapes[self.taps[tap] + 1]

    def forward(self, x: Tensor, train: bool = True, update_stats: bool = True, start: int = 0, stop: Optional[int] = None):
        """Run layers ``start:stop`` and return ``(output, {tap: block})``."""
        expected = self.shapes[start]
        if tuple(x.shape[1:]) != expected:
            raise ShapeMismatch(f"{self.name}: input {x.shape[1:]} != expected {expected}")
        stop = len(self.layers) if stop is None else stop
        by_index = {i: t for t, i in self.taps.items()}
        taps = {}
        for i in range(start, stop):
            x = self.layers[i].forward(x, train, update_stats)
            if i in by_index:
                taps[by_index[i]] = x
        return x, taps

    def __call__(self, x: Tensor, train: bool = True, update_stats: bool = True):
        return self.forward(x, train, update_stats)

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, p in layer.params.items():
                out[f"{i}.{layer.kind}.{k}"] = p
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, b in layer.buffers.items():
                out[f"{i}.{layer.kind}.{k}"] = b
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: b.copy() for k, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]

    def describe(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "taps": self.taps,
            "layers": [layer.describe() for layer in self.layers],
        }


def state_hash(*stacks, include_buffers: bool = False) -> str:
    """sha256 over parameter (optionally buffer) bytes in name order."""
    h = hashlib.sha256()
    for s in stacks:
        items = s.named_parameters().items()
        for name, p in sorted(items):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        if include_buffers:
            for name, b in sorted(s.named_buffers().items()):
                h.update(name.encode())
                h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def params_of(*stacks) -> dict:
    out = {}
    for s in stacks:
        for k, p in s.named_parameters().items():
            out[f"{s.name}/{k}"] = p
    return out


# --- checkpoints -------------------------------------------------------------
#
#   8 bytes  magic  b"IEKDCKPT"
#   uint32   format version
#   uint32   header length L
#   L bytes  UTF-8 JSON {"kind", "meta", "entries": [{"name", "shape"}, ...]}
#   then one tensor record (see tensor.tensor_to_bytes) per entry, in order

CKPT_MAGIC = b"IEKDCKPT"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path, state: dict, kind: str, meta: Optional[dict] = None) -> None:
    names = list(state)
    header = {
        "kind": kind,
        "meta": meta or {},
        "entries": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_U32.pack(CKPT_VERSION))
        fh.write(_U32.pack(len(hbytes)))
        fh.write(hbytes)
        for n in names:
            fh.write(tensor_to_bytes(state[n]))


def load_checkpoint(path) -> tuple:
    """Return ``(kind, meta, state)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise MalformedFile("not a checkpoint (bad magic)", 0)
    (version,) = _U32.unpack_from(blob, 8)
    if version != CKPT_VERSION:
        raise MalformedFile(f"unsupported checkpoint version {version}", 8)
    (hlen,) = _U32.unpack_from(blob, 12)
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except ValueError as exc:
        raise MalformedFile(f"bad checkpoint header: {exc}", 16) from exc
    stream = io.BytesIO(blob[16 + hlen :])
    state = {}
    for entry in header["entries"]:
        pos = 16 + hlen + stream.tell()
        try:
            arr = read_tensor(stream)
        except EOFError as exc:
            raise MalformedFile(str(exc), pos) from exc
        if list(arr.shape) != entry["shape"]:
            raise MalformedFile(f"entry {entry['name']} shape mismatch", pos)
        state[entry["name"]] = arr
    return header["kind"], header["meta"], state


def save_stacks(path, stacks: Iterable[LayerStack], kind: str, meta: Optional[dict] = None) -> None:
    state = {}
    for s in stacks:
        state.update({f"{s.name}/{k}": v for k, v in s.state_dict().items()})
    save_checkpoint(path, state, kind, meta)


def load_into(stacks: Iterable[LayerStack], state: dict) -> None:
    for s in stacks:
        prefix = f"{s.name}/"
        s.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
