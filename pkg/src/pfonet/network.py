"""MLP and CNN sub-networks and their DeepONet combination.

A DeepONet evaluates ``G(x, u) = sum_k b_k(u) t_k(x) + b0`` where the branch
net sees the input function at fixed sensors and the trunk net sees the
query coordinates. Leaving out the branch gives a coordinate-only network
(``b_k = 1``), which is how PINN sub-networks are represented.

Spatial derivatives ``dG/dx`` are obtained by pushing a tangent through the
trunk alongside the forward pass, built from ordinary autodiff primitives so
that they can appear inside losses that are differentiated w.r.t. weights.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .field import Grid, Grid1D, Grid2D

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("an MLP needs input, at least one hidden, and output widths")
        if min(self.widths) <= 0:
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {"type": "mlp", "widths": list(self.widths), "activation": self.activation}


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "valid"


@dataclass(frozen=True)
class CNNSpec:
    """Convolution stack, flattened and densely connected to ``out_width``."""

    input_shape: tuple[int, int]
    layers: tuple[ConvLayer, ...]
    out_width: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(
            c if isinstance(c, ConvLayer) else ConvLayer(**c) for c in self.layers))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for h, w, _ in self.feature_shapes():
            if h <= 0 or w <= 0:
                raise ValueError("convolution stack collapses the image to nothing")

    @property
    def in_width(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.input_shape
        shapes = []
        for c in self.layers:
            h = ad.conv_output_size(h, c.kernel, c.stride, c.padding)[0]
            w = ad.conv_output_size(w, c.kernel, c.stride, c.padding)[0]
            shapes.append((h, w, c.filters))
        return shapes

    @property
    def flat_width(self) -> int:
        h, w, f = self.feature_shapes()[-1]
        return h * w * f

    def to_dict(self) -> dict:
        return {"type": "cnn", "input_shape": list(self.input_shape),
                "layers": [vars(c) for c in self.layers],
                "out_width": self.out_width, "activation": self.activation}


BranchSpec = Union[MLPSpec, CNNSpec]


def subnet_from_dict(d: dict | None):
    if d is None:
        return None
    if d["type"] == "mlp":
        return MLPSpec(tuple(d["widths"]), d.get("activation", "tanh"))
    if d["type"] == "cnn":
        return CNNSpec(tuple(d["input_shape"]), tuple(ConvLayer(**c) for c in d["layers"]),
                       d["out_width"], d.get("activation", "tanh"))
    raise ValueError(f"unknown sub-network type {d['type']!r}")


@dataclass(frozen=True)
class DeepONetSpec:
    trunk: MLPSpec
    branch: BranchSpec | None = None

    def __post_init__(self):
        if self.branch is not None and self.branch.out_width != self.trunk.out_width:
            raise ValueError(f"branch output width {self.branch.out_width} must equal "
                             f"trunk output width {self.trunk.out_width}")

    @property
    def p(self) -> int:
        return self.trunk.out_width

    @property
    def n_sensors(self) -> int | None:
        return None if self.branch is None else self.branch.in_width

    @property
    def coord_dim(self) -> int:
        return self.trunk.in_width

    def to_dict(self) -> dict:
        return {"trunk": self.trunk.to_dict(),
                "branch": None if self.branch is None else self.branch.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DeepONetSpec":
        return cls(subnet_from_dict(d["trunk"]), subnet_from_dict(d.get("branch")))


@dataclass(frozen=True)
class SensorLayout:
    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @classmethod
    def from_grid(cls, grid: Grid) -> "SensorLayout":
        return cls(grid.points())

    def __len__(self) -> int:
        return self.coords.shape[0]

    def to_list(self) -> list:
        return self.coords.tolist()


# -- parameter layout -------------------------------------------------------

def _mlp_shapes(spec: MLPSpec, prefix: str) -> list[tuple[str, tuple, int, int]]:
    out = []
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        out.append((f"{prefix}.W{i}", (a, b), a, b))
        out.append((f"{prefix}.b{i}", (b,), 0, 0))
    return out


def _cnn_shapes(spec: CNNSpec, prefix: str) -> list[tuple[str, tuple, int, int]]:
    out, channels = [], 1
    for i, c in enumerate(spec.layers):
        k2 = c.kernel * c.kernel
        out.append((f"{prefix}.conv{i}.W", (c.filters, channels, c.kernel, c.kernel),
                    channels * k2, c.filters * k2))
        out.append((f"{prefix}.conv{i}.b", (c.filters,), 0, 0))
        channels = c.filters
    out.append((f"{prefix}.dense.W", (spec.flat_width, spec.out_width),
                spec.flat_width, spec.out_width))
    out.append((f"{prefix}.dense.b", (spec.out_width,), 0, 0))
    return out


def parameter_shapes(spec: DeepONetSpec) -> list[tuple[str, tuple, int, int]]:
    """Canonical (name, shape, fan_in, fan_out) list; fan 0 marks a bias."""
    shapes = []
    if spec.branch is not None:
        if isinstance(spec.branch, CNNSpec):
            shapes += _cnn_shapes(spec.branch, "branch")
        else:
            shapes += _mlp_shapes(spec.branch, "branch")
    shapes += _mlp_shapes(spec.trunk, "trunk")
    shapes.append(("b0", (), 0, 0))
    return shapes


def parameter_count(spec: DeepONetSpec) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for _, s, _, _ in parameter_shapes(spec)))


@dataclass(frozen=True, eq=False)
class DeepONetParams:
    spec: DeepONetSpec
    arrays: dict = field(repr=False)

    def __post_init__(self):
        arrays = {}
        for name, shape, _, _ in parameter_shapes(self.spec):
            a = np.array(self.arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"parameter {name} has shape {a.shape}, expected {shape}")
            a.setflags(write=False)
            arrays[name] = a
        object.__setattr__(self, "arrays", arrays)

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def b0(self) -> float:
        return float(self.arrays["b0"])

    def replace(self, arrays: dict) -> "DeepONetParams":
        return DeepONetParams(self.spec, arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n, *_ in parameter_shapes(self.spec)])


def init_params(spec: DeepONetSpec, seed: int) -> DeepONetParams:
    """Glorot-uniform weights, zero biases, zero output bias."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, fan_in, fan_out in parameter_shapes(spec):
        if fan_in == 0:
            arrays[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return DeepONetParams(spec, arrays)


# -- forward passes (Tensor level) ----------------------------------------

def _activate(z: Tensor, activation: str) -> Tensor:
    if activation == "tanh":
        return ad.tanh(z)
    if activation == "relu":
        return ad.relu(z)
    return z


def _activation_slope(z: Tensor, h: Tensor, activation: str):
    """Derivative of the activation at ``z`` given its output ``h``."""
    if activation == "tanh":
        return 1.0 - h * h
    if activation == "relu":
        return (z.value > 0).astype(np.float64)
    return 1.0


def mlp_forward(spec: MLPSpec, params: dict, prefix: str, x) -> Tensor:
    h = ad.as_tensor(x)
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = _activate(h, spec.activation)
    return h


def cnn_forward(spec: CNNSpec, params: dict, prefix: str, u) -> Tensor:
    u = ad.as_tensor(u)
    h = u.reshape((u.shape[0], 1) + spec.input_shape)
    for i, c in enumerate(spec.layers):
        h = ad.conv2d(h, ad.as_tensor(params[f"{prefix}.conv{i}.W"]),
                      ad.as_tensor(params[f"{prefix}.conv{i}.b"]), c.stride, c.padding)
        h = _activate(h, spec.activation)
    h = h.reshape((u.shape[0], spec.flat_width))
    return h @ params[f"{prefix}.dense.W"] + params[f"{prefix}.dense.b"]


def branch_forward(spec: DeepONetSpec, params: dict, u) -> Tensor:
    if isinstance(spec.branch, CNNSpec):
        return cnn_forward(spec.branch, params, "branch", u)
    return mlp_forward(spec.branch, params, "branch", u)


def trunk_forward(spec: MLPSpec, params: dict, x: np.ndarray, with_grad: bool = False):
    """Trunk outputs (N, p) and, optionally, their derivatives per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    h = Tensor(x)
    tangents = None
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        W = params[f"trunk.W{i}"]
        z = h @ W + params[f"trunk.b{i}"]
        if with_grad:
            if tangents is None:
                # d(x W)/dx_j is row j of W, shared by every point
                tangents = [W[j: j + 1] for j in range(spec.in_width)]
            else:
                tangents = [dz @ W for dz in tangents]
        if i < n_layers - 1:
            h = _activate(z, spec.activation)
            if with_grad:
                slope = _activation_slope(z, h, spec.activation)
                tangents = [slope * dz for dz in tangents]
        else:
            h = z
    return h, tangents


def predict(spec: DeepONetSpec, params: dict, coords: np.ndarray, u=None,
            with_grad: bool = False):
    """Evaluate G on a batch of input functions at shared query coordinates.

    Returns ``(G, dG)`` with ``G`` of shape (B, N) and ``dG`` a list with one
    (B, N) tensor per coordinate (``None`` unless ``with_grad``).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.shape[1] != spec.coord_dim:
        raise ValueError(f"trunk expects {spec.coord_dim}-d coordinates, got {coords.shape[1]}")
    T, dT = trunk_forward(spec.trunk, params, coords, with_grad)
    if spec.branch is None:
        G = T.sum(axis=1).reshape((1, -1)) + params["b0"]
        dG = None
        if with_grad:
            dG = [_rows(t, coords.shape[0]).sum(axis=1).reshape((1, -1)) for t in dT]
        return G, dG
    u = ad.as_tensor(u)
    if u.ndim == 1:
        u = u.reshape((1, -1))
    if u.shape[1] != spec.n_sensors:
        raise ValueError(f"branch expects {spec.n_sensors} sensor values, got {u.shape[1]}")
    Bk = branch_forward(spec, params, u)
    G = Bk @ T.T + params["b0"]
    dG = None
    if with_grad:
        dG = [Bk @ _rows(t, coords.shape[0]).T for t in dT]
    return G, dG


def _rows(t: Tensor, n: int) -> Tensor:
    # a tangent that never passed through an activation is a single shared row
    if t.shape[0] == n:
        return t
    return t * np.ones((n, 1))


def _tensors(params: DeepONetParams) -> dict:
    return {k: Tensor(v) for k, v in params.arrays.items()}


def deeponet_forward(params: DeepONetParams, x, u_sensors=None) -> np.ndarray:
    """Evaluate G(x, u) as plain arrays.

    ``x`` is an (N, d) array of query points (or (N,) in 1D); ``u_sensors``
    is one sensor vector or a (B, m) batch. The result has shape (N,) for a
    single input function and (B, N) for a batch.
    """
    single = u_sensors is None or np.ndim(u_sensors) == 1
    G, _ = predict(params.spec, _tensors(params), _as_points(x, params.spec), u_sensors)
    return G.value[0] if single else G.value


def trunk_coordinate_gradient(params: DeepONetParams, x, u_sensors=None) -> np.ndarray:
    """dG/dx at each query point; shape (N, d) for one input, (B, N, d) for a batch."""
    single = u_sensors is None or np.ndim(u_sensors) == 1
    _, dG = predict(params.spec, _tensors(params), _as_points(x, params.spec), u_sensors,
                    with_grad=True)
    out = np.stack([g.value for g in dG], axis=-1)
    return out[0] if single else out


def _as_points(x, spec: DeepONetSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None] if spec.coord_dim == 1 else x[None, :]
    return x


# -- presets ----------------------------------------------------------------

def relaxation_spec(activation: str = "tanh") -> DeepONetSpec:
    """Trunk 3 x 100, branch 2 x 100, 100 sensors, p = 100."""
    return DeepONetSpec(trunk=MLPSpec((1, 100, 100, 100, 100), activation),
                        branch=MLPSpec((100, 100, 100, 100), activation))


def cahn_hilliard_spec(activation: str = "tanh") -> DeepONetSpec:
    """Trunk 3 x 40, branch 2 x 40, 40 sensors, p = 40."""
    return DeepONetSpec(trunk=MLPSpec((1, 40, 40, 40, 40), activation),
                        branch=MLPSpec((40, 40, 40, 40), activation))


def allen_cahn_spec(activation: str = "tanh", padding: str = "same") -> DeepONetSpec:
    """CNN branch (32 filters k3 s1, 6 filters k3 s3, dense 120) and 3 x 120 trunk."""
    cnn = CNNSpec((28, 28), (ConvLayer(32, 3, 1, padding), ConvLayer(6, 3, 3, padding)),
                  120, activation)
    return DeepONetSpec(trunk=MLPSpec((2, 120, 120, 120, 120), activation), branch=cnn)


def pinn_spec(activation: str = "tanh", width: int = 20, depth: int = 2,
              coord_dim: int = 1) -> DeepONetSpec:
    """Coordinate-only network with ``depth`` hidden layers of ``width``."""
    return DeepONetSpec(trunk=MLPSpec((coord_dim,) + (width,) * depth + (1,), activation))


# -- checkpoints --------------------------------------------------------------

MAGIC = b"PFONETCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: DeepONetParams, seed: int | None = None,
                    sensors: SensorLayout | None = None, extra: dict | None = None) -> Path:
    """Write header JSON plus a little-endian float64 payload.

    Layout: 8-byte magic ``PFONETCK``, uint32 LE version, uint64 LE header
    length, UTF-8 JSON header, then every parameter in canonical order as
    ``<f8``. The header records the payload's SHA-256.
    """
    names = [n for n, *_ in parameter_shapes(params.spec)]
    payload = b"".join(params.arrays[n].astype("<f8").tobytes() for n in names)
    header = {
        "spec": params.spec.to_dict(),
        "p": params.p,
        "seed": seed,
        "sensors": None if sensors is None else sensors.to_list(),
        "params": [[n, list(params.arrays[n].shape)] for n in names],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[DeepONetParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20: 20 + hlen].decode("utf-8"))
    payload = data[20 + hlen:]
    if len(payload) != header["payload_bytes"] or \
            hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, offset = {}, 0
    for name, shape in header["params"]:
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = flat[offset: offset + size].reshape(shape).astype(np.float64)
        offset += size
    spec = DeepONetSpec.from_dict(header["spec"])
    return DeepONetParams(spec, arrays), header


def layout_for(grid: Grid) -> SensorLayout:
    if not isinstance(grid, (Grid1D, Grid2D)):
        raise TypeError("expected a grid")
    return SensorLayout.from_grid(grid)
