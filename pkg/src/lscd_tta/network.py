"""Small batch-normalised MLP with hand-written forward and backward passes.

Architecture: ``Dense -> BN -> ReLU`` for every hidden width, then a dense
classification head. Parameters live in a flat ``dict`` keyed by
``"dense{i}.weight"``, ``"bn{i}.gamma"`` and so on, in declaration order.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

BATCH_STATS = "batch_stats"
RUNNING_STATS = "running_stats"

MAGIC = b"LSCDNET"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    num_classes: int = 10
    eps_bn: float = 1e-5
    stats_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.num_classes)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer dimensions must be positive, got {dims}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.eps_bn > 0:
            raise ValueError("eps_bn must be positive")
        if not 0.0 < self.stats_momentum < 1.0:
            raise ValueError("stats_momentum must lie in (0, 1)")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden):
            shapes[f"dense{i}.weight"] = (width, fan_in)
            shapes[f"dense{i}.bias"] = (width,)
            shapes[f"bn{i}.gamma"] = (width,)
            shapes[f"bn{i}.beta"] = (width,)
            fan_in = width
        k = len(self.hidden)
        shapes[f"dense{k}.weight"] = (self.num_classes, fan_in)
        shapes[f"dense{k}.bias"] = (self.num_classes,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, width in enumerate(self.hidden):
            shapes[f"bn{i}.running_mean"] = (width,)
            shapes[f"bn{i}.running_var"] = (width,)
        return shapes


@dataclass
class ForwardTrace:
    """Activations cached by a batch-statistics forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)  # input to each dense layer
    x_hat: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    batch_mean: list[np.ndarray] = field(default_factory=list)
    batch_var: list[np.ndarray] = field(default_factory=list)
    bn_out: list[np.ndarray] = field(default_factory=list)  # pre-ReLU
    logits: np.ndarray | None = None
    mode: str = BATCH_STATS

    @property
    def batch_size(self) -> int:
        return len(self.logits)


class Network:
    """Parameters, BN buffers and the architecture that shapes them."""

    def __init__(self, arch: Architecture, params: dict, buffers: dict):
        self.arch = arch
        self.params = params
        self.buffers = buffers

    @property
    def num_layers(self) -> int:
        return len(self.arch.hidden)

    def copy(self) -> "Network":
        return Network(self.arch, copy.deepcopy(self.params), copy.deepcopy(self.buffers))

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Every array (parameters and buffers) in checkpoint order."""
        merged = {**self.params, **self.buffers}
        return {name: merged[name] for name in _state_order(self.arch)}

    def equals(self, other: "Network") -> bool:
        if self.arch != other.arch:
            return False
        a, b = self.state(), other.state()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def __repr__(self):
        a = self.arch
        return f"Network(D={a.input_dim}, hidden={list(a.hidden)}, C={a.num_classes})"


def init_network(arch: Architecture, seed: int = 0) -> Network:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); BN starts as the identity."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("dense"):
            bound = 1.0 / np.sqrt(arch.param_shapes()[name.replace("bias", "weight")][1])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {}
    for name, shape in arch.buffer_shapes().items():
        buffers[name] = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
    return Network(arch, params, buffers)


def forward(net: Network, X, mode: str = BATCH_STATS, update_running: bool = False):
    """Run the network on a batch and return ``(logits, trace)``.

    ``batch_stats`` normalises with the biased mean/variance of ``X`` itself;
    ``running_stats`` uses the stored buffers. Running buffers are only
    touched when ``update_running`` is set, which source training does and
    test-time adaptation never does.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.arch.input_dim:
        raise ValueError(f"expected batch of shape (n, {net.arch.input_dim}), got {X.shape}")
    if mode == BATCH_STATS:
        if len(X) < 2:
            raise ValueError(
                f"batch_stats mode needs a batch of at least 2 samples, got {len(X)}"
            )
    elif mode != RUNNING_STATS:
        raise ValueError(f"unknown mode {mode!r}")

    p, buf, eps = net.params, net.buffers, net.arch.eps_bn
    trace = ForwardTrace(mode=mode)
    h = X
    for i in range(net.num_layers):
        trace.inputs.append(h)
        a = h @ p[f"dense{i}.weight"].T + p[f"dense{i}.bias"]
        if mode == BATCH_STATS:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            if update_running:
                m = net.arch.stats_momentum
                buf[f"bn{i}.running_mean"] = (1 - m) * buf[f"bn{i}.running_mean"] + m * mu
                buf[f"bn{i}.running_var"] = (1 - m) * buf[f"bn{i}.running_var"] + m * var
        else:
            mu = buf[f"bn{i}.running_mean"]
            var = buf[f"bn{i}.running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (a - mu) * inv_std
        out = p[f"bn{i}.gamma"] * x_hat + p[f"bn{i}.beta"]
        trace.batch_mean.append(mu)
        trace.batch_var.append(var)
        trace.inv_std.append(inv_std)
        trace.x_hat.append(x_hat)
        trace.bn_out.append(out)
        h = np.maximum(out, 0.0)
    k = net.num_layers
    trace.inputs.append(h)
    logits = h @ p[f"dense{k}.weight"].T + p[f"dense{k}.bias"]
    trace.logits = logits
    return logits, trace


def resolve_mask(net: Network, mask) -> list[str]:
    """Turn a mask spec (``"bn_affine"``, ``"all"`` or names) into parameter names."""
    if mask is None or mask == "bn_affine":
        return [n for n in net.params if n.startswith("bn")]
    if mask == "all":
        return list(net.params)
    names = list(mask)
    unknown = [n for n in names if n not in net.params]
    if unknown:
        raise ValueError(f"unknown parameter names in mask: {unknown}")
    return names


def backward(net: Network, trace: ForwardTrace, grad_logits, mask="bn_affine") -> dict:
    """Gradients of a scalar loss for the parameters selected by ``mask``.

    ``grad_logits`` is dL/dlogits for the whole batch (so for a mean loss it
    already carries the 1/n factor). The BN backward accounts for the batch
    mean and variance being functions of the batch.
    """
    if trace.mode != BATCH_STATS:
        raise ValueError("backward needs a trace from a batch_stats forward")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ValueError(
            f"upstream gradient shape {g.shape} does not match logits {trace.logits.shape}"
        )
    wanted = set(resolve_mask(net, mask))
    p = net.params
    n = len(g)
    k = net.num_layers
    grads: dict[str, np.ndarray] = {}

    grads[f"dense{k}.weight"] = g.T @ trace.inputs[k]
    grads[f"dense{k}.bias"] = g.sum(axis=0)
    lowest = _lowest_needed_layer(wanted, k)
    dh = g @ p[f"dense{k}.weight"]
    for i in range(k - 1, lowest - 1, -1):
        dout = dh * (trace.bn_out[i] > 0)
        x_hat = trace.x_hat[i]
        grads[f"bn{i}.gamma"] = np.sum(dout * x_hat, axis=0)
        grads[f"bn{i}.beta"] = dout.sum(axis=0)
        dx_hat = dout * p[f"bn{i}.gamma"]
        da = (trace.inv_std[i] / n) * (
            n * dx_hat - dx_hat.sum(axis=0) - x_hat * np.sum(dx_hat * x_hat, axis=0)
        )
        grads[f"dense{i}.weight"] = da.T @ trace.inputs[i]
        grads[f"dense{i}.bias"] = da.sum(axis=0)
        if i > lowest:
            dh = da @ p[f"dense{i}.weight"]
    return {name: grads[name] for name in net.params if name in wanted}


def _lowest_needed_layer(wanted: Iterable[str], k: int) -> int:
    # "dense3.weight" -> 3, "bn0.gamma" -> 0
    idx = [int("".join(ch for ch in name.split(".")[0] if ch.isdigit())) for name in wanted]
    return min([i for i in idx if i < k], default=k)


# -- checkpoint I/O --------------------------------------------------------
#
# Layout, all little-endian:
#   7 bytes  b"LSCDNET"
#   1 byte   format version
#   u32      input_dim, u32 number of hidden layers, u32 per hidden width,
#   u32      num_classes, f64 eps_bn, f64 stats_momentum
#   f64[]    arrays of Network.state() in order, each row-major


def save_network(net: Network, path) -> None:
    a = net.arch
    header = MAGIC + bytes([FORMAT_VERSION])
    header += struct.pack("<II", a.input_dim, len(a.hidden))
    header += struct.pack(f"<{len(a.hidden)}I", *a.hidden)
    header += struct.pack("<Idd", a.num_classes, a.eps_bn, a.stats_momentum)
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in net.state().values())
    Path(path).write_bytes(header + body)


def load_network(path) -> Network:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an LSCDNET checkpoint")
    pos = len(MAGIC)
    if len(data) <= pos:
        raise TruncatedCheckpointError(f"{path}: truncated before version byte")
    if data[pos] != FORMAT_VERSION:
        raise VersionError(
            f"{path}: unsupported checkpoint version {data[pos]} (expected {FORMAT_VERSION})"
        )
    pos += 1

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise TruncatedCheckpointError(f"{path}: truncated in architecture header")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    input_dim, n_hidden = take("<II")
    hidden = take(f"<{n_hidden}I")
    num_classes, eps_bn, stats_momentum = take("<Idd")
    try:
        arch = Architecture(input_dim, tuple(hidden), num_classes, eps_bn, stats_momentum)
    except ValueError as exc:
        raise DimensionMismatchError(f"{path}: invalid architecture header: {exc}") from None

    shapes = {**arch.param_shapes(), **arch.buffer_shapes()}
    order = list(_state_order(arch))
    expected = 8 * sum(int(np.prod(shapes[name])) for name in order)
    remaining = len(data) - pos
    if remaining < expected:
        raise TruncatedCheckpointError(
            f"{path}: truncated parameter payload ({remaining} of {expected} bytes)"
        )
    if remaining > expected:
        raise DimensionMismatchError(
            f"{path}: payload has {remaining} bytes but the header implies {expected}"
        )
    params, buffers = {}, {}
    for name in order:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        target = buffers if "running" in name else params
        target[name] = arr.reshape(shapes[name])
    # keep the parameter dict in declaration order
    params = {name: params[name] for name in arch.param_shapes()}
    return Network(arch, params, buffers)


def _state_order(arch: Architecture):
    for i in range(len(arch.hidden)):
        yield f"dense{i}.weight"
        yield f"dense{i}.bias"
        yield f"bn{i}.gamma"
        yield f"bn{i}.beta"
        yield f"bn{i}.running_mean"
        yield f"bn{i}.running_var"
    k = len(arch.hidden)
    yield f"dense{k}.weight"
    yield f"dense{k}.bias"
