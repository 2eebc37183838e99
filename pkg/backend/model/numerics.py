"""
Dense float64 tensors with a small gradient tape

Only the operations the fusion blocks need are differentiable. Everything else
(voxelization, sampling, NMS) works on plain numpy arrays and enters the tape
as constants.
"""

from __future__ import annotations

import logging
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax as _softmax

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from errors import ConfigurationError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - np.finfo(np.float64).epsneg

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Immutable dense array of 64-bit floats"""

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike):
        if isinstance(data, Tensor):
            arr = data.data
        else:
            arr = np.array(data, dtype=np.float64)
            arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


# ----------------------------------------------------------------------
# Gradient tape
# ----------------------------------------------------------------------
@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: Tuple[Tensor, ...]
    ctx: dict


_ACTIVE_TAPES: List["GradTape"] = []


class GradTape:
    """Records operations on watched parameters and replays them backwards.

    Usage:
        with GradTape() as tape:
            tape.watch(params)
            loss = f(params)
        grads = tape.gradient(loss)

    A tape belongs to one caller; it is not safe to share across threads.
    """

    def __init__(self):
        self._tracked: Dict[int, Tensor] = {}
        self._names: Dict[int, str] = {}
        self._nodes: List[_Node] = []
        self.grads: Dict[str, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def watch(self, params: "ParamSet") -> None:
        for name, tensor in params.items():
            self._tracked[id(tensor)] = tensor
            self._names[id(tensor)] = name

    def _record(self, op: str, out: Tensor, inputs: Tuple[Tensor, ...], ctx: dict) -> None:
        if any(id(t) in self._tracked for t in inputs):
            self._tracked[id(out)] = out
            self._nodes.append(_Node(op, out, inputs, ctx))

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def gradient(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """Back-propagate a scalar loss; returns parameter-name -> gradient."""
        if loss.size != 1:
            raise DimensionError(f"gradient needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            rule = BACKWARD_RULES[node.op]
            g_inputs = rule(g_out, node)
            for tensor, g in zip(node.inputs, g_inputs):
                if g is None or id(tensor) not in self._tracked:
                    continue
                if g.shape != tensor.shape:
                    raise DimensionError(f"backward of {node.op} produced {g.shape}, expected {tensor.shape}")
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else g

        self.grads = {}
        for key, name in self._names.items():
            tensor = self._tracked[key]
            self.grads[name] = grads.get(key, np.zeros(tensor.shape))
        return dict(self.grads)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], **ctx) -> Tensor:
    out = Tensor(data)
    for tape in _ACTIVE_TAPES:
        tape._record(op, out, inputs, ctx)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ParamSpec:
    """Shape and init rule of one named parameter"""

    shape: Tuple[int, ...]
    kind: str = "weight"            # weight | bias | gain | zeros
    fan_in: Optional[int] = None


def linear_specs(prefix: str, c_in: int, c_out: int) -> Dict[str, ParamSpec]:
    return {
        f"{prefix}.weight": ParamSpec((c_in, c_out), "weight", c_in),
        f"{prefix}.bias": ParamSpec((c_out,), "bias", c_in),
    }


def norm_specs(prefix: str, width: int, with_bias: bool = True) -> Dict[str, ParamSpec]:
    specs = {f"{prefix}.gain": ParamSpec((width,), "gain")}
    if with_bias:
        specs[f"{prefix}.bias"] = ParamSpec((width,), "zeros")
    return specs


def mlp_specs(prefix: str, widths: Sequence[int]) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    for i in range(len(widths) - 1):
        specs.update(linear_specs(f"{prefix}.{i}", widths[i], widths[i + 1]))
    return specs


class ParamSet(Mapping[str, Tensor]):
    """Named parameter tensors plus the seed they were drawn from"""

    def __init__(self, tensors: Mapping[str, ArrayLike], seed: int = 0):
        self._tensors: Dict[str, Tensor] = {name: as_tensor(v) for name, v in tensors.items()}
        self.seed = int(seed)

    @classmethod
    def init(cls, specs: Mapping[str, ParamSpec], seed: int) -> "ParamSet":
        """Draw every parameter from its own generator keyed by (seed, name).

        Weights and biases are uniform in +-1/sqrt(fan_in); gains start at 1 and
        norm biases at 0.
        """
        tensors = {}
        for name in sorted(specs):
            spec = specs[name]
            if spec.kind == "gain":
                tensors[name] = np.ones(spec.shape)
            elif spec.kind == "zeros":
                tensors[name] = np.zeros(spec.shape)
            else:
                fan_in = spec.fan_in or (spec.shape[0] if spec.shape else 1)
                bound = 1.0 / np.sqrt(fan_in)
                rng = np.random.default_rng([int(seed) % (2 ** 63), zlib.crc32(name.encode("utf-8"))])
                tensors[name] = rng.uniform(-bound, bound, size=spec.shape)
        return cls(tensors, seed=seed)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def require(self, name: str, module: str = "numerics") -> Tensor:
        if name not in self._tensors:
            raise ConfigurationError(f"missing parameter {name!r}", module=module)
        return self._tensors[name]

    def merge(self, other: "ParamSet") -> "ParamSet":
        merged = dict(self._tensors)
        merged.update(other._tensors)
        return ParamSet(merged, seed=self.seed)

    def with_value(self, name: str, value: ArrayLike) -> "ParamSet":
        updated = dict(self._tensors)
        current = self.require(name)
        new = as_tensor(value)
        if new.shape != current.shape:
            raise DimensionError(f"{name}: shape {new.shape} does not match {current.shape}")
        updated[name] = new
        return ParamSet(updated, seed=self.seed)

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._tensors.items() if k.startswith(prefix)}, seed=self.seed)

    @property
    def num_entries(self) -> int:
        return sum(t.size for t in self._tensors.values())


# ----------------------------------------------------------------------
# Differentiable operations
# ----------------------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _emit("matmul", np.matmul(a.data, b.data), (a, b))


def _matmul_backward(g, node):
    a, b = node.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b))


def _add_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b))


def _sub_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b))


def _mul_backward(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", a.data * float(factor), (a,), factor=float(factor))


def _scale_backward(g, node):
    return (g * node.ctx["factor"],)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


def _relu_backward(g, node):
    return (g * (node.inputs[0].data > 0.0),)


def sigmoid(a: ArrayLike) -> Tensor:
    """1 / (1 + exp(-x)) held strictly inside (0, 1); scipy's expit never overflows."""
    a = as_tensor(a)
    return _emit("sigmoid", np.clip(expit(a.data), _SIGMOID_LO, _SIGMOID_HI), (a,))


def _sigmoid_backward(g, node):
    s = node.out.data
    return (g * s * (1.0 - s),)


def softmax_rows(a: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    `mask` (broadcastable boolean, True = keep) zeroes excluded entries; a row
    with no kept entry comes out all-zero.
    """
    a = as_tensor(a)
    if mask is None:
        out = _softmax(a.data, axis=-1)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        logits = np.where(mask, a.data, -np.inf)
        any_kept = mask.any(axis=-1, keepdims=True)
        logits = np.where(any_kept, logits, 0.0)
        out = np.where(mask, _softmax(logits, axis=-1), 0.0)
    return _emit("softmax", out, (a,))


def _softmax_backward(g, node):
    y = node.out.data
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def layer_norm(a: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = DEFAULT_EPS) -> Tensor:
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    width = a.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm over width {width} got gain {gain.shape}, bias {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    return _emit("layer_norm", x_hat * gain.data + bias.data, (a, gain, bias), x_hat=x_hat, inv_std=inv_std)


def _layer_norm_backward(g, node):
    _, gain, _ = node.inputs
    x_hat, inv_std = node.ctx["x_hat"], node.ctx["inv_std"]
    d_hat = g * gain.data
    dx = inv_std * (
        d_hat
        - d_hat.mean(axis=-1, keepdims=True)
        - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(g.ndim - 1))
    return dx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)


def rms_norm(a: ArrayLike, gain: ArrayLike, eps: float = DEFAULT_EPS) -> Tensor:
    a, gain = as_tensor(a), as_tensor(gain)
    width = a.shape[-1]
    if gain.shape != (width,):
        raise DimensionError(f"rms_norm over width {width} got gain {gain.shape}")
    rms = np.sqrt((a.data ** 2).mean(axis=-1, keepdims=True) + eps)
    return _emit("rms_norm", a.data * gain.data / rms, (a, gain), rms=rms)


def _rms_norm_backward(g, node):
    a, gain = node.inputs
    rms = node.ctx["rms"]
    x = a.data
    u = g * gain.data
    width = x.shape[-1]
    dx = u / rms - x * (u * x).sum(axis=-1, keepdims=True) / (width * rms ** 3)
    lead = tuple(range(g.ndim - 1))
    return dx, (g * x / rms).sum(axis=lead)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(tuple(shape)), (a,))


def _reshape_backward(g, node):
    return (g.reshape(node.inputs[0].shape),)


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    return _emit("transpose", np.transpose(a.data, axes), (a,), axes=axes)


def _transpose_backward(g, node):
    return (np.transpose(g, np.argsort(node.ctx["axes"])),)


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    return _emit("concat", data, parts, axis=axis, sizes=sizes)


def _concat_backward(g, node):
    splits = np.cumsum(node.ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.ctx["axis"]))


def gather_rows(a: ArrayLike, index: np.ndarray) -> Tensor:
    """Select rows along axis 0; index -1 produces a zero row."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    if a.shape[0] == 0:
        valid = np.zeros(index.shape, dtype=bool)
        out = np.zeros(index.shape + a.shape[1:])
    else:
        out = a.data[np.where(valid, index, 0)]
        out = np.where(valid.reshape(valid.shape + (1,) * (a.ndim - 1)), out, 0.0)
    return _emit("gather_rows", out, (a,), index=index, valid=valid)


def _gather_rows_backward(g, node):
    a = node.inputs[0]
    index, valid = node.ctx["index"], node.ctx["valid"]
    grad = np.zeros(a.shape)
    np.add.at(grad, index[valid], g[valid])
    return (grad,)


def sum_all(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("sum_all", np.array(a.data.sum()), (a,))


def _sum_all_backward(g, node):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def mean(a: ArrayLike, axis: int, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    return _emit("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), axis=axis, keepdims=keepdims)


def _mean_backward(g, node):
    a = node.inputs[0]
    axis = node.ctx["axis"]
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape) / a.shape[axis],)


BACKWARD_RULES: Dict[str, Callable] = {
    "matmul": _matmul_backward,
    "add": _add_backward,
    "sub": _sub_backward,
    "mul": _mul_backward,
    "scale": _scale_backward,
    "relu": _relu_backward,
    "sigmoid": _sigmoid_backward,
    "softmax": _softmax_backward,
    "layer_norm": _layer_norm_backward,
    "rms_norm": _rms_norm_backward,
    "reshape": _reshape_backward,
    "transpose": _transpose_backward,
    "concat": _concat_backward,
    "gather_rows": _gather_rows_backward,
    "sum_all": _sum_all_backward,
    "mean": _mean_backward,
}


# ----------------------------------------------------------------------
# Composites
# ----------------------------------------------------------------------
def linear(x: ArrayLike, params: ParamSet, prefix: str, module: str = "numerics") -> Tensor:
    weight = params.require(f"{prefix}.weight", module)
    bias = params.require(f"{prefix}.bias", module)
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != {weight.shape[0]}", module=module)
    return add(matmul(x, weight), bias)


def mlp(a: ArrayLike, params: ParamSet, prefix: str, widths: Sequence[int], module: str = "numerics") -> Tensor:
    """Affine layers `prefix.0 .. prefix.{n-1}` with ReLU between them."""
    out = as_tensor(a)
    n_layers = len(widths) - 1
    for i in range(n_layers):
        out = linear(out, params, f"{prefix}.{i}", module)
        if i < n_layers - 1:
            out = relu(out)
    return out


def dropout_mask(shape: Sequence[int], rate: float, seed: int, training: bool = False) -> Tensor:
    """Bernoulli keep-mask scaled by 1/(1-rate); all ones outside training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return Tensor(np.ones(tuple(shape)))
    rng = np.random.default_rng(int(seed) % (2 ** 63))
    keep = rng.random(tuple(shape)) >= rate
    return Tensor(keep / (1.0 - rate))


# ----------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------
def analytic_gradient(f: Callable[[ParamSet], Tensor], params: ParamSet) -> Tuple[float, Dict[str, np.ndarray]]:
    with GradTape() as tape:
        tape.watch(params)
        loss = f(params)
    if loss.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {loss.shape}")
    return loss.item(), tape.gradient(loss)


def grad_check_report(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Central differences against the tape gradient, per parameter.

    Relative error per entry is |g_fd - g_an| / max(1, |g_fd|, |g_an|). With
    `max_entries`, larger parameters are probed on a deterministic subset.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ConfigurationError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    loss, grads = analytic_gradient(f, params)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite", parameter=None)

    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name in sorted(params):
        base = params[name].numpy()
        g_an = grads[name]
        if not np.all(np.isfinite(g_an)):
            raise NumericError(f"analytic gradient of {name} is not finite", parameter=name)
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))

        worst = 0.0
        for idx in flat_idx:
            probe = base.copy().reshape(-1)
            probe[idx] += h
            f_plus = f(params.with_value(name, probe.reshape(base.shape))).item()
            probe[idx] -= 2 * h
            f_minus = f(params.with_value(name, probe.reshape(base.shape))).item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite value while probing {name}[{idx}]", parameter=name)
            g_fd = (f_plus - f_minus) / (2 * h)
            g = float(g_an.reshape(-1)[idx])
            err = abs(g_fd - g) / max(1.0, abs(g_fd), abs(g))
            worst = max(worst, err)
        report[name] = worst
        logger.debug("grad_check %s: max rel err %.3e over %d entries", name, worst, len(flat_idx))
    return report


def grad_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Maximum relative error over all parameters."""
    report = grad_check_report(f, params, h=h, max_entries=max_entries, seed=seed)
    return max(report.values()) if report else 0.0


def assert_finite(tensor: ArrayLike, where: str, module: str = "numerics") -> None:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {where}", module=module)


