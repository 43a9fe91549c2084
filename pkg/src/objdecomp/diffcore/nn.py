"""Parameter containers and fully connected networks on top of the tape."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import tape as T
from .tape import Tensor


class ConfigError(ValueError):
    pass


class ParamSet(Mapping[str, np.ndarray]):
    """Named float64 parameter arrays with fixed shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            a = np.array(arr, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(a)):
                raise T.NumericError(f"parameter {name!r} is not finite", name)
            self._arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        new = dict(self._arrays)
        for name, arr in updates.items():
            if name not in new:
                raise KeyError(name)
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != new[name].shape:
                raise ConfigError(f"shape of {name!r} is fixed at {new[name].shape}, got {arr.shape}")
            new[name] = arr
        return ParamSet(new)

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf variables, one per parameter."""
        return {k: T.variable(v, name=k) for k, v in self._arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: T.constant(v) for k, v in self._arrays.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(self._arrays)

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if set(self) != set(other):
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)


ACTIVATIONS = ("linear", "relu", "softplus", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(in, h1, ..., out)``, one activation per layer.

    ``skips`` lists layer indices whose input is the previous activation
    concatenated with the network input (scaled by 1/sqrt(2)). ``outputs``
    names consecutive slices of the output vector.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    skips: tuple[int, ...] = ()
    outputs: tuple[tuple[str, int], ...] = ()
    softplus_beta: float = 100.0
    prefix: str = ""

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ConfigError("an MLP needs at least one hidden layer")
        if len(self.activations) != len(self.widths) - 1:
            raise ConfigError("one activation per layer is required")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ConfigError(f"unknown activation(s) {bad}")
        if any(not 0 < s < len(self.widths) - 1 for s in self.skips):
            raise ConfigError("skip indices must name hidden layers")
        if self.outputs and sum(w for _, w in self.outputs) != self.widths[-1]:
            raise ConfigError("output split does not cover the output width")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_in(self, i: int) -> int:
        return self.widths[i] + (self.widths[0] if i in self.skips else 0)

    def wname(self, i: int) -> str:
        return f"{self.prefix}l{i}.w"

    def bname(self, i: int) -> str:
        return f"{self.prefix}l{i}.b"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i in range(self.n_layers):
            out[self.wname(i)] = (self.layer_in(i), self.widths[i + 1])
            out[self.bname(i)] = (self.widths[i + 1],)
        return out

    def split(self, y):
        """Slice an output (array or Tensor) into the named parts."""
        parts, start = {}, 0
        for name, w in self.outputs:
            parts[name] = y[..., start : start + w]
            start += w
        return parts

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activations": list(self.activations),
            "skips": list(self.skips),
            "outputs": [[n, w] for n, w in self.outputs],
            "softplus_beta": self.softplus_beta,
            "prefix": self.prefix,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(
            widths=tuple(d["widths"]),
            activations=tuple(d["activations"]),
            skips=tuple(d.get("skips", ())),
            outputs=tuple((n, int(w)) for n, w in d.get("outputs", ())),
            softplus_beta=float(d.get("softplus_beta", 100.0)),
            prefix=d.get("prefix", ""),
        )


def init_uniform(spec: MlpSpec, rng: np.random.Generator, gain: float = 1.0) -> dict[str, np.ndarray]:
    """Scaled uniform init: U(-a, a) with a = gain * sqrt(6 / fan_in); zero biases."""
    out = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_in(i), spec.widths[i + 1]
        a = gain * math.sqrt(6.0 / fan_in)
        if spec.activations[i] in ("linear", "sigmoid"):
            a = gain * math.sqrt(1.0 / fan_in)
        out[spec.wname(i)] = rng.uniform(-a, a, size=(fan_in, fan_out))
        out[spec.bname(i)] = np.zeros(fan_out)
    return out


def _activate(z: Tensor, kind: str, beta: float) -> Tensor:
    if kind == "relu":
        return T.relu(z)
    if kind == "softplus":
        return T.softplus(z, beta)
    if kind == "sigmoid":
        return T.sigmoid(z)
    return z


def _activation_slope(z: Tensor, kind: str, beta: float):
    """d act / d z as a tape expression (so second-order terms flow to parameters)."""
    if kind == "relu":
        return (z.value > 0).astype(np.float64)
    if kind == "softplus":
        return T.sigmoid(z * beta)
    if kind == "sigmoid":
        s = T.sigmoid(z)
        return s * (1.0 - s)
    return None


def _param_lookup(params):
    if isinstance(params, ParamSet):
        return params.constants()
    return {k: T.as_tensor(v) for k, v in params.items()}


def mlp_forward(spec: MlpSpec, params, x):
    """Evaluate the network on ``x`` of shape (..., widths[0]).

    ``params`` is a ParamSet (plain evaluation, returns an ndarray) or a mapping
    of Tensors (recorded on the tape, returns a Tensor).
    """
    plain = isinstance(params, ParamSet) and not isinstance(x, Tensor)
    p = _param_lookup(params)
    x = T.as_tensor(x)
    if x.shape[-1] != spec.widths[0]:
        raise ConfigError(f"input width {x.shape[-1]} does not match spec width {spec.widths[0]}")
    h = x
    for i in range(spec.n_layers):
        if i in spec.skips:
            h = T.concat([h, x], axis=-1) * (1.0 / math.sqrt(2.0))
        z = h @ p[spec.wname(i)] + p[spec.bname(i)]
        h = _activate(z, spec.activations[i], spec.softplus_beta)
    return h.value if plain else h


def mlp_forward_jac(spec: MlpSpec, params, x, x_jac: np.ndarray, jac_outputs: slice = slice(0, 1)):
    """Forward pass that also propagates d(output)/d(q) for an external coordinate q.

    ``x_jac`` has shape (N, Q, widths[0]) and holds d x / d q (a constant). Returns
    ``(y, J)`` with ``J`` of shape (N, Q, k) for the output columns ``jac_outputs``.
    Both are tape expressions, so losses on ``J`` differentiate w.r.t. parameters.
    """
    p = _param_lookup(params)
    x = T.as_tensor(x)
    if x.shape[-1] != spec.widths[0]:
        raise ConfigError(f"input width {x.shape[-1]} does not match spec width {spec.widths[0]}")
    xj = T.constant(x_jac)
    h, J = x, xj
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        if i in spec.skips:
            s = 1.0 / math.sqrt(2.0)
            h = T.concat([h, x], axis=-1) * s
            J = T.concat([J, xj], axis=-1) * s
        W, b = p[spec.wname(i)], p[spec.bname(i)]
        if i == last:
            Wj = W[:, jac_outputs]
        else:
            Wj = W
        z = h @ W + b
        Jz = J @ Wj
        kind = spec.activations[i]
        h = _activate(z, kind, spec.softplus_beta)
        slope = _activation_slope(z if i != last else z[..., jac_outputs], kind, spec.softplus_beta)
        if slope is None:
            J = Jz
        elif isinstance(slope, Tensor):
            J = Jz * T.reshape(slope, (slope.shape[0], 1, slope.shape[1]))
        else:
            J = Jz * slope[:, None, :]
    return h, J
