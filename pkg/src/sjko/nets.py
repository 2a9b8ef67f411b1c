"""MLPs for the transport map and the potential, plus Adam.

The same arithmetic is exposed twice: :func:`mlp_forward` runs a plain numpy
pass (used for frozen snapshots and anything that must not track gradients),
while :func:`mlp_apply` builds the identical chain of autodiff nodes.  Both
paths execute the same numpy expressions in the same order, so their outputs
agree bitwise - which is what makes snapshot-replay comparisons exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .rng import StreamRng

SMOOTH_ACTIVATIONS = ("silu", "softplus")
ACTIVATIONS = SMOOTH_ACTIVATIONS + ("relu",)


def _act_numpy(name: str, x: np.ndarray) -> np.ndarray:
    if name == "silu":
        return x * expit(x)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "relu":
        return x * (x > 0.0).astype(np.float64)
    raise ValueError(f"unknown activation {name!r}")


def _act_graph(name: str, x: Tensor) -> Tensor:
    if name == "silu":
        return ad.silu(x)
    if name == "softplus":
        return ad.softplus(x)
    if name == "relu":
        return ad.relu(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MLPSpec:
    """Architecture of one fully connected network.

    ``aux_noise_dim > 0`` means an auxiliary noise vector is concatenated to
    the input before the first layer.
    """

    in_dim: int
    hidden_dims: tuple[int, ...]
    out_dim: int
    activation: str = "silu"
    aux_noise_dim: int = 0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer dimensions must be >= 1")
        if self.aux_noise_dim < 0:
            raise ValueError("aux_noise_dim must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def full_in_dim(self) -> int:
        return self.in_dim + self.aux_noise_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.full_in_dim, *self.hidden_dims, self.out_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden_dims": list(self.hidden_dims),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "aux_noise_dim": self.aux_noise_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(
            in_dim=int(d["in_dim"]),
            hidden_dims=tuple(int(h) for h in d["hidden_dims"]),
            out_dim=int(d["out_dim"]),
            activation=str(d["activation"]),
            aux_noise_dim=int(d["aux_noise_dim"]),
        )


def mlp_new(spec: MLPSpec, seed: int) -> ParamVector:
    """Fresh parameters: weights ~ N(0, 1/fan_in), biases zero.

    Draw order is layer by layer (weights then bias), so a (spec, seed) pair
    always produces the same parameters.
    """
    rng = StreamRng(seed)
    segments: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        w = rng.normal_matrix(fan_in, fan_out) / np.sqrt(fan_in)
        segments[f"w{i}"] = w
        segments[f"b{i}"] = np.zeros(fan_out)
    return ParamVector(segments)


def _join_input(x: np.ndarray, z: np.ndarray | None, spec: MLPSpec) -> np.ndarray:
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != spec.in_dim {spec.in_dim}")
    if spec.aux_noise_dim == 0:
        if z is not None:
            raise ValueError("spec has aux_noise_dim=0 but z was given")
        return x
    if z is None:
        raise ValueError("spec requires auxiliary noise z")
    if z.ndim == 1:
        z = z[None, :]
    if z.shape != (x.shape[0], spec.aux_noise_dim):
        raise ValueError(f"z shape {z.shape} != ({x.shape[0]}, {spec.aux_noise_dim})")
    return np.concatenate([x, z], axis=1)


def mlp_forward(spec: MLPSpec, params: ParamVector, x: np.ndarray,
                z: np.ndarray | None = None) -> np.ndarray:
    """Plain numpy forward pass on a batch (rows are samples)."""
    squeeze = np.asarray(x).ndim == 1
    h = _join_input(np.asarray(x, dtype=np.float64), None if z is None else np.asarray(z, dtype=np.float64), spec)
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = h @ params.get(f"w{i}") + params.get(f"b{i}")
        if i < n_layers - 1:
            h = _act_numpy(spec.activation, h)
    return h[0] if squeeze else h


def mlp_apply(spec: MLPSpec, param_leaves: dict[str, Tensor], x: Tensor,
              z: Tensor | None = None) -> Tensor:
    """Graph forward pass; mirrors mlp_forward operation for operation."""
    h = x if z is None else ad.concat_cols(x, z)
    if h.shape[1] != spec.full_in_dim:
        raise ValueError(f"graph input dim {h.shape[1]} != {spec.full_in_dim}")
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, param_leaves[f"w{i}"]), param_leaves[f"b{i}"])
        if i < n_layers - 1:
            h = _act_graph(spec.activation, h)
    return h


@dataclass(frozen=True)
class TransportRef:
    """A transport map fixed in time: the identity, or a frozen network copy."""

    spec: MLPSpec | None = None
    params: ParamVector | None = None

    @property
    def is_identity(self) -> bool:
        return self.spec is None

    def apply(self, x: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        if self.is_identity:
            return np.asarray(x, dtype=np.float64)
        return mlp_forward(self.spec, self.params, x, z)


def identity_ref() -> TransportRef:
    return TransportRef()


def snapshot(spec: MLPSpec, params: ParamVector) -> TransportRef:
    """Deep-copied frozen view; later updates to the live params do not leak in."""
    return TransportRef(spec=spec, params=params.copy())


@dataclass(frozen=True)
class AdamState:
    """First/second moment buffers plus the applied-step counter.

    ``skipped`` counts updates dropped because the gradient was non-finite;
    those do not advance ``t``.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    skipped: int = 0


def adam_new(n_params: int, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState,
              lr: float) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; pure in (params, grads, state, lr)."""
    g = grads.to_flat()
    if g.size != state.m.size or g.size != params.total_len:
        raise ValueError("parameter / gradient / state lengths disagree")
    if not np.all(np.isfinite(g)):
        return params, replace(state, skipped=state.skipped + 1)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_flat = params.to_flat() - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_flat(new_flat), replace(state, m=m, v=v, t=t)
