"""Per-phase adversarial training of a transport map against a potential.

One phase solves a single time-discretized gradient-flow step: the transport
network is pulled toward the target while paying a quadratic cost anchored at
its own frozen snapshot from the previous phase.  Training the composed map
directly (instead of one increment network per phase) keeps the work per
iteration independent of the phase index; sampling the current distribution
is always a single network evaluation.

Three methods share the loop:

- ``sjko``               multi-phase training; the anchor is refreshed to a
                         frozen snapshot at every phase boundary.
- ``uotm-source-fixed``  the K = 1 special case: one phase, identity anchor.
- ``uotm``               the both-relaxed unbalanced-transport baseline: one
                         phase, identity anchor, and a potential objective in
                         which the cost enters through the reflected
                         conjugate instead of linearly.

A deliberately quadratic ``sequential_reference`` mode (a fresh increment
network per phase, evaluated through the whole chain of frozen predecessors)
exists only so the timing tests have an O(k)-per-iteration contrast.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .divergence import DivergenceKind
from .nets import (AdamState, MLPSpec, TransportRef, adam_new, adam_step,
                   identity_ref, mlp_apply, mlp_forward, mlp_new, snapshot)
from .datasets import ParticleCloud
from .rng import StreamRng, _splitmix64

METHODS = ("sjko", "uotm", "uotm-source-fixed")


class TrainingError(RuntimeError):
    """Numeric failure with phase/iteration context."""

    def __init__(self, message: str, phase: int, iteration: int):
        super().__init__(f"{message} (phase {phase}, iteration {iteration})")
        self.phase = phase
        self.iteration = iteration


def mix_seed(seed: int, label: int) -> int:
    """Stable derived seed for sub-components (net init, eval streams)."""
    return _splitmix64((seed & ((1 << 64) - 1)) ^ _splitmix64(label))


@dataclass(frozen=True)
class SJKOConfig:
    """All hyperparameters of the phase loop.

    ``step_size`` is the time step of the underlying flow discretization; the
    quadratic anchor cost is ``|x - y|^2 / (2 * step_size)``, additionally
    divided by the data dimension when ``dim_normalized_cost`` is set.
    ``first_phase_iters`` defaults to ``iters_per_phase``.
    """

    phases: int = 20
    iters_per_phase: int = 5000
    first_phase_iters: int | None = None
    step_size: float = 2.0
    batch_size: int = 400
    lr_transport: float = 1e-4
    lr_potential: float = 1e-5
    r1_weight: float = 0.0
    divergence: str = "kld"
    aux_noise_dim: int = 0
    dim_normalized_cost: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("phases", "iters_per_phase", "batch_size", "aux_noise_dim", "seed"):
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("step_size", "lr_transport", "lr_potential", "r1_weight"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.first_phase_iters is not None:
            object.__setattr__(self, "first_phase_iters", int(self.first_phase_iters))
        if self.phases < 1 or self.iters_per_phase < 1:
            raise ValueError("phases and iters_per_phase must be >= 1")
        if self.first_phase_iters is not None and self.first_phase_iters < 1:
            raise ValueError("first_phase_iters must be >= 1")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.r1_weight < 0.0:
            raise ValueError("r1_weight must be >= 0")
        if self.aux_noise_dim < 0:
            raise ValueError("aux_noise_dim must be >= 0")
        DivergenceKind(self.divergence)  # validates

    @property
    def divergence_kind(self) -> DivergenceKind:
        return DivergenceKind(self.divergence)

    def total_iterations(self) -> int:
        n0 = self.first_phase_iters if self.first_phase_iters is not None else self.iters_per_phase
        return n0 + (self.phases - 1) * self.iters_per_phase


# ---------------------------------------------------------------------------
# loss formulas on plain arrays (the contract the graph path must reproduce)
# ---------------------------------------------------------------------------

def cost(x: np.ndarray, y: np.ndarray, step_size: float, dim_normalized: bool = False) -> float:
    """Quadratic transport cost between two points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"point shapes disagree: {x.shape} vs {y.shape}")
    if step_size <= 0.0:
        raise ValueError("step_size must be > 0")
    denom = 2.0 * step_size * (x.size if dim_normalized else 1.0)
    return float(np.sum((x - y) ** 2) / denom)


def batch_cost(y_old: np.ndarray, y_new: np.ndarray, step_size: float,
               dim_normalized: bool = False) -> np.ndarray:
    """Per-row quadratic costs for aligned (n, d) batches."""
    y_old = np.asarray(y_old, dtype=np.float64)
    y_new = np.asarray(y_new, dtype=np.float64)
    if y_old.shape != y_new.shape:
        raise ValueError(f"batch shapes disagree: {y_old.shape} vs {y_new.shape}")
    denom = 2.0 * step_size * (y_old.shape[1] if dim_normalized else 1.0)
    return np.sum((y_old - y_new) ** 2, axis=1) / denom


def potential_loss(kind, v_fake: np.ndarray, v_real: np.ndarray,
                   r1_penalty: float = 0.0, r1_weight: float = 0.0) -> float:
    """Source-fixed potential objective.

    KLD uses the conjugate of the generator at the negated potential, which is
    finite everywhere: mean(v_fake) + mean(exp(-v_real) - 1).  JSD works on a
    logit-reparametrized potential w via softplus: mean(S(w_fake)) +
    mean(S(-w_real)).  Both get ``r1_weight * r1_penalty`` added.
    """
    kind = DivergenceKind(kind)
    v_fake = np.asarray(v_fake, dtype=np.float64).ravel()
    v_real = np.asarray(v_real, dtype=np.float64).ravel()
    if v_fake.size == 0 or v_real.size == 0:
        raise ValueError("batches must be nonempty")
    if not (np.all(np.isfinite(v_fake)) and np.all(np.isfinite(v_real))):
        raise ValueError("non-finite potential values")
    if kind is DivergenceKind.KLD:
        base = np.sum(v_fake) / v_fake.size + np.sum(np.exp(-v_real) - 1.0) / v_real.size
    elif kind is DivergenceKind.JSD:
        base = np.sum(np.logaddexp(0.0, v_fake)) / v_fake.size \
            + np.sum(np.logaddexp(0.0, -v_real)) / v_real.size
    else:
        raise ValueError("potential objective needs kld or jsd")
    return float(base + r1_weight * r1_penalty)


def transport_loss(kind, y_old: np.ndarray, y_new: np.ndarray, v_new: np.ndarray,
                   step_size: float, dim_normalized: bool = False) -> float:
    """Transport objective: anchor cost plus the potential term.

    KLD: mean(cost) - mean(v_new).  JSD uses the non-saturating softplus form
    mean(cost) + mean(S(-w_new)).
    """
    kind = DivergenceKind(kind)
    costs = batch_cost(y_old, y_new, step_size, dim_normalized)
    v_new = np.asarray(v_new, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v_new)):
        raise ValueError("non-finite potential values")
    if kind is DivergenceKind.KLD:
        return float(np.sum(costs) / costs.size - np.sum(v_new) / v_new.size)
    if kind is DivergenceKind.JSD:
        return float(np.sum(costs) / costs.size
                     + np.sum(np.logaddexp(0.0, -v_new)) / v_new.size)
    raise ValueError("transport objective needs kld or jsd")


def relaxed_losses(phi1_kind, phi2_kind, v_fake: np.ndarray, v_real: np.ndarray,
                   cost_values: np.ndarray, r1_weight: float = 0.0,
                   r1_penalty: float = 0.0) -> tuple[float, float]:
    """Potential / transport objectives of the unbalanced semi-dual problem.

    General form: L_v = mean(-circ1(c - v_fake)) - mean(circ2(v_real)) + r1,
    L_T = mean(c - v_fake).  Minimizing the bracket alone suffices for the
    transport because circ1 is nondecreasing.

    With ``phi1_kind = INDICATOR`` the source marginal is pinned, circ1 is the
    identity, and the cost enters the potential objective only as an additive
    constant; it is dropped, so the pair reduces exactly to
    :func:`potential_loss` / the anchored transport objective.
    """
    phi1 = DivergenceKind(phi1_kind)
    phi2 = DivergenceKind(phi2_kind)
    v_fake = np.asarray(v_fake, dtype=np.float64).ravel()
    v_real = np.asarray(v_real, dtype=np.float64).ravel()
    cost_values = np.asarray(cost_values, dtype=np.float64).ravel()
    if phi1 is DivergenceKind.INDICATOR:
        loss_v = potential_loss(phi2, v_fake, v_real, r1_penalty, r1_weight)
        if phi2 is DivergenceKind.JSD:
            loss_t = float(np.sum(cost_values) / cost_values.size
                           + np.sum(np.logaddexp(0.0, -v_fake)) / v_fake.size)
        else:
            loss_t = float(np.sum(cost_values) / cost_values.size - np.sum(v_fake) / v_fake.size)
        return loss_v, loss_t
    if phi1 is not DivergenceKind.KLD or phi2 is not DivergenceKind.KLD:
        raise ValueError("both-relaxed objectives are supported for kld only")
    bracket = cost_values - v_fake
    loss_v = float(np.sum(np.exp(-bracket) - 1.0) / bracket.size
                   + np.sum(np.exp(-v_real) - 1.0) / v_real.size
                   + r1_weight * r1_penalty)
    loss_t = float(np.sum(bracket) / bracket.size)
    return loss_v, loss_t


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainingTrace:
    """Per-iteration loss records plus phase bookkeeping.

    Wall times are kept for diagnostics and the work-invariance checks; they
    are not part of the deterministic on-disk trace.
    """

    phase: list[int] = field(default_factory=list)
    iter_in_phase: list[int] = field(default_factory=list)
    loss_potential: list[float] = field(default_factory=list)
    loss_transport: list[float] = field(default_factory=list)
    r1_penalty: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    phase_bounds: list[int] = field(default_factory=list)
    phase_graph_passes: list[tuple[int, int]] = field(default_factory=list)

    def record(self, phase: int, i: int, lv: float, lt: float, r1: float, dt: float) -> None:
        self.phase.append(phase)
        self.iter_in_phase.append(i)
        self.loss_potential.append(lv)
        self.loss_transport.append(lt)
        self.r1_penalty.append(r1)
        self.wall_time.append(dt)

    def __len__(self) -> int:
        return len(self.phase)

    def wall_times_of_phase(self, phase: int) -> np.ndarray:
        mask = np.asarray(self.phase) == phase
        return np.asarray(self.wall_time)[mask]


@dataclass
class TrainerState:
    """Live networks, optimizer moments, the frozen anchor, and the stream."""

    transport_params: ParamVector
    potential_params: ParamVector
    adam_transport: AdamState
    adam_potential: AdamState
    frozen: TransportRef
    rng: StreamRng
    phase: int = 0
    global_iter: int = 0
    frozen_chain: list[TransportRef] = field(default_factory=list)


class Trainer:
    """Runs the phase loop for one (config, method, sampler pair) setting.

    ``source`` and ``target`` are ``draw(n, rng) -> (n, d)`` callables; all
    randomness flows through the trainer's single stream in a fixed order
    (potential step: x, y, z; transport step: x, z1, z2), so a (config, seed)
    pair fully determines the trajectory.
    """

    def __init__(self, config: SJKOConfig, source, target,
                 transport_spec: MLPSpec, potential_spec: MLPSpec,
                 method: str = "sjko", sequential_reference: bool = False,
                 record_batches: bool = False):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if method == "uotm" and config.divergence_kind is not DivergenceKind.KLD:
            raise ValueError("the both-relaxed baseline supports kld only")
        if potential_spec.out_dim != 1 or potential_spec.aux_noise_dim != 0:
            raise ValueError("potential must map points to scalars without aux noise")
        if transport_spec.in_dim != transport_spec.out_dim:
            raise ValueError("transport must map the data space to itself")
        if transport_spec.aux_noise_dim != config.aux_noise_dim:
            raise ValueError("transport aux_noise_dim disagrees with config")
        if config.r1_weight > 0 and potential_spec.activation == "relu":
            raise ValueError("input-gradient penalty needs a smooth potential activation")
        if sequential_reference and method != "sjko":
            raise ValueError("sequential_reference applies to the phase method only")

        self.config = config
        self.method = method
        self.sequential_reference = sequential_reference
        self.source = source
        self.target = target
        self.transport_spec = transport_spec
        self.potential_spec = potential_spec
        self.record_batches = record_batches
        self.batch_log: list[dict] = []
        self.trace = TrainingTrace()
        self._graph_forwards = 0
        self._graph_backwards = 0
        self._passes_mark = (0, 0)

        t_params = mlp_new(transport_spec, mix_seed(config.seed, 1))
        p_params = mlp_new(potential_spec, mix_seed(config.seed, 2))
        self.state = TrainerState(
            transport_params=t_params,
            potential_params=p_params,
            adam_transport=adam_new(t_params.total_len),
            adam_potential=adam_new(p_params.total_len),
            frozen=identity_ref(),
            rng=StreamRng(config.seed, stream=1),
        )

    # -- plumbing -----------------------------------------------------------

    @property
    def data_dim(self) -> int:
        return self.transport_spec.in_dim

    def _draw_aux(self, n: int) -> np.ndarray | None:
        if self.config.aux_noise_dim == 0:
            return None
        return self.state.rng.normal_matrix(n, self.config.aux_noise_dim)

    def _chain_apply(self, x: np.ndarray) -> np.ndarray:
        for ref in self.state.frozen_chain:
            x = ref.apply(x)
        return x

    def _anchor_forward(self, x: np.ndarray, z: np.ndarray | None) -> np.ndarray:
        """The frozen map the cost is anchored at (identity until first boundary)."""
        if self.sequential_reference:
            return self._chain_apply(x)
        return self.state.frozen.apply(x, z)

    def _live_forward(self, x: np.ndarray, z: np.ndarray | None) -> np.ndarray:
        """Current full transport, without gradient tracking."""
        if self.sequential_reference:
            x = self._chain_apply(x)
        return mlp_forward(self.transport_spec, self.state.transport_params, x, z)

    def _cost_denominator(self, n: int) -> float:
        d = self.data_dim if self.config.dim_normalized_cost else 1
        return 2.0 * self.config.step_size * n * d

    def _check_finite(self, value: float, what: str) -> None:
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {what}", self.state.phase, self.state.global_iter)

    # -- the two half-updates ------------------------------------------------

    def _potential_update(self) -> tuple[float, float]:
        cfg = self.config
        n = cfg.batch_size
        rng = self.state.rng
        x = self.source(n, rng)
        y = self.target(n, rng)
        z = self._draw_aux(n)
        y_hat = self._live_forward(x, z)

        leaves = self.state.potential_params.leaves()
        want_r1 = cfg.r1_weight > 0.0
        y_node = ad.leaf(y) if want_r1 else ad.constant(y)
        stacked = ad.concat_rows(ad.constant(y_hat), y_node)
        out = mlp_apply(self.potential_spec, leaves, stacked)
        self._graph_forwards += 1
        v_fake = ad.slice_rows(out, 0, n)
        v_real = ad.slice_rows(out, n, 2 * n)

        kind = cfg.divergence_kind
        if self.method == "uotm":
            costs = batch_cost(x, y_hat, cfg.step_size, cfg.dim_normalized_cost)
            bracket = ad.sub(ad.constant(costs[:, None]), v_fake)
            term_fake = ad.mean_all(ad.shift(ad.exp(ad.neg(bracket)), -1.0))
            term_real = ad.mean_all(ad.shift(ad.exp(ad.neg(v_real)), -1.0))
        elif kind is DivergenceKind.KLD:
            term_fake = ad.mean_all(v_fake)
            term_real = ad.mean_all(ad.shift(ad.exp(ad.neg(v_real)), -1.0))
        else:
            term_fake = ad.mean_all(ad.softplus(v_fake))
            term_real = ad.mean_all(ad.softplus(ad.neg(v_real)))
        loss = ad.add(term_fake, term_real)

        r1_value = 0.0
        if want_r1:
            per_point = ad.grad_tensors(ad.reduce_sum(v_real), [y_node])[0]
            penalty = ad.scale(ad.reduce_sum(ad.square(per_point)), 1.0 / n)
            r1_value = float(penalty.data)
            loss = ad.add(loss, ad.scale(penalty, cfg.r1_weight))

        loss_value = float(loss.data)
        self._check_finite(loss_value, "potential loss")
        names = list(leaves)
        grads = ad.gradient_arrays(loss, [leaves[k] for k in names])
        self._graph_backwards += 1
        self.state.potential_params, self.state.adam_potential = adam_step(
            self.state.potential_params,
            ParamVector({k: g for k, g in zip(names, grads)}),
            self.state.adam_potential,
            cfg.lr_potential,
        )
        if self.record_batches:
            self.batch_log.append({
                "v_fake": v_fake.data.ravel().copy(),
                "v_real": v_real.data.ravel().copy(),
                "r1": r1_value,
            })
        return loss_value, r1_value

    def _transport_update(self) -> float:
        cfg = self.config
        n = cfg.batch_size
        rng = self.state.rng
        x = self.source(n, rng)
        z1 = self._draw_aux(n)
        z2 = self._draw_aux(n)
        if self.sequential_reference:
            base = self._chain_apply(x)
            y_old = base
            live_in = base
            z_live = z1
        else:
            y_old = self._anchor_forward(x, z2)
            live_in = x
            z_live = z1

        leaves_t = self.state.transport_params.leaves()
        z_node = None if z_live is None else ad.constant(z_live)
        y_hat = mlp_apply(self.transport_spec, leaves_t, ad.constant(live_in), z_node)
        self._graph_forwards += 1
        potential_consts = {k: ad.constant(v) for k, v in self.state.potential_params.items()}
        v_new = mlp_apply(self.potential_spec, potential_consts, y_hat)
        self._graph_forwards += 1

        diff = ad.sub(y_hat, ad.constant(y_old))
        cost_mean = ad.scale(ad.reduce_sum(ad.square(diff)), 1.0 / self._cost_denominator(n))
        if cfg.divergence_kind is DivergenceKind.KLD or self.method == "uotm":
            loss = ad.sub(cost_mean, ad.mean_all(v_new))
        else:
            loss = ad.add(cost_mean, ad.mean_all(ad.softplus(ad.neg(v_new))))

        loss_value = float(loss.data)
        self._check_finite(loss_value, "transport loss")
        names = list(leaves_t)
        grads = ad.gradient_arrays(loss, [leaves_t[k] for k in names])
        self._graph_backwards += 1
        self.state.transport_params, self.state.adam_transport = adam_step(
            self.state.transport_params,
            ParamVector({k: g for k, g in zip(names, grads)}),
            self.state.adam_transport,
            cfg.lr_transport,
        )
        if self.record_batches:
            self.batch_log[-1].update({
                "y_old": y_old.copy(),
                "y_new": y_hat.data.copy(),
                "v_new": v_new.data.ravel().copy(),
            })
        return loss_value

    # -- loop ----------------------------------------------------------------

    def inner_iteration(self) -> None:
        """One potential update on fresh batches, then one transport update."""
        t0 = time.perf_counter()
        i = self.state.global_iter
        lv, r1 = self._potential_update()
        lt = self._transport_update()
        self.state.global_iter = i + 1
        self.trace.record(self.state.phase, i, lv, lt, r1, time.perf_counter() - t0)

    def _advance_phase(self) -> None:
        if self.method == "sjko":
            if self.sequential_reference:
                self.state.frozen_chain.append(
                    snapshot(self.transport_spec, self.state.transport_params))
                fresh_seed = mix_seed(self.config.seed, 1000 + self.state.phase)
                self.state.transport_params = mlp_new(self.transport_spec, fresh_seed)
                self.state.adam_transport = adam_new(self.state.transport_params.total_len)
            else:
                self.state.frozen = snapshot(self.transport_spec, self.state.transport_params)
        self.state.phase += 1
        self.trace.phase_bounds.append(self.state.global_iter)
        fw, bw = self._passes_mark
        self.trace.phase_graph_passes.append(
            (self._graph_forwards - fw, self._graph_backwards - bw))
        self._passes_mark = (self._graph_forwards, self._graph_backwards)

    def run_phase(self, n_iters: int) -> None:
        """n_iters inner iterations, then refresh the frozen anchor."""
        for _ in range(n_iters):
            self.inner_iteration()
        self._advance_phase()

    def phase_schedule(self) -> list[int]:
        cfg = self.config
        if self.method != "sjko":
            # baselines are single-phase; they get the same total budget
            return [cfg.total_iterations()]
        n0 = cfg.first_phase_iters if cfg.first_phase_iters is not None else cfg.iters_per_phase
        return [n0] + [cfg.iters_per_phase] * (cfg.phases - 1)

    def train(self, callbacks=()) -> tuple[tuple[MLPSpec, ParamVector], TrainingTrace]:
        """Run all remaining phases; callbacks fire at each phase boundary.

        A trainer restored from a phase checkpoint resumes at ``state.phase``.
        Callbacks receive (trainer, completed_phase_count) and may sample via
        :meth:`sample`; they must not mutate trainer state.
        """
        schedule = self.phase_schedule()
        while self.state.phase < len(schedule):
            self.run_phase(schedule[self.state.phase])
            for cb in callbacks:
                cb(self, self.state.phase)
        return (self.transport_spec, self.state.transport_params.copy()), self.trace

    # -- evaluation ----------------------------------------------------------

    def sample(self, n: int, seed: int) -> ParticleCloud:
        """Push n fresh source samples through the live transport.

        Uses a stream derived from (config seed, eval seed), so it never
        perturbs the training stream.
        """
        rng = StreamRng(mix_seed(self.config.seed, 7), stream=seed)
        x = self.source(n, rng)
        z = None
        if self.config.aux_noise_dim > 0:
            z = rng.normal_matrix(n, self.config.aux_noise_dim)
        return ParticleCloud(self._live_forward(x, z), origin="pushforward",
                             time_tag=float(self.state.phase), seed=seed)


def sample_pushforward(transport: TransportRef, n: int, d: int,
                       aux_noise_dim: int = 0, seed: int = 0) -> ParticleCloud:
    """Push n standard-Gaussian points (plus optional aux noise) through a map."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = StreamRng(seed)
    x = rng.normal_matrix(n, d)
    z = rng.normal_matrix(n, aux_noise_dim) if aux_noise_dim > 0 else None
    return ParticleCloud(transport.apply(x, z), origin="pushforward", seed=seed)
