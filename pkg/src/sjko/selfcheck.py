"""Fast correctness gate: every numerically risky component against an
independent oracle.  Each check returns (name, passed, detail); the whole
battery runs in well under a minute."""

from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from . import divergence as dv
from . import metrics, wgf
from .autodiff import ParamVector
from .datasets import standard_gaussian, gmm25
from .divergence import DivergenceKind
from .nets import MLPSpec, mlp_apply, mlp_new
from .rng import StreamRng
from .trainer import SJKOConfig, Trainer


def check_gradients() -> tuple[str, bool, str]:
    """Reverse-mode gradients vs central differences on 100 random MLP shapes.

    Smooth activations only: central differences are invalid where a
    parameter bump can cross a piecewise-linear kink.
    """
    rng = StreamRng(101)
    dims = [1, 2, 3, 4]
    hiddens = [(3,), (5,), (4, 4), (6, 3)]
    activations = ["silu", "softplus"]
    worst = 0.0
    for trial in range(100):
        in_dim = dims[trial % len(dims)]
        hidden = hiddens[(trial // 4) % len(hiddens)]
        act = activations[trial % len(activations)]
        spec = MLPSpec(in_dim=in_dim, hidden_dims=hidden, out_dim=1, activation=act)
        params = mlp_new(spec, seed=5000 + trial)
        x = rng.normal_matrix(3, in_dim)

        def builder(inputs, p):
            return ad.reduce_sum(ad.square(mlp_apply(spec, p, ad.constant(x))))

        worst = max(worst, ad.finite_diff_check(builder, [], params, epsilon=1e-5))
    return "gradient_finite_difference", worst <= 1e-6, f"max rel err {worst:.3e} (tol 1e-6)"


def check_r1_gradient() -> tuple[str, bool, str]:
    """Penalty parameter-gradient vs central differences of the penalty scalar."""
    rng = StreamRng(102)
    worst = 0.0
    for trial in range(10):
        spec = MLPSpec(in_dim=2, hidden_dims=(6, 6), out_dim=1,
                       activation="silu" if trial % 2 == 0 else "softplus")
        params = mlp_new(spec, seed=6000 + trial)
        y = rng.normal_matrix(3, 2)

        def potential(y_leaf, p):
            return ad.reduce_sum(mlp_apply(spec, p, y_leaf))

        _, grads = ad.r1_param_gradient(potential, y, params)
        flat = params.to_flat()
        analytic = grads.to_flat()
        eps = 1e-5
        for i in range(flat.size):
            hi = flat.copy()
            hi[i] += eps
            lo = flat.copy()
            lo[i] -= eps
            p_hi, _ = ad.r1_param_gradient(potential, y, params.with_flat(hi))
            p_lo, _ = ad.r1_param_gradient(potential, y, params.with_flat(lo))
            central = (p_hi - p_lo) / (2 * eps)
            worst = max(worst, abs(analytic[i] - central) / (abs(analytic[i]) + 1e-12))
    return "r1_parameter_gradient", worst <= 1e-4, f"max rel err {worst:.3e} (tol 1e-4)"


def check_conjugates() -> tuple[str, bool, str]:
    """Closed-form conjugates vs the grid-supremum oracle."""
    worst = 0.0
    for kind in (DivergenceKind.KLD, DivergenceKind.JSD):
        for y in (-2.0, -1.0, 0.0, 0.5):
            oracle = dv.brute_force_conjugate(kind, y)
            worst = max(worst, abs(dv.f_conjugate(kind, y) - oracle))
    return "conjugate_sup_oracle", worst <= 1e-4, f"max abs err {worst:.3e} (tol 1e-4)"


def check_fenchel_young() -> tuple[str, bool, str]:
    """f(x) + f*(y) >= x*y on 10^4 random pairs, near-tight at y = f'(x)."""
    rng = StreamRng(103)
    n = 10_000
    x = 0.05 + 19.95 * rng.uniforms(n)
    y = -3.0 + 3.6 * rng.uniforms(n)
    ok = True
    detail = []
    for kind in (DivergenceKind.KLD, DivergenceKind.JSD):
        gap = dv.f_value(kind, x) + dv.f_conjugate(kind, y) - x * y
        violation = float(np.min(gap))
        xs = np.linspace(0.2, 5.0, 64)
        eps = 1e-7
        deriv = (dv.f_value(kind, xs + eps) - dv.f_value(kind, xs - eps)) / (2 * eps)
        tight = float(np.max(np.abs(
            dv.f_value(kind, xs) + dv.f_conjugate(kind, deriv) - xs * deriv)))
        ok = ok and violation >= -1e-9 and tight <= 1e-6
        detail.append(f"{kind.value}: min gap {violation:.2e}, tight gap {tight:.2e}")
    return "fenchel_young", ok, "; ".join(detail)


def check_sym_kl_monte_carlo() -> tuple[str, bool, str]:
    """Closed-form symmetric KL vs Monte-Carlo estimates on 5 random pairs."""
    rng = StreamRng(104)
    worst = 0.0
    for trial in range(5):
        d = 2
        raw_p = rng.normal_matrix(d, d)
        raw_q = rng.normal_matrix(d, d)
        p = wgf.GaussianDist(0.5 * rng.normals(d), raw_p @ raw_p.T / d + 0.8 * np.eye(d))
        q = wgf.GaussianDist(0.5 * rng.normals(d), raw_q @ raw_q.T / d + 0.8 * np.eye(d))
        closed = wgf.sym_kl(p, q)
        mc = wgf.mc_kl(p, q, 400_000, rng.derive(trial)) + \
            wgf.mc_kl(q, p, 400_000, rng.derive(50 + trial))
        worst = max(worst, abs(closed - mc) / abs(closed))
    return "gaussian_symkl_monte_carlo", worst <= 0.02, f"max rel err {worst:.3e} (tol 2%)"


def check_w2_brute_force() -> tuple[str, bool, str]:
    """Assignment solver vs permutation brute force on every n <= 7."""
    worst = 0.0
    for n in range(2, 8):
        rng = StreamRng(700 + n)
        for _ in range(10):
            a = rng.normal_matrix(n, 2)
            b = rng.normal_matrix(n, 2)
            cost = np.sum((a[:, None] - b[None]) ** 2, axis=2)
            brute = min(
                sum(cost[i, p[i]] for i in range(n)) / n
                for p in itertools.permutations(range(n))
            )
            worst = max(worst, abs(metrics.empirical_w2_sq(a, b) - brute))
    return "w2_brute_force", worst <= 1e-12, f"max abs err {worst:.3e} (tol 1e-12)"


def check_single_phase_equivalence() -> tuple[str, bool, str]:
    """One-phase training equals the source-fixed baseline step for step."""
    def make(method):
        cfg = SJKOConfig(phases=1, iters_per_phase=60, step_size=0.5, batch_size=32,
                         lr_transport=1e-3, lr_potential=1e-3, seed=11)
        t_spec = MLPSpec(in_dim=2, hidden_dims=(8,), out_dim=2)
        p_spec = MLPSpec(in_dim=2, hidden_dims=(8,), out_dim=1)
        return Trainer(cfg, lambda n, rng: standard_gaussian(2, n, rng),
                       lambda n, rng: gmm25(n, rng), t_spec, p_spec, method=method)

    a = make("sjko")
    b = make("uotm-source-fixed")
    a.train()
    b.train()
    gaps = [abs(x - y) for x, y in zip(a.trace.loss_potential, b.trace.loss_potential)]
    gaps += [abs(x - y) for x, y in zip(a.trace.loss_transport, b.trace.loss_transport)]
    worst = max(gaps)
    return "single_phase_equals_source_fixed", worst <= 1e-12, \
        f"max per-step gap {worst:.3e} (tol 1e-12)"


ALL_CHECKS = (
    check_gradients,
    check_r1_gradient,
    check_conjugates,
    check_fenchel_young,
    check_sym_kl_monte_carlo,
    check_w2_brute_force,
    check_single_phase_equivalence,
)


def run_selfcheck() -> list[tuple[str, bool, str]]:
    return [check() for check in ALL_CHECKS]
