"""Ground-truth gradient flow for the Ornstein-Uhlenbeck case.

For the linear SDE ``dX = -A (X - b) dt + sqrt(2) dW`` with symmetric
positive-definite A and Gaussian initial law N(m0, S0), the marginal law at
time t stays Gaussian with

    m_t = b + e^{-A t} (m0 - b)
    S_t = e^{-A t} S0 e^{-A t} + A^{-1} (I - e^{-2 A t})

and converges to the stationary law N(b, A^{-1}).  This is the reference
flow the trainers are measured against; its correctness is cross-checked
in-repo by the Euler-Maruyama particle oracle rather than assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import ParticleCloud
from .rng import StreamRng

_SYM_TOL = 1e-10
_EIG_FLOOR = 1e-10


def _check_spd(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{what} must be square")
    if np.max(np.abs(mat - mat.T)) > _SYM_TOL:
        raise ValueError(f"{what} is not symmetric to {_SYM_TOL}")
    if np.min(np.linalg.eigvalsh(mat)) <= 0.0:
        raise ValueError(f"{what} is not positive definite")
    return mat


@dataclass(frozen=True)
class GaussianDist:
    """Mean vector and SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = _check_spd(self.cov, "covariance")
        if mean.ndim != 1 or mean.shape[0] != cov.shape[0]:
            raise ValueError("mean / covariance dimensions disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class OUProcessSpec:
    """Drift matrix A (SPD), anchor b, and the initial Gaussian law.

    The stationary distribution is N(b, A^{-1}).
    """

    drift: np.ndarray
    anchor: np.ndarray
    initial: GaussianDist

    def __post_init__(self):
        drift = _check_spd(self.drift, "drift matrix")
        anchor = np.asarray(self.anchor, dtype=np.float64)
        if anchor.shape != (drift.shape[0],) or self.initial.dim != drift.shape[0]:
            raise ValueError("drift / anchor / initial dimensions disagree")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "anchor", anchor)

    @property
    def dim(self) -> int:
        return self.anchor.shape[0]

    def stationary(self) -> GaussianDist:
        return GaussianDist(self.anchor, np.linalg.inv(self.drift))


def ou_analytic(spec: OUProcessSpec, t: float) -> GaussianDist:
    """Closed-form marginal law at time t >= 0, via symmetric eigendecomposition."""
    if t < 0.0:
        raise ValueError("t must be >= 0")
    lam, q = np.linalg.eigh(spec.drift)
    decay = np.exp(-lam * t)                     # e^{-lambda t}
    m0 = spec.initial.mean
    s0 = spec.initial.cov
    mean = spec.anchor + q @ (decay * (q.T @ (m0 - spec.anchor)))
    s0_rot = q.T @ s0 @ q
    cov_rot = (decay[:, None] * s0_rot * decay[None, :]) + np.diag((1.0 - decay ** 2) / lam)
    cov = q @ cov_rot @ q.T
    cov = 0.5 * (cov + cov.T)
    return GaussianDist(mean, cov)


def em_simulate(spec: OUProcessSpec, n_particles: int, dt: float, t_end: float,
                rng: StreamRng) -> ParticleCloud:
    """Euler-Maruyama particles for the OU SDE.

    Steps have size dt; the final step is truncated so the trajectory lands
    exactly on t_end.  With t_end = 0 the initial particles are returned.
    """
    if dt <= 0.0 or t_end < 0.0:
        raise ValueError("need dt > 0 and t_end >= 0")
    d = spec.dim
    chol0 = np.linalg.cholesky(spec.initial.cov)
    x = spec.initial.mean + rng.normal_matrix(n_particles, d) @ chol0.T
    remaining = t_end
    a = spec.drift
    b = spec.anchor
    while remaining > 1e-15:
        step = min(dt, remaining)
        noise = rng.normal_matrix(n_particles, d)
        x = x - (x - b) @ a.T * step + math.sqrt(2.0 * step) * noise
        remaining -= step
    return ParticleCloud(x, origin="em", time_tag=t_end)


def fit_gaussian(cloud: ParticleCloud | np.ndarray) -> GaussianDist:
    """Sample mean and unbiased sample covariance, symmetrized and eigenvalue-floored.

    Degenerate clouds (identical points) yield the floored covariance rather
    than an error.
    """
    points = cloud.points if isinstance(cloud, ParticleCloud) else np.asarray(cloud, dtype=np.float64)
    n, d = points.shape
    if n <= d:
        raise ValueError(f"need more samples than dimensions (n={n}, d={d})")
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    lam, q = np.linalg.eigh(cov)
    lam = np.maximum(lam, _EIG_FLOOR)
    cov = q @ (lam[:, None] * q.T)
    cov = 0.5 * (cov + cov.T)
    return GaussianDist(mean, cov)


def sym_kl(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p||q) + KL(q||p) in the closed Gaussian form.

    The log-determinant terms cancel in the sum:
    0.5*tr(Sq^-1 Sp + Sp^-1 Sq) - d + 0.5*(mp-mq)^T (Sp^-1 + Sq^-1) (mp-mq).
    """
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    dm = p.mean - q.mean
    tr_qp = float(np.trace(np.linalg.solve(q.cov, p.cov)))
    tr_pq = float(np.trace(np.linalg.solve(p.cov, q.cov)))
    quad = float(dm @ (np.linalg.solve(p.cov, dm) + np.linalg.solve(q.cov, dm)))
    return 0.5 * (tr_qp + tr_pq) - d + 0.5 * quad


def gaussian_log_density(dist: GaussianDist, points: np.ndarray) -> np.ndarray:
    """Row-wise log N(mean, cov) density."""
    d = dist.dim
    chol = np.linalg.cholesky(dist.cov)
    diff = np.asarray(points, dtype=np.float64) - dist.mean
    sol = np.linalg.solve(chol, diff.T)
    quad = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (quad + logdet + d * math.log(2.0 * math.pi))


def mc_kl(p: GaussianDist, q: GaussianDist, n: int, rng: StreamRng) -> float:
    """Monte-Carlo KL(p||q) estimate; the independent cross-check for sym_kl."""
    chol = np.linalg.cholesky(p.cov)
    x = p.mean + rng.normal_matrix(n, p.dim) @ chol.T
    return float(np.mean(gaussian_log_density(p, x) - gaussian_log_density(q, x)))


def random_ou_process(d: int, seed: int) -> OUProcessSpec:
    """Reproducible benchmark instance.

    The drift is Q diag(lam) Q^T with Q from a seeded orthogonal draw and
    eigenvalues uniform in [0.5, 2]; the anchor is uniform in [-1, 1]^d; the
    initial law is N(0, 4 I).
    """
    rng = StreamRng(seed, stream=0xA0)
    lam = 0.5 + 1.5 * rng.uniforms(d)
    raw = rng.normal_matrix(d, d)
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix the sign convention so Q is deterministic
    drift = q @ (lam[:, None] * q.T)
    drift = 0.5 * (drift + drift.T)
    anchor = -1.0 + 2.0 * rng.uniforms(d)
    initial = GaussianDist(np.zeros(d), 4.0 * np.eye(d))
    return OUProcessSpec(drift=drift, anchor=anchor, initial=initial)
