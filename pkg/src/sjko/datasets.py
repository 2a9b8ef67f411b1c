"""Seeded samplers for the source Gaussian and the 2D synthetic targets.

Every sampler draws from a :class:`~sjko.rng.StreamRng` in a documented,
fixed order, so a (spec, seed) pair reproduces the same cloud on any
platform.  Clouds serialize to CSV with header ``x0,...,x{d-1}`` and one
point per row at full double precision (17 significant digits).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import StreamRng

TWO_CIRCLES_RADII = (4.0, 8.0)
TWO_CIRCLES_NOISE = 0.2
GMM25_NOISE = 0.005

# 5x5 grid of component centers: {-6, -3, 0, 3, 6}^2, row-major in (i, j)
GMM25_CENTERS = np.array(
    [(3.0 * i, 3.0 * j) for i in range(-2, 3) for j in range(-2, 3)]
)


def format_float(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class ParticleCloud:
    """A batch of d-dimensional samples with provenance metadata."""

    points: np.ndarray
    origin: str = ""
    time_tag: float | None = None
    seed: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("points must be a nonempty (n, d) matrix")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite points")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def save_csv(self, path) -> None:
        d = self.dim
        lines = [",".join(f"x{j}" for j in range(d))]
        for row in self.points:
            lines.append(",".join(format_float(v) for v in row))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def load_cloud_csv(path, origin: str = "") -> ParticleCloud:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: empty file")
        cols = header.split(",")
        if cols != [f"x{j}" for j in range(len(cols))]:
            raise ValueError(f"{path}: expected header x0,...,x{{d-1}}, got {header!r}")
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise ValueError(f"{path}:{line_no}: expected {len(cols)} columns")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return ParticleCloud(np.array(rows), origin=origin)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def standard_gaussian(d: int, n: int, rng: StreamRng) -> np.ndarray:
    """n i.i.d. N(0, I_d) rows; consumes n*d Box-Muller normals."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    return rng.normal_matrix(n, d)


def gaussian(mean: np.ndarray, cov_chol: np.ndarray, n: int, rng: StreamRng) -> np.ndarray:
    """n rows from N(mean, L L^T) given the lower Cholesky factor L."""
    d = mean.shape[0]
    z = rng.normal_matrix(n, d)
    return mean + z @ cov_chol.T


def two_circles(n: int, rng: StreamRng) -> np.ndarray:
    """Equal-mass mixture of two noisy rings of radius 4 and 8.

    Draw order per call: n circle choices, n angles, then 2n noise normals.
    The inner/outer choice is 50/50 per point.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pick = rng.uniforms(n)
    radius = np.where(pick < 0.5, TWO_CIRCLES_RADII[0], TWO_CIRCLES_RADII[1])
    theta = 2.0 * np.pi * rng.uniforms(n)
    base = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return base + TWO_CIRCLES_NOISE * rng.normal_matrix(n, 2)


def gmm25(n: int, rng: StreamRng) -> np.ndarray:
    """Uniform mixture over the 25 grid centers with 0.005-scale noise.

    Draw order per call: n center indices, then 2n noise normals.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = rng.integers(n, 25)
    return GMM25_CENTERS[idx] + GMM25_NOISE * rng.normal_matrix(n, 2)


def sample_standard_gaussian(d: int, n: int, rng: StreamRng, seed: int | None = None) -> ParticleCloud:
    return ParticleCloud(standard_gaussian(d, n, rng), origin="standard_gaussian", seed=seed)


def sample_two_circles(n: int, rng: StreamRng, seed: int | None = None) -> ParticleCloud:
    return ParticleCloud(two_circles(n, rng), origin="two_circles", seed=seed)


def sample_gmm25(n: int, rng: StreamRng, seed: int | None = None) -> ParticleCloud:
    return ParticleCloud(gmm25(n, rng), origin="gmm25", seed=seed)


def sample_gaussian(mean: np.ndarray, cov: np.ndarray, n: int, rng: StreamRng,
                    seed: int | None = None) -> ParticleCloud:
    chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    pts = gaussian(np.asarray(mean, dtype=np.float64), chol, n, rng)
    return ParticleCloud(pts, origin="gaussian", seed=seed)


@dataclass(frozen=True)
class SamplerSpec:
    """Which distribution to draw from, with its fixed parameters.

    kind: "standard_gaussian" | "two_circles" | "gmm25" | "gaussian"
    """

    kind: str
    dim: int = 2
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("standard_gaussian", "two_circles", "gmm25", "gaussian"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "gaussian" and (self.mean is None or self.cov is None):
            raise ValueError("gaussian sampler needs mean and cov")


def make_sampler(spec: SamplerSpec):
    """Return draw(n, rng) -> (n, d) array for the given spec."""
    if spec.kind == "standard_gaussian":
        d = spec.dim
        return lambda n, rng: standard_gaussian(d, n, rng)
    if spec.kind == "two_circles":
        return lambda n, rng: two_circles(n, rng)
    if spec.kind == "gmm25":
        return lambda n, rng: gmm25(n, rng)
    mean = np.asarray(spec.mean, dtype=np.float64)
    chol = np.linalg.cholesky(np.asarray(spec.cov, dtype=np.float64))
    return lambda n, rng: gaussian(mean, chol, n, rng)


class Sampler:
    """A sampler bound to its own seeded stream; each draw advances the state."""

    def __init__(self, spec: SamplerSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self._rng = StreamRng(seed)
        self._draw = make_sampler(spec)

    def draw(self, n: int) -> np.ndarray:
        return self._draw(n, self._rng)
