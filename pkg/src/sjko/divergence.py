"""f-divergence generators, convex conjugates, and their reflections.

For a generator f (convex, differentiable on its domain, nonnegative,
f(1) = 0) the convex conjugate is ``f*(y) = sup_x (x*y - f(x))`` and the
reflected form is ``f_circ(x) = -f*(-x)``, the shape in which the conjugate
enters semi-dual objectives.  Three families are provided:

- KLD:       f(x) = x*log(x) - x + 1,   f*(y) = e^y - 1,        f_circ(y) = 1 - e^(-y)
- JSD:       f(x) = x*log(x) - (1+x)*log((1+x)/2),
             f*(y) = -log(2 - e^y) for y < log 2 (else +inf),
             f_circ(y) = log(2 - e^(-y)) for y > -log 2 (else -inf)
- INDICATOR: the hard marginal constraint; f* and f_circ are both the identity,
             which is what pins a marginal exactly in the unbalanced problem.

The KLD generator includes the ``- x + 1`` affine part so that f >= 0 with
equality only at 1; the conjugate is then finite everywhere, so KLD losses
never hit an infinite region.  JSD losses avoid the conjugate's boundary
entirely by training a logit-reparametrized potential with the softplus
identities below.

All functions accept floats or ndarrays; infinities are returned as IEEE
sentinels rather than raised.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

LOG2 = math.log(2.0)


class DivergenceKind(str, enum.Enum):
    KLD = "kld"
    JSD = "jsd"
    INDICATOR = "indicator"


def _kindof(kind) -> DivergenceKind:
    return DivergenceKind(kind)


def f_value(kind, x):
    """Generator f evaluated on x > 0.

    Limits at the boundary (not evaluated): KLD f(0+) = 1, JSD f(0+) = log 2.
    """
    kind = _kindof(kind)
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("generator domain is x > 0")
    if kind is DivergenceKind.KLD:
        out = arr * np.log(arr) - arr + 1.0
    elif kind is DivergenceKind.JSD:
        out = arr * np.log(arr) - (1.0 + arr) * np.log((1.0 + arr) / 2.0)
    else:
        out = np.where(arr == 1.0, 0.0, np.inf)
    return out if isinstance(x, np.ndarray) else float(out)


def f_conjugate(kind, y):
    """Convex conjugate f*(y); +inf where the supremum diverges."""
    kind = _kindof(kind)
    arr = np.asarray(y, dtype=np.float64)
    if kind is DivergenceKind.KLD:
        out = np.exp(arr) - 1.0
    elif kind is DivergenceKind.JSD:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(arr < LOG2, -np.log(2.0 - np.exp(np.minimum(arr, LOG2))), np.inf)
    else:
        out = arr.copy()
    return out if isinstance(y, np.ndarray) else float(out)


def f_circ(kind, y):
    """Reflected conjugate -f*(-y); -inf where the conjugate diverges."""
    kind = _kindof(kind)
    arr = np.asarray(y, dtype=np.float64)
    if kind is DivergenceKind.KLD:
        out = 1.0 - np.exp(-arr)
    elif kind is DivergenceKind.JSD:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(arr > -LOG2, np.log(2.0 - np.exp(np.minimum(-arr, LOG2))), -np.inf)
    else:
        out = arr.copy()
    return out if isinstance(y, np.ndarray) else float(out)


def conjugate_domain_sup(kind) -> float:
    """Supremum of the conjugate's finite domain (log 2 for JSD, else +inf)."""
    return LOG2 if _kindof(kind) is DivergenceKind.JSD else np.inf


def softplus(x):
    """log(1 + e^x), overflow-safe for the whole double range."""
    out = np.logaddexp(0.0, np.asarray(x, dtype=np.float64))
    return out if isinstance(x, np.ndarray) else float(out)


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return out if isinstance(x, np.ndarray) else float(out)


@dataclass(frozen=True)
class FDivergence:
    """A divergence family bound to its generator, conjugate, and reflection."""

    kind: DivergenceKind

    def f(self, x):
        return f_value(self.kind, x)

    def conjugate(self, y):
        return f_conjugate(self.kind, y)

    def circ(self, y):
        return f_circ(self.kind, y)

    @property
    def conjugate_domain_sup(self) -> float:
        return conjugate_domain_sup(self.kind)


def brute_force_conjugate(kind, y: float, x_max: float = 50.0, step: float = 1e-4) -> float:
    """Grid supremum of x*y - f(x) over x in (0, x_max]; independent oracle for f*."""
    xs = np.arange(step, x_max + step, step)
    return float(np.max(xs * y - f_value(kind, xs)))
