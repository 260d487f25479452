"""Univariate Gaussian toys for comparing mixture merging with parameter averaging.

A two-component ``MixtureDensity`` with weights ``[alpha, 1 - alpha]`` keeps a
peak at each source mean. The parameter average ``alpha*x1 + (1-alpha)*x2`` of
independent Gaussians is again a single Gaussian, so its only peak sits between
the sources.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

__all__ = [
    "GaussianComponent",
    "MixtureDensity",
    "QuantileQuery",
    "normal_pdf",
    "normal_cdf",
    "mixture_pdf",
    "mixture_cdf",
    "quantile",
    "solve_quantile",
    "parameter_average_density",
    "find_local_maxima",
    "emit_density_profile",
    "grid",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
BRACKET_SIGMAS = 10.0
TERNARY_ITERS = 30


@dataclass(frozen=True)
class GaussianComponent:
    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError(f"component parameters must be finite: mu={self.mu}, sigma={self.sigma}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def pdf(self, x: float) -> float:
        return normal_pdf(x, self.mu, self.sigma)

    def cdf(self, x: float) -> float:
        return normal_cdf(x, self.mu, self.sigma)


@dataclass(frozen=True)
class MixtureDensity:
    components: tuple[GaussianComponent, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.components:
            raise ValueError("a mixture needs at least one component")
        if len(self.weights) != len(self.components):
            raise ValueError(f"{len(self.components)} components but {len(self.weights)} weights")
        if any(w < 0 for w in self.weights):
            raise ValueError(f"mixture weights must be nonnegative: {self.weights}")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {math.fsum(self.weights)!r}")

    @classmethod
    def single(cls, component: GaussianComponent) -> "MixtureDensity":
        return cls((component,), (1.0,))

    @classmethod
    def pair(cls, c1: GaussianComponent, c2: GaussianComponent, alpha: float) -> "MixtureDensity":
        """``alpha * p1 + (1 - alpha) * p2``."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return cls((c1, c2), (alpha, 1.0 - alpha))

    def bracket(self) -> tuple[float, float]:
        s = max(c.sigma for c in self.components)
        lo = min(c.mu for c in self.components) - BRACKET_SIGMAS * s
        hi = max(c.mu for c in self.components) + BRACKET_SIGMAS * s
        return lo, hi

    def pdf(self, x: float) -> float:
        return mixture_pdf(self, x)

    def cdf(self, x: float) -> float:
        return mixture_cdf(self, x)


@dataclass(frozen=True)
class QuantileQuery:
    p: float
    tol: float
    theta_specific: float


def normal_pdf(x: float, mu: float = 0.0, sigma: float = 1.0) -> float:
    z = (x - mu) / sigma
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z) / sigma


def normal_cdf(x: float, mu: float = 0.0, sigma: float = 1.0) -> float:
    # erfc keeps precision in the lower tail where 1 + erf(z) cancels
    return 0.5 * math.erfc(-(x - mu) / (sigma * _SQRT2))


def mixture_pdf(m: MixtureDensity, x: float) -> float:
    return math.fsum(w * c.pdf(x) for w, c in zip(m.weights, m.components))


def mixture_cdf(m: MixtureDensity, x: float) -> float:
    return math.fsum(w * c.cdf(x) for w, c in zip(m.weights, m.components))


def solve_quantile(m: MixtureDensity, p: float, tol: float = 1e-10, xtol: float = 1e-10) -> QuantileQuery:
    """Invert the mixture CDF by bisection on ``m.bracket()``.

    Stops once ``|cdf(x) - p| <= tol`` and the bracket is narrower than
    ``xtol``, or when the bracket can no longer shrink. The width test matters
    in the tails, where a flat CDF meets ``tol`` far from the true quantile.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if tol <= 0 or xtol <= 0:
        raise ValueError(f"tolerances must be positive, got tol={tol}, xtol={xtol}")
    lo, hi = m.bracket()
    while True:
        mid = 0.5 * (lo + hi)
        err = mixture_cdf(m, mid) - p
        if (abs(err) <= tol and hi - lo <= xtol) or mid in (lo, hi):
            break
        if err < 0:
            lo = mid
        else:
            hi = mid
    return QuantileQuery(p, tol, mid)


def quantile(m: MixtureDensity, p: float, tol: float = 1e-10) -> float:
    return solve_quantile(m, p, tol).theta_specific


def parameter_average_density(c1: GaussianComponent, c2: GaussianComponent, alpha: float) -> GaussianComponent:
    """Law of ``alpha*x1 + (1-alpha)*x2`` for independent x1 ~ c1, x2 ~ c2."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return c1
    if alpha == 0.0:
        return c2
    mu = alpha * c1.mu + (1 - alpha) * c2.mu
    var = (alpha * c1.sigma) ** 2 + ((1 - alpha) * c2.sigma) ** 2
    return GaussianComponent(mu, math.sqrt(var))


def grid(lo: float, hi: float, step: float) -> list[float]:
    """``lo + i*step`` for i = 0 .. floor((hi - lo)/step), computed by index."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    # tolerate representation error such as (1.0 - 0.0) / 0.1 = 9.999999999999998
    n = math.floor((hi - lo) / step + 1e-9)
    return [lo + i * step for i in range(n + 1)]


def _ternary_max(f: Callable[[float], float], a: float, b: float) -> float:
    for _ in range(TERNARY_ITERS):
        m1 = a + (b - a) / 3
        m2 = b - (b - a) / 3
        if f(m1) < f(m2):
            a = m1
        else:
            b = m2
    return 0.5 * (a + b)


def find_local_maxima(
    density: Callable[[float], float] | MixtureDensity | GaussianComponent,
    lo: float,
    hi: float,
    step: float,
) -> list[float]:
    """Grid points strictly above both neighbours, each refined by ternary search.

    Only interior grid points can qualify. Refinement assumes the density is
    unimodal within ``[x - step, x + step]``, so for Gaussian sources ``step``
    must be below a tenth of the narrowest sigma. Plain callables are not
    checked.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if isinstance(density, (MixtureDensity, GaussianComponent)):
        comps = density.components if isinstance(density, MixtureDensity) else (density,)
        sigma_min = min(c.sigma for c in comps)
        if step >= sigma_min / 10:
            raise ValueError(f"step {step} must be below sigma_min/10 = {sigma_min / 10}")
        density = _as_density(density)
    xs = grid(lo, hi, step)
    if len(xs) < 3:
        raise ValueError(f"grid over [{lo}, {hi}] with step {step} has no interior points")
    ys = [density(x) for x in xs]
    peaks = []
    for i in range(1, len(xs) - 1):
        if ys[i] > ys[i - 1] and ys[i] > ys[i + 1]:
            peaks.append(_ternary_max(density, xs[i] - step, xs[i] + step))
    return peaks


def _as_density(source: MixtureDensity | GaussianComponent) -> Callable[[float], float]:
    if isinstance(source, MixtureDensity):
        return source.pdf
    if isinstance(source, GaussianComponent):
        return source.pdf
    raise TypeError(f"expected MixtureDensity or GaussianComponent, got {type(source).__name__}")


def emit_density_profile(
    source: MixtureDensity | GaussianComponent,
    lo: float,
    hi: float,
    step: float,
    destination: str | os.PathLike,
) -> list[tuple[float, float]]:
    """Write ``x,density`` rows over the grid to a CSV file and return them.

    Numbers use 17 significant digits so the text round-trips to the same floats.
    """
    pdf = _as_density(source)
    rows = [(x, pdf(x)) for x in grid(lo, hi, step)]
    path = Path(destination)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "density"])
        for x, y in rows:
            writer.writerow([_fmt(x), _fmt(y)])
    return rows


def _fmt(value: float) -> str:
    return format(value, ".17g")


def mixture_from_pairs(pairs: Sequence[tuple[float, float]], weights: Sequence[float]) -> MixtureDensity:
    return MixtureDensity(tuple(GaussianComponent(mu, s) for mu, s in pairs), tuple(weights))
