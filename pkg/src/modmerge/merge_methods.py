"""Per-tensor merge kernels.

Every kernel is a pure function of its inputs: tensors in, a new float32
tensor out. Arithmetic runs in float64 and is rounded once on return.

Methods:
    mod              threshold selection on the min-max normalized first model
    linear           weighted sum of parameters
    task_arithmetic  base plus weighted task vectors
    ties             trim, elect sign, disjoint mean
    dare_ties        random drop and rescale, then elect sign and disjoint mean
    slerp            spherical interpolation of the flattened tensors
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint_io import Tensor

__all__ = [
    "ShapeMismatchError",
    "NormalizedTensor",
    "TaskVector",
    "minmax_normalize",
    "merge_mod",
    "mod_selection_mask",
    "merge_linear",
    "make_task_vector",
    "merge_task_arithmetic",
    "trim_by_density",
    "elect_sign",
    "disjoint_merge",
    "merge_ties",
    "dare_stream_key",
    "dare_sparsify",
    "merge_dare_ties",
    "merge_slerp",
]

SLERP_EPS = 1e-6


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedTensor:
    values: np.ndarray
    source_name: str


@dataclass(frozen=True)
class TaskVector:
    values: np.ndarray
    source_name: str

    def __len__(self) -> int:
        return int(self.values.size)


def _same_shape(name: str, *tensors: Tensor) -> None:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeMismatchError(f"{name}: shape {list(ref)} vs {list(t.shape)}")


def _as64(t: Tensor) -> np.ndarray:
    return t.values.astype(np.float64)


def _check_unit(label: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{label} must lie in [0, 1], got {value}")
    return value


def _check_density(density: float) -> float:
    density = float(density)
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    return density


def _weights(weights: Sequence[float], count: int, normalize: bool) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"expected {count} weights, got {len(w)}")
    if normalize:
        total = w.sum()
        if total == 0:
            raise ValueError("weights sum to zero; cannot normalize")
        w = w / total
    return w


# ---------------------------------------------------------------------------
# MoD

def minmax_normalize(t: Tensor) -> NormalizedTensor:
    """Rescale to [0, 1] by (t - min) / (max - min); a constant tensor maps to zeros."""
    if t.numel == 0:
        raise ValueError(f"{t.name}: cannot normalize an empty tensor")
    v = _as64(t)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return NormalizedTensor(np.zeros_like(v), t.name)
    return NormalizedTensor((v - lo) / (hi - lo), t.name)


def mod_selection_mask(theta1: Tensor, alpha: float) -> np.ndarray:
    """Boolean mask of the elements MoD takes from ``theta1``."""
    alpha = _check_unit("alpha", alpha)
    return minmax_normalize(theta1).values < alpha


def merge_mod(theta1: Tensor, theta2: Tensor, alpha: float) -> Tensor:
    """Take theta1 where its normalized value is strictly below ``alpha``, else theta2.

    The comparison is strict, so ``alpha=1`` still routes the maximum element(s)
    of theta1 to theta2, and ``alpha=0`` returns theta2 unchanged.
    """
    _same_shape(theta1.name, theta1, theta2)
    mask = mod_selection_mask(theta1, alpha)
    return Tensor(theta1.name, np.where(mask, theta1.values, theta2.values))


# ---------------------------------------------------------------------------
# weighted sums

def merge_linear(tensors: Sequence[Tensor], weights: Sequence[float], normalize: bool = False) -> Tensor:
    if not tensors:
        raise ValueError("merge_linear needs at least one tensor")
    _same_shape(tensors[0].name, *tensors)
    w = _weights(weights, len(tensors), normalize)
    acc = np.zeros(tensors[0].shape, dtype=np.float64)
    for wi, t in zip(w, tensors):
        acc += wi * _as64(t)
    return Tensor(tensors[0].name, acc)


def make_task_vector(expert: Tensor, base: Tensor) -> TaskVector:
    _same_shape(base.name, base, expert)
    return TaskVector((_as64(expert) - _as64(base)).reshape(-1), expert.name)


def merge_task_arithmetic(
    base: Tensor,
    experts: Sequence[Tensor],
    weights: Sequence[float],
    normalize: bool = False,
) -> Tensor:
    _same_shape(base.name, base, *experts)
    w = _weights(weights, len(experts), normalize)
    delta = np.zeros(base.numel, dtype=np.float64)
    for wi, e in zip(w, experts):
        delta += wi * make_task_vector(e, base).values
    return Tensor(base.name, _as64(base) + delta.reshape(base.shape))


# ---------------------------------------------------------------------------
# TIES

def trim_by_density(tv: TaskVector, density: float) -> TaskVector:
    """Keep the ceil(density * n) largest-magnitude entries and zero the rest.

    Equal magnitudes at the cutoff go to the lower flat index.
    """
    density = _check_density(density)
    v = tv.values
    n = v.size
    # round first so that e.g. 0.3 * 10 keeps 3, not 4
    k = min(n, math.ceil(round(density * n, 9)))
    if k >= n:
        return TaskVector(v.copy(), tv.source_name)
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    keep = order[:k]
    out[keep] = v[keep]
    return TaskVector(out, tv.source_name)


def _stack(vectors: Sequence[TaskVector], weights: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    if not vectors:
        raise ValueError("need at least one task vector")
    n = len(vectors[0])
    for tv in vectors:
        if len(tv) != n:
            raise ShapeMismatchError(f"{tv.source_name}: length {len(tv)} vs {n}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(vectors),):
        raise ValueError(f"expected {len(vectors)} weights, got {len(w)}")
    return np.stack([tv.values for tv in vectors]), w


def elect_sign(trimmed: Sequence[TaskVector], weights: Sequence[float]) -> np.ndarray:
    """Per element, the sign of the weighted sum; a zero sum elects +1."""
    stacked, w = _stack(trimmed, weights)
    mass = w @ stacked
    return np.where(mass < 0, -1.0, 1.0)


def disjoint_merge(trimmed: Sequence[TaskVector], signs: np.ndarray, weights: Sequence[float]) -> TaskVector:
    """Weighted mean over the nonzero entries whose sign agrees with ``signs``.

    Elements with no agreeing entry (or zero total weight) become 0.
    """
    stacked, w = _stack(trimmed, weights)
    signs = np.asarray(signs, dtype=np.float64)
    if signs.shape != stacked.shape[1:]:
        raise ShapeMismatchError(f"signs length {signs.size} vs {stacked.shape[1]}")
    agree = (stacked != 0) & (np.sign(stacked) == signs)
    wmask = agree * w[:, None]
    num = (wmask * stacked).sum(axis=0)
    den = wmask.sum(axis=0)
    out = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return TaskVector(out, trimmed[0].source_name)


def merge_ties(
    base: Tensor,
    experts: Sequence[Tensor],
    densities: Sequence[float],
    weights: Sequence[float],
    normalize: bool = False,
) -> Tensor:
    _same_shape(base.name, base, *experts)
    if len(densities) != len(experts):
        raise ValueError(f"expected {len(experts)} densities, got {len(densities)}")
    w = np.asarray(weights, dtype=np.float64)
    if normalize and w.sum() != 0:
        w = w / w.sum()
    trimmed = [trim_by_density(make_task_vector(e, base), d) for e, d in zip(experts, densities)]
    signs = elect_sign(trimmed, w)
    merged = disjoint_merge(trimmed, signs, w)
    return Tensor(base.name, _as64(base) + merged.values.reshape(base.shape))


# ---------------------------------------------------------------------------
# DARE

def dare_stream_key(seed: int, name: str, stream: int = 0) -> int:
    """Stable 64-bit key for the random stream of one tensor (and one expert).

    BLAKE2b-64 over ``"<seed>\\x00<name>\\x00<stream>"``, read little-endian.
    """
    msg = f"{int(seed)}\x00{name}\x00{int(stream)}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")


def dare_sparsify(tv: TaskVector, density: float, seed: int, stream: int = 0) -> TaskVector:
    """Drop each entry with probability 1 - density and rescale survivors by 1/density.

    Entry i survives when the i-th draw of ``numpy.random.PCG64(key).random()``
    is below ``density``, with ``key = dare_stream_key(seed, tv.source_name, stream)``.
    The result therefore does not depend on which tensors are merged first.
    """
    density = _check_density(density)
    rng = np.random.Generator(np.random.PCG64(dare_stream_key(seed, tv.source_name, stream)))
    keep = rng.random(tv.values.size) < density
    return TaskVector(np.where(keep, tv.values / density, 0.0), tv.source_name)


def merge_dare_ties(
    base: Tensor,
    experts: Sequence[Tensor],
    densities: Sequence[float],
    weights: Sequence[float],
    seed: int = 0,
) -> Tensor:
    """DARE each task vector (expert k uses stream k), then elect sign and disjoint-merge."""
    _same_shape(base.name, base, *experts)
    if len(densities) != len(experts):
        raise ValueError(f"expected {len(experts)} densities, got {len(densities)}")
    sparse = []
    for k, (e, d) in enumerate(zip(experts, densities)):
        tv = make_task_vector(e, base)
        sparse.append(dare_sparsify(TaskVector(tv.values, base.name), d, seed, stream=k))
    signs = elect_sign(sparse, weights)
    merged = disjoint_merge(sparse, signs, weights)
    return Tensor(base.name, _as64(base) + merged.values.reshape(base.shape))


# ---------------------------------------------------------------------------
# SLERP

def merge_slerp(theta1: Tensor, theta2: Tensor, t: float) -> Tensor:
    """Spherical interpolation; falls back to lerp for (anti)parallel or zero inputs."""
    _same_shape(theta1.name, theta1, theta2)
    t = _check_unit("t", t)
    a, b = _as64(theta1), _as64(theta2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return Tensor(theta1.name, (1 - t) * a + t * b)
    cos = float(np.clip(np.dot(a.ravel() / na, b.ravel() / nb), -1.0, 1.0))
    omega = math.acos(cos)
    sin_omega = math.sin(omega)
    if sin_omega < SLERP_EPS:
        return Tensor(theta1.name, (1 - t) * a + t * b)
    c1 = math.sin((1 - t) * omega) / sin_omega
    c2 = math.sin(t * omega) / sin_omega
    return Tensor(theta1.name, c1 * a + c2 * b)
