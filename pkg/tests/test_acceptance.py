"""Exit criteria. Each test is one criterion; the terminal summary prints PASS/FAIL per test."""

import hashlib
import math
import time

import numpy as np
import pytest

from conftest import CONFIG_DIR, TOY_NAMES
from modmerge.checkpoint_io import Tensor, open_checkpoint, read_tensor, write_checkpoint
from modmerge.cli import main
from modmerge.config import ModelSpec, ParamRule, load_config
from modmerge.density_lab import (
    GaussianComponent,
    MixtureDensity,
    find_local_maxima,
    mixture_cdf,
    mixture_pdf,
    parameter_average_density,
    quantile,
)
from modmerge.merge_methods import (
    TaskVector,
    dare_sparsify,
    disjoint_merge,
    merge_linear,
    merge_mod,
    merge_slerp,
    merge_task_arithmetic,
    merge_ties,
    minmax_normalize,
)

ALPHAS = (0.0, 0.25, 0.5, 0.9, 1.0)


def random_pairs(count=100, seed=2024):
    rng = np.random.default_rng(seed)
    for i in range(count):
        shape = tuple(int(d) for d in rng.integers(1, 65, size=int(rng.integers(1, 3))))
        a = rng.uniform(-1, 1, size=shape).astype(np.float32)
        b = rng.uniform(-1, 1, size=shape).astype(np.float32)
        yield Tensor(f"p{i}", a), Tensor(f"p{i}", b)


def brute_force_mod(t1, t2, alpha):
    """Element-by-element threshold selection in plain Python floats."""
    x1 = [float(v) for v in t1.values.ravel()]
    x2 = [float(v) for v in t2.values.ravel()]
    lo, hi = min(x1), max(x1)
    out = []
    for a, b in zip(x1, x2):
        norm = 0.0 if hi == lo else (a - lo) / (hi - lo)
        out.append(a if norm < alpha else b)
    return np.array(out, dtype=np.float32).reshape(t1.shape)


def ulp_distance(a, b):
    ia = a.astype(np.float32).view(np.int32).astype(np.int64)
    ib = b.astype(np.float32).view(np.int32).astype(np.int64)
    # map sign-magnitude to a monotone integer line so -0 and +0 coincide
    ia = np.where(ia < 0, np.int64(-(2**31)) - ia, ia)
    ib = np.where(ib < 0, np.int64(-(2**31)) - ib, ib)
    return np.abs(ia - ib)


def test_ac01_mod_matches_brute_force_oracle():
    pairs = list(random_pairs())
    expected = {(i, al): brute_force_mod(t1, t2, al) for i, (t1, t2) in enumerate(pairs) for al in ALPHAS}
    start = time.perf_counter()
    got = {(i, al): merge_mod(t1, t2, al).values for i, (t1, t2) in enumerate(pairs) for al in ALPHAS}
    elapsed = time.perf_counter() - start
    for key, ref in expected.items():
        assert got[key].dtype == np.float32
        assert got[key].tobytes() == ref.tobytes(), key
    assert elapsed < 5.0


def test_ac02_mod_selection_property():
    for t1, t2 in random_pairs(seed=7):
        fractions = []
        for al in ALPHAS:
            out = merge_mod(t1, t2, al).values
            assert np.all((out == t1.values) | (out == t2.values))
            norm = minmax_normalize(t1).values
            fractions.append(np.count_nonzero(norm < al) / norm.size)
        assert fractions == sorted(fractions)
        assert all(0.0 <= f <= 1.0 for f in fractions)


def test_ac03_endpoint_identities():
    for t1, t2 in random_pairs(count=20, seed=3):
        base = Tensor(t1.name, (t1.values + t2.values) / 2)
        cases = [
            (merge_linear([t1, t2], [1.0, 0.0]), t1),
            (merge_task_arithmetic(base, [t1, t2], [0.0, 0.0]), base),
            (merge_slerp(t1, t2, 0.0), t1),
            (merge_slerp(t1, t2, 1.0), t2),
        ]
        for got, want in cases:
            assert got.values.dtype == np.float32
            assert ulp_distance(got.values, want.values).max() == 0


def test_ac04_ties_hand_examples():
    out = merge_ties(Tensor("w", [0, 0, 0, 0]), [Tensor("w", [3, -1, 0.5, -2])], [0.5], [1.0])
    assert out.values.tolist() == [3.0, 0.0, 0.0, -2.0]
    trimmed = [TaskVector(np.array([2.0, -4.0]), "w"), TaskVector(np.array([4.0, 2.0]), "w")]
    assert disjoint_merge(trimmed, np.array([1.0, 1.0]), [1.0, 1.0]).values.tolist() == [3.0, 2.0]


def test_ac05_dare_unbiased_and_deterministic():
    draws = np.array([dare_sparsify(TaskVector(np.array([4.0]), "x"), 0.5, s).values[0] for s in range(10_000)])
    assert abs(draws.mean() - 4.0) <= 0.02 * 4.0
    tv = TaskVector(np.linspace(-1, 1, 257), "model.layers.0.mlp.up_proj.weight")
    a = dare_sparsify(tv, 0.5, 99).values
    b = dare_sparsify(tv, 0.5, 99).values
    assert a.tobytes() == b.tobytes()


def test_ac06_slerp_quarter_circle_and_fallback():
    out = merge_slerp(Tensor("w", [1, 0]), Tensor("w", [0, 1]), 0.5).values
    assert np.max(np.abs(out - math.sqrt(2) / 2)) <= 1e-6
    a = Tensor("w", [0.5, -1.5, 2.0])
    b = Tensor("w", a.values * 2)
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        lerp = Tensor("w", (1 - t) * a.values.astype(np.float64) + t * b.values.astype(np.float64))
        assert merge_slerp(a, b, t).values.tobytes() == lerp.values.tobytes()


def test_ac07_density_lab_quantitative():
    std = MixtureDensity.single(GaussianComponent(0, 1))
    assert abs(mixture_pdf(std, 0.0) - 0.39894228) <= 1e-8
    assert abs(quantile(std, 0.975, 1e-10) - 1.959964) <= 1e-4

    mixtures = [
        std,
        MixtureDensity.pair(GaussianComponent(0, 1), GaussianComponent(5, 1), 0.9),
        MixtureDensity(
            (GaussianComponent(-2, 0.5), GaussianComponent(1, 2), GaussianComponent(4, 1)),
            (0.2, 0.5, 0.3),
        ),
    ]
    for m in mixtures:
        lo, hi = m.bracket()
        xs = np.arange(lo, hi + 5e-4, 1e-3)
        ys = np.array([mixture_pdf(m, x) for x in xs])
        assert abs(float(np.sum((ys[1:] + ys[:-1]) * 0.5 * np.diff(xs))) - 1.0) <= 1e-6
        for x in np.linspace(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo), 41):
            assert abs(quantile(m, mixture_cdf(m, x), 1e-10) - x) <= 1e-6


def test_ac08_figures_peak_preservation():
    start = time.perf_counter()
    c1, c2 = GaussianComponent(0, 1), GaussianComponent(5, 1)
    mix = find_local_maxima(MixtureDensity.pair(c1, c2, 0.9), -5, 10, 0.01)
    avg_component = parameter_average_density(c1, c2, 0.9)
    avg = find_local_maxima(avg_component, -5, 10, 0.01)
    elapsed = time.perf_counter() - start
    assert len(mix) == 2
    assert abs(mix[0] - 0) <= 0.05 and abs(mix[1] - 5) <= 0.05
    assert len(avg) == 1
    # the averaged peak sits strictly between the sources, not at either mode
    assert 0.05 < avg[0] < 4.95
    assert elapsed < 2.0


def test_ac09_reference_configs():
    instruct, math_model = "Qwen/Qwen2.5-1.5B-Instruct", "Qwen/Qwen2.5-Math-1.5B-Instruct"
    mod = load_config(CONFIG_DIR / "mod.yaml")
    assert (mod.merge_method, mod.weights, [m.source for m in mod.models]) == ("mod", [0.9, 0.1], [instruct, math_model])
    linear = load_config(CONFIG_DIR / "linear.yaml")
    assert linear.merge_method == "linear" and [m.weight for m in linear.models] == [0.9, 0.1]
    for name in ("dare_ties", "ties"):
        cfg = load_config(CONFIG_DIR / f"{name}.yaml")
        assert cfg.merge_method == name and cfg.base_model == instruct
        assert cfg.task_models() == [ModelSpec(math_model, weight=0.1, density=0.9)]
    ta = load_config(CONFIG_DIR / "task_arithmetic.yaml")
    assert ta.merge_method == "task_arithmetic" and ta.normalize is True
    assert [m.weight for m in ta.models] == [0.9, 0.1]
    slerp = load_config(CONFIG_DIR / "slerp.yaml")
    assert slerp.merge_method == "slerp"
    assert [s.layer_range for s in slerp.slices[0]] == [(0, 28), (0, 28)]
    assert slerp.t_rules == [ParamRule(0.1, "self_attn"), ParamRule(0.1, "mlp"), ParamRule(0.1)]


@pytest.mark.parametrize("method", ["mod", "dare_ties"])
def test_ac10_end_to_end_determinism(tmp_path, toy_models, method):
    text = (CONFIG_DIR / f"{method}.yaml").read_text()
    text = text.replace("Qwen/Qwen2.5-1.5B-Instruct", "a.safetensors").replace("Qwen/Qwen2.5-Math-1.5B-Instruct", "b.safetensors")
    text = text.replace("density: 0.9", "density: 0.5")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(text)
    digests = set()
    for run, threads in enumerate((1, 1, 4, 4)):
        out = tmp_path / f"out{run}.safetensors"
        assert main(["merge", str(cfg), "--base-dir", str(tmp_path), "--out", str(out), "--threads", str(threads)]) == 0
        digests.add(hashlib.sha256(out.read_bytes()).hexdigest())
    assert len(digests) == 1

    rng = np.random.default_rng(0)
    tensors = [Tensor(n, rng.uniform(-1, 1, size=(8, 8))) for n in TOY_NAMES]
    p = tmp_path / "rt.safetensors"
    write_checkpoint(p, tensors, "F32")
    idx = open_checkpoint(p)
    for t in tensors:
        assert read_tensor(idx, t.name).values.tobytes() == t.values.tobytes()
