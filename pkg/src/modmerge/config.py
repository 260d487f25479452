"""YAML merge configurations and their resolution into per-tensor plans.

The accepted dialect is the mergekit-style one::

    models:                       # linear, task_arithmetic, ties, dare_ties
      - model: path/to/a
        parameters: {weight: 0.9, density: 0.5}
    slices:                       # slerp
      - sources:
          - {model: path/to/a, layer_range: [0, 28]}
          - {model: path/to/b, layer_range: [0, 28]}
    experts:                      # mod (no merge_method key needed)
      - source_model: path/to/a
      - source_model: path/to/b
    weights: [0.9, 0.1]
    merge_method: ties
    base_model: path/to/a
    parameters: {normalize: true, int8_mask: true, t: [...], seed: 0}
    dtype: bfloat16

Source strings are treated as opaque ids; the caller maps them to
checkpoints.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import yaml

from .checkpoint_io import DType, TensorIndex

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "METHODS",
    "ModelSpec",
    "ParamRule",
    "SliceSource",
    "MergeConfig",
    "Directive",
    "MergePlan",
    "parse_config",
    "load_config",
    "normalize_weights",
    "resolve_parameter",
    "layer_number",
    "build_plan",
]

METHODS = ("mod", "linear", "task_arithmetic", "ties", "dare_ties", "slerp")
COPY = "copy"

_TOP_KEYS = {"merge_method", "base_model", "models", "experts", "slices", "parameters", "dtype", "weights", "model_kwargs"}
_PARAM_KEYS = {"normalize", "int8_mask", "t", "seed", "weight", "density"}
_LAYER_RE = re.compile(r"layers\.(\d+)\.")

# methods that ignore entries equal to base_model when collecting task vectors
_TASK_VECTOR_METHODS = ("task_arithmetic", "ties", "dare_ties")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    source: str
    weight: float | None = None
    density: float | None = None


@dataclass(frozen=True)
class ParamRule:
    value: float
    filter: str | None = None


@dataclass(frozen=True)
class SliceSource:
    source: str
    layer_range: tuple[int, int]


@dataclass
class MergeConfig:
    merge_method: str
    base_model: str | None
    models: list[ModelSpec]
    normalize: bool | None = None
    int8_mask: bool = False
    weights: list[float] | None = None
    t_rules: list[ParamRule] | None = None
    seed: int | None = None
    slices: list[list[SliceSource]] | None = None
    out_dtype: DType = DType.F32
    ignored: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def sources(self) -> list[str]:
        """Distinct source ids in first-mention order, base model first."""
        seen: list[str] = []
        for s in [self.base_model, *(m.source for m in self.models)]:
            if s is not None and s not in seen:
                seen.append(s)
        return seen

    @property
    def effective_normalize(self) -> bool:
        if self.normalize is not None:
            return self.normalize
        return self.merge_method == "linear"

    def task_models(self) -> list[ModelSpec]:
        """Models that contribute task vectors: everything except the base model."""
        return [m for m in self.models if m.source != self.base_model]


@dataclass(frozen=True)
class Directive:
    tensor_name: str
    method: str
    params: Mapping[str, Any]
    sources: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "tensor_name": self.tensor_name,
            "method": self.method,
            "params": dict(self.params),
            "sources": dict(self.sources),
        }


@dataclass(frozen=True)
class MergePlan:
    merge_method: str
    base_source: str
    out_dtype: DType
    seed: int
    directives: tuple[Directive, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.directives)

    def to_dict(self) -> dict[str, Any]:
        return {
            "merge_method": self.merge_method,
            "base_source": self.base_source,
            "out_dtype": self.out_dtype.value,
            "seed": self.seed,
            "metadata": dict(self.metadata),
            "warnings": list(self.warnings),
            "directives": [d.to_dict() for d in self.directives],
        }


# ---------------------------------------------------------------------------
# parsing

def _warn(cfg_warnings: list[str], msg: str) -> None:
    log.warning(msg)
    cfg_warnings.append(msg)


def _number(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{what} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{what} must be finite, got {value!r}")
    return value


def _density(value: Any, what: str) -> float:
    d = _number(value, what)
    if not 0.0 < d <= 1.0:
        raise ConfigError(f"{what} must lie in (0, 1], got {d}")
    return d


def _flag(value: Any, what: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{what} must be true or false, got {value!r}")
    return value


def _parse_models(doc: Mapping[str, Any], warnings: list[str]) -> list[ModelSpec]:
    raw = doc.get("models")
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise ConfigError("'models' must be a list")
    out = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "model" not in entry:
            raise ConfigError(f"models[{i}] needs a 'model' key")
        params = entry.get("parameters") or {}
        if not isinstance(params, dict):
            raise ConfigError(f"models[{i}].parameters must be a mapping")
        for key in params:
            if key not in ("weight", "density"):
                _warn(warnings, f"models[{i}].parameters: unknown key {key!r} ignored")
        weight = _number(params["weight"], f"models[{i}] weight") if "weight" in params else None
        density = _density(params["density"], f"models[{i}] density") if "density" in params else None
        out.append(ModelSpec(str(entry["model"]), weight, density))
    return out


def _parse_experts(doc: Mapping[str, Any]) -> list[ModelSpec]:
    raw = doc.get("experts")
    if not isinstance(raw, list):
        raise ConfigError("'experts' must be a list")
    out = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "source_model" not in entry:
            raise ConfigError(f"experts[{i}] needs a 'source_model' key")
        out.append(ModelSpec(str(entry["source_model"])))
    return out


def _parse_slices(raw: Any) -> list[list[SliceSource]]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("'slices' must be a non-empty list")
    slices = []
    for i, sl in enumerate(raw):
        if not isinstance(sl, dict) or not isinstance(sl.get("sources"), list):
            raise ConfigError(f"slices[{i}] needs a 'sources' list")
        srcs = []
        for j, src in enumerate(sl["sources"]):
            if not isinstance(src, dict) or "model" not in src:
                raise ConfigError(f"slices[{i}].sources[{j}] needs a 'model' key")
            lr = src.get("layer_range")
            if not (isinstance(lr, list) and len(lr) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in lr)):
                raise ConfigError(f"slices[{i}].sources[{j}].layer_range must be [lo, hi] integers")
            if not lr[0] < lr[1]:
                raise ConfigError(f"slices[{i}].sources[{j}].layer_range needs lo < hi, got {lr}")
            srcs.append(SliceSource(str(src["model"]), (lr[0], lr[1])))
        slices.append(srcs)
    return slices


def _parse_rules(raw: Any, what: str) -> list[ParamRule]:
    if not isinstance(raw, list):
        return [ParamRule(_number(raw, what))]
    rules = []
    for i, r in enumerate(raw):
        if not isinstance(r, dict) or "value" not in r:
            raise ConfigError(f"{what}[{i}] needs a 'value'")
        filt = r.get("filter")
        rules.append(ParamRule(_number(r["value"], f"{what}[{i}].value"), None if filt is None else str(filt)))
    if not rules:
        raise ConfigError(f"{what} is empty")
    return rules


def _weight_list(raw: Any) -> list[float]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"'weights' must be a non-empty list of numbers, got {raw!r}")
    return [_number(w, f"weights[{i}]") for i, w in enumerate(raw)]


def _resolve_method(doc: Mapping[str, Any]) -> str:
    method = doc.get("merge_method")
    if method is None:
        if "experts" in doc and "weights" in doc:
            return "mod"
        raise ConfigError("merge_method unresolvable: no 'merge_method' key and no experts/weights pair")
    method = str(method).lower()
    if method not in METHODS:
        raise ConfigError(f"merge_method unresolvable: unsupported method {method!r}")
    return method


def parse_config(text: str) -> MergeConfig:
    """Parse and validate one YAML merge configuration.

    Unknown keys are logged and recorded in ``MergeConfig.warnings``.
    ``model_kwargs`` is kept in ``MergeConfig.ignored``.

    Raises:
        ConfigError: If the method cannot be determined or the document
            violates a method's requirements.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from None
    if doc is None:
        raise ConfigError("merge_method unresolvable: empty document")
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a YAML mapping")

    warnings: list[str] = []
    for key in doc:
        if key not in _TOP_KEYS:
            _warn(warnings, f"unknown top-level key {key!r} ignored")

    method = _resolve_method(doc)
    params = doc.get("parameters") or {}
    if not isinstance(params, dict):
        raise ConfigError("'parameters' must be a mapping")
    for key in params:
        if key not in _PARAM_KEYS:
            _warn(warnings, f"parameters: unknown key {key!r} ignored")

    base = doc.get("base_model")
    base = None if base is None else str(base)
    slices = _parse_slices(doc["slices"]) if "slices" in doc else None

    if "experts" in doc:
        models = _parse_experts(doc)
    elif slices is not None and "models" not in doc:
        models = [ModelSpec(s.source) for s in slices[0]]
    else:
        models = _parse_models(doc, warnings)

    cfg = MergeConfig(
        merge_method=method,
        base_model=base,
        models=models,
        normalize=_flag(params["normalize"], "normalize") if "normalize" in params else None,
        int8_mask=_flag(params["int8_mask"], "int8_mask") if "int8_mask" in params else False,
        weights=_weight_list(doc["weights"]) if "weights" in doc else None,
        t_rules=_parse_rules(params["t"], "t") if "t" in params else None,
        seed=None,
        slices=slices,
        out_dtype=DType.parse(doc["dtype"]) if "dtype" in doc else DType.F32,
        warnings=warnings,
    )
    if "seed" in params:
        seed = params["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        cfg.seed = seed
    if "model_kwargs" in doc:
        cfg.ignored["model_kwargs"] = doc["model_kwargs"]
    if not cfg.out_dtype.is_float:
        raise ConfigError(f"dtype must be a float type, got {cfg.out_dtype.value}")

    _validate(cfg)
    return cfg


def load_config(path: str) -> MergeConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _validate(cfg: MergeConfig) -> None:
    m = cfg.merge_method
    if not cfg.models:
        raise ConfigError(f"{m}: no source models given")
    if m == "mod":
        if len(cfg.models) != 2:
            raise ConfigError(f"mod needs exactly 2 experts, got {len(cfg.models)}")
        if cfg.weights is None or len(cfg.weights) != 2:
            raise ConfigError("mod needs a top-level 'weights' list of length 2")
        normalize_weights(cfg.weights)
    elif m == "slerp":
        if cfg.slices is not None and len(cfg.slices) != 1:
            raise ConfigError(f"slerp supports a single slice, got {len(cfg.slices)}")
        if len(cfg.models) != 2:
            raise ConfigError(f"slerp needs exactly 2 sources, got {len(cfg.models)}")
        if cfg.t_rules is None:
            raise ConfigError("slerp needs parameters.t")
        _default_rule(cfg.t_rules)
        for r in cfg.t_rules:
            if not 0.0 <= r.value <= 1.0:
                raise ConfigError(f"slerp t must lie in [0, 1], got {r.value}")
    elif m == "linear":
        for mod in cfg.models:
            if mod.weight is None:
                raise ConfigError(f"linear: model {mod.source!r} has no weight")
        if cfg.effective_normalize and sum(x.weight for x in cfg.models) == 0:
            raise ConfigError("linear: weights sum to zero with normalize set")
    else:
        if cfg.base_model is None:
            raise ConfigError(f"{m} needs base_model")
        task = cfg.task_models()
        if not task:
            raise ConfigError(f"{m}: no models other than the base model")
        for mod in task:
            if mod.weight is None:
                raise ConfigError(f"{m}: model {mod.source!r} has no weight")
            if m in ("ties", "dare_ties") and mod.density is None:
                raise ConfigError(f"{m}: model {mod.source!r} has no density")


# ---------------------------------------------------------------------------
# resolution helpers

def normalize_weights(w: Sequence[float]) -> list[float]:
    """Divide by the sum. Weights must be nonnegative with a positive sum."""
    w = [float(x) for x in w]
    if not w:
        raise ConfigError("empty weight list")
    if any(x < 0 for x in w):
        raise ConfigError(f"weights must be nonnegative, got {w}")
    total = math.fsum(w)
    if total <= 0:
        raise ConfigError(f"weights must have a positive sum, got {w}")
    return [x / total for x in w]


def _default_rule(rules: Sequence[ParamRule]) -> ParamRule:
    defaults = [r for r in rules if r.filter is None]
    if not defaults:
        raise ConfigError("parameter rules have no default (filterless) entry")
    if len(defaults) > 1:
        raise ConfigError("parameter rules have more than one default entry")
    return defaults[0]


def resolve_parameter(tensor_name: str, rules: Sequence[ParamRule]) -> float:
    """First rule whose filter is a substring of ``tensor_name``; else the default."""
    if not rules:
        raise ConfigError("no parameter rules")
    default = _default_rule(rules)
    for r in rules:
        if r.filter is not None and r.filter in tensor_name:
            return r.value
    return default.value


def layer_number(tensor_name: str) -> int | None:
    m = _LAYER_RE.search(tensor_name)
    return int(m.group(1)) if m else None


# ---------------------------------------------------------------------------
# planning

def _base_source(cfg: MergeConfig) -> str:
    if cfg.merge_method in ("mod", "linear", "slerp") and cfg.base_model is None:
        return cfg.models[0].source
    assert cfg.base_model is not None
    return cfg.base_model


def build_plan(config: MergeConfig, indices: Mapping[str, TensorIndex], seed: int | None = None) -> MergePlan:
    """Resolve ``config`` into one directive per base tensor, sorted by name.

    ``indices`` maps every source id in the config to its opened checkpoint.
    A tensor missing from some non-base source is copied from the base. For
    slerp, tensors outside the slice's layer range, or without a
    ``layers.<k>.`` segment, are copied from the base as well.

    Raises:
        ConfigError: If a referenced source is not in ``indices`` or two
            sources disagree on a tensor's shape.
    """
    cfg = config
    for src in cfg.sources():
        if src not in indices:
            raise ConfigError(f"source {src!r} has not been opened")
    base_src = _base_source(cfg)
    base_index = indices[base_src]
    warnings: list[str] = []

    method = cfg.merge_method
    if seed is None:
        seed = cfg.seed if cfg.seed is not None else 0

    # role assignment, shared by every tensor
    roles: dict[str, Any]
    fixed: dict[str, Any]
    if method == "mod":
        roles = {"theta1": cfg.models[0].source, "theta2": cfg.models[1].source}
        fixed = {"alpha": normalize_weights(cfg.weights or [])[0]}
    elif method == "linear":
        w = [m.weight for m in cfg.models]
        if cfg.effective_normalize:
            w = normalize_weights(w)
        roles = {"models": [m.source for m in cfg.models]}
        fixed = {"weights": w}
    elif method == "slerp":
        roles = {"theta1": cfg.models[0].source, "theta2": cfg.models[1].source}
        fixed = {}
    else:
        task = cfg.task_models()
        w = [m.weight for m in task]
        if cfg.effective_normalize and method == "task_arithmetic":
            w = normalize_weights(w)
        roles = {"base": base_src, "experts": [m.source for m in task]}
        fixed = {"weights": w}
        if method in ("ties", "dare_ties"):
            fixed["densities"] = [m.density for m in task]
        if method == "ties":
            fixed["normalize"] = cfg.effective_normalize
        if method == "dare_ties":
            fixed["seed"] = seed

    flat_sources = [s for v in roles.values() for s in (v if isinstance(v, list) else [v])]
    layer_range = cfg.slices[0][0].layer_range if (method == "slerp" and cfg.slices) else None

    directives = []
    for name in sorted(base_index.names()):
        shape = base_index[name].shape
        missing = [s for s in flat_sources if name not in indices[s]]
        for s in flat_sources:
            if name in indices[s] and indices[s][name].shape != shape:
                raise ConfigError(
                    f"{name}: shape {list(indices[s][name].shape)} in {s!r} vs {list(shape)} in base {base_src!r}"
                )
        if missing:
            _warn(warnings, f"{name}: missing from {missing}; copied from base")
            directives.append(Directive(name, COPY, {}, {"base": base_src}))
            continue
        if layer_range is not None:
            k = layer_number(name)
            if k is None:
                _warn(warnings, f"{name}: no layer number for layer_range; copied from base")
                directives.append(Directive(name, COPY, {}, {"base": base_src}))
                continue
            if not layer_range[0] <= k < layer_range[1]:
                directives.append(Directive(name, COPY, {}, {"base": base_src}))
                continue
        params = dict(fixed)
        if method == "slerp":
            params["t"] = resolve_parameter(name, cfg.t_rules or [])
        directives.append(Directive(name, method, params, dict(roles)))

    metadata = {
        "merge_method": method,
        "seed": str(seed),
        "int8_mask": str(cfg.int8_mask).lower(),
    }
    if cfg.ignored:
        metadata["ignored_keys"] = ",".join(sorted(cfg.ignored))
    return MergePlan(
        merge_method=method,
        base_source=base_src,
        out_dtype=cfg.out_dtype,
        seed=seed,
        directives=tuple(directives),
        metadata=metadata,
        warnings=tuple(cfg.warnings + warnings),
    )
