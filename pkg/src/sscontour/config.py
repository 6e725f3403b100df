"""Pipeline configuration stored as a ``key = value`` text file.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
Unknown keys and out-of-range values are rejected at load time.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Optional

from .features import WEAK_DETECTOR, FeatureConfig
from .forest.train import ForestConfig
from .forest.tree import TreeParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    patch_size: int = 12
    n_trees: int = 10
    atoms_per_class: int = 256
    k_train: int = 3
    k: int = 6
    lam: float = 1e-4
    dict_iterations: int = 30
    incoherence_weight: float = 0.1
    dict_tokens_per_class: int = 100_000
    detect_scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 2
    tau_hi: float = 0.7
    tau_lo: float = 0.2
    labeled_tokens: int = 100_000
    unlabeled_tokens: int = 100_000
    bagging: float = 0.5
    max_depth: int = 64
    min_samples: int = 8
    n_features: int = 0  # 0 -> sqrt of the feature dimension
    min_l_tokens: int = 10
    pool_subset_size: int = 256
    n_pairs: int = 256
    svm_epochs: int = 10
    svm_step: float = 0.1
    svm_regularization: float = 1e-3
    n_labeled: int = 3
    seed: int = 0
    tolerance: float = 0.0075
    n_thresholds: int = 99
    labeled_images: tuple[str, ...] = ()
    unlabeled_images: tuple[str, ...] = ()

    def __post_init__(self):
        checks = [
            (self.patch_size >= 4 and self.patch_size % 2 == 0, "patch_size must be even and >= 4"),
            (self.n_trees >= 1, "n_trees must be >= 1"),
            (self.atoms_per_class >= 1, "atoms_per_class must be >= 1"),
            (1 <= self.k_train <= self.atoms_per_class, "k_train must lie in [1, atoms_per_class]"),
            (1 <= self.k <= 2 * self.atoms_per_class, "k must lie in [1, 2 * atoms_per_class]"),
            (self.lam > 0, "lam must be positive"),
            (self.dict_iterations >= 1, "dict_iterations must be >= 1"),
            (self.incoherence_weight >= 0, "incoherence_weight must be >= 0"),
            (self.dict_tokens_per_class >= self.atoms_per_class,
             "dict_tokens_per_class must be at least atoms_per_class"),
            (len(self.detect_scales) > 0 and all(s > 0 for s in self.detect_scales),
             "detect_scales must be positive"),
            (self.stride >= 1, "stride must be >= 1"),
            (0 <= self.tau_lo < self.tau_hi <= 1, "need 0 <= tau_lo < tau_hi <= 1"),
            (self.labeled_tokens >= 1, "labeled_tokens must be >= 1"),
            (self.unlabeled_tokens >= 0, "unlabeled_tokens must be >= 0"),
            (0 < self.bagging <= 1, "bagging must lie in (0, 1]"),
            (self.max_depth >= 1, "max_depth must be >= 1"),
            (self.min_samples >= 2, "min_samples must be >= 2"),
            (self.n_features >= 0, "n_features must be >= 0"),
            (self.min_l_tokens >= 1, "min_l_tokens must be >= 1"),
            (self.pool_subset_size >= 1, "pool_subset_size must be >= 1"),
            (self.n_pairs >= 1, "n_pairs must be >= 1"),
            (self.svm_epochs >= 1, "svm_epochs must be >= 1"),
            (self.svm_step > 0, "svm_step must be positive"),
            (self.svm_regularization >= 0, "svm_regularization must be >= 0"),
            (self.n_labeled >= 1, "n_labeled must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.tolerance > 0, "tolerance must be positive"),
            (self.n_thresholds >= 1, "n_thresholds must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def feature_config(self, gradient_source: str = WEAK_DETECTOR) -> FeatureConfig:
        return FeatureConfig(patch_size=self.patch_size, gradient_source=gradient_source)

    def tree_params(self) -> TreeParams:
        return TreeParams(max_depth=self.max_depth, min_samples=self.min_samples,
                          n_features=self.n_features or None, min_l_tokens=self.min_l_tokens,
                          pool_subset_size=self.pool_subset_size, n_pairs=self.n_pairs,
                          svm_epochs=self.svm_epochs, svm_step=self.svm_step,
                          svm_regularization=self.svm_regularization)

    def forest_config(self, threads: int = 1) -> ForestConfig:
        return ForestConfig(
            n_trees=self.n_trees, feature_config=self.feature_config(),
            labeled_tokens=(self.labeled_tokens, self.labeled_tokens),
            unlabeled_tokens=(self.unlabeled_tokens, self.unlabeled_tokens),
            thresholds=(self.tau_hi, self.tau_lo), bagging=self.bagging, tree=self.tree_params(),
            lam=self.lam, stride=self.stride, seed=self.seed, threads=threads)

    def with_overrides(self, pairs: Iterable[str]) -> "PipelineConfig":
        values = {}
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = (s.strip() for s in item.split("=", 1))
            values[key] = raw
        return replace(self, **_convert(values))

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            text = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if kind == "tuple[float, ...]":
            return tuple(float(p) for p in parts)
        return tuple(parts)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def _convert(values: dict) -> dict:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return {k: _parse_value(k, v) for k, v in values.items()}


def parse_config(text: str) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    return PipelineConfig(**_convert(values))


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> PipelineConfig:
    base = PipelineConfig() if path is None else parse_config(Path(path).read_text())
    return base.with_overrides(overrides)
