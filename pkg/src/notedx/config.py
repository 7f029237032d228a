"""Run configuration: every tunable in one flat ``key = value`` document.

Lines starting with ``#`` and blank lines are ignored. Values are parsed by
the field's type; lists are comma-separated and filter banks are written
``HxF`` (e.g. ``3x64,4x64,5x64``). Unknown keys are an error.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from notedx.cnn import CnnConfig
from notedx.embeddings import SkipgramConfig
from notedx.errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # data
    corpus: str = ""
    alias_map: str = ""
    top_k: int = 10
    ratios: tuple = (0.70, 0.15, 0.15)
    seeds: tuple = (0, 1, 2, 3, 4)
    min_count: int = 2
    deterministic: bool = False
    # skip-gram pretraining
    pretrain: bool = True
    embed_dim: int = 128
    sg_window: int = 5
    sg_negatives: int = 5
    sg_epochs: int = 5
    sg_lr: float = 0.025
    sg_subsample: float = 1e-4
    sg_min_n: int = 3
    sg_max_n: int = 6
    sg_buckets: int = 2**21
    # CNN
    filters: tuple = ((3, 64), (4, 64), (5, 64))
    p_keep: float = 0.5
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    fine_tune: bool = True
    dtype: str = "float64"
    # baselines
    baselines: tuple = ("logreg", "mlp")
    pca_dim: int = 256
    l2: float = 1e-4
    # reporting
    compare_metric: str = "WF1"
    viz_per_size: int = 2
    viz_top: int = 10
    viz_seed: int = 0

    def validate(self) -> "RunConfig":
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) <= 0:
            raise ConfigError(f"ratios must be three positive fractions summing to 1, got {self.ratios}")
        if self.top_k < 1 or self.min_count < 1 or self.pca_dim < 1:
            raise ConfigError("top_k, min_count and pca_dim must be positive")
        unknown = set(self.baselines) - {"logreg", "mlp"}
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")
        self.cnn_config().validate()
        self.skipgram_config().validate()
        return self

    def cnn_config(self, seed: int = 0) -> CnnConfig:
        return CnnConfig(
            embed_dim=self.embed_dim, filters=self.filters, p_keep=self.p_keep, lr=self.lr,
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            fine_tune=self.fine_tune, seed=seed, dtype=self.dtype, deterministic=self.deterministic,
        )

    def skipgram_config(self, seed: int = 0, workers: int = 1) -> SkipgramConfig:
        return SkipgramConfig(
            window=self.sg_window, negatives=self.sg_negatives, epochs=self.sg_epochs, lr=self.sg_lr,
            subsample=self.sg_subsample, min_n=self.sg_min_n, max_n=self.sg_max_n,
            n_buckets=self.sg_buckets, seed=seed, workers=1 if self.deterministic else workers,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(f"{v[0]}x{v[1]}" if isinstance(v, tuple) else format_value(v) for v in value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_filters(text: str) -> tuple:
    out = []
    for item in text.split(","):
        h, _, f = item.strip().lower().partition("x")
        out.append((int(h), int(f)))
    return tuple(out)


def _items(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


_PARSERS = {
    "ratios": lambda s: tuple(float(t) for t in _items(s)),
    "seeds": lambda s: tuple(int(t) for t in _items(s)),
    "filters": _parse_filters,
    "baselines": lambda s: tuple(_items(s)),
}


def parse_value(key: str, text: str):
    if key in _PARSERS:
        return _PARSERS[key](text)
    default = getattr(RunConfig, key)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
