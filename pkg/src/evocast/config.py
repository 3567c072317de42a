"""Run configuration: line-oriented ``key = value`` files with CLI-style
overrides. Unknown keys are errors so typos surface immediately; parsing
then re-serializing is canonical and idempotent."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelConfig
from .sampler import EnsembleConfig, KhopConfig, PprConfig
from .training import OptimConfig, WarpConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    events: str = "events.tsv"
    triples: str = "triples.tsv"
    out: str = "out"
    # dataset
    num_steps: int = 28
    split: tuple[int, int, int, int] = (10, 10, 2, 6)
    kcore: int = 10
    segmentation: str = "count"
    # samplers
    samplers: tuple[str, ...] = ("ppr", "khop")
    ppr_budget: int = 50
    ppr_alpha: float = 0.15
    ppr_eps: float = 0.0          # 0 resolves to 1e-4 / n_entities
    ppr_min_score: float = 0.0
    khop_hops: int = 3
    khop_budget: int = 10
    # model
    dim: int = 128
    layers: int = 3
    pool_mode: str = "literal"
    # losses / optimization
    margin: float = 1.0
    num_negatives: int = 10
    kgc_margin: float = 1.0
    kgc_negatives: int = 4
    lr: float = 1e-3
    reg_weight: float = 0.005
    batch_size: int = 8
    epochs: int = 50
    patience: int = 5
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-2
    # evaluation
    k: int = 20
    eval_mode: str = "frozen"
    seed: int = 7

    def ensemble(self, seed: int) -> EnsembleConfig:
        specs = []
        for name in self.samplers:
            if name == "ppr":
                specs.append(PprConfig(
                    budget=self.ppr_budget,
                    alpha=self.ppr_alpha,
                    eps=self.ppr_eps if self.ppr_eps > 0 else None,
                    min_score=self.ppr_min_score,
                ))
            elif name == "khop":
                specs.append(KhopConfig(hops=self.khop_hops, budget=self.khop_budget))
            else:
                raise ConfigError(f"unknown sampler {name!r} (expected ppr or khop)")
        return EnsembleConfig(samplers=specs, seed=seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim, layers=self.layers,
            num_subgraphs=len(self.samplers), pool_mode=self.pool_mode,
        )

    def warp_config(self) -> WarpConfig:
        return WarpConfig(margin=self.margin, num_negatives=self.num_negatives)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            lr=self.lr, reg_weight=self.reg_weight, batch_size=self.batch_size,
            epochs=self.epochs, patience=self.patience, early_stop_k=self.k,
            seed=self.seed, pretrain_epochs=self.pretrain_epochs,
            pretrain_lr=self.pretrain_lr, kgc_margin=self.kgc_margin,
            kgc_negatives=self.kgc_negatives,
        )


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # tuple-valued fields: comma-separated items
        items = [x.strip() for x in text.split(",") if x.strip()]
        sample = RunConfig.__dataclass_fields__[name].default
        if sample and isinstance(sample[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PY_TYPES = {"int": int, "float": float, "str": str}


def _field_kind(name: str):
    t = _FIELD_TYPES[name]
    return _PY_TYPES.get(t, tuple)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, value, _field_kind(key)))
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, value, _field_kind(key)))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(x) for x in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
