"""Experiment configuration stored as a single TOML document.

Sections: ``[data]``, ``[model]``, ``[federation]``, ``[distill]``, ``[eval]``
and ``[seeds]``. Unknown sections or keys are rejected, and every field error
is reported at once.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

from ._toml import TOMLDecodeError, load_toml, loads_toml
from .federation import AggregatorConfig, TrainConfig
from .losses import DistillConfig
from .seg_model import ModelConfig
from .synth_data import CLIENTS, DatasetSpec

# method name -> (loss mode, aggregator)
METHODS = {
    "fedavg_star": ("dice_ce_standard", "fedavg"),
    "fedavg": ("marginal", "fedavg"),
    "fedprox": ("marginal", "fedprox"),
    "fedopt": ("marginal", "fedopt"),
    "condistfl": ("marginal_plus_condist", "fedopt"),
}


class ConfigError(ValueError):
    """One or more invalid configuration fields."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass(frozen=True)
class EvalConfig:
    union_mode: bool = False
    datasets: tuple[str, ...] = ("external",)

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        for d in self.datasets:
            if d != "external" and not (d.startswith("client_") and d[7:] in CLIENTS):
                raise ValueError(f"unknown eval dataset {d!r}; use 'external' or 'client_<X>'")


@dataclass(frozen=True)
class SeedConfig:
    server: int = 0
    clients: tuple[tuple[str, int], ...] = tuple((k, i + 1) for i, k in enumerate(CLIENTS))

    def __post_init__(self):
        items = self.clients.items() if isinstance(self.clients, dict) else self.clients
        items = tuple(sorted((str(k), int(v)) for k, v in items))
        object.__setattr__(self, "clients", items)
        if sorted(k for k, _ in items) != sorted(CLIENTS):
            raise ValueError(f"seeds.clients must name exactly {list(CLIENTS)}")
        if self.server < 0 or any(v < 0 for _, v in items):
            raise ValueError("seeds must be non-negative")

    @property
    def client_map(self) -> dict[str, int]:
        return dict(self.clients)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: TrainConfig = field(default_factory=TrainConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    workers: int | None = None

    def __post_init__(self):
        if self.model.seed != self.seeds.server:
            object.__setattr__(self, "model", replace(self.model, seed=self.seeds.server))

    # run helpers
    @property
    def seeds_clients(self) -> dict[str, int]:
        return self.seeds.client_map

    def distill_for_run(self) -> DistillConfig:
        """The distillation schedule spans exactly the configured rounds."""
        return replace(self.distill, total_rounds=self.federation.rounds)

    def replace_federation(self, **kw) -> "ExperimentConfig":
        return replace(self, federation=replace(self.federation, **kw))

    @property
    def method(self) -> str | None:
        key = (self.federation.loss_mode, self.aggregator.kind)
        return next((m for m, v in METHODS.items() if v == key), None)

    # TOML
    def to_dict(self) -> dict:
        fed = asdict(self.federation)
        fed["aggregator"] = self.aggregator.kind
        fed["server_momentum"] = self.aggregator.server_momentum
        fed["server_lr"] = self.aggregator.server_lr
        fed["prox_mu"] = self.aggregator.prox_mu
        if self.workers is not None:
            fed["workers"] = self.workers
        distill = asdict(self.distill)
        distill.pop("total_rounds")
        model = asdict(self.model)
        model.pop("seed")
        return {
            "data": self.data.to_dict(),
            "model": model,
            "federation": fed,
            "distill": distill,
            "eval": {"union_mode": self.eval.union_mode, "datasets": list(self.eval.datasets)},
            "seeds": {"server": self.seeds.server, "clients": dict(self.seeds.clients)},
        }

    def render(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        errors: list[str] = []
        sections = {"data", "model", "federation", "distill", "eval", "seeds"}
        for s in sorted(set(doc) - sections):
            errors.append(f"unknown section [{s}]")

        def section(name, allowed):
            sec = doc.get(name, {})
            if not isinstance(sec, dict):
                errors.append(f"[{name}] must be a table")
                return {}
            for k in sorted(set(sec) - allowed):
                errors.append(f"unknown key {name}.{k}")
            return {k: v for k, v in sec.items() if k in allowed}

        def build(name, factory, kw):
            try:
                return factory(**kw)
            except (TypeError, ValueError) as exc:
                errors.append(f"[{name}] {exc}")
                return None

        names = lambda c: {f.name for f in fields(c)}  # noqa: E731
        agg_keys = {"aggregator", "server_momentum", "server_lr", "prox_mu", "workers"}
        data_kw = section("data", names(DatasetSpec))
        model_kw = section("model", names(ModelConfig) - {"seed"})
        fed_kw = section("federation", names(TrainConfig) | agg_keys)
        distill_kw = section("distill", names(DistillConfig) - {"total_rounds"})
        eval_kw = section("eval", names(EvalConfig))
        seeds_kw = section("seeds", names(SeedConfig))

        for k in ("organ_means", "organ_radius"):
            if k in data_kw:
                data_kw[k] = tuple(data_kw[k])
        agg_kw = {k: fed_kw.pop(k) for k in list(fed_kw) if k in agg_keys}
        workers = agg_kw.pop("workers", None)
        if workers is not None and (not isinstance(workers, int) or workers < 1):
            errors.append(f"federation.workers must be a positive integer, got {workers!r}")
        if "aggregator" in agg_kw:
            agg_kw["kind"] = agg_kw.pop("aggregator")

        parts = {
            "data": build("data", DatasetSpec, data_kw),
            "model": build("model", ModelConfig, model_kw),
            "federation": build("federation", TrainConfig, fed_kw),
            "aggregator": build("federation", AggregatorConfig, agg_kw),
            "distill": build("distill", DistillConfig, distill_kw),
            "eval": build("eval", EvalConfig, eval_kw),
            "seeds": build("seeds", SeedConfig, seeds_kw),
        }
        if errors:
            raise ConfigError(errors)
        return cls(**parts, workers=workers)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            doc = loads_toml(text)
        except TOMLDecodeError as exc:
            raise ConfigError([f"not valid TOML: {exc}"]) from exc
        return cls.from_dict(doc)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        doc = load_toml(path)
    except TOMLDecodeError as exc:
        raise ConfigError([f"{path}: not valid TOML: {exc}"]) from exc
    return ExperimentConfig.from_dict(doc)


def with_method(cfg: ExperimentConfig, method: str) -> ExperimentConfig:
    """Swap in the loss mode and aggregator of a named method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    mode, kind = METHODS[method]
    return replace(cfg, federation=replace(cfg.federation, loss_mode=mode),
                   aggregator=replace(cfg.aggregator, kind=kind))


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Derive server and client seeds from one integer."""
    clients = {k: 1000 * seed + i + 1 for i, k in enumerate(CLIENTS)}
    return replace(cfg, seeds=SeedConfig(server=1000 * seed, clients=clients))


def reference_doc() -> str:
    """The default configuration, rendered as TOML with every field spelled out."""
    return ExperimentConfig().render()
