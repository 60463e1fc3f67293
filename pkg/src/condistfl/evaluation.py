"""Dice metrics, tumor-into-organ union evaluation and report writers."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .seg_model import Checkpoint, ModelConfig, SegNet

# tumor class -> parent organ class
TOY_UNION: dict[int, int] = {2: 1, 4: 3, 6: 5}
EVAL_BATCH = 16


def dice_score(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for class ``c``; 1.0 when both masks are empty."""
    p = np.asarray(pred) == c
    g = np.asarray(gt) == c
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


@dataclass(frozen=True)
class UnionMap:
    """Maps each tumor class to its parent organ."""

    parents: dict[int, int] = field(default_factory=lambda: dict(TOY_UNION))

    def __post_init__(self):
        for child, parent in self.parents.items():
            if parent in self.parents:
                raise ValueError(f"class {child} maps to {parent}, which is itself mapped")
            if child == parent:
                raise ValueError(f"class {child} maps to itself")

    def merged_classes(self, classes: Iterable[int]) -> tuple[int, ...]:
        """The classes left after merging, in ascending order."""
        return tuple(sorted({self.parents.get(c, c) for c in classes}))

    def lut(self, num_classes: int) -> np.ndarray:
        table = np.arange(num_classes)
        for child, parent in self.parents.items():
            if child < num_classes:
                table[child] = parent
        return table


def union_merge(x: np.ndarray, umap: UnionMap | None = None) -> np.ndarray:
    umap = umap or UnionMap()
    x = np.asarray(x)
    out = x.copy()
    for child, parent in umap.parents.items():
        out[x == child] = parent
    return out


@dataclass
class DiceReport:
    """Per-class Dice averaged over samples, plus the mean over the listed classes."""

    per_class: dict[int, float]
    sample_count: int
    run_id: str = ""
    round: int | None = None
    dataset: str = ""
    union_mode: bool = False

    @property
    def average(self) -> float:
        if not self.per_class:
            return float("nan")
        return float(np.mean(list(self.per_class.values())))

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "dataset": self.dataset,
            "round": self.round,
            "union_mode": self.union_mode,
            "sample_count": self.sample_count,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "average": self.average,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        return cls({int(c): float(v) for c, v in d["per_class"].items()}, int(d["sample_count"]), d.get("run_id", ""),
                   d.get("round"), d.get("dataset", ""), bool(d.get("union_mode", False)))


def predict_dataset(model: SegNet, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    """Argmax class maps from the full-resolution head, ``[n, H, W]``."""
    preds = [model.predict(images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def score(preds: np.ndarray, labels: np.ndarray, classes: Sequence[int], union_mode: bool = False,
          umap: UnionMap | None = None) -> dict[int, float]:
    """Per-class Dice, computed per sample and then averaged in sample order."""
    if union_mode:
        umap = umap or UnionMap()
        preds, labels = union_merge(preds, umap), union_merge(labels, umap)
        classes = umap.merged_classes(classes)
    out = {}
    for c in classes:
        vals = [dice_score(p, g, c) for p, g in zip(preds, labels)]
        out[int(c)] = float(np.mean(vals)) if vals else float("nan")
    return out


def evaluate(checkpoint: Checkpoint | SegNet, dataset, classes: Sequence[int] | None = None,
             union_mode: bool = False, model_cfg: ModelConfig | None = None, num_classes: int = 8,
             run_id: str = "", umap: UnionMap | None = None) -> DiceReport:
    """Score a model on a dataset.

    ``classes`` defaults to every foreground class found in the dataset's labels.
    A checkpoint that does not fit ``model_cfg`` raises a checkpoint error.
    """
    if isinstance(checkpoint, SegNet):
        model, rnd = checkpoint, None
    else:
        model = (model_cfg or ModelConfig()).build(num_classes)
        model.load_checkpoint(checkpoint)
        rnd = checkpoint.round
    if classes is None:
        classes = [int(c) for c in np.unique(dataset.labels) if c != 0]
    preds = predict_dataset(model, dataset.images)
    per_class = score(preds, dataset.labels, classes, union_mode, umap)
    return DiceReport(per_class, len(dataset), run_id, rnd, getattr(dataset, "name", ""), union_mode)


# --------------------------------------------------------------------------- #
# Report files
# --------------------------------------------------------------------------- #
def write_reports_csv(reports: Sequence[DiceReport], path) -> Path:
    """One row per report, one column per class seen in any report."""
    classes = sorted({c for r in reports for c in r.per_class})
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "dataset", "round", "union_mode", "samples"] + [f"dice_{c}" for c in classes]
                   + ["average"])
        for r in reports:
            w.writerow([r.run_id, r.dataset, "" if r.round is None else r.round, int(r.union_mode), r.sample_count]
                       + [repr(r.per_class[c]) if c in r.per_class else "" for c in classes] + [repr(r.average)])
    return path


def write_reports_json(reports: Sequence[DiceReport], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    return path


def read_reports_json(path) -> list[DiceReport]:
    return [DiceReport.from_dict(d) for d in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------- #
# Local-steps ablation
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class AblationRow:
    method: str
    local_steps: int
    rounds: int
    seed: int
    average: float
    per_class: dict[int, float]


def ablation_local_steps(base_cfg, data, settings: Sequence[tuple[int, int]], methods: Sequence[str],
                         seeds: Sequence[int] = (0,), out_dir=None, workers: int | None = None) -> list[AblationRow]:
    """Train every (method, S, R, seed) combination and score it on the external set.

    All ``(S, R)`` settings must share the same ``S * R`` budget.
    """
    from .config import with_method, with_seed
    from .federation import run_experiment

    budgets = {s * r for s, r in settings}
    if len(budgets) != 1:
        raise ValueError(f"settings do not share one S*R budget: {sorted(budgets)}")
    if data.external is None:
        raise ValueError("ablation needs the external test set")
    rows = []
    for method in methods:
        for s, r in settings:
            for seed in seeds:
                cfg = with_seed(with_method(base_cfg, method).replace_federation(rounds=r, local_steps=s), seed)
                sub = None if out_dir is None else Path(out_dir) / f"{method}_S{s}_R{r}_seed{seed}"
                res = run_experiment(cfg, data, sub, workers=workers)
                rep = evaluate(res.final, data.external, model_cfg=cfg.model, union_mode=cfg.eval.union_mode)
                rows.append(AblationRow(method, s, r, seed, rep.average, rep.per_class))
    return rows


def write_ablation_tsv(rows: Sequence[AblationRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["method", "local_steps", "rounds", "seed", "average_dice"])
        for r in rows:
            w.writerow([r.method, r.local_steps, r.rounds, r.seed, repr(r.average)])
    return path


def summarize_ablation(rows: Sequence[AblationRow]) -> dict[tuple[str, int], float]:
    """Median average Dice over seeds per (method, S)."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r.method, r.local_steps), []).append(r.average)
    return {k: float(np.median(v)) for k, v in groups.items()}
