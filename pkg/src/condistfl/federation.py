"""Client training, server aggregation and the synchronous round loop.

A round broadcasts the global checkpoint and the distillation weight to every
client, waits for all of them to return an update, then aggregates. Clients
run on worker threads; each owns its model, tape and batch stream, and
only immutable checkpoint copies cross the client/server boundary.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .evaluation import predict_dataset, score
from .seg_model import Checkpoint, ModelConfig, SegNet, deep_supervision_weights, downsample_label, save_checkpoint
from .synth_data import Dataset, batch_stream
from .tensor import Tensor

LOSS_MODES = ("dice_ce_standard", "marginal", "marginal_plus_condist")
AGGREGATORS = ("fedavg", "fedopt", "fedprox")


class ClientAbort(RuntimeError):
    """A client hit a non-finite loss term; the round is abandoned."""

    def __init__(self, client: str, step: int, term: str, value: float):
        super().__init__(f"client {client} step {step}: non-finite {term} loss ({value})")
        self.client, self.step, self.term = client, step, term


class RunAbort(RuntimeError):
    """A round failed; no partial aggregation was applied."""


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    local_steps: int = 50
    batch_size: int = 4
    lr_start: float = 1e-2
    lr_end: float = 1e-7
    loss_mode: str = "marginal_plus_condist"
    union_mode: bool = False

    def __post_init__(self):
        errors = []
        if self.rounds < 1:
            errors.append(f"rounds must be >= 1, got {self.rounds}")
        if self.local_steps < 0:
            errors.append(f"local_steps must be >= 0, got {self.local_steps}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_start > self.lr_end > 0:
            errors.append(f"need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.loss_mode not in LOSS_MODES:
            errors.append(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def total_steps(self) -> int:
        return self.rounds * self.local_steps


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "fedavg"
    server_momentum: float = 0.6
    server_lr: float = 1.0
    prox_mu: float = 0.01

    def __post_init__(self):
        errors = []
        if self.kind not in AGGREGATORS:
            errors.append(f"aggregator must be one of {AGGREGATORS}, got {self.kind!r}")
        if not 0 <= self.server_momentum < 1:
            errors.append(f"server_momentum must be in [0, 1), got {self.server_momentum}")
        if self.server_lr <= 0:
            errors.append(f"server_lr must be positive, got {self.server_lr}")
        if self.prox_mu < 0:
            errors.append(f"prox_mu must be >= 0, got {self.prox_mu}")
        if errors:
            raise ValueError("; ".join(errors))


def cosine_lr(step: int, total_steps: int, lr_start: float = 1e-2, lr_end: float = 1e-7) -> float:
    """Cosine annealing from ``lr_start`` at step 0 to ``lr_end`` at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return lr_start
    c = 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))
    return lr_start * c + lr_end * (1.0 - c)


# --------------------------------------------------------------------------- #
# Messages
# --------------------------------------------------------------------------- #
@dataclass
class ClientUpdate:
    client_id: str
    parameters: Checkpoint
    sample_count: int
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError(f"client {self.client_id}: sample_count must be positive, got {self.sample_count}")


@dataclass(frozen=True)
class RoundMessage:
    """``to_client`` carries the round, global checkpoint and weight; ``to_server`` an update."""

    direction: str
    round: int
    checkpoint: Checkpoint | None = None
    weight: float | None = None
    update: ClientUpdate | None = None

    def __post_init__(self):
        if self.direction == "to_client":
            if self.checkpoint is None or self.weight is None:
                raise ValueError("a broadcast needs a checkpoint and a distillation weight")
        elif self.direction == "to_server":
            if self.update is None:
                raise ValueError("a reply needs a client update")
        else:
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass
class Client:
    client_id: str
    topology: L.ClassTopology
    train: Dataset
    seed: int = 0
    val: Dataset | None = None


# --------------------------------------------------------------------------- #
# Client side
# --------------------------------------------------------------------------- #
def proximal_term(params: dict[str, Tensor], anchor: dict[str, np.ndarray], mu: float) -> Tensor:
    """``(mu / 2) * sum ||theta - anchor||^2`` over all named parameters."""
    total = None
    for name, p in params.items():
        d = p - Tensor(anchor[name], dtype=p.dtype)
        s = T.sum(T.pow2(d))
        total = s if total is None else total + s
    return total * (0.5 * mu)


def client_objective(student: SegNet, x: np.ndarray, y: np.ndarray, topo: L.ClassTopology, loss_mode: str,
                     weight: float = 0.0, distill: L.DistillConfig | None = None,
                     teacher_logits: Tensor | None = None, prox_mu: float = 0.0,
                     anchor: dict[str, np.ndarray] | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Total client loss and its named terms for one batch.

    Deep supervision applies to the supervised term only; distillation uses
    the full-resolution head. The proximal term is skipped when ``prox_mu`` is 0.
    """
    heads = student(x)
    ds_w = deep_supervision_weights(len(heads))
    mode = "standard" if loss_mode == "dice_ce_standard" else "marginal"
    sup = None
    for d, (h, wd) in enumerate(zip(heads, ds_w)):
        term = L.supervised_loss(h, downsample_label(y, d), topo, mode) * wd
        sup = term if sup is None else sup + term
    terms = {"sup": sup}
    total = sup
    if loss_mode == "marginal_plus_condist":
        if teacher_logits is None:
            raise ValueError("distillation needs teacher logits")
        cd = L.condist_loss(heads[0], teacher_logits, y, topo, distill or L.DistillConfig())
        terms["condist"] = cd
        total = L.total_loss(sup, cd, weight)
    if prox_mu > 0:
        if anchor is None:
            raise ValueError("the proximal term needs the global parameters")
        prox = proximal_term(student.params, anchor, prox_mu)
        terms["prox"] = prox
        total = total + prox
    return total, terms


def local_train(client: Client, global_ckpt: Checkpoint, round_idx: int, cfg: TrainConfig,
                distill: L.DistillConfig, model_cfg: ModelConfig, aggregator: AggregatorConfig | None = None,
                weight: float | None = None) -> ClientUpdate:
    """Run ``cfg.local_steps`` SGD steps starting from the global model."""
    aggregator = aggregator or AggregatorConfig()
    weight = L.schedule_weight(round_idx, distill) if weight is None else weight
    T.reset_tape()
    student = model_cfg.build(client.topology.num_classes)
    student.load_checkpoint(global_ckpt)
    teacher = None
    if cfg.loss_mode == "marginal_plus_condist":
        teacher = student.clone(trainable=False)
    mu = aggregator.prox_mu if aggregator.kind == "fedprox" else 0.0
    anchor = {k: v.copy() for k, v in global_ckpt.entries.items()} if mu > 0 else None
    stream = batch_stream(client.train, cfg.batch_size, (client.seed, round_idx))
    sums: dict[str, float] = {}
    lrs = []
    for s in range(cfg.local_steps):
        x, y = next(stream)
        lr = cosine_lr(round_idx * cfg.local_steps + s, cfg.total_steps, cfg.lr_start, cfg.lr_end)
        lrs.append(lr)
        t_logits = None
        if teacher is not None:
            with T.no_grad():
                t_logits = teacher(x, all_heads=False)[0]
        total, terms = client_objective(student, x, y, client.topology, cfg.loss_mode, weight, distill, t_logits,
                                        mu, anchor)
        for name, t in list(terms.items()) + [("total", total)]:
            v = t.item()
            if not math.isfinite(v):
                T.reset_tape()
                raise ClientAbort(client.client_id, s, name, v)
            sums[name] = sums.get(name, 0.0) + v
        student.zero_grad()
        T.backward(total)
        for p in student.parameters():
            if p.grad is not None:
                p.data = p.data - p.dtype.type(lr) * p.grad
    metrics = {f"loss_{k}": v / cfg.local_steps for k, v in sums.items()}
    if lrs:
        metrics["lr_first"], metrics["lr_last"] = lrs[0], lrs[-1]
    metrics["weight"] = float(weight)
    ckpt = student.checkpoint(round_idx, (round_idx + 1) * cfg.local_steps)
    return ClientUpdate(client.client_id, ckpt, len(client.train), metrics)


# --------------------------------------------------------------------------- #
# Server side
# --------------------------------------------------------------------------- #
def _check_congruent(reference: dict[str, np.ndarray], updates: Sequence[ClientUpdate]) -> None:
    for u in updates:
        if list(u.parameters.entries) != list(reference):
            missing = set(reference) ^ set(u.parameters.entries)
            raise ValueError(f"client {u.client_id} parameter names differ: {sorted(missing)[:5]}")
        for name, arr in u.parameters.entries.items():
            if arr.shape != reference[name].shape:
                raise ValueError(f"parameter {name!r}: client {u.client_id} shape {arr.shape} "
                                 f"vs {reference[name].shape}")


def _weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    n = np.array([u.sample_count for u in updates], dtype=np.float64)
    return n / n.sum()


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> Checkpoint:
    """Sample-count-weighted mean of client parameters."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    ref = updates[0].parameters.entries
    _check_congruent(ref, updates)
    w = _weights(updates)
    out = {}
    for name in ref:
        acc = np.zeros(ref[name].shape, dtype=np.float64)
        for wk, u in zip(w, updates):
            acc += wk * u.parameters.entries[name]
        out[name] = acc.astype(np.float32)
    r = max(u.parameters.round for u in updates)
    return Checkpoint(out, r, max(u.parameters.step for u in updates))


def aggregate_fedopt(global_ckpt: Checkpoint, updates: Sequence[ClientUpdate], cfg: AggregatorConfig,
                     velocity: dict[str, np.ndarray] | None = None) -> tuple[Checkpoint, dict[str, np.ndarray]]:
    """Server SGD with momentum on the weighted mean client delta.

    Returns the new global checkpoint and the updated velocity; pass
    ``velocity=None`` on the first round.
    """
    if not updates:
        raise ValueError("no client updates to aggregate")
    g = global_ckpt.entries
    _check_congruent(g, updates)
    if velocity is None:
        velocity = {k: np.zeros(v.shape, dtype=np.float64) for k, v in g.items()}
    elif set(velocity) != set(g) or any(velocity[k].shape != g[k].shape for k in g):
        raise ValueError("velocity buffer does not match the global parameters")
    w = _weights(updates)
    out, new_v = {}, {}
    for name, base in g.items():
        base64 = base.astype(np.float64)
        delta = np.zeros(base.shape, dtype=np.float64)
        for wk, u in zip(w, updates):
            delta += wk * (u.parameters.entries[name].astype(np.float64) - base64)
        v = cfg.server_momentum * velocity[name] + delta
        new_v[name] = v
        out[name] = (base64 + cfg.server_lr * v).astype(np.float32)
    r = max(u.parameters.round for u in updates)
    return Checkpoint(out, r, max(u.parameters.step for u in updates)), new_v


# --------------------------------------------------------------------------- #
# Orchestration
# --------------------------------------------------------------------------- #
@dataclass
class RunResult:
    final: Checkpoint
    best: Checkpoint
    best_round: int
    history: list[dict]
    out_dir: Path | None = None


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True)


def build_clients(data, seeds: dict[str, int]) -> list[Client]:
    from .synth_data import client_topology

    return [Client(k, client_topology(k), splits["train"], seeds[k], splits.get("val"))
            for k, splits in sorted(data.clients.items())]


def validate(model: SegNet, clients: Sequence[Client], union_mode: bool = False) -> dict[int, float]:
    """Dice per foreground class, each class scored on the client that labels it."""
    out: dict[int, float] = {}
    for c in clients:
        if c.val is None or len(c.val) == 0:
            continue
        preds = predict_dataset(model, c.val.images)
        out.update(score(preds, c.val.labels, c.topology.foreground, union_mode))
    return dict(sorted(out.items()))


def run_experiment(cfg, data, out_dir=None, workers: int | None = None) -> RunResult:
    """Train one federated run described by an experiment config.

    Writes ``metrics.jsonl``, ``final.cdfl`` and ``best.cdfl`` under
    ``out_dir`` when given. A client failure aborts the run with
    :class:`RunAbort`; no update from that round is applied.
    """
    train, agg = cfg.federation, cfg.aggregator
    distill = cfg.distill_for_run()
    clients = build_clients(data, cfg.seeds_clients)
    if not clients:
        raise ValueError("no clients in the dataset")
    workers = workers or cfg.workers or len(clients)
    model = cfg.model.build(clients[0].topology.num_classes)
    global_ckpt = model.checkpoint(0, 0)
    velocity = None
    out_dir = Path(out_dir) if out_dir is not None else None
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = (out_dir / "metrics.jsonl").open("w")
    history: list[dict] = []
    best, best_score, best_round = global_ckpt, -math.inf, -1

    def emit(rec):
        history.append(rec)
        if log is not None:
            log.write(_json_line(rec) + "\n")
            log.flush()

    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for r in range(train.rounds):
                w = L.schedule_weight(r, distill)
                msg = RoundMessage("to_client", r, global_ckpt.copy(), w)
                futures = {
                    c.client_id: pool.submit(local_train, c, msg.checkpoint, r, train, distill, cfg.model, agg, w)
                    for c in clients
                }
                replies = []
                for cid in sorted(futures):
                    try:
                        replies.append(RoundMessage("to_server", r, update=futures[cid].result()))
                    except Exception as exc:
                        for f in futures.values():
                            f.cancel()
                        raise RunAbort(f"round {r} aborted: {exc}") from exc
                updates = [m.update for m in replies]
                assert len(updates) == len(clients), "aggregation barrier saw a missing client update"
                if agg.kind == "fedopt":
                    global_ckpt, velocity = aggregate_fedopt(global_ckpt, updates, agg, velocity)
                else:
                    global_ckpt = aggregate_fedavg(updates)
                global_ckpt = Checkpoint(global_ckpt.entries, r + 1, (r + 1) * train.local_steps)
                for u in updates:
                    emit({"type": "client", "round": r, "client": u.client_id, "samples": u.sample_count,
                          **u.metrics})
                model.load_checkpoint(global_ckpt)
                val = validate(model, clients, train.union_mode)
                avg = float(np.mean(list(val.values()))) if val else float("nan")
                emit({"type": "round", "round": r, "weight": w,
                      "val_dice": {str(k): v for k, v in val.items()}, "val_average": avg})
                if avg > best_score:
                    best, best_score, best_round = global_ckpt.copy(), avg, r
    finally:
        if log is not None:
            log.close()
    if best_round < 0:
        best = global_ckpt.copy()
    if out_dir is not None:
        save_checkpoint(global_ckpt, out_dir / "final.cdfl")
        save_checkpoint(best, out_dir / "best.cdfl")
    return RunResult(global_ckpt, best, best_round, history, out_dir)
