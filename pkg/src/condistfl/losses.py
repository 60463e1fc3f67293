"""Supervised marginal loss and conditional distillation loss.

Shapes follow the ``[B, N, H, W]`` logits convention. Class 0 is the global
background. For a client with foreground classes ``F``, every other class is
background ``B = {0..N-1} \\ F`` and is partitioned into groups
``G_0 = {0}, G_1, ..., G_M`` (one group per unlabeled organ with its lesions).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CE_CLAMP = 1e-7
COND_FLOOR = 1e-7


@dataclass(frozen=True)
class ClassTopology:
    """Class layout as seen by one client."""

    num_classes: int
    foreground: tuple[int, ...]
    background_groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "foreground", tuple(sorted(int(c) for c in self.foreground)))
        object.__setattr__(
            self, "background_groups", tuple(tuple(int(c) for c in g) for g in self.background_groups)
        )
        N = self.num_classes
        if N < 2:
            raise ValueError(f"need at least 2 classes, got {N}")
        fg = set(self.foreground)
        if 0 in fg:
            raise ValueError("class 0 is the global background and cannot be foreground")
        if len(fg) != len(self.foreground):
            raise ValueError(f"duplicate foreground classes {self.foreground}")
        if not self.background_groups or self.background_groups[0] != (0,):
            raise ValueError("the first background group must be exactly (0,)")
        seen: set[int] = set()
        for g in self.background_groups:
            if not g:
                raise ValueError("empty background group")
            if seen & set(g):
                raise ValueError(f"background groups overlap on {sorted(seen & set(g))}")
            seen |= set(g)
        everything = fg | seen
        if any(c < 0 or c >= N for c in everything):
            raise ValueError(f"class index out of range for N={N}")
        if seen & fg:
            raise ValueError(f"classes {sorted(seen & fg)} are both foreground and background")
        if everything != set(range(N)):
            raise ValueError(f"groups and foreground miss classes {sorted(set(range(N)) - everything)}")

    @property
    def background(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.num_classes) if c not in self.foreground)

    @property
    def num_unlabeled_organs(self) -> int:
        return len(self.background_groups) - 1


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 0.5
    w_start: float = 0.01
    w_end: float = 1.0
    total_rounds: int = 1
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.w_start <= self.w_end:
            raise ValueError(f"need 0 <= w_start <= w_end, got {self.w_start}, {self.w_end}")
        if self.total_rounds < 1:
            raise ValueError(f"total_rounds must be >= 1, got {self.total_rounds}")


# --------------------------------------------------------------------------- #
# Probability fields
# --------------------------------------------------------------------------- #
def softmax_probs(logits: Tensor, temperature: float = 1.0, num_classes: int | None = None) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if num_classes is not None and logits.shape[1] != num_classes:
        raise ValueError(f"logits have {logits.shape[1]} channels, expected {num_classes}")
    return T.softmax(logits, axis=1, temperature=temperature)


def marginal_merge(probs: Tensor, topo: ClassTopology) -> Tensor:
    """Channel 0 is the merged background; then foreground classes in ascending order."""
    if not topo.foreground:
        raise ValueError("marginal merge needs at least one foreground class")
    return T.gather_channels(probs, [topo.background] + [(c,) for c in topo.foreground])


def merge_foreground(probs: Tensor, topo: ClassTopology) -> Tensor:
    if not topo.foreground:
        raise ValueError("no foreground classes to merge")
    return T.gather_channels(probs, [topo.foreground])


def group_background(probs: Tensor, topo: ClassTopology) -> Tensor:
    return T.gather_channels(probs, topo.background_groups)


def conditional_background(grouped: Tensor, p_fg: Tensor | None = None) -> Tensor:
    """Divide each background group by the total background probability.

    The total is ``1 - p_fg``, which by the partition identity equals the sum
    of the groups. Without ``p_fg`` the group sum is used: it avoids the
    cancellation of ``1 - p_fg`` in float32 when the foreground is confident.
    Either way the denominator is floored at ``1e-7``.
    """
    if p_fg is None:
        total = T.gather_channels(grouped, [tuple(range(grouped.shape[1]))])
    else:
        total = 1.0 - p_fg
    denom = T.clamp_min(total, COND_FLOOR)
    return grouped / T.gather_channels(denom, [(0,)] * grouped.shape[1])


def foreground_filter(label: np.ndarray, teacher_probs: Tensor | np.ndarray, topo: ClassTopology) -> np.ndarray:
    """Voxels outside both the labelled foreground and the teacher's predicted foreground."""
    label = np.asarray(label)
    probs = teacher_probs if isinstance(teacher_probs, Tensor) else Tensor(teacher_probs)
    pred = T.argmax(probs, axis=1)
    fg = np.array(topo.foreground, dtype=np.int64)
    return ~np.isin(label, fg) & ~np.isin(pred, fg)


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #
def soft_dice_loss(p: Tensor, q: Tensor, eps: float = 1e-5) -> Tensor:
    """``1 - mean_c (2 sum pq + eps) / (sum p^2 + sum q^2 + eps)`` over ``[C, V]`` fields."""
    if p.shape != q.shape:
        raise ValueError(f"dice operands differ in shape: {p.shape} vs {q.shape}")
    inter = T.sum(p * q, axis=1)
    denom = T.sum(T.pow2(p), axis=1) + T.sum(T.pow2(q), axis=1)
    if eps:
        inter = inter * 2.0 + eps
        denom = denom + eps
    else:
        inter = inter * 2.0
    return 1.0 - T.mean(inter / denom)


def one_hot(label: np.ndarray, num_channels: int, dtype=np.float32) -> np.ndarray:
    """``[B, H, W]`` class indices to ``[B, C, H, W]`` one-hot."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= num_channels):
        raise ValueError(f"label values outside [0, {num_channels})")
    out = (label[:, None] == np.arange(num_channels).reshape((1, -1) + (1,) * (label.ndim - 1)))
    return out.astype(dtype)


def marginal_label(label: np.ndarray, topo: ClassTopology) -> np.ndarray:
    """Map class indices into the merged space: background -> 0, ``F[i]`` -> ``i + 1``."""
    lut = np.zeros(topo.num_classes, dtype=np.int64)
    for i, c in enumerate(topo.foreground):
        lut[c] = i + 1
    return lut[np.asarray(label)]


def dice_ce_loss(probs: Tensor, label_onehot, eps: float = 1e-5) -> Tensor:
    """Soft Dice plus cross-entropy on already-normalised probabilities."""
    q = np.asarray(label_onehot.data if isinstance(label_onehot, Tensor) else label_onehot)
    if q.shape != probs.shape:
        raise ValueError(f"label shape {q.shape} does not match probabilities {probs.shape}")
    s = q.sum(axis=1)
    if not (np.all((q == 0) | (q == 1)) and np.all(s == 1)):
        raise ValueError("label is not one-hot: every voxel must sum to 1 with values in {0, 1}")
    qt = Tensor(q, dtype=probs.dtype)
    dice = soft_dice_loss(T.select_mask(probs), T.select_mask(qt), eps)
    voxels = q.size // q.shape[1]
    ce = -T.sum(qt * T.log(T.clamp_min(probs, CE_CLAMP))) / float(voxels)
    return dice + ce


def supervised_loss(logits: Tensor, label: np.ndarray, topo: ClassTopology, mode: str = "marginal",
                    eps: float = 1e-5) -> Tensor:
    """DiceCE on the partial label, either marginalised or over all N classes.

    ``mode="marginal"`` merges all background probabilities before the loss;
    ``mode="standard"`` treats the partial label as if it were complete.
    """
    probs = softmax_probs(logits, 1.0, topo.num_classes)
    if mode == "marginal":
        merged = marginal_merge(probs, topo)
        return dice_ce_loss(merged, one_hot(marginal_label(label, topo), merged.shape[1], probs.dtype), eps)
    if mode == "standard":
        return dice_ce_loss(probs, one_hot(label, topo.num_classes, probs.dtype), eps)
    raise ValueError(f"unknown supervised loss mode {mode!r}")


def conditional_probs(logits: Tensor, topo: ClassTopology, temperature: float) -> tuple[Tensor, Tensor]:
    """Return ``(background-conditional group field, temperature probabilities)``."""
    p = softmax_probs(logits, temperature, topo.num_classes)
    return conditional_background(group_background(p, topo)), p


def condist_loss(student_logits: Tensor, teacher_logits: Tensor, label: np.ndarray, topo: ClassTopology,
                 cfg: DistillConfig) -> Tensor:
    """Soft Dice between student and teacher background-conditional fields.

    Voxels labelled foreground, or predicted foreground by the teacher, are
    excluded. Returns exactly 0 when nothing survives the filter.
    """
    if teacher_logits.requires_grad:
        raise ValueError("teacher logits must be detached before distillation")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"student {student_logits.shape} and teacher {teacher_logits.shape} differ")
    cond_t, p_t = conditional_probs(teacher_logits, topo, cfg.temperature)
    keep = foreground_filter(label, p_t, topo)
    if not keep.any():
        return Tensor(0.0, dtype=student_logits.dtype)
    cond_s, _ = conditional_probs(student_logits, topo, cfg.temperature)
    return soft_dice_loss(T.select_mask(cond_s, keep), T.select_mask(cond_t, keep), cfg.dice_epsilon)


def schedule_weight(round_idx: int, cfg: DistillConfig) -> float:
    """Distillation weight for a 0-based round, linear from ``w_start`` to ``w_end``."""
    R = cfg.total_rounds
    if not 0 <= round_idx < R:
        raise ValueError(f"round {round_idx} outside [0, {R})")
    if R == 1:
        return cfg.w_end
    t = round_idx / (R - 1)
    return cfg.w_start * (1.0 - t) + cfg.w_end * t


def total_loss(sup: Tensor, condist: Tensor, w: float) -> Tensor:
    if w < 0:
        raise ValueError(f"distillation weight must be non-negative, got {w}")
    return sup + condist * float(w)
