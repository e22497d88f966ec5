"""Exponential-mixup-decay pseudo labels, KL distillation and entropy losses.

The student's per-pixel softmax ``f_t`` is trained against a pseudo label

    y' = lam * f_s + (1 - lam) * stopgrad(f_t)

with ``lam`` decaying exponentially over training. The objective is

    L = KL(f_t || y') + alpha * H(f_t)

where both terms are averaged over pixels and ``alpha`` moves linearly
from ``alpha_start`` to ``alpha_end``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple, Union

import numpy as np

from . import tensor as T
from .probmap import ProbMap
from .tensor import DTYPE, ShapeError, Tensor

EPS = 1e-8

ArrayLike = Union[np.ndarray, Tensor, ProbMap]


@dataclass(frozen=True)
class AdaptSchedule:
    lambda0: float = 1.0
    decay_scale: float = 5.0
    total_iters: int = 500
    alpha_start: float = 5.0
    alpha_end: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.lambda0 <= 1.0:
            raise ValueError(f"lambda0 must be in (0, 1], got {self.lambda0}")
        if self.decay_scale < 0:
            raise ValueError(f"decay_scale must be >= 0, got {self.decay_scale}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")

    def _check(self, it: int) -> None:
        if not 0 <= it <= self.total_iters:
            raise ValueError(f"iteration {it} outside [0, {self.total_iters}]")


@dataclass(frozen=True)
class LossReport:
    iter: int
    lambda_used: float
    alpha_used: float
    kl: float
    entropy: float
    total: float


LOG_COLUMNS = ("iter", "lambda", "alpha", "kl", "entropy", "total")


def emd_lambda(schedule: AdaptSchedule, it: int) -> float:
    """Teacher weight ``lambda0 * exp(-decay_scale * it / total_iters)``."""
    schedule._check(it)
    return schedule.lambda0 * math.exp(-schedule.decay_scale * it / schedule.total_iters)


def alpha_weight(schedule: AdaptSchedule, it: int) -> float:
    schedule._check(it)
    if it == schedule.total_iters:
        return float(schedule.alpha_end)
    frac = it / schedule.total_iters
    return schedule.alpha_start + (schedule.alpha_end - schedule.alpha_start) * frac


def _values(p: ArrayLike) -> np.ndarray:
    if isinstance(p, ProbMap):
        return p.values
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p, dtype=DTYPE)


def mixup_pseudo_label(teacher: ArrayLike, student: ArrayLike, lam: float) -> np.ndarray:
    """Blend teacher and student probabilities into a constant pseudo label.

    The student branch is detached: the returned array never carries
    gradient, and it is a copy, so later mutation cannot reach back into
    either input.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    fs, ft = _values(teacher), _values(student)
    if fs.shape != ft.shape:
        raise ShapeError(f"teacher {fs.shape} and student {ft.shape} shapes differ")
    if lam == 1.0:
        return np.array(fs, dtype=DTYPE)
    if lam == 0.0:
        return np.array(ft, dtype=DTYPE)
    return (DTYPE(lam) * fs + DTYPE(1.0 - lam) * ft).astype(DTYPE)


def _pixels(p: Tensor) -> int:
    # (C,H,W) or (N,C,H,W): average over every axis but the class axis
    return p.size // p.shape[-3]


def kl_distillation_loss(student: Tensor, pseudo: ArrayLike) -> Tensor:
    """Pixel-averaged ``KL(student || pseudo)``, student first."""
    y = _values(pseudo)
    if student.shape != y.shape:
        raise ShapeError(f"student {student.shape} and pseudo label {y.shape} shapes differ")
    log_y = np.log(np.maximum(y, DTYPE(EPS)))
    per = T.mul(student, T.sub(T.log(student, EPS), log_y))
    return T.mul(T.tsum(per), 1.0 / _pixels(student))


def entropy_loss(student: Tensor) -> Tensor:
    """Pixel-averaged Shannon entropy ``-sum_c p log p``; lies in [0, ln C]."""
    if student.ndim not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) probabilities, got {student.shape}")
    per = T.mul(student, T.log(student, EPS))
    return T.mul(T.tsum(per), -1.0 / _pixels(student))


def total_loss(
    student: Tensor, teacher: ArrayLike, schedule: AdaptSchedule, it: int
) -> Tuple[Tensor, LossReport]:
    lam = emd_lambda(schedule, it)
    alpha = alpha_weight(schedule, it)
    pseudo = mixup_pseudo_label(teacher, student, lam)
    kl = kl_distillation_loss(student, pseudo)
    ent = entropy_loss(student)
    loss = kl if alpha == 0.0 else T.add(kl, T.mul(ent, alpha))
    kl_v, ent_v = kl.item(), ent.item()
    report = LossReport(
        iter=it,
        lambda_used=lam,
        alpha_used=alpha,
        kl=kl_v,
        entropy=ent_v,
        total=kl_v + alpha * ent_v,
    )
    return loss, report


def teacher_kl_loss(student: Tensor, teacher: ArrayLike) -> Tensor:
    """Pixel-averaged ``KL(teacher || student)``, the usual distillation direction."""
    y = _values(teacher)
    if student.shape != y.shape:
        raise ShapeError(f"student {student.shape} and teacher {y.shape} shapes differ")
    y_log_y = float(np.sum(y * np.log(np.maximum(y, DTYPE(EPS))), dtype=np.float64))
    cross = T.tsum(T.mul(T.log(student, EPS), y))
    return T.mul(T.sub(y_log_y, cross), 1.0 / _pixels(student))


def warmup_loss(student: Tensor, teacher: ArrayLike, schedule: AdaptSchedule, it: int) -> Tuple[Tensor, LossReport]:
    """Distillation-only objective used before the schedule starts (``it`` < 0).

    A randomly initialised student trained on ``KL(student || teacher)``
    collapses onto the majority class for a long, seed-dependent stretch:
    the gradient of that direction vanishes wherever the student is
    confidently wrong. The teacher-first direction has logit gradient
    ``p_student - p_teacher`` and fits the teacher quickly, so warm-up uses
    it. The entropy term is off; ``kl`` in the report is this divergence.
    """
    if it >= 0:
        raise ValueError(f"warm-up iterations are negative, got {it}")
    kl = teacher_kl_loss(student, teacher)
    ent_v = float(-np.sum(student.data * np.log(np.maximum(student.data, DTYPE(EPS))), dtype=np.float64)
                  / _pixels(student))
    kl_v = kl.item()
    return kl, LossReport(iter=it, lambda_used=schedule.lambda0, alpha_used=0.0,
                          kl=kl_v, entropy=ent_v, total=kl_v)


# ---------------------------------------------------------------------------
# CSV training log
# ---------------------------------------------------------------------------

def _row(r: LossReport) -> list:
    return [r.iter, repr(r.lambda_used), repr(r.alpha_used), repr(r.kl), repr(r.entropy), repr(r.total)]


def write_loss_log(path, reports: Iterable[LossReport], append: bool = False) -> None:
    new_file = not append
    try:
        new_file = new_file or open(path).read(1) == ""
    except FileNotFoundError:
        new_file = True
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new_file:
            w.writerow(LOG_COLUMNS)
        for r in reports:
            w.writerow(_row(r))


def read_loss_log(path) -> List[LossReport]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(LossReport(
                iter=int(rec["iter"]),
                lambda_used=float(rec["lambda"]),
                alpha_used=float(rec["alpha"]),
                kl=float(rec["kl"]),
                entropy=float(rec["entropy"]),
                total=float(rec["total"]),
            ))
    return out
