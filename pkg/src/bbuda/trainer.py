"""Supervised source training and black-box target adaptation.

Every random draw in a run (batch indices, dropout masks) comes from a
generator seeded by ``(seed, iteration, stream)``, so a run interrupted at
iteration ``k`` and resumed from its checkpoint replays iterations
``k..end`` exactly.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import AdamSnapshot, Checkpoint, save_checkpoint
from .emd import AdaptSchedule, LossReport, total_loss, warmup_loss, write_loss_log
from .probmap import ProbMap
from .segnet import SegNet, SegNetConfig, init_parameters
from .synthdata import SegSample, stack
from .teacher import TeacherEndpoint
from .tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

_BATCH_STREAM, _DROPOUT_STREAM = 0, 1


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, iteration: int, name: str):
        super().__init__(f"non-finite gradient in {name!r} at iteration {iteration}")
        self.iteration = iteration
        self.name = name


class TrainingAborted(RuntimeError):
    """Raised when a run stops early; ``checkpoint`` holds resumable state."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def snapshot(self) -> AdamSnapshot:
        return AdamSnapshot(self.lr, self.beta1, self.beta2, self.eps, self.step,
                            {k: a.copy() for k, a in self.m.items()},
                            {k: a.copy() for k, a in self.v.items()})

    @classmethod
    def from_snapshot(cls, snap: AdamSnapshot) -> "AdamState":
        return cls(snap.lr, snap.beta1, snap.beta2, snap.eps, snap.step,
                   {k: a.copy() for k, a in snap.m.items()},
                   {k: a.copy() for k, a in snap.v.items()})


def adam_step(state: AdamState, params: Dict[str, Tensor], iteration: int = -1) -> None:
    """One bias-corrected Adam update of every parameter that has a gradient.

    All gradients are checked before anything is modified, so a
    non-finite gradient leaves both parameters and state untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(iteration, name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(DTYPE, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / DTYPE(c1)
        vhat = v / DTYPE(c2)
        p.data = (p.data - DTYPE(state.lr) * mhat / (np.sqrt(vhat) + DTYPE(state.eps))).astype(DTYPE)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainRunConfig:
    batch_size: int = 8
    total_iters: int = 2000
    seed: int = 0
    lr: float = 1e-3
    net: SegNetConfig = field(default_factory=SegNetConfig)
    schedule: AdaptSchedule = field(default_factory=AdaptSchedule)
    warmup_iters: int = 0
    warmup_lr: Optional[float] = None     # defaults to ``lr``
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if self.lr <= 0 or (self.warmup_lr is not None and self.warmup_lr <= 0):
            raise ValueError("learning rates must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, it: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, it, stream]))


def _batch(n: int, size: int, seed: int, it: int) -> np.ndarray:
    rng = _rng(seed, it, _BATCH_STREAM)
    return rng.choice(n, size=min(size, n), replace=False)


def _check_finite_loss(loss: Tensor, it: int) -> None:
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss at iteration {it}")


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------

def train_source(
    config: TrainRunConfig,
    dataset: Sequence[SegSample],
    on_step: Optional[Callable[[int, float], None]] = None,
) -> Checkpoint:
    """Pixel-wise cross-entropy training of the network that becomes the teacher."""
    if not dataset:
        raise ValueError("source dataset is empty")
    images, labels = stack(dataset)
    if labels is None:
        raise ValueError("source training needs every sample labelled")
    if labels.min() < 0 or labels.max() >= config.net.num_classes:
        raise ValueError(f"labels must lie in [0, {config.net.num_classes})")

    net = init_parameters(config.net, config.seed).train()
    state = AdamState(lr=config.lr)
    for it in range(config.total_iters):
        idx = _batch(len(images), config.batch_size, config.seed, it)
        net.zero_grad()
        logits = net.forward(images[idx], rng=_rng(config.seed, it, _DROPOUT_STREAM))
        loss = T.cross_entropy(logits, labels[idx])
        _check_finite_loss(loss, it)
        loss.backward()
        adam_step(state, net.params, it)
        if on_step is not None:
            on_step(it, loss.item())
        if it % 200 == 0:
            log.info("source iter %d loss %.4f", it, loss.item())
    return Checkpoint.from_net(net, config.total_iters, state.snapshot(),
                               meta={"role": "source", "seed": config.seed})


# ---------------------------------------------------------------------------
# black-box adaptation
# ---------------------------------------------------------------------------

class TeacherCache:
    """Per-sample memo of teacher outputs (the teacher is frozen)."""

    def __init__(self, teacher: TeacherEndpoint):
        self._teacher = teacher
        self._store: Dict[str, ProbMap] = {}
        self._lock = threading.Lock()
        self.queries = 0

    def get(self, sample: SegSample) -> ProbMap:
        with self._lock:
            hit = self._store.get(sample.id)
        if hit is not None:
            return hit
        pm = self._teacher.predict(sample.image[None])
        with self._lock:
            self._store[sample.id] = pm
            self.queries += 1
        return pm

    def batch(self, samples: Sequence[SegSample]) -> np.ndarray:
        return np.stack([self.get(s).values for s in samples])


def warmup_rate(start: float, end: float, step: int, warm: int) -> float:
    """Linear anneal from ``start`` (step 0) towards ``end`` (reached at step ``warm``)."""
    return start + (end - start) * step / warm


def adapt_target(
    config: TrainRunConfig,
    teacher: TeacherEndpoint,
    dataset: Sequence[SegSample],
    resume: Optional[Checkpoint] = None,
    log_path=None,
    checkpoint_path=None,
    stop_after: Optional[int] = None,
    on_report: Optional[Callable[[LossReport], None]] = None,
) -> tuple:
    """Adapt a fresh student to unlabelled target data using only teacher predictions.

    ``config.warmup_iters`` pure-distillation steps come first (teacher-first
    KL, no entropy term, learning rate annealed linearly from ``warmup_lr``
    towards ``lr``); they are reported with negative iteration numbers
    ``-warmup_iters..-1``. The schedule then runs
    iterations ``0..schedule.total_iters`` inclusive, so its first report
    uses ``lambda0``/``alpha_start`` and its last ``alpha_end``.

    Returns ``(checkpoint, reports)``. With ``stop_after=k`` the run halts
    after iteration ``k`` and raises :class:`TrainingAborted` carrying a
    resumable checkpoint; pass that checkpoint as ``resume`` to continue.
    """
    if not dataset:
        raise ValueError("target dataset is empty")
    schedule = config.schedule
    warm = config.warmup_iters
    warm_lr = config.lr if config.warmup_lr is None else config.warmup_lr
    images = np.stack([s.image for s in dataset]).astype(DTYPE)
    cache = TeacherCache(teacher)

    if resume is not None:
        student = resume.build_net().train()
        state = AdamState.from_snapshot(resume.adam) if resume.adam else AdamState(lr=config.lr)
        first = resume.iteration
    else:
        student = init_parameters(config.net, config.seed).train()
        state = AdamState(lr=config.lr)
        first = 0

    def make_ckpt(next_step: int) -> Checkpoint:
        return Checkpoint.from_net(student, next_step, state.snapshot(),
                                   meta={"role": "student", "seed": config.seed})

    reports: List[LossReport] = []
    n_steps = warm + schedule.total_iters + 1
    for step in range(first, n_steps):
        it = step - warm
        idx = _batch(len(dataset), config.batch_size, config.seed, step)
        try:
            fs = cache.batch([dataset[i] for i in idx])
        except Exception as exc:
            ckpt = make_ckpt(step)
            if checkpoint_path is not None:
                save_checkpoint(ckpt, checkpoint_path)
            raise TrainingAborted(f"teacher query failed at iteration {it}: {exc}", ckpt) from exc

        state.lr = warmup_rate(warm_lr, config.lr, step, warm) if it < 0 else config.lr
        student.zero_grad()
        logits = student.forward(images[idx], rng=_rng(config.seed, step, _DROPOUT_STREAM))
        ft = T.softmax(logits)
        if it < 0:
            loss, report = warmup_loss(ft, fs, schedule, it)
        else:
            loss, report = total_loss(ft, fs, schedule, it)
        _check_finite_loss(loss, it)
        loss.backward()
        adam_step(state, student.params, it)

        reports.append(report)
        if log_path is not None:
            write_loss_log(log_path, [report], append=True)
        if on_report is not None:
            on_report(report)
        if step % 100 == 0:
            log.info("adapt iter %d lambda %.4f alpha %.3f kl %.4f ent %.4f",
                     it, report.lambda_used, report.alpha_used, report.kl, report.entropy)

        if (checkpoint_path is not None and config.checkpoint_interval
                and (step + 1) % config.checkpoint_interval == 0):
            save_checkpoint(make_ckpt(step + 1), checkpoint_path)
        if stop_after is not None and it == stop_after and step + 1 < n_steps:
            ckpt = make_ckpt(step + 1)
            if checkpoint_path is not None:
                save_checkpoint(ckpt, checkpoint_path)
            raise TrainingAborted(f"stopped after iteration {it}", ckpt)

    ckpt = make_ckpt(n_steps)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, reports
