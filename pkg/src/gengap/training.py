"""Stochastic training procedures.

Implements the four supervised objectives (plain cross-entropy, mutual-KL
co-distillation, sharpness-aware minimization, and their combination), the
semi-supervised masked-consistency variant with EMA teachers, distillation
from a frozen checkpoint, and the grid runner that trains replicates over
disjoint training sets.

Every ``train_*`` function is a pure function of (procedure, data, seed):
repeated runs are bit-identical.  Joint objectives update both models
simultaneously from the pre-step parameters, so swapping the two sub-seeds
swaps the returned models exactly.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .models import (
    Lineage,
    Model,
    ModelSpec,
    dataset_loss_error,
    forward_logits,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tensor_logits,
)
from .rng import (
    ROLE_AUG,
    ROLE_DATA,
    ROLE_MODEL_A,
    ROLE_MODEL_B,
    ROLE_UNLABELED,
    mix64,
    stream,
)


class TrainingDiverged(ArithmeticError):
    """A run hit a non-finite loss or gradient; carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class GridTrainingError(RuntimeError):
    """One or more grid cells failed; carries the partial grid."""

    def __init__(self, failures: list[tuple[int, int, Exception]], grid: "ModelGrid"):
        cells = ", ".join(f"(k={k}, j={j}): {exc}" for k, j, exc in failures)
        super().__init__(f"grid cells failed: {cells}")
        self.failures = failures
        self.partial_grid = grid


# ---------------------------------------------------------------------------
# Procedure configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardObjective:
    kind: str = "standard"


@dataclass(frozen=True)
class ConsistObjective:
    """Two models trained jointly with a mutual KL penalty (weight beta)."""

    beta: float
    kind: str = "consist"


@dataclass(frozen=True)
class SamObjective:
    """Per-micro-batch adversarial perturbation of radius rho."""

    rho: float
    m: int
    kind: str = "sam"


@dataclass(frozen=True)
class ConsistFlatObjective:
    beta: float
    rho: float
    m: int
    kind: str = "consist_flat"


@dataclass(frozen=True)
class SemiConsistObjective:
    """Masked-consistency co-distillation against EMA teachers."""

    beta: float
    conf_threshold: float
    teacher_momentum: float = 0.999
    kind: str = "semi_consist"


@dataclass(frozen=True)
class DistillObjective:
    teacher_path: str
    beta_kl: float
    kind: str = "distill"


Objective = (
    StandardObjective
    | ConsistObjective
    | SamObjective
    | ConsistFlatObjective
    | SemiConsistObjective
    | DistillObjective
)

_PAIRED_KINDS = {"consist", "consist_flat", "semi_consist"}


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule with optional linear warmup.

    ``end_fraction`` is the floor for cosine decay and the terminal value
    for linear decay, both as a fraction of ``base_lr``.
    """

    kind: str  # constant | cosine | linear
    base_lr: float
    warmup_steps: int = 0
    end_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr < 0 or self.warmup_steps < 0:
            raise ValueError("schedule parameters must be nonnegative")


@dataclass(frozen=True)
class Augment:
    kind: str = "none"  # none | gaussian_noise | shift
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian_noise", "shift"):
            raise ValueError(f"unknown augmentation {self.kind!r}")


@dataclass(frozen=True)
class ProcedureSpec:
    """A stochastic training procedure: objective, optimizer, schedule,
    regularization, iterate averaging, and seed policy."""

    name: str
    model: ModelSpec
    objective: Objective
    schedule: Schedule
    batch_size: int
    base_seed: int
    epochs: int | None = None
    update_steps: int | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    grad_clip: float | None = None
    ema_momentum: float | None = None
    augment: Augment = field(default_factory=Augment)
    init_from: str | None = None

    def __post_init__(self):
        if (self.epochs is None) == (self.update_steps is None):
            raise ValueError("exactly one of epochs/update_steps must be set")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.ema_momentum is not None and not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema momentum must lie in [0, 1)")
        kind = self.objective.kind
        if kind in ("consist", "consist_flat") and self.objective.beta < 0:
            raise ValueError("beta must be nonnegative")
        if kind in ("sam", "consist_flat") and self.objective.rho < 0:
            raise ValueError("rho must be nonnegative")
        if kind == "semi_consist" and not 0.0 <= self.objective.conf_threshold <= 1.0:
            raise ValueError("confidence threshold must lie in [0, 1]")

    @property
    def paired(self) -> bool:
        return self.objective.kind in _PAIRED_KINDS


@dataclass
class TrainRecord:
    """Outcome of one training run (one model, or two for joint objectives).

    ``curves`` holds per-epoch (plain CE loss, error) of the live model on
    the full training set; penalty terms are never included.  The reported
    ``final_train_loss``/``final_train_error`` are recomputed on the
    returned final models.
    """

    models: tuple[Model, ...]
    ema_models: tuple[Model, ...] | None
    curves: tuple[list[tuple[float, float]], ...]
    stream_seeds: dict[str, int]
    wall_time: float
    final_train_loss: tuple[float, ...]
    final_train_error: tuple[float, ...]


# ---------------------------------------------------------------------------
# Optimizer and schedule primitives
# ---------------------------------------------------------------------------

def lr_at(schedule: Schedule, step: int, total_steps: int) -> float:
    """Learning rate at ``step`` of ``total_steps`` (warmup then decay)."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if schedule.kind == "constant":
        return schedule.base_lr
    span = max(total_steps - schedule.warmup_steps, 1)
    t = (step - schedule.warmup_steps) / span
    floor = schedule.end_fraction * schedule.base_lr
    if schedule.kind == "cosine":
        return floor + (schedule.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))
    return schedule.base_lr + (floor - schedule.base_lr) * t


@dataclass
class SgdState:
    velocity: np.ndarray


def sgd_step(
    params: ad.ParamVector,
    grads: ad.ParamVector,
    state: SgdState,
    lr: float,
    weight_decay: float = 0.0,
    grad_clip: float | None = None,
    momentum: float = 0.9,
    step: int | None = None,
) -> ad.ParamVector:
    """One Nesterov-momentum update, in place.

    Order: global-norm gradient clip, decoupled weight-decay shrink, then
    v <- mu*v - lr*g and theta <- theta + mu*v - lr*g.
    """
    params._check(grads)
    g = grads.values
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged(f"non-finite gradient at step {step}", step=step)
    if grad_clip is not None:
        norm = float(np.linalg.norm(g))
        if norm > grad_clip:
            g = g * (grad_clip / norm)
    if weight_decay:
        params.values *= 1.0 - lr * weight_decay
    v = state.velocity
    v *= momentum
    v -= lr * g
    params.values += momentum * v - lr * g
    return params


def ema_update(avg: ad.ParamVector, current: ad.ParamVector, momentum: float) -> ad.ParamVector:
    """avg <- momentum*avg + (1-momentum)*current, as a new vector."""
    avg._check(current)
    return ad.ParamVector(
        momentum * avg.values + (1.0 - momentum) * current.values, avg.layout
    )


# ---------------------------------------------------------------------------
# Loss builders (shared across objectives)
# ---------------------------------------------------------------------------

def _ce_term(spec: ModelSpec, xs: np.ndarray, targets: np.ndarray) -> ad.LossFn:
    def loss_fn(leaves: dict[str, ad.Tensor]) -> ad.Tensor:
        logp = ad.log_softmax(tensor_logits(spec, leaves, xs))
        return ad.scale(ad.tsum(logp * targets), -1.0 / xs.shape[0])

    return loss_fn


def _weighted_kl_term(
    spec: ModelSpec, xs: np.ndarray, ref_probs: np.ndarray, weights: np.ndarray
) -> ad.LossFn:
    """sum_x w_x * KL(ref_x || softmax(logits_x)) as a differentiable scalar.

    The reference distributions are constants; only the model logits carry
    gradient.  sum_i p log p is folded in so the term's value is the true KL.
    """
    scaled_ref = ref_probs * weights[:, None]
    log_ref = np.zeros_like(ref_probs)
    np.log(ref_probs, where=ref_probs > 0, out=log_ref)
    plogp = float(np.sum(scaled_ref * log_ref))

    def loss_fn(leaves: dict[str, ad.Tensor]) -> ad.Tensor:
        logq = ad.log_softmax(tensor_logits(spec, leaves, xs))
        cross = ad.scale(ad.tsum(logq * scaled_ref), -1.0)
        return cross + ad.Tensor(plogp)

    return loss_fn


def _combine(*terms: ad.LossFn) -> ad.LossFn:
    def loss_fn(leaves: dict[str, ad.Tensor]) -> ad.Tensor:
        total = terms[0](leaves)
        for t in terms[1:]:
            total = total + t(leaves)
        return total

    return loss_fn


def sam_gradient(
    loss_fn_for_slice: Callable[[int, int], ad.LossFn],
    params: ad.ParamVector,
    rho: float,
    m: int,
    batch_size: int,
) -> ad.ParamVector:
    """Sharpness-aware gradient over a batch split into micro-batches of m.

    Per micro-batch: take the local gradient g, step to theta + rho*g/|g|
    (skipped when |g| < 1e-12), and re-evaluate the gradient there.  The
    micro-batch gradients are combined weighted by micro-batch size so that
    rho=0 reduces exactly to the plain mini-batch gradient.
    """
    if not 1 <= m:
        raise ValueError("micro-batch size m must be positive")
    m = min(m, batch_size)
    total = np.zeros_like(params.values)
    for start in range(0, batch_size, m):
        stop = min(start + m, batch_size)
        loss_fn = loss_fn_for_slice(start, stop)
        g = ad.gradient(loss_fn, params)
        if rho > 0:
            norm = g.l2()
            if norm >= 1e-12:
                g = ad.gradient(loss_fn, params + g.scaled(rho / norm))
        total += (stop - start) * g.values
    return ad.ParamVector(total / batch_size, params.layout)


# ---------------------------------------------------------------------------
# Training loop internals
# ---------------------------------------------------------------------------

def _total_steps(proc: ProcedureSpec, n: int) -> tuple[int, int]:
    steps_per_epoch = max(1, math.ceil(n / proc.batch_size))
    if proc.update_steps is not None:
        return proc.update_steps, steps_per_epoch
    return proc.epochs * steps_per_epoch, steps_per_epoch


def _augment_batch(xs: np.ndarray, aug: Augment, rng: np.random.Generator) -> np.ndarray:
    if aug.kind == "none":
        return xs
    if aug.kind == "gaussian_noise":
        return xs + aug.scale * rng.standard_normal(xs.shape)
    # per-sample scalar shift applied to every feature
    return xs + rng.uniform(-aug.scale, aug.scale, size=(xs.shape[0], 1))


class _ModelState:
    """Per-model mutable training state with its own RNG streams."""

    def __init__(self, proc: ProcedureSpec, xs: np.ndarray, ys: np.ndarray, seed: int):
        self.proc = proc
        self.xs = xs
        self.ys = ys
        self.seed = seed
        if proc.init_from is not None:
            loaded = load_checkpoint(proc.init_from)
            if loaded.spec != proc.model:
                raise ValueError("init_from checkpoint spec does not match procedure model")
            self.params = loaded.params.copy()
        else:
            self.params = init_params(proc.model, seed)
        self.opt = SgdState(np.zeros_like(self.params.values))
        self.data_rng = stream(mix64(seed, ROLE_DATA))
        self.aug_rng = stream(mix64(seed, ROLE_AUG))
        self.ema = self.params.copy() if proc.ema_momentum is not None else None
        self.curve: list[tuple[float, float]] = []
        self._epoch_batches: list[np.ndarray] = []

    def next_batch(self) -> tuple[np.ndarray, np.ndarray, bool]:
        """Next shuffled mini-batch; the flag marks the end of an epoch pass."""
        if not self._epoch_batches:
            perm = self.data_rng.permutation(self.ys.size)
            bs = self.proc.batch_size
            self._epoch_batches = [
                perm[i : i + bs] for i in range(0, perm.size, bs)
            ]
        idx = self._epoch_batches.pop(0)
        xb = _augment_batch(self.xs[idx], self.proc.augment, self.aug_rng)
        return xb, self.ys[idx], not self._epoch_batches

    def apply(self, grads: ad.ParamVector, lr: float, step: int) -> None:
        sgd_step(
            self.params,
            grads,
            self.opt,
            lr,
            weight_decay=self.proc.weight_decay,
            grad_clip=self.proc.grad_clip,
            momentum=self.proc.momentum,
            step=step,
        )
        if self.ema is not None:
            self.ema = ema_update(self.ema, self.params, self.proc.ema_momentum)

    def record_epoch(self) -> None:
        self.curve.append(dataset_loss_error(self.proc.model, self.params, self.xs, self.ys))

    def final_params(self) -> ad.ParamVector:
        return self.ema if self.ema is not None else self.params


def _finish(
    proc: ProcedureSpec,
    states: Sequence[_ModelState],
    lineages: Sequence[Lineage] | None,
    started: float,
) -> TrainRecord:
    if lineages is None:
        lineages = _default_lineages(proc, [s.seed for s in states])
    finals, emas, losses, errs = [], [], [], []
    for i, state in enumerate(states):
        final = state.ema if state.ema is not None else state.params
        finals.append(Model(proc.model, final.copy(), lineages[i]))
        if state.ema is not None:
            emas.append(Model(proc.model, state.ema.copy(), lineages[i]))
        loss, err = dataset_loss_error(proc.model, final, state.xs, state.ys)
        losses.append(loss)
        errs.append(err)
    return TrainRecord(
        models=tuple(finals),
        ema_models=tuple(emas) if emas else None,
        curves=tuple(s.curve for s in states),
        stream_seeds={f"model{i}": s.seed for i, s in enumerate(states)},
        wall_time=time.perf_counter() - started,
        final_train_loss=tuple(losses),
        final_train_error=tuple(errs),
    )


def _default_lineages(proc: ProcedureSpec, seeds: Sequence[int]) -> list[Lineage]:
    if len(seeds) == 1:
        return [Lineage(proc.name, 0, 0, f"{proc.name}:s{seeds[0]:016x}")]
    # joint runs share one run id, written order-independently so that
    # swapping the sub-seeds swaps the models without renaming the run
    run_id = f"{proc.name}:s{min(seeds):016x}:{max(seeds):016x}"
    return [Lineage(proc.name, 0, i, run_id) for i in range(len(seeds))]


def _check_train_set(proc: ProcedureSpec, xs: np.ndarray, ys: np.ndarray):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if ys.size == 0:
        raise ValueError("empty training set")
    if ys.min() < 0 or ys.max() >= proc.model.num_classes:
        raise ValueError("label out of range for the model's class count")
    return xs, ys


def _supervised_gradient(
    proc: ProcedureSpec,
    params: ad.ParamVector,
    xb: np.ndarray,
    yb: np.ndarray,
    extra_ref: tuple[np.ndarray, np.ndarray] | None = None,
) -> ad.ParamVector:
    """Gradient of CE (+ optional constant-reference KL penalty), with SAM
    micro-batching when the objective asks for it.

    ``extra_ref`` is (reference probability rows over xb, per-example
    weights); the reference is treated as a constant.
    """
    spec = proc.model
    targets = ad.smoothed_targets(yb, spec.num_classes, proc.label_smoothing)
    obj = proc.objective
    sam = obj.kind in ("sam", "consist_flat")

    def slice_loss(start: int, stop: int) -> ad.LossFn:
        sl_x = xb[start:stop]
        terms = [_ce_term(spec, sl_x, targets[start:stop])]
        if extra_ref is not None:
            ref, weights = extra_ref
            # rescale so the slice objective is mean-normalized like the full
            # one; the size-weighted recombination then restores the batch term
            slice_w = weights[start:stop] * (xb.shape[0] / (stop - start))
            terms.append(_weighted_kl_term(spec, sl_x, ref[start:stop], slice_w))
        return _combine(*terms)

    if sam:
        return sam_gradient(
            lambda s, e: slice_loss(s, e), params, obj.rho, obj.m, xb.shape[0]
        )
    return ad.gradient(slice_loss(0, xb.shape[0]), params)


# ---------------------------------------------------------------------------
# Single-model procedures
# ---------------------------------------------------------------------------

def train_standard(
    proc: ProcedureSpec,
    train_set: tuple[np.ndarray, np.ndarray],
    seed: int,
    lineage: Lineage | None = None,
) -> TrainRecord:
    """Plain cross-entropy training (also covers the SAM objective)."""
    if proc.objective.kind not in ("standard", "sam"):
        raise ValueError(f"train_standard cannot run objective {proc.objective.kind!r}")
    started = time.perf_counter()
    xs, ys = _check_train_set(proc, *train_set)
    state = _ModelState(proc, xs, ys, seed)
    total, _ = _total_steps(proc, ys.size)
    for step in range(total):
        xb, yb, epoch_end = state.next_batch()
        grads = _supervised_gradient(proc, state.params, xb, yb)
        state.apply(grads, lr_at(proc.schedule, step, total), step)
        if epoch_end or step == total - 1:
            state.record_epoch()
    return _finish(proc, [state], [lineage] if lineage else None, started)


def train_distill(
    proc: ProcedureSpec,
    train_set: tuple[np.ndarray, np.ndarray],
    seed: int,
    lineage: Lineage | None = None,
) -> TrainRecord:
    """Cross-entropy plus KL toward a frozen teacher's output distribution."""
    obj = proc.objective
    if obj.kind != "distill":
        raise ValueError("train_distill requires a distill objective")
    teacher = load_checkpoint(obj.teacher_path)
    if (
        teacher.spec.input_dim != proc.model.input_dim
        or teacher.spec.num_classes != proc.model.num_classes
    ):
        raise ValueError("teacher checkpoint dimensions do not match the student")
    started = time.perf_counter()
    xs, ys = _check_train_set(proc, *train_set)
    state = _ModelState(proc, xs, ys, seed)
    total, _ = _total_steps(proc, ys.size)
    for step in range(total):
        xb, yb, epoch_end = state.next_batch()
        if obj.beta_kl == 0:
            grads = _supervised_gradient(proc, state.params, xb, yb)
        else:
            ref = ad.softmax(forward_logits(teacher.spec, teacher.params, xb))
            weights = np.full(xb.shape[0], obj.beta_kl / xb.shape[0])
            grads = _supervised_gradient(proc, state.params, xb, yb, (ref, weights))
        state.apply(grads, lr_at(proc.schedule, step, total), step)
        if epoch_end or step == total - 1:
            state.record_epoch()
    return _finish(proc, [state], [lineage] if lineage else None, started)


# ---------------------------------------------------------------------------
# Joint two-model procedures
# ---------------------------------------------------------------------------

def _pair_seeds(proc_seed: int | tuple[int, int]) -> tuple[int, int]:
    if isinstance(proc_seed, tuple):
        return int(proc_seed[0]), int(proc_seed[1])
    return mix64(proc_seed, ROLE_MODEL_A), mix64(proc_seed, ROLE_MODEL_B)


def codistill_step_gradients(
    proc: ProcedureSpec,
    params_a: ad.ParamVector,
    params_b: ad.ParamVector,
    batch_a: tuple[np.ndarray, np.ndarray],
    batch_b: tuple[np.ndarray, np.ndarray],
) -> tuple[ad.ParamVector, ad.ParamVector]:
    """Simultaneous per-step gradients for the mutual-KL objective.

    Each model's penalty compares the partner's outputs on the model's own
    labeled batch, with the partner held constant (stop-gradient).
    """
    beta = proc.objective.beta
    spec = proc.model
    xa, ya = batch_a
    xb, yb = batch_b
    ref_ab = ref_ba = None
    if beta > 0:
        probs_b_on_a = ad.softmax(forward_logits(spec, params_b, xa))
        probs_a_on_b = ad.softmax(forward_logits(spec, params_a, xb))
        ref_ab = (probs_b_on_a, np.full(xa.shape[0], beta / xa.shape[0]))
        ref_ba = (probs_a_on_b, np.full(xb.shape[0], beta / xb.shape[0]))
    ga = _supervised_gradient(proc, params_a, xa, ya, ref_ab)
    gb = _supervised_gradient(proc, params_b, xb, yb, ref_ba)
    return ga, gb


def train_codistill(
    proc: ProcedureSpec,
    train_set: tuple[np.ndarray, np.ndarray],
    seed: int | tuple[int, int],
    lineages: tuple[Lineage, Lineage] | None = None,
) -> TrainRecord:
    """Joint training of two models with mutual consistency encouragement."""
    if proc.objective.kind not in ("consist", "consist_flat"):
        raise ValueError("train_codistill requires a consist objective")
    started = time.perf_counter()
    xs, ys = _check_train_set(proc, *train_set)
    seed_a, seed_b = _pair_seeds(seed)
    a = _ModelState(proc, xs, ys, seed_a)
    b = _ModelState(proc, xs, ys, seed_b)
    total, _ = _total_steps(proc, ys.size)
    for step in range(total):
        xa, ya, end_a = a.next_batch()
        xb, yb, end_b = b.next_batch()
        ga, gb = codistill_step_gradients(proc, a.params, b.params, (xa, ya), (xb, yb))
        lr = lr_at(proc.schedule, step, total)
        a.apply(ga, lr, step)
        b.apply(gb, lr, step)
        if end_a or step == total - 1:
            a.record_epoch()
        if end_b or step == total - 1:
            b.record_epoch()
    return _finish(proc, [a, b], lineages, started)


def semi_step_gradients(
    proc: ProcedureSpec,
    params_a: ad.ParamVector,
    params_b_teacher: ad.ParamVector,
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled_x: np.ndarray,
) -> ad.ParamVector:
    """One student's gradient: CE on its labeled batch plus the masked KL
    toward the partner's EMA teacher on the shared unlabeled batch."""
    obj = proc.objective
    xa, ya = labeled
    spec = proc.model
    targets = ad.smoothed_targets(ya, spec.num_classes, proc.label_smoothing)
    terms = [_ce_term(spec, xa, targets)]
    if obj.beta > 0 and unlabeled_x.shape[0] > 0:
        teacher_probs = ad.softmax(forward_logits(spec, params_b_teacher, unlabeled_x))
        mask = teacher_probs.max(axis=-1) > obj.conf_threshold
        if mask.any():
            weights = (obj.beta / unlabeled_x.shape[0]) * mask.astype(np.float64)
            terms.append(_weighted_kl_term(spec, unlabeled_x, teacher_probs, weights))
    return ad.gradient(_combine(*terms), params_a)


def train_semi_codistill(
    proc: ProcedureSpec,
    labeled_set: tuple[np.ndarray, np.ndarray],
    unlabeled_x: np.ndarray,
    seed: int | tuple[int, int],
    lineages: tuple[Lineage, Lineage] | None = None,
) -> TrainRecord:
    """Semi-supervised co-distillation with confidence-masked penalties.

    Two students train on labeled data while each is pulled toward the
    other's EMA teacher on a shared unlabeled mini-batch; instances where
    the teacher's confidence does not exceed the threshold are masked out.
    Teachers are EMA-updated after every step.  The returned final models
    are the teachers when iterate averaging is configured, else the
    students; the teachers are always returned as the EMA models.
    """
    obj = proc.objective
    if obj.kind != "semi_consist":
        raise ValueError("train_semi_codistill requires a semi_consist objective")
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    if unlabeled_x.shape[0] == 0:
        raise ValueError("empty unlabeled set")
    started = time.perf_counter()
    xs, ys = _check_train_set(proc, *labeled_set)
    seed_a, seed_b = _pair_seeds(seed)
    a = _ModelState(proc, xs, ys, seed_a)
    b = _ModelState(proc, xs, ys, seed_b)
    teacher_a = a.params.copy()
    teacher_b = b.params.copy()
    # one shared unlabeled stream, symmetric under swapping the sub-seeds
    unl_rng = stream(mix64(seed_a ^ seed_b, ROLE_UNLABELED))
    n_unl = unlabeled_x.shape[0]
    total, _ = _total_steps(proc, ys.size)
    for step in range(total):
        xa, ya, end_a = a.next_batch()
        xb, yb, end_b = b.next_batch()
        u_idx = unl_rng.choice(n_unl, size=min(proc.batch_size, n_unl), replace=False)
        xu = unlabeled_x[u_idx]
        ga = semi_step_gradients(proc, a.params, teacher_b, (xa, ya), xu)
        gb = semi_step_gradients(proc, b.params, teacher_a, (xb, yb), xu)
        lr = lr_at(proc.schedule, step, total)
        a.apply(ga, lr, step)
        b.apply(gb, lr, step)
        teacher_a = ema_update(teacher_a, a.params, obj.teacher_momentum)
        teacher_b = ema_update(teacher_b, b.params, obj.teacher_momentum)
        if end_a or step == total - 1:
            a.record_epoch()
        if end_b or step == total - 1:
            b.record_epoch()
    if lineages is None:
        lineages = tuple(_default_lineages(proc, [seed_a, seed_b]))
    teachers = (teacher_a, teacher_b)
    use_teachers = proc.ema_momentum is not None
    finals, losses, errs = [], [], []
    for i, state in enumerate((a, b)):
        final = teachers[i] if use_teachers else state.params
        finals.append(Model(proc.model, final.copy(), lineages[i]))
        loss, err = dataset_loss_error(proc.model, final, state.xs, state.ys)
        losses.append(loss)
        errs.append(err)
    emas = tuple(Model(proc.model, t.copy(), lineages[i]) for i, t in enumerate(teachers))
    return TrainRecord(
        models=tuple(finals),
        ema_models=emas,
        curves=(a.curve, b.curve),
        stream_seeds={"model0": seed_a, "model1": seed_b},
        wall_time=time.perf_counter() - started,
        final_train_loss=tuple(losses),
        final_train_error=tuple(errs),
    )


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------

@dataclass
class ModelGrid:
    """K x J trained models indexed by (training-set k, replicate j)."""

    procedure_id: str
    k_count: int
    j_count: int
    cells: dict[tuple[int, int], Model]

    def group(self, k: int) -> list[Model]:
        return [self.cells[(k, j)] for j in range(self.j_count) if (k, j) in self.cells]

    def models(self) -> list[Model]:
        return [self.cells[key] for key in sorted(self.cells)]


def cell_seed(base_seed: int, k: int, j: int) -> int:
    return mix64(base_seed, k, j)


def _cell_path(out_dir: Path, proc_name: str, k: int, j: int) -> Path:
    return out_dir / "ckpt" / proc_name / f"{k}_{j}.ggap"


def _load_valid_cell(path: Path, proc: ProcedureSpec, lineage: Lineage) -> Model | None:
    if not path.exists():
        return None
    try:
        model = load_checkpoint(str(path))
    except Exception:
        return None
    if model.spec != proc.model or model.lineage != lineage:
        return None
    return model


def _run_cells(
    proc: ProcedureSpec,
    train_set: tuple[np.ndarray, np.ndarray],
    unlabeled: np.ndarray | None,
    k: int,
    js: tuple[int, ...],
) -> list[tuple[int, int, Model, list[tuple[float, float]]]]:
    """Train the cells of one run (a single cell, or a coupled pair)."""
    kind = proc.objective.kind
    if kind in ("standard", "sam"):
        (j,) = js
        lineage = Lineage(proc.name, k, j, f"{proc.name}:k{k}:j{j}")
        rec = train_standard(proc, train_set, cell_seed(proc.base_seed, k, j), lineage)
        return [(k, j, rec.models[0], rec.curves[0])]
    if kind == "distill":
        (j,) = js
        lineage = Lineage(proc.name, k, j, f"{proc.name}:k{k}:j{j}")
        rec = train_distill(proc, train_set, cell_seed(proc.base_seed, k, j), lineage)
        return [(k, j, rec.models[0], rec.curves[0])]
    j0, j1 = js
    run_id = f"{proc.name}:k{k}:r{j0 // 2}"
    lineages = (Lineage(proc.name, k, j0, run_id), Lineage(proc.name, k, j1, run_id))
    seeds = (cell_seed(proc.base_seed, k, j0), cell_seed(proc.base_seed, k, j1))
    if kind == "semi_consist":
        rec = train_semi_codistill(proc, train_set, unlabeled, seeds, lineages)
    else:
        rec = train_codistill(proc, train_set, seeds, lineages)
    return [
        (k, j0, rec.models[0], rec.curves[0]),
        (k, j1, rec.models[1], rec.curves[1]),
    ]


def train_grid(
    proc: ProcedureSpec,
    train_sets: Sequence[tuple[np.ndarray, np.ndarray]],
    replicates: int,
    unlabeled: np.ndarray | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> ModelGrid:
    """Train J replicates on each of K disjoint training sets.

    The sub-seed of cell (k, j) is a mix hash of (base_seed, k, j), so the
    grid is reproducible cell by cell and cells may run concurrently.  With
    ``out_dir`` set, finished cells are checkpointed immediately and valid
    checkpoints are reused on rerun, so interrupted grids resume.
    """
    k_count = len(train_sets)
    if k_count < 1 or replicates < 1:
        raise ValueError("grid needs at least one training set and one replicate")
    if proc.paired and replicates % 2 != 0:
        raise ValueError("joint objectives train models in pairs: J must be even")
    if proc.objective.kind == "semi_consist" and unlabeled is None:
        raise ValueError("semi_consist grids need an unlabeled set")

    runs: list[tuple[int, tuple[int, ...]]] = []
    for k in range(k_count):
        if proc.paired:
            runs.extend((k, (j, j + 1)) for j in range(0, replicates, 2))
        else:
            runs.extend((k, (j,)) for j in range(replicates))

    out_path = Path(out_dir) if out_dir is not None else None
    grid = ModelGrid(proc.name, k_count, replicates, {})
    failures: list[tuple[int, int, Exception]] = []
    curves: dict[str, list[tuple[float, float]]] = {}

    pending: list[tuple[int, tuple[int, ...]]] = []
    for k, js in runs:
        if out_path is not None:
            cached = []
            for j in js:
                lineage_run = (
                    f"{proc.name}:k{k}:j{j}"
                    if not proc.paired
                    else f"{proc.name}:k{k}:r{js[0] // 2}"
                )
                lineage = Lineage(proc.name, k, j, lineage_run)
                cached.append(_load_valid_cell(_cell_path(out_path, proc.name, k, j), proc, lineage))
            if all(m is not None for m in cached):
                for j, m in zip(js, cached):
                    grid.cells[(k, j)] = m
                continue
        pending.append((k, js))

    def handle(k: int, js: tuple[int, ...], outcome) -> None:
        if isinstance(outcome, Exception):
            failures.extend((k, j, outcome) for j in js)
            return
        for ck, cj, model, curve in outcome:
            grid.cells[(ck, cj)] = model
            curves[f"{ck}_{cj}"] = curve
            if out_path is not None:
                path = _cell_path(out_path, proc.name, ck, cj)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, str(path))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                (k, js, pool.submit(_run_cells, proc, train_sets[k], unlabeled, k, js))
                for k, js in pending
            ]
            for k, js, fut in futures:
                try:
                    handle(k, js, fut.result())
                except Exception as exc:  # propagate per-cell, keep the rest
                    handle(k, js, exc)
    else:
        for k, js in pending:
            try:
                handle(k, js, _run_cells(proc, train_sets[k], unlabeled, k, js))
            except Exception as exc:
                handle(k, js, exc)

    if out_path is not None:
        _write_run_manifest(proc, k_count, replicates, curves, out_path)
    if failures:
        raise GridTrainingError(failures, grid)
    return grid


def _write_run_manifest(
    proc: ProcedureSpec,
    k_count: int,
    replicates: int,
    new_curves: dict[str, list[tuple[float, float]]],
    out_path: Path,
) -> None:
    """Persist the procedure echo, sub-seeds, checkpoint paths, and loss
    curves; curves of cells reused from checkpoints keep their old entry."""
    import dataclasses
    import json

    proc_dir = out_path / "ckpt" / proc.name
    proc_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = proc_dir / "manifest.json"
    previous_curves: dict = {}
    if manifest_path.exists():
        try:
            with open(manifest_path) as f:
                previous_curves = json.load(f).get("curves", {})
        except (OSError, ValueError):
            previous_curves = {}
    curves = dict(previous_curves)
    curves.update({key: [list(point) for point in c] for key, c in new_curves.items()})
    manifest = {
        "procedure": dataclasses.asdict(proc),
        "cells": {
            f"{k}_{j}": {
                "seed": cell_seed(proc.base_seed, k, j),
                "checkpoint": f"{k}_{j}.ggap",
            }
            for k in range(k_count)
            for j in range(replicates)
        },
        "curves": curves,
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
