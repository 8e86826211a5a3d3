"""Divergence, sharpness, loss-gap, and bound computation over model grids.

All estimators consume a ``PredictionMatrix``: per-model probability rows
over one fixed evaluation set.  KL-based quantities average over ordered
pairs (KL is asymmetric, and the defining expectation over two independent
draws includes both orders); self-pairs and pairs of models from the same
joint run are excluded, since those would bias the estimate toward zero.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import (
    Lineage,
    Model,
    dataset_loss_error,
    forward_logits,
    predict_proba_batch,
    tensor_logits,
)
from .rng import ROLE_POWER_ITER, mix64, stream

PREDICTION_MAGIC = b"GPRD"
PREDICTION_VERSION = 1


class EstimatorError(ValueError):
    """An estimator has no eligible model pairs (or groups) to average."""


class BoundDomainError(ValueError):
    """Bound inputs violate a stated validity condition."""


class PowerIterationError(RuntimeError):
    """Power iteration did not converge; carries the last estimate."""

    def __init__(self, message: str, last_estimate: float):
        super().__init__(message)
        self.last_estimate = last_estimate


# ---------------------------------------------------------------------------
# Prediction matrices
# ---------------------------------------------------------------------------

@dataclass
class PredictionMatrix:
    """Per-model probability outputs over one ordered evaluation set."""

    eval_set_id: str
    probs: np.ndarray  # (models, points, classes)
    lineages: tuple[Lineage, ...]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError("prediction matrix must be (models, points, classes)")
        if len(self.lineages) != self.probs.shape[0]:
            raise ValueError("one lineage per model row is required")
        drift = np.abs(self.probs.sum(axis=-1) - 1.0).max() if self.probs.size else 0.0
        if drift > 1e-9:
            raise ValueError(f"rows are not normalized (drift {drift:.3e})")

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for row, lin in enumerate(self.lineages):
            out.setdefault(lin.k, []).append(row)
        return {k: sorted(rows) for k, rows in sorted(out.items())}

    def save(self, path: str) -> None:
        header = json.dumps(
            {
                "eval_set_id": self.eval_set_id,
                "shape": list(self.probs.shape),
                "lineages": [
                    [l.procedure_id, l.k, l.j, l.run_id] for l in self.lineages
                ],
            },
            sort_keys=True,
        ).encode("utf-8")
        payload = (
            PREDICTION_MAGIC
            + struct.pack("<H", PREDICTION_VERSION)
            + struct.pack("<I", len(header))
            + header
            + np.ascontiguousarray(self.probs, dtype="<f8").tobytes()
        )
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "PredictionMatrix":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != PREDICTION_MAGIC:
            raise ValueError(f"{path} is not a prediction matrix file")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != PREDICTION_VERSION:
            raise ValueError(f"{path} has unsupported version {version}")
        (hlen,) = struct.unpack_from("<I", blob, 6)
        header = json.loads(blob[10 : 10 + hlen].decode("utf-8"))
        shape = tuple(header["shape"])
        probs = np.frombuffer(blob[10 + hlen :], dtype="<f8").reshape(shape)
        lineages = tuple(Lineage(p, k, j, r) for p, k, j, r in header["lineages"])
        return PredictionMatrix(header["eval_set_id"], probs.copy(), lineages)


def predict_grid(grid, eval_x: np.ndarray, eval_set_id: str) -> PredictionMatrix:
    """Evaluate every grid model on one ordered evaluation set."""
    models = grid.models()
    if not models:
        raise EstimatorError("grid holds no models")
    probs = np.stack([predict_proba_batch(m, eval_x) for m in models])
    return PredictionMatrix(eval_set_id, probs, tuple(m.lineage for m in models))


# ---------------------------------------------------------------------------
# Divergence estimators
# ---------------------------------------------------------------------------

def mean_prediction(member_probs: np.ndarray) -> np.ndarray:
    """Arithmetic mean of member probability rows, renormalized only if the
    accumulated drift exceeds 1e-12."""
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim == 2:
        member_probs = member_probs[None, :, :]
    if member_probs.shape[0] < 1:
        raise EstimatorError("mean prediction of an empty group")
    mean = member_probs.mean(axis=0)
    sums = mean.sum(axis=-1, keepdims=True)
    if np.abs(sums - 1.0).max() > 1e-12:
        mean = mean / sums
    return mean


def _eligible_ordered_pairs(pm: PredictionMatrix, rows: list[int]) -> list[tuple[int, int]]:
    pairs = []
    for i in rows:
        for j in rows:
            if i == j:
                continue
            if pm.lineages[i].run_id == pm.lineages[j].run_id:
                continue
            pairs.append((i, j))
    return pairs


def _pairwise_group_mean(pm: PredictionMatrix, point_fn) -> float:
    """Mean over training-set groups of the mean over eligible ordered pairs
    of the mean over evaluation points of ``point_fn(row_i, row_j)``."""
    group_values = []
    for k, rows in pm.groups().items():
        if len(rows) < 2:
            raise EstimatorError(f"training set {k} has fewer than 2 models")
        pairs = _eligible_ordered_pairs(pm, rows)
        if not pairs:
            raise EstimatorError(
                f"training set {k} has no eligible pairs after same-run exclusion"
            )
        vals = [
            float(np.mean(point_fn(pm.probs[i], pm.probs[j]))) for i, j in pairs
        ]
        group_values.append(float(np.mean(vals)))
    return float(np.mean(group_values))


def estimate_inconsistency(pm: PredictionMatrix) -> float:
    """Expected KL between outputs of two models sharing a training set."""
    return _pairwise_group_mean(pm, ad.kl_rows)


def estimate_disagreement(pm: PredictionMatrix) -> float:
    """Probability that two same-training-set models decide differently."""
    return _pairwise_group_mean(
        pm,
        lambda p, q: (np.argmax(p, axis=-1) != np.argmax(q, axis=-1)).astype(float),
    )


def _one_norm_sq(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.abs(p - q).sum(axis=-1) ** 2


def estimate_instability(pm: PredictionMatrix) -> float:
    """Expected KL between mean predictions of two different training sets."""
    groups = pm.groups()
    if len(groups) < 2:
        raise EstimatorError("instability needs at least two training sets")
    means = {k: mean_prediction(pm.probs[rows]) for k, rows in groups.items()}
    keys = sorted(means)
    vals = [
        float(np.mean(ad.kl_rows(means[k1], means[k2])))
        for k1 in keys
        for k2 in keys
        if k1 != k2
    ]
    return float(np.mean(vals))


def one_norm_variants(pm: PredictionMatrix) -> tuple[float, float]:
    """Squared-1-norm counterparts of inconsistency and instability."""
    c1 = _pairwise_group_mean(pm, _one_norm_sq)
    groups = pm.groups()
    if len(groups) < 2:
        raise EstimatorError("1-norm instability needs at least two training sets")
    means = {k: mean_prediction(pm.probs[rows]) for k, rows in groups.items()}
    keys = sorted(means)
    vals = [
        float(np.mean(_one_norm_sq(means[k1], means[k2])))
        for k1 in keys
        for k2 in keys
        if k1 != k2
    ]
    return c1, float(np.mean(vals))


def _modelwise(pm: PredictionMatrix, row: int, point_fn) -> float:
    lin = pm.lineages[row]
    peers = [
        i
        for i in pm.groups().get(lin.k, [])
        if i != row and pm.lineages[i].run_id != lin.run_id
    ]
    if not peers:
        raise EstimatorError(
            f"model (k={lin.k}, j={lin.j}) has no eligible peers after run exclusion"
        )
    vals = [float(np.mean(point_fn(pm.probs[i], pm.probs[row]))) for i in peers]
    return float(np.mean(vals))


def modelwise_inconsistency(pm: PredictionMatrix, row: int) -> float:
    """Mean over eligible peers and points of KL(peer output || this model)."""
    return _modelwise(pm, row, ad.kl_rows)


def modelwise_disagreement(pm: PredictionMatrix, row: int) -> float:
    return _modelwise(
        pm,
        row,
        lambda p, q: (np.argmax(p, axis=-1) != np.argmax(q, axis=-1)).astype(float),
    )


# ---------------------------------------------------------------------------
# Generalization bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the bound evaluator.

    ``divergence`` is the summed output divergence (inconsistency plus
    instability); ``information`` is the supplied parameter-information
    term, never estimated here; ``lipschitz_scale`` is the loss Lipschitz
    scale (the loss changes by at most half of it per unit 1-norm output
    change).
    """

    divergence: float
    information: float
    train_size: int
    lipschitz_scale: float = 1.0

    def __post_init__(self):
        if self.divergence < 0 or self.information < 0 or self.lipschitz_scale < 0:
            raise BoundDomainError("bound inputs must be nonnegative")
        if self.train_size < 1:
            raise BoundDomainError("train_size must be at least 1")


PSI_TAYLOR_CUTOFF = 1e-4
LAMBDA_LO = 1e-6
LAMBDA_HI = 1e3


def psi(lam: float) -> float:
    """(exp(lam) - lam - 1) / lam^2, evaluated without cancellation.

    Below the cutoff the truncated Taylor series 1/2 + lam/6 + lam^2/24 is
    used; above it, expm1 keeps the subtraction well conditioned.
    """
    lam = float(lam)
    if lam <= 0:
        raise ValueError("psi is defined for positive arguments only")
    if lam < PSI_TAYLOR_CUTOFF:
        return 0.5 + lam / 6.0 + lam * lam / 24.0
    return (math.expm1(lam) - lam) / (lam * lam)


def _bound_objective(lam: float, b: BoundInputs) -> float:
    g2 = b.lipschitz_scale * b.lipschitz_scale
    return g2 * psi(lam) * lam * b.divergence + b.information / (lam * b.train_size)


def bound_rhs(b: BoundInputs) -> tuple[float, float]:
    """Minimize the bound objective over lambda by golden-section search.

    The search runs on log(lambda) in [1e-6, 1e3] down to an absolute
    lambda tolerance of 1e-9; the objective is convex in lambda, so the
    restriction to a unimodal scan is sound.  Returns (lambda*, value).
    """
    if b.divergence == 0.0 and b.information == 0.0:
        return LAMBDA_LO, 0.0
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = math.log(LAMBDA_LO), math.log(LAMBDA_HI)
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1 = _bound_objective(math.exp(x1), b)
    f2 = _bound_objective(math.exp(x2), b)
    for _ in range(400):
        if math.exp(hi) - math.exp(lo) <= 1e-9 or hi - lo <= 1e-14:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = _bound_objective(math.exp(x1), b)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = _bound_objective(math.exp(x2), b)
    lam_star = math.exp(0.5 * (lo + hi))
    return lam_star, _bound_objective(lam_star, b)


def simplified_bound(b: BoundInputs) -> float:
    """Closed-form relaxation 2*gamma*sqrt(divergence*information/n).

    Valid only when information <= n * gamma^2 * divergence.
    """
    limit = b.train_size * b.lipschitz_scale**2 * b.divergence
    if b.information > limit:
        raise BoundDomainError(
            f"requires information <= n * gamma^2 * divergence "
            f"({b.information!r} > {limit!r})"
        )
    return 2.0 * b.lipschitz_scale * math.sqrt(
        b.divergence * b.information / b.train_size
    )


# ---------------------------------------------------------------------------
# Sharpness
# ---------------------------------------------------------------------------

def _example_loss_fn(model: Model, x: np.ndarray, y: int) -> ad.LossFn:
    def loss_fn(leaves):
        logits = tensor_logits(model.spec, leaves, x[None, :])
        logp = ad.log_softmax(logits)
        target = np.zeros((1, model.spec.num_classes))
        target[0, y] = 1.0
        return ad.scale(ad.tsum(logp * target), -1.0)

    return loss_fn


def one_sharpness(model: Model, xs: np.ndarray, ys: np.ndarray, rho: float) -> float:
    """Mean per-example loss increase at radius rho along the per-example
    normalized gradient direction.  Examples with a vanishing gradient
    contribute zero."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    total = 0.0
    for x, y in zip(xs, ys):
        loss_fn = _example_loss_fn(model, x, int(y))
        g = ad.gradient(loss_fn, model.params)
        norm = g.l2()
        if norm < 1e-12:
            continue
        base = ad.cross_entropy(forward_logits(model.spec, model.params, x), int(y))
        moved = model.params + g.scaled(rho / norm)
        perturbed = ad.cross_entropy(forward_logits(model.spec, moved, x), int(y))
        if not np.isfinite(perturbed):
            raise ad.NonFiniteLossError("non-finite perturbed loss")
        total += perturbed - base
    return total / ys.size


def power_iteration_eigenvalue(
    loss_fn: ad.LossFn,
    params: ad.ParamVector,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
) -> float:
    """Dominant-by-magnitude Hessian eigenvalue (signed) of a scalar loss.

    Iterates v <- Hv/|Hv| from a seeded random unit vector and stops when
    the Rayleigh quotient changes by less than tol (relative for large
    values).  Raises PowerIterationError carrying the last estimate when
    max_iters is exhausted.
    """
    rng = stream(mix64(seed, ROLE_POWER_ITER))
    v = rng.standard_normal(params.values.size)
    v /= np.linalg.norm(v)
    rayleigh = None
    for _ in range(max_iters):
        hv = ad.hvp(loss_fn, params, ad.ParamVector(v.copy(), params.layout)).values
        norm = float(np.linalg.norm(hv))
        if norm < 1e-30:
            return 0.0
        current = float(v @ hv)
        v = hv / norm
        if rayleigh is not None and abs(current - rayleigh) < tol * max(1.0, abs(current)):
            return current
        rayleigh = current
    raise PowerIterationError(
        f"no convergence within {max_iters} iterations", last_estimate=rayleigh
    )


def hessian_top_eigenvalue(
    model: Model,
    xs: np.ndarray,
    ys: np.ndarray,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
) -> float:
    """Largest-magnitude eigenvalue of the mean-loss Hessian at the model."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if ys.size == 0:
        raise ValueError("empty evaluation set")
    targets = ad.smoothed_targets(ys, model.spec.num_classes, 0.0)

    def loss_fn(leaves):
        logp = ad.log_softmax(tensor_logits(model.spec, leaves, xs))
        return ad.scale(ad.tsum(logp * targets), -1.0 / ys.size)

    return power_iteration_eigenvalue(loss_fn, model.params, max_iters, tol, seed)


def eval_loss_error(model: Model, xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """Mean plain cross-entropy (nats) and mean 0/1 error of the model."""
    return dataset_loss_error(model.spec, model.params, xs, ys)
