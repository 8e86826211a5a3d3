"""Scores of how well a measured quantity predicts the generalization gap.

Covers standardization, Kendall's tau over all ordered pairs, the
granulated per-axis variant, the normalized conditional mutual-information
score with its unconditioned special case, and the leave-one-out linear
prediction error.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product
from typing import Mapping, Sequence

import numpy as np


class DegenerateInputError(ValueError):
    """A series or slice carries no usable variation."""


class IncompleteGridError(ValueError):
    """The procedure table does not cover the full axis product."""

    def __init__(self, missing: list[tuple]):
        super().__init__(f"missing hyperparameter cells: {missing}")
        self.missing = missing


@dataclass(frozen=True)
class ProcedureRow:
    procedure_id: str
    axes: Mapping[str, str]
    quantity: float
    gap: float


@dataclass(frozen=True)
class ProcedureTable:
    """Rows of (procedure, categorical hyperparameter assignment, measured
    quantity, generalization gap)."""

    axes: tuple[str, ...]
    rows: tuple[ProcedureRow, ...]

    def __post_init__(self):
        ids = [r.procedure_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate procedure ids in table")
        for r in self.rows:
            for a in self.axes:
                if a not in r.axes:
                    raise ValueError(f"row {r.procedure_id} lacks axis {a!r}")

    def axis_values(self, axis: str) -> list[str]:
        return sorted({r.axes[axis] for r in self.rows})


@dataclass
class StandardizedSeries:
    values: np.ndarray
    mean: float
    std: float


def standardize(values) -> StandardizedSeries:
    """Center and scale to unit population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DegenerateInputError("standardization needs at least 2 values")
    mean = float(v.mean())
    std = float(v.std())
    if std == 0.0:
        raise DegenerateInputError("cannot standardize a constant series")
    return StandardizedSeries((v - mean) / std, mean, std)


def kendall_tau(pairs: Sequence[tuple[float, float]]) -> float:
    """Plain Kendall coefficient over ordered pairs; ties contribute zero."""
    n = len(pairs)
    if n < 2:
        raise DegenerateInputError("kendall_tau needs at least 2 pairs")
    total = 0.0
    for i in range(n):
        mu1, g1 = pairs[i]
        for j in range(n):
            if i == j:
                continue
            mu2, g2 = pairs[j]
            total += np.sign(mu1 - mu2) * np.sign(g1 - g2)
    return float(total / (n * (n - 1)))


def _tau_informative(pairs: list[tuple[float, float]]) -> bool:
    mus = {m for m, _ in pairs}
    gs = {g for _, g in pairs}
    return len(pairs) >= 2 and len(mus) > 1 and len(gs) > 1


def granulated_kendall(table: ProcedureTable) -> tuple[float, dict[str, float]]:
    """Average over axes of the per-axis tau with all other axes fixed.

    Requires the table to cover the full Cartesian product of axis values.
    Slices where tau is undefined (single point, or all ties on one
    coordinate) are skipped and excluded from that axis's denominator; an
    axis with no informative slice is reported as NaN and left out of the
    overall average.
    """
    all_values = [table.axis_values(a) for a in table.axes]
    present = {tuple(r.axes[a] for a in table.axes) for r in table.rows}
    missing = [cell for cell in product(*all_values) if cell not in present]
    if missing:
        raise IncompleteGridError(missing)

    per_axis: dict[str, float] = {}
    for i, axis in enumerate(table.axes):
        others = [a for a in table.axes if a != axis]
        taus = []
        for fixing in product(*[table.axis_values(a) for a in others]):
            wanted = dict(zip(others, fixing))
            slice_pairs = [
                (r.quantity, r.gap)
                for r in table.rows
                if all(r.axes[a] == v for a, v in wanted.items())
            ]
            if _tau_informative(slice_pairs):
                taus.append(kendall_tau(slice_pairs))
        per_axis[axis] = float(np.mean(taus)) if taus else float("nan")
    defined = [v for v in per_axis.values() if not np.isnan(v)]
    if not defined:
        raise DegenerateInputError("no axis produced an informative slice")
    return float(np.mean(defined)), per_axis


def _entropy_terms(counts: dict, total: int) -> float:
    h = 0.0
    for c in counts.values():
        p = c / total
        if p > 0:
            h -= p * np.log(p)
    return h


def _conditional_scores(
    v_mu: list[int], v_g: list[int], u_vals: list[tuple]
) -> tuple[float, float]:
    """Plug-in conditional mutual information I(Vmu;Vg|U) and entropy H(Vg|U)."""
    n = len(v_mu)
    by_u: dict[tuple, list[int]] = {}
    for idx, u in enumerate(u_vals):
        by_u.setdefault(u, []).append(idx)
    mi = 0.0
    h = 0.0
    for u, idxs in by_u.items():
        pu = len(idxs) / n
        joint: dict[tuple[int, int], int] = {}
        marg_mu: dict[int, int] = {}
        marg_g: dict[int, int] = {}
        for i in idxs:
            joint[(v_mu[i], v_g[i])] = joint.get((v_mu[i], v_g[i]), 0) + 1
            marg_mu[v_mu[i]] = marg_mu.get(v_mu[i], 0) + 1
            marg_g[v_g[i]] = marg_g.get(v_g[i], 0) + 1
        m = len(idxs)
        local_mi = 0.0
        for (vm, vg), c in joint.items():
            p_joint = c / m
            p_m = marg_mu[vm] / m
            p_g = marg_g[vg] / m
            local_mi += p_joint * np.log(p_joint / (p_m * p_g))
        mi += pu * local_mi
        h += pu * _entropy_terms(marg_g, m)
    return float(mi), float(h)


def mi_kappa(
    table: ProcedureTable, max_condition_size: int = 2
) -> tuple[float, dict[tuple[str, ...], float]]:
    """Minimum over small conditioning sets of I(Vmu;Vg|U_S)/H(Vg|U_S).

    V values are the signs of pairwise differences over all ordered pairs
    of distinct procedures, with zero kept as its own symbol.  U_S is the
    pair's joint assignment of the axes in S.  Returns the minimum together
    with every per-S score; the empty-set score is scores[()].
    """
    rows = table.rows
    if len(rows) < 2:
        raise DegenerateInputError("mi_kappa needs at least 2 procedures")
    pairs = [(r1, r2) for r1 in rows for r2 in rows if r1.procedure_id != r2.procedure_id]
    v_mu = [int(np.sign(r1.quantity - r2.quantity)) for r1, r2 in pairs]
    v_g = [int(np.sign(r1.gap - r2.gap)) for r1, r2 in pairs]

    scores: dict[tuple[str, ...], float] = {}
    for size in range(0, max_condition_size + 1):
        for subset in combinations(table.axes, size):
            u_vals = [
                (
                    tuple(r1.axes[a] for a in subset),
                    tuple(r2.axes[a] for a in subset),
                )
                for r1, r2 in pairs
            ]
            mi, h = _conditional_scores(v_mu, v_g, u_vals)
            if h <= 0.0:
                raise DegenerateInputError(
                    f"H(V_g | U_S) is zero for S={subset!r}"
                )
            scores[subset] = mi / h
    return min(scores.values()), scores


def loo_linear_prediction_error(x, y) -> float:
    """Mean absolute leave-one-out residual of the linear gap predictor.

    Both series are standardized first; each fold fits y = a*x + b by least
    squares on the remaining points and is scored on the held-out one.
    """
    xs = standardize(x).values
    ys = standardize(y).values
    n = xs.size
    if n < 3:
        raise DegenerateInputError("leave-one-out needs at least 3 points")
    residuals = []
    for i in range(n):
        mask = np.ones(n, dtype=bool)
        mask[i] = False
        xf, yf = xs[mask], ys[mask]
        var = float(((xf - xf.mean()) ** 2).mean())
        if var == 0.0:
            raise DegenerateInputError(f"zero x-variance in fold {i}")
        slope = float(((xf - xf.mean()) * (yf - yf.mean())).mean()) / var
        intercept = float(yf.mean() - slope * xf.mean())
        residuals.append(abs(slope * xs[i] + intercept - ys[i]))
    return float(np.mean(residuals))
