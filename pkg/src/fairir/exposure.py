"""Observed and desired exposure, exposure bias and exposure concentration."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .rin import RelatedItemNetwork

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExposureDistribution:
    values: np.ndarray
    kind: str  # "observed" | "desired"
    params: dict = field(default_factory=dict)
    converged: bool = True

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if (v < 0).any():
            raise ValueError("exposure values must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class ExposureCategorization:
    labels: np.ndarray  # "over" | "adequate" | "under"
    epsilon: float

    @property
    def shares(self) -> dict[str, float]:
        n = len(self.labels)
        return {c: 100.0 * float(np.sum(self.labels == c)) / n for c in ("over", "adequate", "under")}


def _values(e) -> np.ndarray:
    return e.values if isinstance(e, ExposureDistribution) else np.asarray(e, dtype=np.float64)


def transition_matrix(rin: RelatedItemNetwork) -> sp.csr_matrix:
    """Column-stochastic follow-a-recommendation matrix; dangling columns are zero."""
    src, dst = rin.edges()
    out = np.bincount(src, minlength=rin.n_items).astype(np.float64)
    return sp.csr_matrix((1.0 / out[src], (dst, src)), shape=(rin.n_items, rin.n_items))


def observed_exposure(
    rin: RelatedItemNetwork, alpha: float = 0.15, tol: float = 1e-10, max_iter: int = 500
) -> ExposureDistribution:
    """Steady-state visit frequencies of a random surfer on the RIN.

    From item v the surfer follows each of v's recommendations with probability
    (1 - alpha)/out_degree(v) and teleports to a uniformly random item with
    probability alpha. Items without recommendations teleport with probability 1.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    m = rin.n_items
    p = transition_matrix(rin)
    dangling = rin.out_degree() == 0
    x = np.full(m, 1.0 / m)
    converged = False
    for it in range(max_iter):
        nxt = (1 - alpha) * (p @ x) + ((1 - alpha) * x[dangling].sum() + alpha) / m
        nxt /= nxt.sum()
        delta = np.abs(nxt - x).sum()
        x = nxt
        if delta < tol:
            converged = True
            break
    if not converged:
        log.warning("observed exposure did not converge in %d iterations (last L1 change %.3g)", max_iter, delta)
    return ExposureDistribution(x, "observed", {"alpha": alpha, "iterations": it + 1}, converged=converged)


def desired_exposure(quality, beta: float, quality_mode: str = "mean") -> ExposureDistribution:
    """Blend of uniform exposure (weight ``beta``) and quality-proportional exposure."""
    q = np.asarray(quality, dtype=np.float64)
    if not 0 <= beta <= 1:
        raise ValueError("beta must be in [0, 1]")
    if abs(q.sum() - 1) > 1e-6 or (q < 0).any():
        raise ValueError("quality must be a non-negative vector summing to 1")
    return ExposureDistribution(beta / len(q) + (1 - beta) * q, "desired", {"beta": beta, "quality_mode": quality_mode})


def exp_bias(observed, desired) -> float:
    """KL divergence D(observed || desired) in nats; zero observed terms contribute 0."""
    eo, ed = _values(observed), _values(desired)
    if eo.shape != ed.shape:
        raise ValueError("exposure vectors differ in length")
    if (ed <= 0).any():
        raise ValueError("desired exposure must be strictly positive")
    nz = eo > 0
    return float(max(0.0, np.sum(eo[nz] * np.log(eo[nz] / ed[nz]))))


def categorize(observed, desired, epsilon: float = 0.2) -> ExposureCategorization:
    """under: ratio < 1 - eps; adequate: 1 - eps <= ratio <= 1 + eps; over: ratio > 1 + eps."""
    ratio = _values(observed) / _values(desired)
    labels = np.full(len(ratio), "adequate", dtype=object)
    labels[ratio < 1 - epsilon] = "under"
    labels[ratio > 1 + epsilon] = "over"
    return ExposureCategorization(labels, epsilon)


def lorenz_share(e, top_fraction: float) -> float:
    """Total exposure held by the ceil(top_fraction * M) most exposed items."""
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    v = np.sort(_values(e))[::-1]
    n = math.ceil(round(top_fraction * len(v), 9))
    return float(v[:n].sum() / v.sum())


def lorenz_curve(e, resolution: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative exposure share against cumulative item share, items in increasing exposure."""
    v = np.sort(_values(e))
    cum = np.concatenate([[0.0], np.cumsum(v) / v.sum()])
    x = np.linspace(0, 1, resolution + 1)
    y = np.interp(x * len(v), np.arange(len(v) + 1), cum)
    return x, y


def write_exposure_csv(path, e, item_ids=None) -> None:
    v = _values(e)
    ids = item_ids if item_ids is not None else range(len(v))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "exposure"])
        for item, x in zip(ids, v):
            w.writerow([item, repr(float(x))])


def read_exposure_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r["item_id"] for r in rows], np.array([float(r["exposure"]) for r in rows])


def write_lorenz_csv(path, e, resolution: int = 100) -> None:
    x, y = lorenz_curve(e, resolution)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_fraction", "exposure_fraction"])
        w.writerows(zip(np.round(x, 6), np.round(y, 10)))
