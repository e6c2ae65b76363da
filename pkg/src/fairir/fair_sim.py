"""Desired-exposure-discounted similarity for neighbour selection."""

from __future__ import annotations

import math

import numpy as np

from .embed import EmbeddingMatrix, cosine_sim, unit_rows
from .rin import Kernel, RelatedItemNetwork, top_k_neighbors


def fair_similarity(x_i, x_j, ed_i: float, ed_j: float) -> float:
    """exp(-|ed_i - ed_j|) * cosine(x_i, x_j)."""
    return math.exp(-abs(ed_i - ed_j)) * cosine_sim(x_i, x_j)


def fair_kernel(rows: np.ndarray, desired) -> Kernel:
    ed = np.asarray(getattr(desired, "values", desired), dtype=np.float64)
    unit = unit_rows(rows)

    def kernel(_rows, block):
        return np.exp(-np.abs(ed[block, None] - ed[None, :])) * (unit[block] @ unit.T)

    return kernel


def build_fair_sim_rin(emb: EmbeddingMatrix, desired, k: int) -> RelatedItemNetwork:
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    return top_k_neighbors(rows, k, sim=fair_kernel(rows, desired), provenance="fairir_sim")
