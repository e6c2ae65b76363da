"""Related Item Networks: each item's ranked top-k most similar items."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embed import EmbeddingMatrix, unit_rows

log = logging.getLogger(__name__)

PROVENANCES = ("vanilla_svd", "vanilla_item2vec", "vanilla", "fairir_rl", "fairir_sim", "fairir_nbr", "concat")

# A kernel maps (embedding rows, block of source indices) to a (len(block), M) score matrix.
Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RelatedItemNetwork:
    adjacency: np.ndarray  # (M, k) item indices, most similar first; -1 pads a short list
    provenance: str = "vanilla"
    item_ids: tuple | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=np.int64)
        if adj.ndim != 2:
            raise ValueError("adjacency must be (n_items, k)")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_items(self) -> int:
        return self.adjacency.shape[0]

    @property
    def k(self) -> int:
        return self.adjacency.shape[1]

    def neighbors(self, i: int) -> np.ndarray:
        row = self.adjacency[i]
        return row[row >= 0]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        src = np.repeat(np.arange(self.n_items), self.k)
        dst = self.adjacency.ravel()
        keep = dst >= 0
        return src[keep], dst[keep]

    def out_degree(self) -> np.ndarray:
        return (self.adjacency >= 0).sum(axis=1)


def cosine_kernel(rows: np.ndarray) -> Kernel:
    unit = unit_rows(rows)

    def kernel(_rows, block):
        return unit[block] @ unit.T

    return kernel


def pairwise_kernel(sim: Callable[[np.ndarray, np.ndarray], float]) -> Kernel:
    """Lift a scalar similarity ``sim(x_i, x_j)`` into a (slow, exact) kernel."""

    def kernel(rows, block):
        return np.array([[sim(rows[i], rows[j]) for j in range(len(rows))] for i in block])

    return kernel


SCORE_DECIMALS = 12


def top_k_from_scores(scores: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Row-wise indices of the ``k`` largest scores, ties broken by smaller column index.

    Scores are compared after rounding to ``SCORE_DECIMALS`` places, so values that
    differ only by BLAS rounding (which depends on block shape) count as ties.
    """
    scores = np.round(np.asarray(scores, dtype=np.float64), SCORE_DECIMALS)
    n_rows, n_cols = scores.shape
    if exclude is not None:
        scores[np.arange(n_rows), exclude] = -np.inf
    out = np.empty((n_rows, k), dtype=np.int64)
    # k-th largest value bounds the candidate set; ties at the boundary resolve by index
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1]
    for r in range(n_rows):
        cand = np.flatnonzero(scores[r] >= kth[r])
        order = np.lexsort((cand, -scores[r, cand]))
        out[r] = cand[order[:k]]
    return out


def top_k_neighbors(
    emb: EmbeddingMatrix | np.ndarray,
    k: int,
    sim: Kernel | None = None,
    provenance: str = "vanilla",
    block_size: int = 512,
) -> RelatedItemNetwork:
    """Exact top-``k`` scan: for every source, the ``k`` highest-scoring other items.

    ``sim`` defaults to cosine similarity. Scores are computed in row blocks to bound
    memory; self-recommendations are excluded.
    """
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    m = rows.shape[0]
    if not 1 <= k < m:
        raise ValueError(f"k must be in [1, {m - 1}] for {m} items, got {k}")
    kernel = sim or cosine_kernel(rows)
    adjacency = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, block_size):
        block = np.arange(start, min(start + block_size, m))
        adjacency[block] = top_k_from_scores(kernel(rows, block), k, exclude=block)
    return RelatedItemNetwork(adjacency, provenance=provenance)


def in_degree(rin: RelatedItemNetwork) -> np.ndarray:
    _, dst = rin.edges()
    return np.bincount(dst, minlength=rin.n_items)


# ---------------------------------------------------------------------------
# serialisation


def save_rin(path, rin: RelatedItemNetwork, header: dict | None = None) -> None:
    """Edge list ``source_id<TAB>rank<TAB>target_id`` after a ``# {json}`` header line."""
    ids = rin.item_ids if rin.item_ids is not None else tuple(str(i) for i in range(rin.n_items))
    head = {"k": rin.k, "n_items": rin.n_items, "provenance": rin.provenance, "item_ids": list(ids), **(header or {})}
    lines = ["# " + json.dumps(head, sort_keys=True, default=str)]
    for i in range(rin.n_items):
        for rank, j in enumerate(rin.adjacency[i]):
            if j >= 0:
                lines.append(f"{ids[i]}\t{rank}\t{ids[j]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rin(path, item_ids=None) -> tuple[RelatedItemNetwork, dict]:
    """Load an edge-list RIN; files without a header (third-party RINs) are accepted.

    Item ordering comes from ``item_ids`` if given, else the header, else order of
    first appearance.
    """
    header: dict = {}
    edges = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                if not header and line[1:].strip().startswith("{"):
                    header = json.loads(line[1:])
                continue
            if line.strip():
                src, rank, dst = line.rstrip("\n").split("\t")
                edges.append((src, int(rank), dst))
    ids = list(item_ids) if item_ids is not None else header.get("item_ids")
    if ids is None:
        ids = list(dict.fromkeys(x for s, _, d in edges for x in (s, d)))
    index = {str(x): i for i, x in enumerate(ids)}
    k = header.get("k") or (max(r for _, r, _ in edges) + 1 if edges else 0)
    adjacency = np.full((len(ids), k), -1, dtype=np.int64)
    for src, rank, dst in edges:
        adjacency[index[src], rank] = index[dst]
    provenance = header.get("provenance", "vanilla")
    return RelatedItemNetwork(adjacency, provenance=provenance, item_ids=tuple(str(x) for x in ids)), header
