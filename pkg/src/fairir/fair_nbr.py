"""Capacity-constrained neighbour selection with Borda aggregation.

Every item is given a recommendation budget proportional to its desired exposure.
Sources are processed one by one; each picks its ``k`` neighbours from items with
budget left by aggregating a relatedness ranking and a remaining-budget ranking.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .embed import EmbeddingMatrix
from .rin import SCORE_DECIMALS, Kernel, RelatedItemNetwork, cosine_kernel

log = logging.getLogger(__name__)


@dataclass
class CapacityLedger:
    counts: np.ndarray  # allocated recommendation slots per item
    lifted: int = 0  # items raised to the one-slot minimum

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def desired_counts(desired, m: int, k: int, max_count: int | None = None) -> CapacityLedger:
    """Split ``m * k`` slots in proportion to desired exposure.

    Largest-remainder apportionment: floors first, leftover slots to the largest
    fractional parts (ties to the higher desired exposure, then the smaller index).
    With ``max_count`` set, allocations are capped there and the excess goes to the
    next items by desired exposure. Items left with no slot get one, taken from the
    largest allocations.
    """
    ed = np.asarray(getattr(desired, "values", desired), dtype=np.float64)
    if len(ed) != m:
        raise ValueError("desired exposure length does not match the item count")
    ed = ed / ed.sum()
    total = m * k
    raw = ed * total
    counts = np.floor(raw).astype(np.int64)
    frac = raw - counts
    idx = np.arange(m)
    by_remainder = np.lexsort((idx, -ed, -frac))
    leftover = total - int(counts.sum())
    if leftover > 0:
        counts[by_remainder[:leftover]] += 1
    elif leftover < 0:
        counts[by_remainder[::-1][:-leftover]] -= 1
    excess = int(np.maximum(counts - max_count, 0).sum()) if max_count is not None else 0
    if excess:
        counts = np.minimum(counts, max_count)
        for i in np.lexsort((idx, -ed)):
            give = min(excess, max_count - counts[i])
            counts[i] += give
            excess -= give
    lifted = 0
    for i in np.flatnonzero(counts == 0):
        # donor: largest allocation, lowest desired exposure among those, then larger index
        donor = np.lexsort((-idx, ed, -counts))[0]
        counts[donor] -= 1
        counts[i] = 1
        lifted += 1
    if lifted:
        log.info("capacity: %d items lifted to the one-slot minimum", lifted)
    return CapacityLedger(counts, lifted)


def borda_aggregate(rank_a, rank_b) -> list:
    """Borda count over two rankings of the same candidates, ties to the smaller item."""
    rank_a, rank_b = list(rank_a), list(rank_b)
    if set(rank_a) != set(rank_b) or len(rank_a) != len(rank_b):
        raise ValueError("rankings must cover the same candidates")
    n = len(rank_a)
    score = Counter()
    for ranking in (rank_a, rank_b):
        for pos, item in enumerate(ranking):
            score[item] += n - pos
    return sorted(rank_a, key=lambda item: (-score[item], item))


def _positions(cand: np.ndarray, key: np.ndarray) -> np.ndarray:
    """0-based position of each candidate when ranked by ``key`` descending, ties by index."""
    order = np.lexsort((cand, -key))
    pos = np.empty(len(cand), dtype=np.int64)
    pos[order] = np.arange(len(cand))
    return pos


def rin_proxy_kernel(rin: RelatedItemNetwork) -> Kernel:
    """Network-level relatedness for a black-box RIN.

    Direct recommendations score 2k - rank (so rank order is kept and every direct
    neighbour beats every indirect one); other items score the number of two-step
    paths to them divided by k + 1.
    """
    k = rin.k
    src, dst = rin.edges()
    ranks = np.tile(np.arange(k), rin.n_items)[rin.adjacency.ravel() >= 0]
    m = rin.n_items
    adj = sp.csr_matrix((np.ones(len(src)), (src, dst)), shape=(m, m))
    direct = sp.csr_matrix((2.0 * k - ranks, (src, dst)), shape=(m, m))
    two_hop = (adj @ adj).tocsr()

    def kernel(_rows, block):
        return direct[block].toarray() + two_hop[block].toarray() / (k + 1)

    return kernel


def fair_neighbor_selection(
    source,
    desired,
    k: int,
    kernel: Kernel | None = None,
    order: int | None = None,
    block_size: int = 256,
) -> RelatedItemNetwork:
    """Rewire recommendations so in-degrees follow desired exposure.

    ``source`` is an embedding (scored with ``kernel``, cosine by default) or, for
    black-box use, an existing RIN scored by :func:`rin_proxy_kernel`. Sources are
    visited in index order unless ``order`` gives a seed for a random order.

    Each source takes the ``k`` best candidates by Borda score, except that a
    candidate whose remaining budget exceeds the number of later sources that could
    still pick it is taken first; this avoids dead ends near the end of the pass.
    When fewer than ``k`` items still have budget, the shortfall is filled with
    exhausted items in similarity order; those are recorded in ``meta["overflow"]``.
    """
    if isinstance(source, RelatedItemNetwork):
        m = source.n_items
        rows = np.empty((m, 0))
        kernel = kernel or rin_proxy_kernel(source)
    else:
        rows = source.rows if isinstance(source, EmbeddingMatrix) else np.asarray(source, dtype=np.float64)
        m = rows.shape[0]
        kernel = kernel or cosine_kernel(rows)
    if not 1 <= k < m:
        raise ValueError(f"k must be in [1, {m - 1}]")
    # an item can be recommended by at most the m - 1 other items
    ledger = desired_counts(desired, m, k, max_count=m - 1)
    remaining = ledger.counts.copy()
    sources = np.arange(m) if order is None else np.random.default_rng(order).permutation(m)
    adjacency = np.empty((m, k), dtype=np.int64)
    overflow: Counter = Counter()
    idx = np.arange(m)

    visit = np.empty(m, dtype=np.int64)
    visit[sources] = np.arange(m)

    for start in range(0, m, block_size):
        block = sources[start : start + block_size]
        scores = np.round(np.asarray(kernel(rows, block), dtype=np.float64), SCORE_DECIMALS)
        for row, u in enumerate(block):
            t = start + row
            s = scores[row]
            cand = idx[(remaining > 0) & (idx != u)]
            n = len(cand)
            score = 2 * n - _positions(cand, s[cand]) - _positions(cand, remaining[cand].astype(np.float64))
            ranked = cand[np.lexsort((cand, -score))]
            # an item with more budget left than later sources able to pick it is forced in now
            later = (m - 1 - t) - (visit[ranked] > t)
            forced = remaining[ranked] > later
            picked = np.concatenate([ranked[forced], ranked[~forced]])[:k]
            chosen = ranked[np.isin(ranked, picked)]
            if n < k:
                rest = idx[(idx != u) & ~np.isin(idx, chosen)]
                extra = rest[np.lexsort((rest, -s[rest]))[: k - n]]
                overflow.update(extra.tolist())
                chosen = np.concatenate([chosen, extra])
            adjacency[u] = chosen
            remaining[chosen[:n] if n < k else chosen] -= 1
    if overflow:
        log.warning("fair neighbour selection: %d slots overflowed onto exhausted items", sum(overflow.values()))
    return RelatedItemNetwork(
        adjacency,
        provenance="fairir_nbr",
        meta={"capacity": ledger.counts, "overflow": dict(overflow), "lifted": ledger.lifted},
    )
