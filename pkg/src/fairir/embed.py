"""Latent item representations: rating-SVD, item2vec and node2vec.

item2vec and node2vec share one skip-gram-with-negative-sampling trainer
(:func:`sgns_train`); they differ only in where the item sequences come from.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from .corpus import RatingMatrix, Sequences

log = logging.getLogger(__name__)

KINDS = ("svd", "item2vec", "node2vec", "fair", "concat")
_MAGIC = b"FRIREMB1"


@dataclass(frozen=True)
class EmbeddingMatrix:
    rows: np.ndarray
    kind: str
    seed: int = 0
    config: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("embedding rows must be a 2-D array")
        if not np.isfinite(rows).all():
            raise ValueError("embedding contains non-finite entries")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n_items(self) -> int:
        return self.rows.shape[0]

    @property
    def dims(self) -> int:
        return self.rows.shape[1]

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SgnsConfig:
    dims: int = 128
    negatives: int = 15
    epochs: int = 100
    window: int | None = 5
    learning_rate: float = 0.025
    seed: int = 0
    deterministic: bool = True
    chunk_size: int = 65536

    def __post_init__(self):
        if self.dims < 1 or self.negatives < 1 or self.epochs < 1:
            raise ValueError("dims, negatives and epochs must all be >= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 (or None for whole-sequence context)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


# ---------------------------------------------------------------------------
# rating-SVD


def truncated_svd(a, k: int, seed: int = 0, method: str = "auto"):
    """Top-``k`` singular triplets, singular values in descending order.

    ``method`` is ``dense`` (LAPACK), ``lanczos`` (ARPACK) or ``auto``, which picks
    dense for small matrices or when ``k`` is too close to full rank for ARPACK.
    """
    n_min = min(a.shape)
    if method == "auto":
        method = "dense" if (n_min <= 1500 or k >= n_min - 1) else "lanczos"
    if method == "dense":
        dense = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=np.float64)
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
        return u[:, :k], s[:k], vt[:k]
    if k >= n_min:
        raise ValueError("lanczos SVD needs k < min(shape)")
    rng = np.random.default_rng(seed)
    v0 = rng.uniform(-1, 1, size=n_min)
    u, s, vt = svds(sp.csr_matrix(a, dtype=np.float64), k=k, v0=v0, solver="arpack")
    idx = np.argsort(-s, kind="stable")
    return u[:, idx], s[idx], vt[idx]


def svd_embed(matrix: RatingMatrix, dims: int = 128, seed: int = 0, method: str = "auto") -> EmbeddingMatrix:
    """Item factors from a truncated SVD of the item-mean-centred rating matrix.

    Item factors are scaled by the singular values and each row is normalised to
    unit length. Items whose centred ratings are all zero (every rating equal to the
    item mean) have no direction and keep a zero row.
    """
    achievable = min(matrix.n_users, matrix.n_items)
    if dims > achievable:
        log.warning("svd: %d dims requested but the matrix only supports %d", dims, achievable)
        dims = achievable
    means = matrix.item_means()
    centred = sp.csr_matrix(
        (matrix.values - means[matrix.cols], (matrix.rows, matrix.cols)),
        shape=(matrix.n_users, matrix.n_items),
    )
    _, s, vt = truncated_svd(centred, dims, seed=seed, method=method)
    # deterministic sign: largest-magnitude loading of each component is positive
    flip = np.sign(vt[np.arange(len(s)), np.abs(vt).argmax(axis=1)])
    flip[flip == 0] = 1
    factors = (vt * flip[:, None]).T * s
    norms = np.linalg.norm(factors, axis=1)
    zero = norms < 1e-12
    if zero.any():
        log.warning("svd: %d items have zero centred ratings and get a zero vector", int(zero.sum()))
    factors = np.where(zero[:, None], 0.0, factors / np.where(zero, 1.0, norms)[:, None])
    return EmbeddingMatrix(
        factors, kind="svd", seed=seed, config={"dims": dims, "method": method},
        info={"singular_values": s.tolist(), "zero_rows": int(zero.sum())},
    )


# ---------------------------------------------------------------------------
# skip-gram with negative sampling


@numba.njit(cache=True, inline="always")
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _sgns_pair(w_in, w_out, c, o, negs, lr, grad):
    dims = w_in.shape[1]
    loss = 0.0
    for d in range(dims):
        grad[d] = 0.0
    n_neg = negs.shape[0]
    for s in range(n_neg + 1):
        if s == 0:
            target = o
            label = 1.0
        else:
            target = negs[s - 1]
            if target == o:
                continue
            label = 0.0
        f = 0.0
        for d in range(dims):
            f += w_in[c, d] * w_out[target, d]
        if label > 0:
            loss -= _log_sigmoid(f)
        else:
            loss -= _log_sigmoid(-f)
        g = (label - _sigmoid(f)) * lr
        for d in range(dims):
            grad[d] += g * w_out[target, d]
            w_out[target, d] += g * w_in[c, d]
    for d in range(dims):
        w_in[c, d] += grad[d]
    return loss


@numba.njit(cache=True)
def _sgns_chunk(w_in, w_out, pairs, negs, lr0, lr1, step0, total):
    grad = np.empty(w_in.shape[1])
    loss = 0.0
    for p in range(pairs.shape[0]):
        lr = lr0 + (lr1 - lr0) * (step0 + p) / total
        loss += _sgns_pair(w_in, w_out, pairs[p, 0], pairs[p, 1], negs[p], lr, grad)
    return loss


@numba.njit(cache=True, parallel=True)
def _sgns_chunk_hogwild(w_in, w_out, pairs, negs, lr0, lr1, step0, total):
    n = pairs.shape[0]
    losses = np.zeros(n)
    for p in numba.prange(n):
        grad = np.empty(w_in.shape[1])
        lr = lr0 + (lr1 - lr0) * (step0 + p) / total
        losses[p] = _sgns_pair(w_in, w_out, pairs[p, 0], pairs[p, 1], negs[p], lr, grad)
    return losses.sum()


def negative_sampling_cdf(pairs: np.ndarray, vocab_size: int, power: float = 0.75) -> np.ndarray:
    counts = np.bincount(pairs[:, 0], minlength=vocab_size) + np.bincount(pairs[:, 1], minlength=vocab_size)
    weights = counts.astype(np.float64) ** power
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def sgns_train(pairs, vocab_size: int, config: SgnsConfig = SgnsConfig(), kind: str = "item2vec") -> EmbeddingMatrix:
    """Train skip-gram with negative sampling on (center, context) item pairs.

    Negatives are drawn from pair-occurrence frequencies raised to 0.75. The
    learning rate decays linearly to 1e-4 of its start over all epochs. Per-epoch
    mean losses are returned in ``info["epoch_losses"]`` and the context (output)
    vectors in ``info["context_vectors"]``. With
    ``config.deterministic`` training is single-threaded and bit-reproducible;
    otherwise updates are applied lock-free across threads.
    """
    pairs = np.ascontiguousarray(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    if len(pairs) == 0:
        raise ValueError("sgns_train needs at least one (center, context) pair")
    if pairs.min() < 0 or pairs.max() >= vocab_size:
        raise ValueError("pair indices out of vocabulary range")
    rng = np.random.default_rng(config.seed)
    dims = config.dims
    w_in = rng.uniform(-0.5 / dims, 0.5 / dims, size=(vocab_size, dims))
    w_out = np.zeros((vocab_size, dims))
    seen = np.zeros(vocab_size, dtype=bool)
    seen[pairs.ravel()] = True
    if not seen.all():
        log.info("sgns: %d vocabulary items never occur in a pair; left at initialisation", int((~seen).sum()))

    cdf = negative_sampling_cdf(pairs, vocab_size)
    kernel = _sgns_chunk if config.deterministic else _sgns_chunk_hogwild
    total = float(len(pairs) * config.epochs)
    lr0, lr1 = config.learning_rate, config.learning_rate * 1e-4
    epoch_losses = []
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(len(pairs))
        loss = 0.0
        for start in range(0, len(pairs), config.chunk_size):
            idx = perm[start : start + config.chunk_size]
            negs = np.searchsorted(cdf, rng.random((len(idx), config.negatives)), side="right")
            negs = np.minimum(negs, vocab_size - 1)
            loss += kernel(w_in, w_out, pairs[idx], negs, lr0, lr1, float(step), total)
            step += len(idx)
        epoch_losses.append(loss / len(pairs))
    return EmbeddingMatrix(
        w_in, kind=kind, seed=config.seed, config=asdict(config),
        info={"epoch_losses": epoch_losses, "n_pairs": int(len(pairs)), "context_vectors": w_out},
    )


def window_pairs(sequences, window: int | None = 5) -> np.ndarray:
    """All (center, context) pairs within ``window`` positions, both directions.

    ``window=None`` treats each whole sequence as one context.
    """
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences if len(s) > 1]
    if not seqs:
        return np.empty((0, 2), dtype=np.int64)
    tokens = np.concatenate(seqs)
    owner = np.repeat(np.arange(len(seqs)), [len(s) for s in seqs])
    max_len = max(len(s) for s in seqs)
    reach = max_len - 1 if window is None else min(window, max_len - 1)
    if window is None and max_len > 2000:
        log.warning("whole-sequence context with sequences of length %d is quadratic in cost", max_len)
    out = []
    for d in range(1, reach + 1):
        same = owner[d:] == owner[:-d]
        a, b = tokens[:-d][same], tokens[d:][same]
        out.append(np.stack([np.concatenate([a, b]), np.concatenate([b, a])], axis=1))
    return np.concatenate(out) if out else np.empty((0, 2), dtype=np.int64)


def item2vec_embed(sequences: Sequences, config: SgnsConfig = SgnsConfig(), n_items: int | None = None) -> EmbeddingMatrix:
    lists = sequences.lists if isinstance(sequences, Sequences) else list(sequences)
    if n_items is None:
        n_items = 1 + max((int(s.max()) for s in map(np.asarray, lists) if len(s)), default=-1)
    pairs = window_pairs(lists, config.window)
    if len(pairs) == 0:
        raise ValueError("item2vec: every sequence has length <= 1, no training pairs")
    return sgns_train(pairs, n_items, config, kind="item2vec")


# ---------------------------------------------------------------------------
# node2vec


@numba.njit(cache=True)
def _is_neighbor(indptr, indices, a, b):
    lo, hi = indptr[a], indptr[a + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < b:
            lo = mid + 1
        else:
            hi = mid
    return lo < indptr[a + 1] and indices[lo] == b


@numba.njit(cache=True)
def _node2vec_walks(indptr, indices, starts, walk_len, p, q, seed):
    np.random.seed(seed)
    n_walks = starts.shape[0]
    walks = np.full((n_walks, walk_len), -1, dtype=np.int64)
    uniform = p == 1.0 and q == 1.0
    max_deg = 0
    for v in range(indptr.shape[0] - 1):
        max_deg = max(max_deg, indptr[v + 1] - indptr[v])
    weights = np.empty(max(max_deg, 1))
    for w in range(n_walks):
        cur = starts[w]
        walks[w, 0] = cur
        prev = -1
        for t in range(1, walk_len):
            lo, hi = indptr[cur], indptr[cur + 1]
            deg = hi - lo
            if deg == 0:
                break
            if uniform or prev < 0:
                nxt = indices[lo + np.random.randint(deg)]
            else:
                total = 0.0
                for j in range(deg):
                    x = indices[lo + j]
                    if x == prev:
                        wt = 1.0 / p
                    elif _is_neighbor(indptr, indices, prev, x):
                        wt = 1.0
                    else:
                        wt = 1.0 / q
                    total += wt
                    weights[j] = total
                r = np.random.random() * total
                j = 0
                while j < deg - 1 and weights[j] <= r:
                    j += 1
                nxt = indices[lo + j]
            walks[w, t] = nxt
            prev = cur
            cur = nxt
    return walks


def _as_csr_graph(graph) -> sp.csr_matrix:
    if hasattr(graph, "undirected"):
        graph = graph.undirected()
    adj = sp.csr_matrix(graph)
    adj = ((adj + adj.T) != 0).astype(np.int8).tocsr()
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj.sort_indices()
    return adj


def node2vec_walks(graph, walk_len: int = 40, walks_per_node: int = 10, p: float = 1.0, q: float = 1.0, seed: int = 0) -> list[np.ndarray]:
    """Second-order biased random walks; every node starts ``walks_per_node`` walks.

    Returning to the previous node is weighted 1/p, moving to a neighbour of the
    previous node 1, and moving further away 1/q. Walks from isolated nodes have
    length one.
    """
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    adj = _as_csr_graph(graph)
    n = adj.shape[0]
    if n == 0:
        raise ValueError("node2vec needs a non-empty graph")
    isolated = np.diff(adj.indptr) == 0
    if isolated.any():
        log.info("node2vec: %d isolated nodes produce single-node walks", int(isolated.sum()))
    rng = np.random.default_rng(seed)
    starts = np.concatenate([rng.permutation(n) for _ in range(walks_per_node)])
    walks = _node2vec_walks(
        adj.indptr.astype(np.int64), adj.indices.astype(np.int64), starts, walk_len, float(p), float(q), seed
    )
    return [w[w >= 0] for w in walks]


def node2vec_embed(
    graph,
    walk_len: int = 40,
    walks_per_node: int = 10,
    p: float = 1.0,
    q: float = 1.0,
    config: SgnsConfig | None = None,
) -> EmbeddingMatrix:
    config = config or SgnsConfig(epochs=5)
    walks = node2vec_walks(graph, walk_len, walks_per_node, p, q, seed=config.seed)
    n = _as_csr_graph(graph).shape[0]
    pairs = window_pairs(walks, config.window)
    if len(pairs) == 0:
        raise ValueError("node2vec: walks produced no training pairs (walk_len too short or graph has no edges)")
    emb = sgns_train(pairs, n, config, kind="node2vec")
    return replace(emb, config={**emb.config, "walk_len": walk_len, "walks_per_node": walks_per_node, "p": p, "q": q})


# ---------------------------------------------------------------------------
# similarity

_warned_zero = False


def cosine_sim(x, y) -> float:
    global _warned_zero
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        if not _warned_zero:
            log.warning("cosine similarity with a zero vector is defined as 0")
            _warned_zero = True
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return np.divide(rows, norms, out=np.zeros_like(rows, dtype=np.float64), where=norms > 0)


# ---------------------------------------------------------------------------
# serialisation


def save_embedding(path, emb: EmbeddingMatrix, extra: dict | None = None) -> None:
    """Binary format: magic, uint32 header length, JSON header, float32 row-major payload."""
    header = {
        "M": emb.n_items, "N": emb.dims, "kind": emb.kind, "seed": emb.seed,
        "config_hash": emb.config_hash(), "config": emb.config, **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True, default=str).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(np.ascontiguousarray(emb.rows, dtype="<f4").tobytes())


def read_embedding_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        n = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        return json.loads(fh.read(n))


def load_embedding(path) -> tuple[EmbeddingMatrix, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        n = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        header = json.loads(fh.read(n))
        rows = np.frombuffer(fh.read(), dtype="<f4").reshape(header["M"], header["N"])
    emb = EmbeddingMatrix(rows.astype(np.float64), kind=header["kind"], seed=header["seed"], config=header["config"])
    return emb, header


def export_embedding_text(path, emb: EmbeddingMatrix, item_ids=None) -> None:
    ids = item_ids if item_ids is not None else range(emb.n_items)
    with open(Path(path), "w") as fh:
        fh.write(f"{emb.n_items} {emb.dims}\n")
        for item, row in zip(ids, emb.rows):
            fh.write(f"{item} " + " ".join(f"{v:.6g}" for v in row) + "\n")
