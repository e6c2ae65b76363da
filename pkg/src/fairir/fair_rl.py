"""Fair representation learning by prototype-based probabilistic clustering.

Items are soft-assigned to ``K`` learned prototypes; an item's fair vector is the
membership-weighted mixture of prototypes. Prototypes are fitted so that the fair
vectors reconstruct the relatedness embedding ``X`` while their pairwise distances
follow those of a desiredness embedding ``X*`` (node2vec over a graph linking items
of similar desired exposure).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .embed import EmbeddingMatrix, unit_rows
from .rin import top_k_from_scores

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DesirednessGraph:
    neighbors: np.ndarray  # (M, k_d)

    @property
    def n_items(self) -> int:
        return self.neighbors.shape[0]

    def edges(self) -> np.ndarray:
        """Directed (i, j) edge array."""
        src = np.repeat(np.arange(self.n_items), self.neighbors.shape[1])
        return np.stack([src, self.neighbors.ravel()], axis=1)

    def undirected(self) -> sp.csr_matrix:
        e = self.edges()
        adj = sp.csr_matrix((np.ones(len(e), dtype=np.int8), (e[:, 0], e[:, 1])), shape=(self.n_items,) * 2)
        adj = ((adj + adj.T) != 0).astype(np.int8).tocsr()
        adj.sort_indices()
        return adj


def desiredness_graph(desired, k_d: int = 10, block_size: int = 1024) -> DesirednessGraph:
    """Link each item to the ``k_d`` items with the closest desired exposure (ties by index)."""
    ed = np.asarray(getattr(desired, "values", desired), dtype=np.float64)
    m = len(ed)
    if not 1 <= k_d < m:
        raise ValueError(f"k_d must be in [1, {m - 1}]")
    nbrs = np.empty((m, k_d), dtype=np.int64)
    for start in range(0, m, block_size):
        block = np.arange(start, min(start + block_size, m))
        nbrs[block] = top_k_from_scores(-np.abs(ed[block, None] - ed[None, :]), k_d, exclude=block)
    return DesirednessGraph(nbrs)


# ---------------------------------------------------------------------------
# model pieces


def _distances(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(1)[:, None] + (v * v).sum(1)[None, :] - 2 * x @ v.T
    return np.sqrt(np.maximum(sq, 0.0))


def memberships(x: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """u_ih = softmax_h(-||x_i - v_h||)."""
    z = -_distances(np.asarray(x, float), np.asarray(prototypes, float))
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fair_rows(u: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    return np.asarray(u) @ np.asarray(prototypes)


def n_ordered_pairs(m: int) -> int:
    return m * (m - 1)


def _pairwise_term(xt, xstar, block_size=1024) -> float:
    total = 0.0
    for start in range(0, len(xt), block_size):
        sl = slice(start, start + block_size)
        total += float(((cdist(xt[sl], xt) - cdist(xstar[sl], xstar)) ** 2).sum())
    return total


def rl_loss(x, xstar, prototypes, lam: float = 1.0, mu: float = 0.01, pairs=None, weights=None) -> float:
    """Reconstruction error plus pairwise-distance mismatch against ``xstar``.

    ``pairs=None`` evaluates the pairwise term exactly over all ordered pairs. With a
    pair sample and no ``weights`` each sampled term is scaled by
    (number of ordered pairs / sample size).
    """
    x, xstar, v = (np.asarray(a, dtype=np.float64) for a in (x, xstar, prototypes))
    if pairs is not None:
        return rl_loss_and_grad(v, x, xstar, lam, mu, pairs, weights)[0]
    xt = fair_rows(memberships(x, v), v)
    loss = lam * float(((x - xt) ** 2).sum())
    if mu:
        loss += mu * _pairwise_term(xt, xstar)
    return loss


def rl_loss_and_grad(v, x, xstar, lam, mu, pairs, weights=None) -> tuple[float, np.ndarray]:
    """Sampled loss and its analytic gradient with respect to the prototypes."""
    m = len(x)
    dist = _distances(x, v)
    z = -dist
    z -= z.max(axis=1, keepdims=True)
    u = np.exp(z)
    u /= u.sum(axis=1, keepdims=True)
    xt = u @ v

    resid = xt - x
    loss = lam * float((resid * resid).sum())
    g_xt = 2 * lam * resid

    if mu:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            raise ValueError("empty pair sample with mu > 0")
        if weights is None:
            weights = np.full(len(pairs), n_ordered_pairs(m) / len(pairs))
        a, b = pairs[:, 0], pairs[:, 1]
        diff = xt[a] - xt[b]
        d_fair = np.linalg.norm(diff, axis=1)
        d_star = np.linalg.norm(xstar[a] - xstar[b], axis=1)
        r = d_fair - d_star
        loss += mu * float((weights * r * r).sum())
        coef = np.divide(2 * mu * weights * r, d_fair, out=np.zeros_like(r), where=d_fair > 0)
        contrib = coef[:, None] * diff
        n = len(pairs)
        scatter = sp.csr_matrix(
            (np.concatenate([np.ones(n), -np.ones(n)]), (np.concatenate([a, b]), np.tile(np.arange(n), 2))),
            shape=(m, n),
        )
        g_xt = g_xt + scatter @ contrib

    g_v = u.T @ g_xt
    g_u = g_xt @ v.T
    g_z = u * (g_u - (g_u * u).sum(axis=1, keepdims=True))
    w = np.divide(-g_z, dist, out=np.zeros_like(dist), where=dist > 0)
    g_v += w.sum(axis=0)[:, None] * v - w.T @ x
    return loss, g_v


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class RlConfig:
    n_prototypes: int = 20
    lam: float = 1.0
    mu: float = 0.01
    step_size: float = 8.0
    iters: int = 500
    pairs_per_step: int = 4096
    restarts: int = 3
    seed: int = 0
    optimizer: str = "gd"

    def __post_init__(self):
        if self.n_prototypes < 1 or self.iters < 1 or self.restarts < 1:
            raise ValueError("n_prototypes, iters and restarts must be >= 1")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("optimizer must be 'gd' or 'adam'")


@dataclass
class FairReprModel:
    prototypes: np.ndarray
    memberships: np.ndarray
    fair_rows: np.ndarray
    config: RlConfig
    final_loss: float
    losses: list[float] = field(default_factory=list)

    def embedding(self) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.fair_rows, kind="fair", seed=self.config.seed, config=asdict(self.config))

    def save(self, path, extra: dict | None = None) -> None:
        header = {"config": asdict(self.config), "final_loss": self.final_loss, "losses": self.losses, **(extra or {})}
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.frombuffer(json.dumps(header, default=str).encode(), dtype=np.uint8),
                prototypes=self.prototypes,
                memberships=self.memberships,
                fair_rows=self.fair_rows,
            )

    @classmethod
    def load(cls, path) -> tuple["FairReprModel", dict]:
        with np.load(path) as data:
            header = json.loads(data["header"].tobytes().decode())
            model = cls(
                prototypes=data["prototypes"],
                memberships=data["memberships"],
                fair_rows=data["fair_rows"],
                config=RlConfig(**header["config"]),
                final_loss=header["final_loss"],
                losses=header["losses"],
            )
        return model, header


class PairSampler:
    """Mixture sampler: half uniform ordered pairs, half desiredness-graph edges.

    Each sampled pair carries an importance weight 1 / (n * q(pair)) so the weighted
    sum is an unbiased estimate of the sum over all ordered pairs.
    """

    def __init__(self, m: int, edges: np.ndarray | None = None):
        self.m = m
        self.total = n_ordered_pairs(m)
        if edges is not None and len(edges):
            e = np.asarray(edges, dtype=np.int64)
            e = np.concatenate([e, e[:, ::-1]])
            e = e[e[:, 0] != e[:, 1]]
            keys = np.unique(e[:, 0] * m + e[:, 1])
            self.edge_keys = keys
            self.edges = np.stack([keys // m, keys % m], axis=1)
        else:
            self.edge_keys = np.empty(0, dtype=np.int64)
            self.edges = np.empty((0, 2), dtype=np.int64)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        n_edge = n // 2 if len(self.edges) else 0
        n_uni = n - n_edge
        a = rng.integers(0, self.m, n_uni)
        b = rng.integers(0, self.m - 1, n_uni)
        b += b >= a
        pairs = np.stack([a, b], axis=1)
        if n_edge:
            pairs = np.concatenate([pairs, self.edges[rng.integers(0, len(self.edges), n_edge)]])
            keys = pairs[:, 0] * self.m + pairs[:, 1]
            pos = np.minimum(np.searchsorted(self.edge_keys, keys), len(self.edge_keys) - 1)
            in_graph = self.edge_keys[pos] == keys
            q = (n_uni / n) / self.total + (n_edge / n) * in_graph / len(self.edges)
        else:
            q = np.full(n, 1.0 / self.total)
        return pairs, 1.0 / (n * q)


def _curvature_bound(m: int, lam: float, mu: float) -> float:
    return 2 * lam * m + 8 * mu * n_ordered_pairs(m)


def _fit_once(x, xstar, cfg: RlConfig, sampler: PairSampler, rng, lr_scale: float):
    m, n = x.shape
    v = rng.uniform(0.0, 1.0, size=(cfg.n_prototypes, n))
    lr0 = lr_scale * cfg.step_size / _curvature_bound(m, cfg.lam, cfg.mu)
    if cfg.optimizer == "adam":
        lr0 = lr_scale * cfg.step_size * 0.1
        mom, vel = np.zeros_like(v), np.zeros_like(v)
    losses = []
    for t in range(cfg.iters):
        lr = lr0 + (lr0 * 1e-4 - lr0) * t / cfg.iters
        pairs, weights = sampler.sample(rng, cfg.pairs_per_step) if cfg.mu else (None, None)
        loss, grad = rl_loss_and_grad(v, x, xstar, cfg.lam, cfg.mu, pairs, weights)
        if not np.isfinite(loss) or not np.isfinite(grad).all() or (losses and loss > 1e3 * losses[0]):
            return None, losses
        losses.append(loss)
        if cfg.optimizer == "adam":
            mom = 0.9 * mom + 0.1 * grad
            vel = 0.999 * vel + 0.001 * grad * grad
            step = (mom / (1 - 0.9 ** (t + 1))) / (np.sqrt(vel / (1 - 0.999 ** (t + 1))) + 1e-8)
            v = v - lr * step
        else:
            v = v - lr * grad
        if not np.isfinite(v).all():
            return None, losses
    return v, losses


def learn_fair_repr(x, xstar, config: RlConfig = RlConfig(), graph: DesirednessGraph | None = None) -> FairReprModel:
    """Fit prototypes by gradient descent on the sampled loss; keep the best restart.

    Each restart starts from prototypes drawn uniformly in (0, 1). The base learning
    rate is ``step_size`` divided by an upper bound on the loss curvature and decays
    linearly. A diverging restart is retried with a ten times smaller rate.
    """
    x = np.asarray(getattr(x, "rows", x), dtype=np.float64)
    xstar = np.asarray(getattr(xstar, "rows", xstar), dtype=np.float64)
    if len(x) != len(xstar):
        raise ValueError("X and X* must have the same number of rows")
    sampler = PairSampler(len(x), graph.edges() if graph is not None else None)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best = None
    for r, ss in enumerate(seeds):
        lr_scale = 1.0
        for attempt in range(4):
            v, losses = _fit_once(x, xstar, config, sampler, np.random.default_rng(ss), lr_scale)
            if v is not None:
                break
            lr_scale /= 10
            log.warning("fair repr restart %d diverged; retrying with learning rate x%g", r, lr_scale)
        if v is None:
            continue
        full = rl_loss(x, xstar, v, config.lam, config.mu)
        log.info("fair repr restart %d: final loss %.6g", r, full)
        if best is None or full < best[0]:
            best = (full, v, losses)
    if best is None:
        raise RuntimeError("all fair-representation restarts diverged")
    full, v, losses = best
    u = memberships(x, v)
    return FairReprModel(prototypes=v, memberships=u, fair_rows=fair_rows(u, v), config=config, final_loss=full, losses=losses)


def concat_repr(x, xstar) -> EmbeddingMatrix:
    """Row-wise concatenation of the two embeddings, each block unit-normalised first."""
    x = np.asarray(getattr(x, "rows", x), dtype=np.float64)
    xstar = np.asarray(getattr(xstar, "rows", xstar), dtype=np.float64)
    if len(x) != len(xstar):
        raise ValueError("X and X* must have the same number of rows")
    return EmbeddingMatrix(np.hstack([unit_rows(x), unit_rows(xstar)]), kind="concat")
