"""Relatedness and utility of a RIN, and per-run intervention reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import ItemCatalog, LikeSets
from .exposure import categorize, exp_bias, lorenz_share
from .rin import RelatedItemNetwork

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "provenance", "embedding", "beta", "alpha", "epsilon", "k",
    "over", "adequate", "under", "exp_bias",
    "label_overlap", "label_skipped", "like_overlap", "like_skipped",
    "lorenz_top25", "relevance", "config_hash", "runtime_s",
)


@dataclass(frozen=True)
class OverlapStat:
    value: float
    n_edges: int
    n_skipped: int

    def __float__(self) -> float:
        return self.value


def label_overlap_stat(rin: RelatedItemNetwork, catalog: ItemCatalog) -> OverlapStat:
    """Mean |labels(i) & labels(j)| / |labels(i)| over edges i -> j; unlabelled sources skipped."""
    src, dst = rin.edges()
    total, used = 0.0, 0
    for i, j in zip(src.tolist(), dst.tolist()):
        li = catalog.labels[i]
        if not li:
            continue
        total += len(li & catalog.labels[j]) / len(li)
        used += 1
    if used == 0:
        raise ValueError("no edge has a labelled source item")
    return OverlapStat(total / used, used, len(src) - used)


def label_overlap(rin: RelatedItemNetwork, catalog: ItemCatalog) -> float:
    return label_overlap_stat(rin, catalog).value


def like_overlap_stat(rin: RelatedItemNetwork, likes: LikeSets) -> OverlapStat:
    """Mean |L_i & L_j| / |L_i & R_j| over edges i -> j; zero denominators skipped."""
    src, dst = rin.edges()
    liked = likes.liked.astype(np.float64)
    rated = likes.rated.astype(np.float64)
    both_liked = (liked.T @ liked).tocsr()
    liked_rated = (liked.T @ rated).tocsr()
    num = np.asarray(both_liked[src, dst]).ravel()
    den = np.asarray(liked_rated[src, dst]).ravel()
    ok = den > 0
    if not ok.any():
        raise ValueError("every edge has an empty L_i & R_j")
    return OverlapStat(float(np.mean(num[ok] / den[ok])), int(ok.sum()), int((~ok).sum()))


def like_overlap(rin: RelatedItemNetwork, likes: LikeSets) -> float:
    return like_overlap_stat(rin, likes).value


@dataclass(frozen=True)
class InterventionReport:
    provenance: str
    embedding: str
    beta: float
    alpha: float
    epsilon: float
    k: int
    over: float
    adequate: float
    under: float
    exp_bias: float
    label_overlap: float | None
    label_skipped: int
    like_overlap: float | None
    like_skipped: int
    lorenz_top25: float
    config_hash: str
    runtime_s: float = 0.0
    relevance: float | None = None
    kl_units: str = "nats"
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "InterventionReport":
        return cls(**json.loads(text))

    def csv_row(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def build_report(
    rin: RelatedItemNetwork,
    observed,
    desired,
    catalog: ItemCatalog | None,
    likes: LikeSets | None,
    config: dict,
) -> InterventionReport:
    """Collect exposure and relatedness metrics for one (intervention, beta) cell.

    ``config`` supplies ``embedding``, ``beta``, ``alpha``, ``epsilon``, ``config_hash``
    and optionally ``runtime_s`` and an externally supplied ``relevance`` score.
    """
    shares = categorize(observed, desired, config["epsilon"]).shares
    label = like = None
    label_skipped = like_skipped = 0
    if catalog is not None and any(catalog.labels):
        stat = label_overlap_stat(rin, catalog)
        label, label_skipped = stat.value, stat.n_skipped
    if likes is not None:
        try:
            stat = like_overlap_stat(rin, likes)
            like, like_skipped = stat.value, stat.n_skipped
        except ValueError:
            like_skipped = rin.n_items * rin.k
    return InterventionReport(
        provenance=rin.provenance,
        embedding=config.get("embedding", ""),
        beta=float(config["beta"]),
        alpha=float(config["alpha"]),
        epsilon=float(config["epsilon"]),
        k=rin.k,
        over=shares["over"],
        adequate=shares["adequate"],
        under=shares["under"],
        exp_bias=exp_bias(observed, desired),
        label_overlap=label,
        label_skipped=label_skipped,
        like_overlap=like,
        like_skipped=like_skipped,
        lorenz_top25=lorenz_share(observed, 0.25),
        config_hash=config.get("config_hash", ""),
        runtime_s=float(config.get("runtime_s", 0.0)),
        relevance=config.get("relevance"),
        config=config.get("resolved", {}),
    )


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.csv_row()
        w.writerow({c: (f"{v:.6g}" if isinstance(v, float) else ("" if v is None else v)) for c, v in row.items()})
    return buf.getvalue()


def write_scatter_csv(path, observed, desired, quality, item_ids=None) -> None:
    eo = np.asarray(getattr(observed, "values", observed))
    ed = np.asarray(getattr(desired, "values", desired))
    q = np.asarray(quality)
    ids = item_ids if item_ids is not None else range(len(eo))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "observed", "desired", "quality"])
        for row in zip(ids, eo, ed, q):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
