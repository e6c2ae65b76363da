"""Rating-log ingestion and the structures derived from it.

Raw MovieLens ("::"-delimited) and Amazon (JSON lines) files are parsed into an
:class:`InteractionLog`, turned into a dense-indexed :class:`RatingMatrix`, and from
there into item quality scores, per-user consumption sequences and like sets.
"""

from __future__ import annotations

import ast
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SNAPSHOT_SCHEMA = 1
DEFAULT_SCALE = (0.5, 5.0)
MAX_MALFORMED_FRACTION = 0.01


class ParseError(ValueError):
    """Raised when a ratings file is unreadable or too many lines are malformed."""

    def __init__(self, message: str, samples: Sequence[str] = ()):
        if samples:
            message += "; sample bad lines: " + " | ".join(repr(s) for s in samples)
        super().__init__(message)
        self.samples = list(samples)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float
    timestamp: int = 0


@dataclass
class InteractionLog:
    """Columnar list of interactions.

    Iterating yields :class:`Interaction` records, so it can be used wherever a list of
    interactions is expected without materialising millions of objects.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    malformed: int = 0
    duplicates: int = 0
    has_timestamps: bool = True

    @classmethod
    def from_records(cls, records: Iterable[Interaction], **kwargs) -> "InteractionLog":
        records = list(records)
        return cls(
            user_ids=np.array([r.user_id for r in records], dtype=object),
            item_ids=np.array([r.item_id for r in records], dtype=object),
            ratings=np.array([r.rating for r in records], dtype=np.float64),
            timestamps=np.array([r.timestamp for r in records], dtype=np.int64),
            **kwargs,
        )

    def __len__(self) -> int:
        return len(self.ratings)

    def __getitem__(self, i: int) -> Interaction:
        return Interaction(
            str(self.user_ids[i]), str(self.item_ids[i]), float(self.ratings[i]), int(self.timestamps[i])
        )

    def __iter__(self) -> Iterator[Interaction]:
        for i in range(len(self)):
            yield self[i]


@dataclass
class RatingMatrix:
    """Sparse user x item ratings with dense 0-based index remappings.

    ``rows``/``cols``/``values``/``timestamps``/``order`` hold the retained entries
    sorted by (user, item); ``order`` is the position of the source record in the log.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    timestamps: np.ndarray
    order: np.ndarray
    duplicates: int = 0
    has_timestamps: bool = True
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, (self.rows, self.cols)), shape=(self.n_users, self.n_items)
            )
        return self._csr

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {m: i for i, m in enumerate(self.item_ids)}

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_items)

    def item_means(self) -> np.ndarray:
        counts = self.item_counts()
        sums = np.bincount(self.cols, weights=self.values, minlength=self.n_items)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass
class ItemCatalog:
    titles: list[str]
    labels: list[frozenset[str]]
    n_ratings: np.ndarray
    mean_rating: np.ndarray

    @property
    def n_unlabeled(self) -> int:
        return sum(1 for s in self.labels if not s)


@dataclass
class Sequences:
    """Per-user item indices in ascending time order (ties broken by record order)."""

    lists: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.lists)

    def __getitem__(self, u: int) -> np.ndarray:
        return self.lists[u]

    def total_length(self) -> int:
        return int(sum(len(s) for s in self.lists))


@dataclass
class LikeSets:
    """Rated (R_i) and liked (L_i) user sets per item, as boolean user x item CSC matrices."""

    rated: sp.csc_matrix
    liked: sp.csc_matrix
    threshold: float

    @property
    def n_items(self) -> int:
        return self.rated.shape[1]

    def rated_by(self, i: int) -> frozenset[int]:
        return frozenset(self.rated.indices[self.rated.indptr[i] : self.rated.indptr[i + 1]].tolist())

    def liked_by(self, i: int) -> frozenset[int]:
        return frozenset(self.liked.indices[self.liked.indptr[i] : self.liked.indptr[i + 1]].tolist())


# ---------------------------------------------------------------------------
# parsing


def _check_malformed(path, n_lines: int, bad: list[str], n_bad: int) -> None:
    if n_bad:
        log.warning("%s: %d of %d lines rejected", path, n_bad, n_lines)
    if n_lines and n_bad / n_lines > MAX_MALFORMED_FRACTION:
        raise ParseError(
            f"{path}: {n_bad} of {n_lines} lines malformed (limit {MAX_MALFORMED_FRACTION:.0%})", bad[:5]
        )


def _open_lines(path):
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8", errors="replace").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def parse_movielens(
    path,
    scale: tuple[float, float] = DEFAULT_SCALE,
    delimiter: str = "::",
    fields: Sequence[str] = ("user", "item", "rating", "timestamp"),
) -> InteractionLog:
    """Parse a delimited ratings file (MovieLens ``ratings.dat`` layout by default).

    ``fields`` names the column order; the timestamp column is optional.
    Lines that do not parse or whose rating falls outside ``scale`` are counted and
    dropped; more than 1% of such lines raises :class:`ParseError`.
    """
    pos = {name: i for i, name in enumerate(fields)}
    for required in ("user", "item", "rating"):
        if required not in pos:
            raise ValueError(f"field order must include {required!r}")
    lo, hi = scale
    users, items, ratings, stamps = [], [], [], []
    bad: list[str] = []
    n_lines = n_bad = 0
    has_ts = "timestamp" in pos
    for line in _open_lines(path):
        if not line.strip():
            continue
        n_lines += 1
        parts = line.strip().split(delimiter)
        try:
            user = parts[pos["user"]].strip()
            item = parts[pos["item"]].strip()
            rating = float(parts[pos["rating"]])
            ts = int(float(parts[pos["timestamp"]])) if has_ts else 0
            if not user or not item or not (lo <= rating <= hi):
                raise ValueError
        except (ValueError, IndexError):
            n_bad += 1
            bad.append(line)
            continue
        users.append(user)
        items.append(item)
        ratings.append(rating)
        stamps.append(ts)
    _check_malformed(path, n_lines, bad, n_bad)
    return InteractionLog(
        user_ids=np.array(users, dtype=object),
        item_ids=np.array(items, dtype=object),
        ratings=np.array(ratings, dtype=np.float64),
        timestamps=np.array(stamps, dtype=np.int64),
        malformed=n_bad,
        has_timestamps=has_ts and any(stamps),
    )


def _loads_record(line: str) -> dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # older Amazon dumps are python dict literals
        return ast.literal_eval(line)


def _flatten_categories(value) -> set[str]:
    out: set[str] = set()
    if isinstance(value, str):
        if value.strip():
            out.add(value.strip())
    elif isinstance(value, (list, tuple)):
        for v in value:
            out |= _flatten_categories(v)
    return out


def parse_amazon(path, scale: tuple[float, float] = DEFAULT_SCALE) -> tuple[InteractionLog, dict[str, set[str]]]:
    """Parse Amazon review records (one JSON object per line).

    Recognised keys: ``reviewerID``, ``asin``, ``overall``, ``unixReviewTime`` and
    optionally ``categories``/``category``. Returns the deduplicated interactions
    (latest review per (user, item) wins) and any category labels found.
    """
    lo, hi = scale
    records: list[Interaction] = []
    labels: dict[str, set[str]] = {}
    bad: list[str] = []
    n_lines = n_bad = 0
    for line in _open_lines(path):
        if not line.strip():
            continue
        n_lines += 1
        try:
            rec = _loads_record(line)
            user = str(rec["reviewerID"]).strip()
            item = str(rec["asin"]).strip()
            rating = float(rec["overall"])
            ts = int(rec.get("unixReviewTime") or 0)
            if not user or not item or not (lo <= rating <= hi):
                raise ValueError
        except (ValueError, KeyError, TypeError, SyntaxError):
            n_bad += 1
            bad.append(line)
            continue
        records.append(Interaction(user, item, rating, ts))
        cats = _flatten_categories(rec.get("categories", rec.get("category")))
        if cats:
            labels.setdefault(item, set()).update(cats)
    _check_malformed(path, n_lines, bad, n_bad)
    interactions = InteractionLog.from_records(
        records, malformed=n_bad, has_timestamps=any(r.timestamp for r in records)
    )
    return dedupe(interactions), labels


def dedupe(interactions: InteractionLog) -> InteractionLog:
    """Keep one record per (user, item): the latest by timestamp, later record on ties."""
    n = len(interactions)
    if n == 0:
        return interactions
    _, u = np.unique(interactions.user_ids.astype(str), return_inverse=True)
    _, m = np.unique(interactions.item_ids.astype(str), return_inverse=True)
    order = np.lexsort((np.arange(n), interactions.timestamps, m, u))
    last = np.ones(n, dtype=bool)
    last[:-1] = (u[order][1:] != u[order][:-1]) | (m[order][1:] != m[order][:-1])
    keep = np.sort(order[last])
    n_dup = n - len(keep)
    if n_dup:
        log.info("dropped %d duplicate (user, item) ratings, kept the latest", n_dup)
    return InteractionLog(
        user_ids=interactions.user_ids[keep],
        item_ids=interactions.item_ids[keep],
        ratings=interactions.ratings[keep],
        timestamps=interactions.timestamps[keep],
        malformed=interactions.malformed,
        duplicates=interactions.duplicates + n_dup,
        has_timestamps=interactions.has_timestamps,
    )


def _factorize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense codes in order of first appearance."""
    uniq, first, inverse = np.unique(values.astype(str), return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    by_first = np.argsort(first, kind="stable")
    rank[by_first] = np.arange(len(uniq))
    return uniq[by_first].astype(object), rank[inverse]


def build_rating_matrix(interactions) -> RatingMatrix:
    """Build a :class:`RatingMatrix`; ids are indexed in order of first appearance."""
    if not isinstance(interactions, InteractionLog):
        interactions = InteractionLog.from_records(interactions)
    if len(interactions) == 0:
        raise ValueError("cannot build a rating matrix from an empty interaction list")
    n_before = len(interactions)
    user_ids, rows = _factorize(interactions.user_ids)
    item_ids, cols = _factorize(interactions.item_ids)
    n = n_before
    order = np.lexsort((np.arange(n), interactions.timestamps, cols, rows))
    last = np.ones(n, dtype=bool)
    last[:-1] = (rows[order][1:] != rows[order][:-1]) | (cols[order][1:] != cols[order][:-1])
    keep = order[last]
    n_dup = n - len(keep)
    if n_dup:
        log.info("rating matrix: %d duplicate (user, item) pairs collapsed to the latest", n_dup)
    matrix = RatingMatrix(
        user_ids=user_ids,
        item_ids=item_ids,
        rows=rows[keep],
        cols=cols[keep],
        values=interactions.ratings[keep].astype(np.float64),
        timestamps=interactions.timestamps[keep],
        order=keep.astype(np.int64),
        duplicates=interactions.duplicates + n_dup,
        has_timestamps=interactions.has_timestamps,
    )
    _warn_sparse_cores(matrix)
    return matrix


def _warn_sparse_cores(matrix: RatingMatrix, core: int = 5) -> None:
    users_low = int(np.sum(np.bincount(matrix.rows, minlength=matrix.n_users) < core))
    items_low = int(np.sum(matrix.item_counts() < core))
    if users_low or items_low:
        log.warning(
            "data is not %d-core: %d users and %d items have fewer than %d ratings",
            core, users_low, items_low, core,
        )


def item_quality(matrix: RatingMatrix, mode: str = "mean") -> np.ndarray:
    """Normalised per-item quality: mean rating, or mean rating times rating count."""
    if mode not in ("mean", "weighted_mean"):
        raise ValueError(f"unknown quality mode {mode!r}")
    counts = matrix.item_counts()
    means = matrix.item_means()
    missing = counts == 0
    if missing.any():
        log.warning("%d items have no ratings; using the global mean rating", int(missing.sum()))
        means = np.where(missing, matrix.values.mean(), means)
    score = means if mode == "mean" else means * np.where(missing, 1, counts)
    return score / score.sum()


def build_sequences(matrix: RatingMatrix) -> Sequences:
    """Each user's rated items by ascending timestamp, ties by original record order.

    Without timestamps the original record order is used.
    """
    if matrix.has_timestamps:
        key = np.lexsort((matrix.order, matrix.timestamps, matrix.rows))
    else:
        log.info("no timestamps available; sequences follow record order")
        key = np.lexsort((matrix.order, matrix.rows))
    rows = matrix.rows[key]
    cols = matrix.cols[key]
    bounds = np.searchsorted(rows, np.arange(matrix.n_users + 1))
    return Sequences([cols[bounds[u] : bounds[u + 1]].copy() for u in range(matrix.n_users)])


def like_sets(matrix: RatingMatrix, threshold: float = 3.5) -> LikeSets:
    """R_i = users who rated i; L_i = users whose rating of i is strictly above ``threshold``."""
    shape = (matrix.n_users, matrix.n_items)
    ones = np.ones(matrix.nnz, dtype=bool)
    rated = sp.csc_matrix((ones, (matrix.rows, matrix.cols)), shape=shape)
    mask = matrix.values > threshold
    liked = sp.csc_matrix((ones[mask], (matrix.rows[mask], matrix.cols[mask])), shape=shape)
    rated.sort_indices()
    liked.sort_indices()
    return LikeSets(rated=rated, liked=liked, threshold=threshold)


# ---------------------------------------------------------------------------
# item metadata


def load_labels(path, fmt: str = "auto") -> tuple[dict[str, str], dict[str, set[str]]]:
    """Load item titles and genre/category labels from a sidecar file.

    Formats: ``movielens`` (``id::title::A|B``), ``tsv`` (``id<TAB>A|B[<TAB>title]``)
    and ``amazon`` (JSON lines with ``asin``, ``title``, ``categories``).
    """
    path = Path(path)
    lines = _open_lines(path)
    if fmt == "auto":
        first = next((ln for ln in lines if ln.strip()), "")
        fmt = "amazon" if first.lstrip().startswith("{") else "movielens" if "::" in first else "tsv"
    titles: dict[str, str] = {}
    labels: dict[str, set[str]] = {}
    skipped = 0
    for line in lines:
        if not line.strip():
            continue
        if fmt == "movielens":
            parts = line.split("::")
            if len(parts) < 3:
                skipped += 1
                continue
            item, title, genres = parts[0].strip(), parts[1], parts[2]
        elif fmt == "tsv":
            parts = line.rstrip("\n").split("\t")
            item, genres = parts[0].strip(), parts[1] if len(parts) > 1 else ""
            title = parts[2] if len(parts) > 2 else ""
        elif fmt == "amazon":
            try:
                rec = _loads_record(line)
            except (ValueError, SyntaxError):
                skipped += 1
                continue
            item = str(rec.get("asin", "")).strip()
            if item:
                titles[item] = str(rec.get("title", ""))
                labels[item] = _flatten_categories(rec.get("categories", rec.get("category")))
            continue
        else:
            raise ValueError(f"unknown label format {fmt!r}")
        titles[item] = title
        labels[item] = {g.strip() for g in genres.split("|") if g.strip() and g.strip() != "(no genres listed)"}
    if skipped:
        log.warning("%s: %d label lines could not be parsed and were skipped", path, skipped)
    return titles, labels


def build_catalog(
    matrix: RatingMatrix,
    labels: dict[str, set[str]] | None = None,
    titles: dict[str, str] | None = None,
) -> ItemCatalog:
    labels = labels or {}
    titles = titles or {}
    counts = matrix.item_counts()
    catalog = ItemCatalog(
        titles=[titles.get(str(i), "") for i in matrix.item_ids],
        labels=[frozenset(labels.get(str(i), ())) for i in matrix.item_ids],
        n_ratings=counts,
        mean_rating=matrix.item_means(),
    )
    if catalog.n_unlabeled:
        log.info("%d of %d items have no labels", catalog.n_unlabeled, matrix.n_items)
    return catalog


# ---------------------------------------------------------------------------
# canonical snapshot


def save_snapshot(path, matrix: RatingMatrix, catalog: ItemCatalog, meta: dict | None = None) -> None:
    header = {
        "schema": SNAPSHOT_SCHEMA,
        "duplicates": matrix.duplicates,
        "has_timestamps": matrix.has_timestamps,
        "titles": catalog.titles,
        "labels": [sorted(s) for s in catalog.labels],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            user_ids=matrix.user_ids.astype(str),
            item_ids=matrix.item_ids.astype(str),
            rows=matrix.rows,
            cols=matrix.cols,
            values=matrix.values,
            timestamps=matrix.timestamps,
            order=matrix.order,
        )


def load_snapshot(path) -> tuple[RatingMatrix, ItemCatalog, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("schema") != SNAPSHOT_SCHEMA:
            raise ValueError(f"{path}: unsupported snapshot schema {header.get('schema')}")
        matrix = RatingMatrix(
            user_ids=data["user_ids"].astype(object),
            item_ids=data["item_ids"].astype(object),
            rows=data["rows"],
            cols=data["cols"],
            values=data["values"],
            timestamps=data["timestamps"],
            order=data["order"],
            duplicates=header["duplicates"],
            has_timestamps=header["has_timestamps"],
        )
    catalog = ItemCatalog(
        titles=header["titles"],
        labels=[frozenset(s) for s in header["labels"]],
        n_ratings=matrix.item_counts(),
        mean_rating=matrix.item_means(),
    )
    return matrix, catalog, header["meta"]
