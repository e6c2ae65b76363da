"""Seeded synthetic rating corpus with planted qualities and co-consumption groups.

Items fall into groups (each with its own primary genre); users mostly consume
within one or two groups, picking popular items more often. Ratings scatter around
a planted per-item quality. The result is 5-core and written in MovieLens layout.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import InteractionLog, dedupe

SECONDARY_GENRES = ("Comedy", "Drama", "Romance", "Thriller", "Family", "Sci-Fi", "Crime", "Mystery")


def generate(
    n_items: int = 200,
    n_users: int = 600,
    n_groups: int = 10,
    mean_ratings_per_user: float = 20.0,
    seed: int = 7,
) -> tuple[InteractionLog, dict[str, str], dict[str, set[str]]]:
    rng = np.random.default_rng(seed)
    group = np.arange(n_items) % n_groups
    quality = rng.uniform(1.5, 4.8, n_items)
    popularity = rng.lognormal(0.0, 1.0, n_items)

    labels: dict[str, set[str]] = {}
    titles: dict[str, str] = {}
    for i in range(n_items):
        extra = rng.choice(SECONDARY_GENRES, size=rng.integers(0, 3), replace=False)
        labels[str(i + 1)] = {f"Genre{group[i]}", *(str(g) for g in extra)}
        titles[str(i + 1)] = f"Item {i + 1}"

    users, items, ratings, stamps = [], [], [], []

    def rate(u, i, t, bias):
        r = np.clip(np.round(2 * (quality[i] + bias + rng.normal(0, 0.7))) / 2, 0.5, 5.0)
        users.append(str(u + 1))
        items.append(str(i + 1))
        ratings.append(float(r))
        stamps.append(int(t))

    for u in range(n_users):
        prefs = [rng.integers(n_groups)]
        if rng.random() < 0.3:
            prefs.append(rng.integers(n_groups))
        weight = popularity * np.where(np.isin(group, prefs), 1.0, 0.03)
        n = min(n_items, 5 + rng.poisson(mean_ratings_per_user - 5))
        chosen = rng.choice(n_items, size=n, replace=False, p=weight / weight.sum())
        bias = rng.normal(0, 0.3)
        t = 1_000_000_000 + int(rng.integers(0, 10_000_000))
        # consume group by group so co-consumption is temporally local
        for i in chosen[np.argsort(group[chosen], kind="stable")]:
            t += int(rng.integers(60, 86_400))
            rate(u, i, t, bias)

    counts = np.bincount(np.array(items, dtype=np.int64) - 1, minlength=n_items)
    for i in np.flatnonzero(counts < 5):
        rated_i = {int(u) - 1 for u, m in zip(users, items) if m == str(i + 1)}
        pool = [u for u in rng.permutation(n_users) if u not in rated_i]
        for u in pool[: 5 - counts[i]]:
            rate(u, i, 2_000_000_000 + u, 0.0)

    log = dedupe(
        InteractionLog(
            user_ids=np.array(users, dtype=object),
            item_ids=np.array(items, dtype=object),
            ratings=np.array(ratings),
            timestamps=np.array(stamps, dtype=np.int64),
        )
    )
    return log, titles, labels


def write(out_dir, **kwargs) -> tuple[Path, Path]:
    """Write ``ratings.dat`` and ``movies.dat`` (MovieLens layout) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log, titles, labels = generate(**kwargs)
    ratings_path, movies_path = out / "ratings.dat", out / "movies.dat"
    with open(ratings_path, "w") as fh:
        for r in log:
            fh.write(f"{r.user_id}::{r.item_id}::{r.rating:g}::{r.timestamp}\n")
    with open(movies_path, "w") as fh:
        for item in sorted(titles, key=int):
            fh.write(f"{item}::{titles[item]}::{'|'.join(sorted(labels[item]))}\n")
    return ratings_path, movies_path
