"""Config-driven pipeline: ingest -> embed -> build-rin -> exposure -> intervene -> evaluate -> report.

Every artifact records the hash of the config subset that produced it. A stage
whose output already carries the expected hash is a cache hit and is skipped; a
stage whose upstream artifact is missing or carries a different hash fails with
an error naming the stage to run (``all`` runs the whole chain instead).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, embed, evaluate, exposure, fair_nbr, fair_rl, fair_sim, rin, synthetic

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("ingest", "embed", "build-rin", "exposure", "intervene", "evaluate", "report")
METHODS = ("vanilla", "concat", "rl", "sim", "nbr")
ENV_PREFIX = "FAIRIR_"


class PipelineError(RuntimeError):
    pass


class MissingArtifact(PipelineError):
    def __init__(self, path, stage: str, stale: bool = False):
        what = "is stale (config hash mismatch)" if stale else "is missing"
        super().__init__(f"{path} {what}; run the '{stage}' stage first")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    format: str = "synthetic"  # movielens | amazon | synthetic
    ratings: str = ""
    labels: str = ""
    labels_format: str = "auto"
    delimiter: str = "::"
    fields: list = field(default_factory=lambda: ["user", "item", "rating", "timestamp"])
    scale: list = field(default_factory=lambda: [0.5, 5.0])
    like_threshold: float = 3.5
    quality_mode: str = "mean"
    synthetic_items: int = 200
    synthetic_users: int = 600
    synthetic_seed: int = 7


@dataclass
class EmbeddingConfig:
    method: str = "svd"  # svd | item2vec
    dims: int = 128
    negatives: int = 15
    epochs: int = 100
    window: int = 5  # 0 = whole user history as one context
    learning_rate: float = 0.025


@dataclass
class RlSection:
    n_prototypes: int = 20
    lam: float = 1.0
    mu: float = 0.01
    step_size: float = 8.0
    iters: int = 500
    pairs_per_step: int = 4096
    restarts: int = 3
    optimizer: str = "gd"
    k_d: int = 10
    walk_len: int = 40
    walks_per_node: int = 10
    p: float = 1.0
    q: float = 1.0
    node2vec_epochs: int = 5
    node2vec_window: int = 5


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    rl: RlSection = field(default_factory=RlSection)
    k: int = 10
    alpha: float = 0.15
    betas: list = field(default_factory=lambda: [0.0, 0.25, 0.75, 1.0])
    epsilon: float = 0.2
    tol: float = 1e-10
    max_iter: int = 500
    methods: list = field(default_factory=lambda: list(METHODS))
    nbr_order_seed: int = -1  # -1 = ascending item index
    seed: int = 0
    deterministic: bool = True
    jobs: int = 1
    out: str = "fairir-out"
    relevance: dict = field(default_factory=dict)  # optional external scores per method

    def validate(self) -> "PipelineConfig":
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not all(0 <= b <= 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown interventions {sorted(unknown)}")
        if self.dataset.format not in ("movielens", "amazon", "synthetic"):
            raise ValueError(f"unknown dataset format {self.dataset.format!r}")
        if self.embedding.method not in ("svd", "item2vec"):
            raise ValueError(f"unknown embedding method {self.embedding.method!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"dataset": DatasetConfig, "embedding": EmbeddingConfig, "rl": RlSection}


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {}) or {}
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
        kwargs[name] = cls(**section)
    allowed = {f.name for f in dataclasses.fields(PipelineConfig)}
    bad = set(data) - allowed
    if bad:
        raise ValueError(f"unknown config keys: {sorted(bad)}")
    kwargs.update(data)
    return PipelineConfig(**kwargs).validate()


def load_config(path=None, overrides: dict | None = None, environ=None) -> PipelineConfig:
    """Defaults, then the TOML file, then ``FAIRIR_*`` environment variables, then ``overrides``."""
    data: dict = {}
    if path:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    data.update(_env_overrides(os.environ if environ is None else environ))
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data)


def _env_overrides(environ) -> dict:
    casts = {
        "K": ("k", int), "ALPHA": ("alpha", float), "EPSILON": ("epsilon", float),
        "BETA": ("betas", lambda s: [float(b) for b in s.split(",") if b.strip()]),
        "SEED": ("seed", int), "JOBS": ("jobs", int), "OUT": ("out", str),
        "DETERMINISTIC": ("deterministic", lambda s: s.strip().lower() in ("1", "true", "yes")),
    }
    out = {}
    for suffix, (key, cast) in casts.items():
        if ENV_PREFIX + suffix in environ:
            out[key] = cast(environ[ENV_PREFIX + suffix])
    return out


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def stage_keys(cfg: PipelineConfig) -> dict:
    """Config subsets each artifact depends on."""
    d = cfg.to_dict()
    ingest = {"dataset": d["dataset"]}
    emb = {**ingest, "embedding": d["embedding"], "seed": cfg.seed}
    rin_key = {**emb, "k": cfg.k}
    expo = {**rin_key, "alpha": cfg.alpha, "tol": cfg.tol, "max_iter": cfg.max_iter}
    return {"ingest": ingest, "embed": emb, "build-rin": rin_key, "exposure": expo}


def cell_key(cfg: PipelineConfig, method: str, beta: float) -> dict:
    key = {**stage_keys(cfg)["build-rin"], "method": method, "beta": beta}
    if method in ("rl", "concat"):
        key["rl"] = cfg.to_dict()["rl"] if method == "rl" else {
            k: v for k, v in cfg.to_dict()["rl"].items() if k in ("k_d", "walk_len", "walks_per_node", "p", "q", "node2vec_epochs", "node2vec_window")
        }
    if method == "nbr":
        key["nbr_order_seed"] = cfg.nbr_order_seed
    return key


# ---------------------------------------------------------------------------
# the pipeline


def _beta_tag(beta: float) -> str:
    return f"b{beta:.2f}"


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.keys = {name: _hash(key) for name, key in stage_keys(cfg).items()}
        if not cfg.deterministic and cfg.jobs > 0:
            import numba

            numba.set_num_threads(min(cfg.jobs, numba.config.NUMBA_NUM_THREADS))

    # paths -----------------------------------------------------------------
    @property
    def snapshot_path(self) -> Path:
        return self.out / "snapshot.npz"

    @property
    def embedding_path(self) -> Path:
        return self.out / "embedding.emb"

    def rin_path(self, method: str, beta: float | None = None) -> Path:
        if method == "vanilla":
            return self.out / "rin" / "vanilla.tsv"
        return self.out / "rin" / f"{method}_{_beta_tag(beta)}.tsv"

    def xstar_path(self, beta: float) -> Path:
        return self.out / "desiredness" / f"xstar_{_beta_tag(beta)}.emb"

    def report_path(self, method: str, beta: float) -> Path:
        return self.out / "reports" / f"{method}_{_beta_tag(beta)}.json"

    def cell_hash(self, method: str, beta: float) -> str:
        return _hash(cell_key(self.cfg, method, beta))

    # artifact bookkeeping ------------------------------------------------------
    @staticmethod
    def _read_hash(path: Path) -> str | None:
        if not path.exists():
            return None
        if path.suffix == ".npz":
            _, _, meta = corpus.load_snapshot(path)
            return meta.get("config_hash")
        if path.suffix == ".emb":
            return embed.read_embedding_header(path).get("pipeline_hash")
        if path.suffix == ".tsv":
            with open(path) as fh:
                first = fh.readline()
            return json.loads(first[1:]).get("pipeline_hash") if first.startswith("#") else None
        if path.suffix == ".csv":
            with open(path) as fh:
                first = fh.readline()
            return first.split(":", 1)[1].strip() if first.startswith("# config_hash:") else None
        if path.suffix == ".json":
            return json.loads(path.read_text()).get("config_hash")
        return None

    def _fresh(self, path: Path, expected: str) -> bool:
        return self._read_hash(path) == expected

    def _require(self, path: Path, expected: str, stage: str) -> None:
        found = self._read_hash(path)
        if found != expected:
            raise MissingArtifact(path, stage, stale=found is not None)

    # stages ------------------------------------------------------------------
    def ingest(self) -> bool:
        if self._fresh(self.snapshot_path, self.keys["ingest"]):
            return False
        ds = self.cfg.dataset
        titles: dict = {}
        labels: dict = {}
        if ds.format == "synthetic":
            interactions, titles, labels = synthetic.generate(
                n_items=ds.synthetic_items, n_users=ds.synthetic_users, seed=ds.synthetic_seed
            )
        elif ds.format == "movielens":
            interactions = corpus.parse_movielens(ds.ratings, tuple(ds.scale), ds.delimiter, tuple(ds.fields))
        else:
            interactions, labels = corpus.parse_amazon(ds.ratings, tuple(ds.scale))
        if ds.labels:
            side_titles, side_labels = corpus.load_labels(ds.labels, ds.labels_format)
            titles.update(side_titles)
            for item, ls in side_labels.items():
                labels.setdefault(item, set()).update(ls)
        matrix = corpus.build_rating_matrix(interactions)
        catalog = corpus.build_catalog(matrix, labels, titles)
        self.out.mkdir(parents=True, exist_ok=True)
        corpus.save_snapshot(
            self.snapshot_path, matrix, catalog,
            meta={"config_hash": self.keys["ingest"], "malformed": interactions.malformed},
        )
        log.info("ingest: %d users, %d items, %d ratings", matrix.n_users, matrix.n_items, matrix.nnz)
        return True

    def _load_snapshot(self):
        self._require(self.snapshot_path, self.keys["ingest"], "ingest")
        matrix, catalog, _ = corpus.load_snapshot(self.snapshot_path)
        return matrix, catalog

    def _sgns_config(self, **kw) -> embed.SgnsConfig:
        e = self.cfg.embedding
        base = dict(
            dims=e.dims, negatives=e.negatives, epochs=e.epochs, window=e.window or None,
            learning_rate=e.learning_rate, seed=self.cfg.seed, deterministic=self.cfg.deterministic,
        )
        base.update(kw)
        return embed.SgnsConfig(**base)

    def embed(self) -> bool:
        if self._fresh(self.embedding_path, self.keys["embed"]):
            return False
        matrix, _ = self._load_snapshot()
        e = self.cfg.embedding
        if e.method == "svd":
            emb = embed.svd_embed(matrix, e.dims, seed=self.cfg.seed)
        else:
            emb = embed.item2vec_embed(corpus.build_sequences(matrix), self._sgns_config(), n_items=matrix.n_items)
        embed.save_embedding(self.embedding_path, emb, {"pipeline_hash": self.keys["embed"]})
        return True

    def _load_embedding(self) -> embed.EmbeddingMatrix:
        self._require(self.embedding_path, self.keys["embed"], "embed")
        return embed.load_embedding(self.embedding_path)[0]

    def _save_rin(self, path: Path, network: rin.RelatedItemNetwork, item_ids, header: dict) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        network = dataclasses.replace(network, item_ids=tuple(str(i) for i in item_ids))
        rin.save_rin(path, network, header)

    def build_rin(self) -> bool:
        path = self.rin_path("vanilla")
        if self._fresh(path, self.keys["build-rin"]):
            return False
        matrix, _ = self._load_snapshot()
        emb = self._load_embedding()
        start = time.perf_counter()
        network = rin.top_k_neighbors(emb, self.cfg.k, provenance=f"vanilla_{self.cfg.embedding.method}")
        self._save_rin(path, network, matrix.item_ids, {
            "pipeline_hash": self.keys["build-rin"], "embedding_hash": emb.config_hash(),
            "runtime_s": time.perf_counter() - start,
        })
        return True

    def _load_rin(self, method: str, beta: float | None, expected: str, stage: str) -> tuple[rin.RelatedItemNetwork, dict]:
        path = self.rin_path(method, beta)
        self._require(path, expected, stage)
        return rin.load_rin(path)

    def _quality(self, matrix) -> np.ndarray:
        return corpus.item_quality(matrix, self.cfg.dataset.quality_mode)

    def exposure(self) -> bool:
        """Observed exposure and Lorenz curve of the vanilla RIN, desired exposure per beta."""
        key = self.keys["exposure"]
        expo_dir = self.out / "exposure"
        targets = [expo_dir / "observed_vanilla.csv"] + [expo_dir / f"desired_{_beta_tag(b)}.csv" for b in self.cfg.betas]
        if all(self._fresh(p, key) for p in targets):
            return False
        matrix, _ = self._load_snapshot()
        network, _ = self._load_rin("vanilla", None, self.keys["build-rin"], "build-rin")
        expo_dir.mkdir(parents=True, exist_ok=True)
        eo = exposure.observed_exposure(network, self.cfg.alpha, self.cfg.tol, self.cfg.max_iter)
        q = self._quality(matrix)
        self._write_csv(targets[0], key, lambda p: exposure.write_exposure_csv(p, eo, matrix.item_ids))
        self._write_csv(expo_dir / "lorenz_vanilla.csv", key, lambda p: exposure.write_lorenz_csv(p, eo))
        for beta, path in zip(self.cfg.betas, targets[1:]):
            ed = exposure.desired_exposure(q, beta, self.cfg.dataset.quality_mode)
            self._write_csv(path, key, lambda p: exposure.write_exposure_csv(p, ed, matrix.item_ids))
            self._write_csv(
                expo_dir / f"scatter_vanilla_{_beta_tag(beta)}.csv", key,
                lambda p: evaluate.write_scatter_csv(p, eo, ed, q, matrix.item_ids),
            )
        return True

    @staticmethod
    def _write_csv(path: Path, key: str, writer) -> None:
        tmp = path.with_suffix(".tmp")
        writer(tmp)
        body = tmp.read_text()
        tmp.unlink()
        path.write_text(f"# config_hash: {key}\n" + body)

    def _xstar(self, beta: float, desired, n_items: int) -> embed.EmbeddingMatrix:
        """node2vec embedding of the desiredness graph for one beta (cached)."""
        r = self.cfg.rl
        key = _hash({**stage_keys(self.cfg)["ingest"], "beta": beta, "seed": self.cfg.seed,
                     "dims": self.cfg.embedding.dims, "deterministic": self.cfg.deterministic,
                     **{k: getattr(r, k) for k in ("k_d", "walk_len", "walks_per_node", "p", "q", "node2vec_epochs", "node2vec_window")}})
        path = self.xstar_path(beta)
        if not self._fresh(path, key):
            graph = fair_rl.desiredness_graph(desired, r.k_d)
            config = self._sgns_config(epochs=r.node2vec_epochs, window=r.node2vec_window, learning_rate=0.025)
            xs = embed.node2vec_embed(graph, r.walk_len, r.walks_per_node, r.p, r.q, config)
            path.parent.mkdir(parents=True, exist_ok=True)
            embed.save_embedding(path, xs, {"pipeline_hash": key})
        return embed.load_embedding(path)[0]

    def intervene(self) -> bool:
        built = False
        for beta in self.cfg.betas:
            for method in self.cfg.methods:
                if method == "vanilla":
                    continue
                path = self.rin_path(method, beta)
                expected = self.cell_hash(method, beta)
                if self._fresh(path, expected):
                    continue
                self._intervene_cell(method, beta, path, expected)
                built = True
        return built

    def _intervene_cell(self, method: str, beta: float, path: Path, expected: str) -> None:
        matrix, _ = self._load_snapshot()
        emb = self._load_embedding()
        ed = exposure.desired_exposure(self._quality(matrix), beta, self.cfg.dataset.quality_mode)
        k = self.cfg.k
        start = time.perf_counter()
        extra: dict = {}
        if method == "sim":
            network = fair_sim.build_fair_sim_rin(emb, ed, k)
        elif method == "nbr":
            order = None if self.cfg.nbr_order_seed < 0 else self.cfg.nbr_order_seed
            network = fair_nbr.fair_neighbor_selection(emb, ed, k, order=order)
            extra = {"overflow": {str(i): c for i, c in network.meta["overflow"].items()}}
        else:
            xs = self._xstar(beta, ed, matrix.n_items)
            if method == "concat":
                network = rin.top_k_neighbors(fair_rl.concat_repr(emb, xs), k, provenance="concat")
            else:
                r = self.cfg.rl
                rl_cfg = fair_rl.RlConfig(
                    n_prototypes=r.n_prototypes, lam=r.lam, mu=r.mu, step_size=r.step_size, iters=r.iters,
                    pairs_per_step=r.pairs_per_step, restarts=r.restarts, seed=self.cfg.seed, optimizer=r.optimizer,
                )
                graph = fair_rl.desiredness_graph(ed, r.k_d)
                model = fair_rl.learn_fair_repr(emb, xs, rl_cfg, graph=graph)
                model.save(self.out / "rin" / f"rl_model_{_beta_tag(beta)}.npz", {"pipeline_hash": expected})
                network = rin.top_k_neighbors(model.embedding(), k, provenance="fairir_rl")
                extra = {"final_loss": model.final_loss}
        self._save_rin(path, network, matrix.item_ids, {
            "pipeline_hash": expected, "beta": beta, "runtime_s": time.perf_counter() - start, **extra,
        })
        log.info("intervene: %s at beta=%.2f built", method, beta)

    def evaluate(self) -> bool:
        built = False
        matrix = catalog = likes = None
        for beta in self.cfg.betas:
            for method in self.cfg.methods:
                report_hash = _hash({**cell_key(self.cfg, method, beta), "alpha": self.cfg.alpha,
                                     "epsilon": self.cfg.epsilon, "tol": self.cfg.tol, "max_iter": self.cfg.max_iter,
                                     "relevance": self.cfg.relevance.get(method)})
                path = self.report_path(method, beta)
                if self._fresh(path, report_hash):
                    continue
                if matrix is None:
                    matrix, catalog = self._load_snapshot()
                    likes = corpus.like_sets(matrix, self.cfg.dataset.like_threshold)
                if method == "vanilla":
                    network, header = self._load_rin("vanilla", None, self.keys["build-rin"], "build-rin")
                else:
                    network, header = self._load_rin(method, beta, self.cell_hash(method, beta), "intervene")
                eo = exposure.observed_exposure(network, self.cfg.alpha, self.cfg.tol, self.cfg.max_iter)
                ed = exposure.desired_exposure(self._quality(matrix), beta, self.cfg.dataset.quality_mode)
                report = evaluate.build_report(network, eo, ed, catalog, likes, {
                    "embedding": self.cfg.embedding.method, "beta": beta, "alpha": self.cfg.alpha,
                    "epsilon": self.cfg.epsilon, "config_hash": report_hash,
                    "runtime_s": header.get("runtime_s", 0.0), "relevance": self.cfg.relevance.get(method),
                    "resolved": self.cfg.to_dict(),
                })
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(report.to_json())
                built = True
        return built

    def load_reports(self) -> list[evaluate.InterventionReport]:
        reports = []
        for beta in self.cfg.betas:
            for method in self.cfg.methods:
                path = self.report_path(method, beta)
                if not path.exists():
                    raise MissingArtifact(path, "evaluate")
                reports.append(evaluate.InterventionReport.from_json(path.read_text()))
        return reports

    def report(self) -> bool:
        reports = self.load_reports()
        key = _hash([r.config_hash for r in reports])
        json_path, csv_path = self.out / "report.json", self.out / "report.csv"
        if self._fresh(json_path, key) and csv_path.exists():
            return False
        table = [{k: v for k, v in dataclasses.asdict(r).items() if k != "config"} for r in reports]
        json_path.write_text(json.dumps({"config_hash": key, "config": self.cfg.to_dict(), "kl_units": "nats", "rows": table}, indent=2, sort_keys=True))
        csv_path.write_text(evaluate.reports_to_csv(reports))
        return True

    # driver ------------------------------------------------------------------
    def run(self, stage: str = "all") -> dict[str, bool]:
        """Run one stage or all of them; returns {stage: built (False = cache hit)}."""
        stages = STAGES if stage == "all" else (stage,)
        if stage != "all" and stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        failed = self.out / "FAILED"
        done = {}
        for name in stages:
            try:
                done[name] = getattr(self, name.replace("-", "_"))()
            except Exception as exc:
                failed.write_text(f"stage {name} failed: {exc}\ncompleted: {sorted(done)}\n")
                raise
            log.info("%s: %s", name, "built" if done[name] else "cache hit")
        if failed.exists():
            failed.unlink()
        return done
