import os
import time
from pathlib import Path

import numpy as np
import pytest

from fairir import corpus, pipeline, synthetic

# acceptance outcomes, printed in the terminal summary: (criterion, status, detail)
ACCEPTANCE_LINES: list[tuple[str, str, str]] = []


@pytest.fixture(scope="session")
def synth_matrix():
    log, titles, labels = synthetic.generate()
    matrix = corpus.build_rating_matrix(log)
    return matrix, corpus.build_catalog(matrix, labels, titles)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    """Full default pipeline on the bundled 200-item synthetic set, run once per session."""
    out = tmp_path_factory.mktemp("synthetic_run")
    cfg = pipeline.load_config(None, {"out": str(out)}, environ={})
    start = time.perf_counter()
    done = pipeline.Pipeline(cfg).run("all")
    return {"cfg": cfg, "out": out, "done": done, "seconds": time.perf_counter() - start}


def record(criterion: str, status: str, detail: str = "") -> None:
    ACCEPTANCE_LINES.append((criterion, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"criterion {criterion}: {status}" + (f"  ({detail})" if detail else ""))
