from pathlib import Path

import numpy as np
import pytest

from gradgroup.similarity import SimilarityMatrix, epoch_similarity_average
from gradgroup.trainer import (
    LAYERS,
    SyntheticTaskSpec,
    TrainConfig,
    generate_synthetic_tasks,
    train_and_capture,
)

PLANTED_SEEDS = range(100)
PLANTED_PARTITION = (("t0", "t1"), ("t2", "t3"), ("t4", "t5"))


def random_symmetric(rng, n, low=-1.0, high=1.0, labels=None):
    a = np.triu(rng.uniform(low, high, size=(n, n)), 1)
    a = a + a.T
    np.fill_diagonal(a, 1.0)
    if labels is None:
        labels = [f"t{i}" for i in range(n)]
    return SimilarityMatrix(tuple(labels), a, "raw")


def planted_specs(seed, noise_sigma=0.1, n_train=500):
    """Six tasks, clusters {t0,t1}, {t2,t3}, {t4,t5}."""
    return [SyntheticTaskSpec(f"t{i}", i // 2, n_train, 10, 3, noise_sigma, 1000 * seed + i)
            for i in range(6)]


def planted_run(seed, epochs=20):
    datasets = generate_synthetic_tasks(planted_specs(seed), concept_seed=seed)
    result = train_and_capture(datasets, TrainConfig(epochs=epochs, seed=seed))
    return {layer: epoch_similarity_average(result.traces, layer) for layer in LAYERS}


@pytest.fixture(scope="session")
def planted_matrices():
    """Per-layer similarity matrices of the 6-task/3-cluster benchmark, 100 seeds."""
    return [planted_run(seed) for seed in PLANTED_SEEDS]


# -- acceptance summary -----------------------------------------------------

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        _criteria.append((marker.args[0], marker.args[1], rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_criteria):
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] {number}. {title}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


# -- demo pipeline ----------------------------------------------------------

DEMO_DIR = Path(__file__).resolve().parent.parent / "demo"
GOLDEN_FILES = ("traces.jsonl", "planted.json", "trace_log.txt", "similarity.json",
                "grouping.json", "correlation.csv", "sweep_k.csv")


def run_demo_pipeline(out: Path, capsys, workers: int = 1):
    """The steps of demo/run_demo.sh through cli.main; returns exit codes."""
    from gradgroup.cli import main

    out.mkdir(parents=True, exist_ok=True)
    codes = []
    capsys.readouterr()
    codes.append(main(["trace", str(DEMO_DIR / "demo_config.json"), "-o", str(out / "traces.jsonl"),
                       "--planted-out", str(out / "planted.json")]))
    (out / "trace_log.txt").write_text(capsys.readouterr().out)
    codes.append(main(["similarity", str(out / "traces.jsonl"), "--layer", "classifier",
                       "-o", str(out / "similarity.json")]))
    codes.append(main(["group", str(out / "similarity.json"), "-k", "3", "--workers", str(workers),
                       "-o", str(out / "grouping.json")]))
    codes.append(main(["correlate", str(out / "similarity.json"), str(out / "planted.json"),
                       "--name-a", "gradient", "--name-b", "planted",
                       "--csv", str(out / "correlation.csv")]))
    codes.append(main(["sweep-k", str(out / "similarity.json"), "--workers", str(workers),
                       "-o", str(out / "sweep_k.csv")]))
    capsys.readouterr()
    return codes
