import pytest
import torch

from singface.dataset import SynthConfig, synth_dataset, write_dataset
from singface.experiments import run_toy, toy_records
from singface.training import TrainConfig, Trainer, fit_data_stats, prepare_sequence

torch.set_num_threads(1)

CRITERIA = {
    1: "gradient correctness",
    2: "shape/architecture conformance",
    3: "algebraic identities",
    4: "metric oracles",
    5: "blink sampler statistics",
    6: "desk-scale learnability",
    7: "decouple-and-fuse behaviour",
    8: "reproducibility",
}
_outcomes: dict[int, str] = {}
NOTES: dict[int, list[str]] = {}


class ToyRuns:
    """Lazily trained toy models, shared by every test in the session."""

    def __init__(self, root):
        self.root = root
        self.cache = {}
        self._split = None

    @property
    def split(self):
        if self._split is None:
            self._split = toy_records()
        return self._split

    def get(self, seed=0, input_mode="two_stream", tag="a"):
        key = (seed, input_mode, tag)
        if key not in self.cache:
            out = self.root / f"{input_mode}_s{seed}_{tag}"
            self.cache[key] = run_toy(seed, input_mode, out, split=self.split)
        return self.cache[key]


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Two 6 s synthetic sequences written to disk; returns (records, manifest path)."""
    recs = synth_dataset(SynthConfig(n_sequences=2, duration_s=6.0, n_subjects=2), seed=3)
    manifest = write_dataset(recs, tmp_path_factory.mktemp("small_ds"))
    return recs, manifest


@pytest.fixture(scope="session")
def untrained_checkpoint(small_dataset, tmp_path_factory):
    """A quarter-width generator with data statistics set but no training."""
    recs, _ = small_dataset
    seqs = [prepare_sequence(r) for r in recs]
    trainer = Trainer(TrainConfig(width=0.25, seed=5), n_subjects=2)
    fit_data_stats(trainer.generator, seqs)
    return trainer.save(tmp_path_factory.mktemp("ckpt") / "untrained.pt")


def _criterion(item_or_report):
    name = item_or_report.nodeid.split("::")[-1]
    if "test_acceptance.py" in item_or_report.nodeid and name.startswith("test_criterion_"):
        return int(name.split("_")[2])
    return None


def pytest_runtest_logreport(report):
    k = _criterion(report)
    if k is None:
        return
    if report.failed:
        _outcomes[k] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(k, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k, title in CRITERIA.items():
        terminalreporter.write_line(f"{_outcomes.get(k, 'NOT RUN')}  criterion {k}: {title}")
        for msg in NOTES.get(k, []):
            terminalreporter.write_line(f"      {msg}")
