import numpy as np
import pytest
import torch

from fundusfuse.config import RunConfig
from fundusfuse.data import fit_structured_stats
from fundusfuse.dataset import ExamDataset
from fundusfuse.synth import LABELS, TEMPLATES, generate_records
from fundusfuse.tokenizer import Tokenizer

ACCEPTANCE_TITLES = {
    "A1": "gradient correctness",
    "A2": "loss oracles",
    "A3": "retrieval saturation",
    "A4": "classification",
    "A5": "zero-shot transfer",
    "A6": "ablation ordering",
    "A7": "split safety",
    "A8": "metric oracle",
    "A9": "determinism & persistence",
    "A10": "shape contracts",
}
_acceptance: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _acceptance.setdefault(marker.args[0], []).append((report.passed, item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance, key=lambda k: int(k[1:])):
        results = _acceptance[key]
        ok = all(passed for passed, _, _ in results)
        details = "; ".join(d for _, _, d in results if d)
        line = f"{key:4s} {'PASS' if ok else 'FAIL'}  {ACCEPTANCE_TITLES.get(key, '')}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))


def toy_config(**overrides) -> RunConfig:
    cfg = RunConfig.toy()
    for key, value in overrides.items():
        cfg.set(key, value)
    return cfg


class ToyBundle:
    """Records, tokenizer, statistics and datasets for a small synthetic set."""

    def __init__(self, root, n=12, seed=7, prefix="T"):
        self.records = generate_records(n, seed, root, 64, 1, prefix=prefix)
        self.tokenizer = Tokenizer.build(TEMPLATES.values(), 32)
        self.stats = fit_structured_stats(self.records)
        self.cfg = toy_config()
        self.cfg.encoder.vocab_size = len(self.tokenizer)

    def dataset(self, records=None, **kw):
        records = self.records if records is None else records
        return ExamDataset(records, self.stats, self.tokenizer, TEMPLATES, self.cfg.encoder.image_side, LABELS, **kw)


@pytest.fixture(scope="session")
def toy_bundle(tmp_path_factory):
    return ToyBundle(tmp_path_factory.mktemp("toy_images"))


@pytest.fixture
def toy_batch(toy_bundle):
    return toy_bundle.dataset().batch(range(4))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
