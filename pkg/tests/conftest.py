import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aespipe.grkan import GrKanLayer, RationalActivation  # noqa: E402
from aespipe.predictor import AesPredictor, AxisHead, LayerAggregator  # noqa: E402
from aespipe.synth import gen_synthetic  # noqa: E402


def identity_head_model(dim=2, layers=2, bias=0.0):
    """Every axis: uniform aggregator, one identity-activation layer picking dim 0."""
    heads = []
    for _ in range(4):
        w = np.zeros((1, dim))
        w[0, 0] = 1.0
        layer = GrKanLayer.from_activations([RationalActivation([0.0, 1.0], [])], w, [bias])
        heads.append(AxisHead(LayerAggregator(np.zeros(layers)), [layer]))
    return AesPredictor(heads)


def constant_model(value, dim=2, layers=2):
    """Zero weights, output bias ``value`` on every axis."""
    heads = []
    for _ in range(4):
        layer = GrKanLayer.from_activations(
            [RationalActivation([0.0, 1.0], [])], np.zeros((1, dim)), [value]
        )
        heads.append(AxisHead(LayerAggregator(np.zeros(layers)), [layer]))
    return AesPredictor(heads)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = gen_synthetic(60, 30, 40, 5, 3, 6, 8, 3, out, n_unlabeled=40)
    return manifest


_VERDICTS_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Pass/fail lines collected by the acceptance suite."""
    return request.config.stash.setdefault(_VERDICTS_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
