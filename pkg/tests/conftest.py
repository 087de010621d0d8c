import numpy as np
import pytest

from mmsent import tensor as T
from mmsent.data import SynthSpec, collate, generate_synthetic
from mmsent.modality import build_vocab
from mmsent.model import ModelConfig, SentimentModel
from mmsent.transformer import EncoderConfig

_acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _acceptance_results.append((marker.args[0], item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, test, outcome in _acceptance_results:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({test})")


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return T.Rng(1234)


@pytest.fixture(scope="session")
def small_manifest():
    return generate_synthetic(SynthSpec(n=60, seed=3, separability=0.8, audio_dim=6, visual_dim=5,
                                        text_len=(2, 6), audio_len=(2, 7), visual_len=(2, 7)))


@pytest.fixture(scope="session")
def small_vocab(small_manifest):
    return build_vocab([r.text for r in small_manifest["train"]])


def tiny_config(mode="concat", dim=8, layers=2, heads=2, dropout=0.0, **kw):
    return ModelConfig(encoder=EncoderConfig(model_dim=dim, num_layers=layers, num_heads=heads, dropout_p=dropout,
                                             max_seq_len=16),
                       fusion_mode=mode, audio_dim=6, visual_dim=5, head_dropout=dropout, **kw)


@pytest.fixture
def tiny_model(small_vocab):
    return SentimentModel(tiny_config(), small_vocab, seed=5)


@pytest.fixture
def small_batch(small_manifest, small_vocab):
    return collate(small_manifest["train"][:4], small_vocab, 16)
