import logging
import time

import pytest
from hypothesis import settings

from navspeak import dataset, trainer
from navspeak.config import RunConfig
from navspeak.world import generate_world, sample_trajectory

# fixed example streams so reruns see the same cases
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

ACCEPTANCE = {}


def record_acceptance(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        )


@pytest.fixture(autouse=True)
def _quiet_landmark_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="navspeak.trainer")


@pytest.fixture
def world():
    return generate_world(3, 8, 8)


@pytest.fixture
def trajectory(world):
    return sample_trajectory(world, 5, (4, 6), k=8, d_raw=32)


@pytest.fixture(scope="session")
def toy_cfg():
    return RunConfig.toy()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, toy_cfg):
    out = tmp_path_factory.mktemp("corpus")
    dataset.save_corpus(dataset.generate_corpus(toy_cfg.world, toy_cfg.seed), out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return dataset.load_corpus(corpus_dir)


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory, corpus_dir):
    """The default toy pipeline trained with and without the backtrack task."""
    runs = {}
    start = time.perf_counter()
    for name, enabled in (("stmt", True), ("no_stmt", False)):
        cfg = RunConfig.toy()
        cfg.stmt.enabled = enabled
        t0 = time.perf_counter()
        result = trainer.train(cfg, corpus_dir, tmp_path_factory.mktemp(f"run_{name}"))
        runs[name] = {"result": result, "seconds": time.perf_counter() - t0}
    runs["seconds"] = time.perf_counter() - start
    return runs


@pytest.fixture(scope="session")
def trained_model(trained_runs):
    return trained_runs["stmt"]["result"].model


def small_config(**train):
    """A quick-to-train variant of the toy preset for unit tests."""
    cfg = RunConfig.toy()
    cfg.world.n_worlds, cfg.world.paths_per_world = 4, 5
    cfg.lm.width, cfg.lm.n_layers, cfg.lm.n_heads = 32, 2, 2
    cfg.encoder.d_i, cfg.encoder.n_blocks, cfg.encoder.n_heads = 16, 1, 2
    cfg.train.batch_size, cfg.train.eval_every, cfg.train.warmup = 8, 10, 5
    for key, value in train.items():
        setattr(cfg.train, key, value)
    return cfg


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    cfg = small_config()
    out = tmp_path_factory.mktemp("small_corpus")
    dataset.save_corpus(dataset.generate_corpus(cfg.world, cfg.seed), out)
    return out


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return dataset.load_corpus(small_corpus_dir)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    from navspeak.model import SpeakerModel

    cfg = small_config()
    vocab, _, _, _ = trainer.prepare(cfg, small_corpus)
    return SpeakerModel(cfg, vocab).eval()
