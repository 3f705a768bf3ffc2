import logging
import math
from collections import Counter

import pytest
import torch

from conftest import small_config
from navspeak import trainer
from navspeak.adapter_lm import loss_autoregressive
from navspeak.config import RunConfig
from navspeak.errors import ConfigError, DataError, NumericError
from navspeak.model import SpeakerModel, raw_and_actions
from navspeak.prompts import PromptRegistry, build_vocabulary


@pytest.fixture
def parts(trajectory):
    vocab = build_vocabulary(k=8)
    raw, actions = raw_and_actions(trajectory)
    return vocab, PromptRegistry(), raw, actions


def _supervised_words(item, vocab):
    ids = item.sequence.token_ids
    return vocab.decode([t for t, m in zip(ids, item.sequence.supervision_mask) if m], strip_special=False)


def test_landmark_sample_layout(parts):
    vocab, prompts, raw, actions = parts
    item = trainer.build_landmark_sample(raw, actions, ["sofa", "lamp"], "fine_grained", vocab, prompts)
    assert _supervised_words(item, vocab) == ["sofa", ",", "lamp", "<eos>"]
    assert sum(item.sequence.supervision_mask) == 3 + 1


def test_empty_landmarks_skip_with_warning(parts, caplog):
    vocab, prompts, raw, actions = parts
    with caplog.at_level(logging.WARNING, logger="navspeak.trainer"):
        assert trainer.build_landmark_sample(raw, actions, [], "fine_grained", vocab, prompts, "t1") is None
    assert "t1" in caplog.text


def test_instruction_sample_supervises_only_text(parts):
    vocab, prompts, raw, actions = parts
    text = "go north , stop at the lamp".split()
    a = trainer.build_instruction_sample(raw, actions, ["lamp", "sofa"], text, "fine_grained", vocab, prompts)
    b = trainer.build_instruction_sample(raw, actions, ["sofa", "lamp"], text, "fine_grained", vocab, prompts)
    assert _supervised_words(a, vocab) == text + ["<eos>"]
    assert a.sequence.token_ids != b.sequence.token_ids
    assert _supervised_words(a, vocab) == _supervised_words(b, vocab)
    with pytest.raises(DataError):
        trainer.build_instruction_sample(raw, actions, [], [], "fine_grained", vocab, prompts)


def test_high_level_prompt_is_used(parts):
    vocab, prompts, raw, actions = parts
    item = trainer.build_instruction_sample(raw, actions, ["kitchen"], ["go", "to", "the", "kitchen"],
                                            "high_level", vocab, prompts)
    words = vocab.decode(item.sequence.token_ids)
    assert words[: len(prompts.instruction_prompt("high_level", ["kitchen"]))] == \
        prompts.instruction_prompt("high_level", ["kitchen"])


def test_prompt_region_logits_do_not_move_the_loss():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 8, 10, generator=gen)
    tokens = torch.randint(0, 10, (1, 8), generator=gen)
    mask = torch.tensor([[False] * 4 + [True] * 4])
    base = loss_autoregressive(logits, tokens, mask)
    bumped = logits.clone()
    bumped[0, :3] += torch.randn(3, 10, generator=gen) * 10  # rows predicting prompt tokens
    assert torch.equal(loss_autoregressive(bumped, tokens, mask), base)


def test_mixing_proportions():
    streams = {"a": [1], "b": [2], "c": [3]}
    ratios = {"a": 0.5, "b": 0.3, "c": 0.2}
    draws = Counter(k for batch in trainer.mix_batches(streams, ratios, 1, 10, stop=1000) for k, _ in batch)
    for key, r in ratios.items():
        assert abs(draws[key] / 10000 - r) <= 0.02
    two = Counter(k for batch in trainer.mix_batches(streams, {"a": 0.5, "b": 0.5, "c": 0.0}, 2, 10, stop=1000)
                  for k, _ in batch)
    assert 0.48 <= two["a"] / 10000 <= 0.52 and two["c"] == 0


def test_mixing_is_seeded_and_resumable():
    streams = {"a": list(range(50)), "b": list(range(50))}
    ratios = {"a": 0.5, "b": 0.5}
    full = list(trainer.mix_batches(streams, ratios, 3, 4, stop=20))
    assert full == list(trainer.mix_batches(streams, ratios, 3, 4, stop=20))
    assert full[10:] == list(trainer.mix_batches(streams, ratios, 3, 4, start=10, stop=20))


def test_mixing_errors():
    with pytest.raises(ConfigError):
        next(trainer.mix_batches({"a": []}, {"a": 1.0}, 0))
    with pytest.raises(ConfigError):
        next(trainer.mix_batches({"a": [1]}, {"a": 0.7}, 0))


def test_stream_ratios_split_styles():
    ratios = trainer.stream_ratios(RunConfig.toy())
    assert ratios[("instruction", "fine_grained")] == pytest.approx(0.3)
    assert ratios[("landmark", "high_level")] == pytest.approx(0.1)
    assert sum(ratios.values()) == pytest.approx(1.0)


def test_streams_cover_tasks(small_corpus):
    _, _, train, val = trainer.prepare(small_config(), small_corpus)
    assert {k[0] for k in train} == {"instruction", "landmark", "stmt"}
    assert val and not set(i.trajectory_id for v in val.values() for i in v) & \
        set(i.trajectory_id for v in train.values() for i in v)


@pytest.mark.slow
def test_300_steps_drop_train_ce(corpus):
    cfg = RunConfig.toy()
    cfg.train.steps = 300
    vocab, _, train, _ = trainer.prepare(cfg, corpus)
    model = SpeakerModel(cfg, vocab)
    _, history = trainer.fit(model, cfg, train)
    ce = [h["loss"] for h in history if h["task"] == "instruction" and h["split"] == "train"]
    first, last = ce[0], sum(ce[-20:]) / 20
    assert last < first - 1.0, (first, last)


def test_zero_learning_rate_leaves_parameters(small_corpus):
    cfg = small_config(lr=0.0, steps=5)
    vocab, _, train, _ = trainer.prepare(cfg, small_corpus)
    model = SpeakerModel(cfg, vocab)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    trainer.fit(model, cfg, train)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_resume_is_bitwise(small_corpus_dir, tmp_path):
    cfg = small_config(steps=12)
    straight = trainer.train(cfg, small_corpus_dir, tmp_path / "a")
    trainer.train(small_config(steps=12), small_corpus_dir, tmp_path / "b", steps=6)
    resumed = trainer.train(small_config(steps=12), small_corpus_dir, tmp_path / "c",
                            resume=tmp_path / "b" / trainer.CHECKPOINT_NAME)

    def train_rows(history):
        return [(h["step"], h["task"], h["loss"]) for h in history if h["split"] == "train" and h["step"] >= 6]

    assert train_rows(resumed.history) == train_rows(straight.history)
    for k, v in straight.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k])


def test_training_is_deterministic(small_corpus_dir, tmp_path):
    a = trainer.train(small_config(steps=4), small_corpus_dir, tmp_path / "a")
    b = trainer.train(small_config(steps=4), small_corpus_dir, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.history == b.history


def test_nan_loss_aborts_with_diagnostics(small_corpus):
    cfg = small_config(steps=3)
    vocab, _, train, _ = trainer.prepare(cfg, small_corpus)
    model = SpeakerModel(cfg, vocab)
    with torch.no_grad():
        model.lm.head.weight.fill_(math.nan)
    with pytest.raises(NumericError) as info:
        trainer.fit(model, cfg, train)
    assert info.value.step == 0 and info.value.grad_norms


def test_stmt_accuracy_bounds(small_corpus):
    cfg = small_config()
    vocab, _, train, _ = trainer.prepare(cfg, small_corpus)
    acc = trainer.stmt_accuracy(SpeakerModel(cfg, vocab), train[("stmt", None)][:20])
    assert 0.0 <= acc <= 1.0


def test_corpus_mismatch_is_a_config_error(small_corpus_dir, tmp_path):
    cfg = small_config()
    cfg.world.k = 12
    with pytest.raises(ConfigError):
        trainer.train(cfg, small_corpus_dir, tmp_path)
