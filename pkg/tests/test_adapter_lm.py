import pytest
import torch

from navspeak.adapter_lm import (
    AdapterLM, TokenSequence, loss_autoregressive, per_position_loss, sample_next, zero_attn_inject,
)
from navspeak.errors import CapacityError, EmptyMaskError, LayerIndexError, ShapeError


@pytest.fixture
def lm():
    torch.manual_seed(0)
    return AdapterLM(20, width=16, n_layers=3, n_heads=2, context_len=12, M=2).eval()


def test_logit_shape(lm):
    assert lm(torch.randint(0, 20, (2, 7))).shape == (2, 7, 20)


def test_text_positions_are_causal(lm):
    tokens = torch.randint(0, 20, (1, 8))
    changed = tokens.clone()
    changed[0, 5:] = (changed[0, 5:] + 1) % 20
    feats = torch.randn(1, 3, 2, 16)
    with torch.no_grad():
        for layer in lm.adapter_layers:
            lm.adapter(layer).gate.fill_(0.5)
        torch.testing.assert_close(lm(tokens, feats)[:, :5], lm(changed, feats)[:, :5])


def test_open_gate_uses_features(lm):
    tokens = torch.randint(0, 20, (1, 6))
    feats = torch.randn(1, 3, 2, 16)
    with torch.no_grad():
        lm.adapter(0).gate.fill_(0.5)
        assert not torch.allclose(lm(tokens, feats), lm(tokens, None))


def test_masked_steps_are_ignored(lm):
    tokens = torch.randint(0, 20, (1, 6))
    feats = torch.randn(1, 3, 2, 16)
    padded = torch.cat([feats, torch.randn(1, 2, 2, 16) * 50], dim=1)
    mask = torch.tensor([[True] * 3 + [False] * 2])
    with torch.no_grad():
        lm.adapter(1).gate.fill_(0.7)
        torch.testing.assert_close(lm(tokens, feats), lm(tokens, padded, mask))


def test_zero_gate_inject_is_identity():
    x = torch.randn(2, 3, 4)
    out = zero_attn_inject(None, x, torch.zeros(()), lambda q, kv: torch.ones_like(q) * 1e6)
    assert torch.equal(out, x)


def test_capacity_and_layer_errors(lm):
    with pytest.raises(CapacityError):
        lm(torch.zeros(1, 13, dtype=torch.long))
    with pytest.raises(LayerIndexError):
        lm.adapter(7)
    with pytest.raises(ShapeError):
        AdapterLM(5, n_layers=1)


def test_adapter_subset():
    model = AdapterLM(10, width=8, n_layers=3, n_heads=2, context_len=8, M=1, adapter_layers=[2])
    assert model.blocks[0].adapter is None and model.blocks[2].adapter is not None


def test_freeze_except_last(lm):
    lm.freeze_except_last(2)
    assert not any(p.requires_grad for p in lm.blocks[0].parameters())
    assert all(p.requires_grad for p in lm.blocks[2].parameters())
    assert not lm.tok_emb.weight.requires_grad and lm.head.weight.requires_grad


def test_token_sequence_lengths_must_match():
    with pytest.raises(ShapeError):
        TokenSequence([1, 2, 3], [True, False])


def test_per_position_loss_alignment():
    logits = torch.full((1, 3, 4), -1e4)
    logits[0, 0, 2] = 0.0  # predicts token at position 1
    logits[0, 1, 3] = 0.0
    tokens = torch.tensor([[0, 2, 3]])
    losses, supervised = per_position_loss(logits, tokens, torch.tensor([[True, True, True]]))
    assert supervised.tolist() == [[False, True, True]]
    assert losses[0, 1] < 1e-6 and losses[0, 2] < 1e-6


def test_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        loss_autoregressive(torch.randn(1, 3, 4), torch.tensor([[0, 1, 2]]), torch.tensor([[True, False, False]]))


def test_greedy_limit():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(50, 30)
    assert torch.equal(sample_next(logits, 1e-6, gen), logits.argmax(-1))
    with pytest.raises(ValueError):
        sample_next(logits, 0.0)


def test_sampling_is_seeded():
    logits = torch.randn(4, 30)
    a = sample_next(logits, 1.0, torch.Generator().manual_seed(3))
    b = sample_next(logits, 1.0, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
