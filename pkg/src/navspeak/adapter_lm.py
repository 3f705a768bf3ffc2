"""Tiny decoder-only LM with layer-wise, zero-gated trajectory adapters."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, EmptyMaskError, LayerIndexError, ShapeError
from .layers import MLP, Attention, causal_mask


@dataclass
class TokenSequence:
    token_ids: list
    supervision_mask: list

    def __post_init__(self):
        if len(self.token_ids) != len(self.supervision_mask):
            raise ShapeError("supervision mask length differs from token length")

    def __len__(self):
        return len(self.token_ids)


class LayerAdapter(nn.Module):
    """Query offsets, projection to textual space and a gated cross-attention branch."""

    def __init__(self, M, width, n_heads):
        super().__init__()
        self.query = nn.Parameter(torch.randn(M, width) * 0.02)
        self.proj = nn.Linear(width, width)
        self.norm = nn.LayerNorm(width)
        self.attn = Attention(width, n_heads)
        # tanh(0) == 0 exactly, so the branch is a no-op at init
        self.gate = nn.Parameter(torch.zeros(()))

    def adapt(self, traj_features):
        """(..., T, M, D) -> (..., T*M, D), ordered by step then token."""
        x = self.proj(traj_features + self.query)
        return x.reshape(*x.shape[:-3], -1, x.shape[-1])

    def inject(self, rho, x, rho_mask=None):
        """Gated cross-attention of ``x`` (B, S, D) over ``rho`` (B, V, D)."""
        mask = None if rho_mask is None else rho_mask.unsqueeze(1)
        return zero_attn_inject(rho, x, self.gate, lambda q, kv: self.attn(self.norm(q), kv, mask))


def zero_attn_inject(rho, x, gate, cross_attn):
    """``x + tanh(gate) * cross_attn(x, rho)``; exactly ``x`` when gate == 0."""
    return x + torch.tanh(gate) * cross_attn(x, rho)


class DecoderBlock(nn.Module):
    def __init__(self, width, n_heads, adapter: LayerAdapter | None):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, n_heads)
        self.adapter = adapter
        self.ln2 = nn.LayerNorm(width)
        self.mlp = MLP(width)

    def forward(self, x, mask, rho=None, rho_mask=None):
        h = x + self.attn(self.ln1(x), mask=mask)
        if self.adapter is not None and rho is not None:
            h = self.adapter.inject(rho, h, rho_mask)
        return h + self.mlp(self.ln2(h))


class AdapterLM(nn.Module):
    """Decoder-only transformer; ``forward(tokens, None)`` is a plain LM.

    Trajectory tokens act as non-causal memory: every text position may attend
    to every unmasked trajectory token, text positions stay causal.
    """

    def __init__(self, vocab_size, width=64, n_layers=4, n_heads=4, context_len=256, M=4,
                 adapter_layers=None):
        super().__init__()
        if n_layers < 2:
            raise ShapeError("n_layers must be >= 2")
        self.width = width
        self.n_layers = n_layers
        self.context_len = context_len
        self.adapter_layers = tuple(range(n_layers) if adapter_layers is None else sorted(adapter_layers))
        self.tok_emb = nn.Embedding(vocab_size, width)
        self.pos_emb = nn.Embedding(context_len, width)
        self.blocks = nn.ModuleList(
            DecoderBlock(width, n_heads, LayerAdapter(M, width, n_heads) if l in self.adapter_layers else None)
            for l in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(width)
        self.head = nn.Linear(width, vocab_size, bias=False)

    @property
    def vocab_size(self):
        return self.head.out_features

    def adapter(self, layer) -> LayerAdapter:
        if layer not in self.adapter_layers:
            raise LayerIndexError(f"layer {layer} has no adapter (adapter layers: {self.adapter_layers})")
        return self.blocks[layer].adapter

    def adapt_features(self, traj_features, layer):
        return self.adapter(layer).adapt(traj_features)

    def hidden_states(self, tokens, traj_features=None, traj_mask=None, hook=None):
        """Final normalized hidden states (B, S, D).

        ``traj_features`` is (B, T, M, D) with optional step mask (B, T).
        ``hook(layer, h)`` may rewrite each block's output.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        B, S = tokens.shape
        if S > self.context_len:
            raise CapacityError(f"sequence of {S} tokens exceeds context {self.context_len}")
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(S))
        mask = causal_mask(S)
        rho_mask = None
        if traj_features is not None:
            if traj_features.dim() == 3:
                traj_features = traj_features.unsqueeze(0)
            M = traj_features.shape[2]
            if traj_mask is not None:
                rho_mask = traj_mask.repeat_interleave(M, dim=1)
        for l, block in enumerate(self.blocks):
            rho = None
            if traj_features is not None and block.adapter is not None:
                rho = block.adapter.adapt(traj_features)
            x = block(x, mask, rho, rho_mask)
            if hook is not None:
                x = hook(l, x)
        return self.ln_f(x)

    def forward(self, tokens, traj_features=None, traj_mask=None, hook=None):
        return self.head(self.hidden_states(tokens, traj_features, traj_mask, hook))

    def freeze_except_last(self, n):
        """Train only the last ``n`` blocks (plus their adapters) and the output head."""
        for p in self.parameters():
            p.requires_grad_(False)
        for block in self.blocks[self.n_layers - n:]:
            for p in block.parameters():
                p.requires_grad_(True)
        for p in list(self.ln_f.parameters()) + list(self.head.parameters()):
            p.requires_grad_(True)


def per_position_loss(logits, tokens, mask):
    """Next-token CE per position: entry s scores the prediction of token s.

    Returns (losses B x S, supervised B x S); position 0 is never supervised.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if tokens.dim() == 1:
        tokens, mask = tokens.unsqueeze(0), mask.unsqueeze(0)
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    B, S, V = logits.shape
    ce = F.cross_entropy(logits[:, :-1].reshape(-1, V), tokens[:, 1:].reshape(-1), reduction="none")
    losses = torch.cat([ce.new_zeros(B, 1), ce.view(B, S - 1)], dim=1)
    supervised = mask.clone()
    supervised[:, 0] = False
    return losses, supervised


def loss_autoregressive(logits, tokens, mask):
    """Mean next-token cross-entropy over positions whose target is supervised."""
    losses, supervised = per_position_loss(logits, tokens, mask)
    n = int(supervised.sum())
    if n == 0:
        raise EmptyMaskError("no supervised target positions")
    return losses[supervised].sum() / n


def sample_next(logits, temperature, generator=None):
    """Ancestral sample from ``softmax(logits / temperature)`` for each row."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)
