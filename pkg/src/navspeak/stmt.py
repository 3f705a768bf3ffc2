"""Backtrack prediction head: which subview at r_t leads back to r_{t-1}."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter_lm import TokenSequence
from .errors import NoPreviousViewpointError, ShapeError
from .layers import Attention
from .world import heading_bucket, navigable_views


@dataclass(frozen=True)
class StmtSample:
    steps: tuple  # r_1..r_t, original actions kept
    target: int  # a_p, subview at r_t facing r_{t-1}
    candidates: tuple  # navigable subviews at r_t
    trajectory_id: str = ""

    @property
    def t(self):
        return len(self.steps)


def backtrack_target(world, prev_vid, cur_vid, k):
    r0, c0 = divmod(cur_vid, world.width)
    r1, c1 = divmod(prev_vid, world.width)
    return heading_bucket(r1 - r0, c1 - c0, k)


def make_stmt_samples(trajectory, world):
    """One sample per prefix length t = 2..T."""
    k = trajectory.K
    out = []
    for t in range(2, trajectory.T + 1):
        steps = trajectory.steps[:t]
        cur, prev = steps[-1].viewpoint, steps[-2].viewpoint
        out.append(StmtSample(
            steps=steps,
            target=backtrack_target(world, prev, cur, k),
            candidates=tuple(sorted(navigable_views(world, cur, k))),
            trajectory_id=trajectory.trajectory_id,
        ))
    return out


def build_stmt_input(steps, prompt_a_ids, special_id, bos_id=None):
    """Token layout ``[BOS] prompt_a x_a0``; the LM mask is empty (STMT has its own loss).

    Returns (TokenSequence, raw features t x K x D_raw, actions).
    """
    if len(steps) < 2:
        raise NoPreviousViewpointError("backtracking needs a previous viewpoint (t >= 2)")
    ids = ([bos_id] if bos_id is not None else []) + list(prompt_a_ids) + [special_id]
    seq = TokenSequence(ids, [False] * len(ids))
    raw = torch.tensor(np.stack([s.observation.subviews for s in steps]))
    return seq, raw, [s.action for s in steps]


class StmtHead(nn.Module):
    """Cross-attention injection from layer ``start_layer`` on, plus the bilinear readout."""

    def __init__(self, d_p, d_i, n_layers, start_layer, n_heads=4):
        super().__init__()
        if not 0 <= start_layer <= n_layers:
            raise ShapeError(f"start layer {start_layer} outside [0, {n_layers}]")
        self.start_layer = start_layer
        self.n_layers = n_layers
        self.W = nn.Parameter(torch.randn(d_p, d_i) * 0.02)
        self.scale = d_i ** -0.5
        self.norms = nn.ModuleDict({str(l): nn.LayerNorm(d_p) for l in range(start_layer, n_layers)})
        self.cross = nn.ModuleDict(
            {str(l): Attention(d_p, n_heads, kv_dim=d_i, zero_out=True) for l in range(start_layer, n_layers)}
        )

    def cross_attn_inject(self, x_a, views, layer):
        """x_a (B, 1, D_p) attends over views (B, K, D_I); identity below start_layer."""
        if layer < self.start_layer:
            return x_a
        key = str(layer)
        return x_a + self.cross[key](self.norms[key](x_a), views)

    def hook(self, views, positions):
        """LM hook replacing the hidden state at ``positions`` (one per row)."""
        positions = torch.as_tensor(positions, dtype=torch.long)

        def apply(layer, h):
            if layer < self.start_layer:
                return h
            rows = torch.arange(h.shape[0])
            x_a = h[rows, positions].unsqueeze(1)
            new = self.cross_attn_inject(x_a, views, layer)
            sel = torch.zeros(h.shape[:2], dtype=torch.bool)
            sel[rows, positions] = True
            return torch.where(sel.unsqueeze(-1), new.expand_as(h), h)

        return apply

    def backtrack_logits(self, x_a_final, views):
        """x_a_final (B, D_p), views (B, K, D_I) -> (B, K) logits ``x W I^T / sqrt(D_I)``.

        Both operands are layer-normalized, so without the scale the logits
        and the gradient reaching the LM grow with the width.
        """
        return torch.einsum("bd,de,bke->bk", x_a_final, self.W, views) * self.scale

    def predict_backtrack(self, x_a_final, views):
        return torch.softmax(self.backtrack_logits(x_a_final, views), dim=-1)


def loss_stmt(probs, target):
    """``-ln A[target]`` for a probability vector (or batch of them)."""
    probs = torch.as_tensor(probs)
    target = torch.as_tensor(target, dtype=torch.long)
    K = probs.shape[-1]
    if bool((target < 0).any()) or bool((target >= K).any()):
        raise IndexError(f"backtrack target outside [0, {K})")
    if probs.dim() == 1:
        return -torch.log(probs[target])
    return -torch.log(probs.gather(-1, target.view(-1, 1))).mean()


def loss_stmt_from_logits(logits, target):
    return F.cross_entropy(logits, torch.as_tensor(target, dtype=torch.long))
