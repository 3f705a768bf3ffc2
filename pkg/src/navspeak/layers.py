"""Attention and MLP building blocks shared by the encoder, LM and STMT head."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    """Multi-head attention with an optional separate key/value source.

    ``mask`` is boolean, broadcastable to (B, S, V); True marks an allowed key.
    """

    def __init__(self, dim, n_heads, kv_dim=None, zero_out=False):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"width {dim} is not divisible by {n_heads} heads")
        kv_dim = kv_dim or dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        B, S, _ = x.shape
        V = context.shape[1]
        q = self.q(x).view(B, S, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k(context).view(B, V, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v(context).view(B, V, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            if mask.dim() == 2:
                mask = mask.unsqueeze(0)
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, S, -1)
        return self.out(y)


class MLP(nn.Module):
    def __init__(self, dim, hidden=None, zero_out=False):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc = nn.Linear(dim, hidden)
        self.proj = nn.Linear(hidden, dim)
        if zero_out:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        return self.proj(F.gelu(self.fc(x)))


class EncoderBlock(nn.Module):
    """Pre-norm residual self-attention + MLP block (no causal mask)."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def causal_mask(S, device=None):
    return torch.ones(S, S, dtype=torch.bool, device=device).tril()
