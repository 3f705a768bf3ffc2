"""Per-step trajectory encoding: subview projection, positional tables, aggregator blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import CapacityError, ShapeError
from .layers import EncoderBlock


@dataclass(frozen=True)
class EncoderDims:
    K: int
    M: int
    D_raw: int
    D_I: int
    D_p: int
    n_blocks: int = 2
    n_heads: int = 4
    T_max: int = 16

    def __post_init__(self):
        for name in ("K", "M", "D_raw", "D_I", "D_p", "n_blocks", "n_heads", "T_max"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"encoder dimension {name} must be positive")


POS_STD = 1.0


def _seeded_normal(shape, seed, std=0.02):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g) * std


class TrajectoryEncoder(nn.Module):
    """Maps T panoramas (T x K x D_raw) plus actions to T x M x D_p step tokens.

    Steps never attend to each other; the only cross-step signal is the
    history encoding ``pos_h[t]``.
    """

    def __init__(self, dims: EncoderDims, seed=0):
        super().__init__()
        self.dims = dims
        self.linear = nn.Linear(dims.D_raw, dims.D_I)
        self.norm = nn.LayerNorm(dims.D_I)
        # distinct seeds keep pos_a != pos_o at init; unit scale matches the
        # normalized subview rows so position and action are not drowned out
        self.pos_v = nn.Parameter(_seeded_normal((dims.K, dims.D_I), seed + 1, POS_STD))
        self.pos_h = nn.Parameter(_seeded_normal((dims.T_max, dims.D_I), seed + 2, POS_STD))
        self.pos_a = nn.Parameter(_seeded_normal((dims.D_I,), seed + 3, POS_STD))
        self.pos_o = nn.Parameter(_seeded_normal((dims.D_I,), seed + 4, POS_STD))
        self.stem = nn.Linear(dims.D_I, dims.D_p) if dims.D_I != dims.D_p else nn.Identity()
        self.aggregator = nn.Parameter(_seeded_normal((dims.M, dims.D_p), seed + 5))
        self.blocks = nn.ModuleList(EncoderBlock(dims.D_p, dims.n_heads) for _ in range(dims.n_blocks))

    @property
    def stop_index(self):
        return self.dims.K

    def project_subviews(self, raw):
        """(..., K, D_raw) -> (..., K, D_I): linear map then layer norm."""
        if raw.shape[-2:] != (self.dims.K, self.dims.D_raw):
            raise ShapeError(
                f"expected (..., {self.dims.K}, {self.dims.D_raw}) subviews, got {tuple(raw.shape)}"
            )
        return self.norm(self.linear(raw))

    def augment_step(self, projected, actions, steps):
        """Add spatial, history and action/non-action encodings.

        ``projected`` is (B, K, D_I); ``actions`` and ``steps`` are length-B
        integer tensors (or ints). An action equal to K (STOP) marks no view.
        """
        projected = torch.as_tensor(projected)
        squeeze = projected.dim() == 2
        if squeeze:
            projected = projected.unsqueeze(0)
        B, K, _ = projected.shape
        actions = torch.as_tensor(actions, dtype=torch.long).reshape(-1).expand(B)
        steps = torch.as_tensor(steps, dtype=torch.long).reshape(-1).expand(B)
        if int(steps.max()) >= self.dims.T_max:
            raise CapacityError(f"step index {int(steps.max())} >= T_max={self.dims.T_max}")
        if int(actions.min()) < 0 or int(actions.max()) > K:
            raise ShapeError(f"action index outside [0, {K}]")
        is_action = (torch.arange(K).unsqueeze(0) == actions.unsqueeze(1)).unsqueeze(-1)
        act = torch.where(is_action, self.pos_a, self.pos_o)
        out = projected + self.pos_v.unsqueeze(0) + self.pos_h[steps].unsqueeze(1) + act
        return out.squeeze(0) if squeeze else out

    def aggregate_step(self, augmented):
        """(B, K, D_I) -> (B, M, D_p): aggregator-token outputs of the block stack."""
        squeeze = augmented.dim() == 2
        if squeeze:
            augmented = augmented.unsqueeze(0)
        x = self.stem(augmented)
        agg = self.aggregator.unsqueeze(0).expand(x.shape[0], -1, -1)
        h = torch.cat([agg, x], dim=1)
        for block in self.blocks:
            h = block(h)
        out = h[:, : self.dims.M]
        return out.squeeze(0) if squeeze else out

    def forward(self, raw, actions):
        """Encode one trajectory: raw (T, K, D_raw), actions (T,) -> (T, M, D_p)."""
        raw = torch.as_tensor(raw, dtype=self.linear.weight.dtype)
        T = raw.shape[0]
        if T > self.dims.T_max:
            raise CapacityError(f"trajectory has {T} steps, history table holds {self.dims.T_max}")
        projected = self.project_subviews(raw)
        aug = self.augment_step(projected, torch.as_tensor(actions), torch.arange(T))
        return self.aggregate_step(aug)

    def encode_batch(self, raws, actions_list):
        """Encode several trajectories at once.

        Returns (features B x T_pad x M x D_p, step mask B x T_pad, projected list).
        Steps are flattened into one batch; results are identical to per-trajectory
        calls up to floating-point summation order.
        """
        dtype = self.linear.weight.dtype
        lengths = [len(a) for a in actions_list]
        if max(lengths) > self.dims.T_max:
            raise CapacityError(f"trajectory longer than T_max={self.dims.T_max}")
        raw = torch.as_tensor(np.concatenate(raws, axis=0), dtype=dtype)
        acts = torch.as_tensor(np.concatenate(actions_list), dtype=torch.long)
        steps = torch.cat([torch.arange(n) for n in lengths])
        projected = self.project_subviews(raw)
        agg = self.aggregate_step(self.augment_step(projected, acts, steps))
        B, T_pad = len(lengths), max(lengths)
        feats = agg.new_zeros(B, T_pad, self.dims.M, self.dims.D_p)
        mask = torch.zeros(B, T_pad, dtype=torch.bool)
        proj_out = []
        offset = 0
        for b, n in enumerate(lengths):
            feats[b, :n] = agg[offset: offset + n]
            mask[b, :n] = True
            proj_out.append(projected[offset: offset + n])
            offset += n
        return feats, mask, proj_out


def encode_trajectory(encoder, trajectory):
    """T x M x D_p features for a :class:`~navspeak.world.Trajectory`."""
    return encoder(trajectory.raw_features(), trajectory.actions)
