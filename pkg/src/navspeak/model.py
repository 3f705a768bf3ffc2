"""The full speaker: trajectory encoder + adapter LM + backtrack head, sharing one vocabulary."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .adapter_lm import AdapterLM
from .config import RunConfig
from .prompts import PromptRegistry, Vocabulary
from .stmt import StmtHead
from .trajectory_encoder import EncoderDims, TrajectoryEncoder


class SpeakerModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary, seed=None):
        super().__init__()
        seed = cfg.seed if seed is None else seed
        self.cfg = cfg
        self.vocab = vocab
        self.prompts = PromptRegistry()
        dims = EncoderDims(
            K=cfg.world.k, M=cfg.encoder.m, D_raw=cfg.world.d_raw, D_I=cfg.encoder.d_i,
            D_p=cfg.lm.width, n_blocks=cfg.encoder.n_blocks, n_heads=cfg.encoder.n_heads,
            T_max=cfg.encoder.t_max,
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = TrajectoryEncoder(dims, seed=seed)
            self.lm = AdapterLM(
                len(vocab), width=cfg.lm.width, n_layers=cfg.lm.n_layers, n_heads=cfg.lm.n_heads,
                context_len=cfg.lm.context_len, M=cfg.encoder.m, adapter_layers=cfg.lm.adapter_layers,
            )
            self.stmt = StmtHead(cfg.lm.width, cfg.encoder.d_i, cfg.lm.n_layers, cfg.stmt_start_layer,
                                 n_heads=cfg.lm.n_heads)
        if cfg.lm.trainable_last is not None:
            self.lm.freeze_except_last(cfg.lm.trainable_last)

    @property
    def dtype(self):
        return self.lm.head.weight.dtype

    def encode(self, raws, actions_list):
        return self.encoder.encode_batch(raws, actions_list)

    def pad_tokens(self, seqs):
        S = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), S), self.vocab.pad, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        return ids

    def lm_logits(self, token_seqs, raws, actions_list):
        feats, tmask, _ = self.encode(raws, actions_list)
        return self.lm(self.pad_tokens(token_seqs), feats, tmask)

    def stmt_logits(self, token_seqs, raws, actions_list):
        """Backtrack logits (B, K); the query token is the last real token of each row."""
        feats, tmask, projected = self.encode(raws, actions_list)
        views = torch.stack([p[-1] for p in projected])
        positions = torch.as_tensor([len(s) - 1 for s in token_seqs])
        hidden = self.lm.hidden_states(
            self.pad_tokens(token_seqs), feats, tmask, hook=self.stmt.hook(views, positions)
        )
        x_final = hidden[torch.arange(len(token_seqs)), positions]
        return self.stmt.backtrack_logits(x_final, views)


def raw_and_actions(trajectory_or_steps):
    steps = getattr(trajectory_or_steps, "steps", trajectory_or_steps)
    raw = np.stack([s.observation.subviews for s in steps])
    return raw, [s.action for s in steps]
