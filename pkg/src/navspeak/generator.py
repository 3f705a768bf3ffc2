"""Two-stage decoding: landmarks first, then the instruction conditioned on them."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .adapter_lm import sample_next
from .errors import CapacityError, ConfigError, DataError
from .model import SpeakerModel, raw_and_actions
from .prompts import parse_landmarks
from .world import OBJECT_VOCAB, ROOM_TYPES

log = logging.getLogger(__name__)

STAGE_LANDMARKS = 0
STAGE_INSTRUCTION = 1
LANDMARK_NAMES = frozenset(OBJECT_VOCAB) | frozenset(ROOM_TYPES)


@dataclass
class GenerationRequest:
    trajectory: object
    style: str
    landmark_override: list | None = None
    temperature: float | None = None  # None: the style default from the config
    max_tokens: int = 40
    seed: int = 0

    def validate(self, model: SpeakerModel):
        if self.style not in model.prompts.styles:
            raise ConfigError(f"unknown style {self.style!r}; expected one of {model.prompts.styles}")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.max_tokens <= model.lm.context_len:
            raise CapacityError(f"max_tokens {self.max_tokens} outside (0, {model.lm.context_len}]")
        if self.landmark_override is not None:
            unknown = [w for w in self.landmark_override if w not in model.vocab]
            if unknown:
                raise DataError(f"override landmarks not in the vocabulary: {unknown}")


@dataclass
class Decoded:
    tokens: list
    truncated: bool = False


@dataclass
class GenerationRecord:
    landmarks_predicted: list | None
    landmarks_used: list
    instruction: list
    flags: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "landmarks_predicted": self.landmarks_predicted,
            "landmarks_used": list(self.landmarks_used),
            "instruction": " ".join(self.instruction),
            "flags": dict(self.flags),
        }


def row_generator(seed, stage):
    """Sampling stream for one (request seed, stage); independent of batch layout."""
    state = np.random.SeedSequence([int(seed), int(stage)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


class Generator:
    """Decoder over one frozen :class:`SpeakerModel`.

    Calls never mutate the model, so one instance may serve concurrent requests.
    """

    def __init__(self, model: SpeakerModel, batch_size=32):
        self.model = model.eval()
        self.vocab = model.vocab
        self.prompts = model.prompts
        self.batch_size = batch_size

    def default_temperature(self, style):
        return self.model.cfg.generate.temperature_for(style)

    @torch.no_grad()
    def decode(self, prompts, raws, actions_list, temperatures, generators, max_tokens, greedy=False):
        """Continue each prompt until EOS or ``max_tokens``; rows are right-padded.

        Causal attention makes the padding after a row's last real token
        invisible to that row, so each row reads its logits at its own length.
        """
        model = self.model
        limit = model.lm.context_len
        for p in prompts:
            if len(p) >= limit:
                raise CapacityError(f"prompt of {len(p)} tokens leaves no room in context {limit}")
        feats, tmask, _ = model.encode(raws, actions_list)
        seqs = [list(p) for p in prompts]
        out = [[] for _ in prompts]
        done = [False] * len(prompts)
        truncated = [False] * len(prompts)
        for _ in range(max_tokens):
            live = [i for i, d in enumerate(done) if not d]
            if not live:
                break
            ids = model.pad_tokens([seqs[i] for i in live])
            logits = model.lm(ids, feats[live], tmask[live])
            last = torch.as_tensor([len(seqs[i]) - 1 for i in live])
            step_logits = logits[torch.arange(len(live)), last]
            for row, i in enumerate(live):
                if greedy:
                    tok = int(step_logits[row].argmax())
                else:
                    tok = int(sample_next(step_logits[row:row + 1], temperatures[i], generators[i])[0])
                if tok == self.vocab.eos:
                    done[i] = True
                    continue
                seqs[i].append(tok)
                out[i].append(tok)
                if len(seqs[i]) >= limit:
                    done[i] = truncated[i] = True
        for i, d in enumerate(done):
            if not d:
                truncated[i] = True
        return [Decoded(self.vocab.decode(o), t) for o, t in zip(out, truncated)]

    def _landmark_prompt(self, style):
        v = self.vocab
        return [v.bos] + v.encode(self.prompts.landmark_prompt(style)) + [v.sep]

    def _instruction_prompt(self, style, landmarks):
        v = self.vocab
        return [v.bos] + v.encode(self.prompts.instruction_prompt(style, landmarks)) + [v.sep]

    def _run(self, prompts, requests, stage, greedy):
        results = []
        for lo in range(0, len(requests), self.batch_size):
            chunk = requests[lo: lo + self.batch_size]
            raws, acts = zip(*(raw_and_actions(r.trajectory) for r in chunk))
            temps = [r.temperature or self.default_temperature(r.style) for r in chunk]
            gens = [row_generator(r.seed, stage) for r in chunk]
            results.extend(self.decode(prompts[lo: lo + self.batch_size], list(raws), list(acts), temps,
                                       gens, max(r.max_tokens for r in chunk), greedy))
        # rows sharing a batch may have different budgets
        for res, r in zip(results, requests):
            if len(res.tokens) > r.max_tokens:
                res.tokens, res.truncated = res.tokens[: r.max_tokens], True
        return results

    def predict_landmarks(self, trajectory, style, temperature=None, seed=0, max_tokens=40, greedy=False):
        """Stage one. Returns (names, flags)."""
        req = GenerationRequest(trajectory, style, None, temperature, max_tokens, seed)
        req.validate(self.model)
        rec = self.generate_many([req], greedy=greedy, stop_after_landmarks=True)[0]
        return rec.landmarks_used, rec.flags

    def generate_instruction(self, trajectory, style, landmarks, temperature=None, seed=0, max_tokens=40,
                             greedy=False):
        """Stage two. Returns (tokens, flags)."""
        req = GenerationRequest(trajectory, style, list(landmarks), temperature, max_tokens, seed)
        req.validate(self.model)
        rec = self.generate_many([req], greedy=greedy)[0]
        return rec.instruction, rec.flags

    def generate(self, request: GenerationRequest, greedy=False) -> GenerationRecord:
        return self.generate_many([request], greedy=greedy)[0]

    def generate_many(self, requests, greedy=False, stop_after_landmarks=False):
        """Batched :meth:`generate`; each record depends only on its own request."""
        for r in requests:
            r.validate(self.model)
        records = [GenerationRecord(None, [], [], {}) for _ in requests]
        need = [i for i, r in enumerate(requests) if r.landmark_override is None]
        if need:
            sub = [requests[i] for i in need]
            decoded = self._run([self._landmark_prompt(r.style) for r in sub], sub, STAGE_LANDMARKS, greedy)
            for i, d in zip(need, decoded):
                names, dropped = parse_landmarks(d.tokens, LANDMARK_NAMES)
                if dropped:
                    log.warning("dropped unknown landmark tokens %s", dropped)
                records[i].landmarks_predicted = names
                records[i].landmarks_used = names
                records[i].flags["landmarks_truncated"] = d.truncated
                records[i].flags["dropped_tokens"] = dropped
        for i, r in enumerate(requests):
            if r.landmark_override is not None:
                records[i].landmarks_used = list(r.landmark_override)
        if stop_after_landmarks:
            return records
        prompts = [self._instruction_prompt(r.style, rec.landmarks_used) for r, rec in zip(requests, records)]
        decoded = self._run(prompts, requests, STAGE_INSTRUCTION, greedy)
        for rec, d in zip(records, decoded):
            rec.instruction = d.tokens
            rec.flags["instruction_truncated"] = d.truncated
        return records
