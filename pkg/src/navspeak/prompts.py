"""Prompt templates and the word-level vocabulary.

Tokenization is whitespace splitting over a closed vocabulary; the same
scheme is used by the metrics so scores and LM tokens line up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import grammar
from .errors import DataError
from .world import OBJECT_VOCAB, ROOM_TYPES

PAD, BOS, EOS, SEP, UNK, ACT = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>", "<act>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK, ACT)
LANDMARK_SLOT = "{landmarks}"
VIEWPOINT_SLOT = "{viewpoints}"
NO_LANDMARKS = "none"


@dataclass(frozen=True)
class PromptRegistry:
    landmark: dict = field(default_factory=lambda: {
        "fine_grained": "list the landmarks seen along this route .",
        "high_level": "list the landmarks that mark the goal of this route .",
    })
    instruction: dict = field(default_factory=lambda: {
        "fine_grained": "describe every step of this route using : {landmarks} .",
        "high_level": "give a short goal instruction for this route using : {landmarks} .",
    })
    backtrack: str = "which view leads back to the previous viewpoint ? views : {viewpoints} ."

    def __post_init__(self):
        for style, text in self.instruction.items():
            if text.count(LANDMARK_SLOT) != 1:
                raise DataError(f"instruction prompt for {style!r} needs exactly one landmark slot")

    @property
    def styles(self):
        return tuple(self.instruction)

    def landmark_prompt(self, style):
        return self.landmark[style].split()

    def instruction_prompt(self, style, landmarks):
        slot = " , ".join(landmarks) if landmarks else NO_LANDMARKS
        return self.instruction[style].replace(LANDMARK_SLOT, slot).split()

    def backtrack_prompt(self, candidates):
        slot = " ".join(str(c) for c in candidates) if candidates else NO_LANDMARKS
        return self.backtrack.replace(VIEWPOINT_SLOT, slot).split()


def serialize_landmarks(names):
    """``["sofa", "lamp"] -> ["sofa", ",", "lamp"]``."""
    out = []
    for i, name in enumerate(names):
        if i:
            out.append(",")
        out.append(name)
    return out


def parse_landmarks(tokens, known):
    """Split comma-joined names; returns (names, dropped unknown tokens)."""
    names, dropped = [], []
    for tok in tokens:
        if tok == ",":
            continue
        if tok in known:
            if tok not in names:
                names.append(tok)
        else:
            dropped.append(tok)
    return names, dropped


class Vocabulary:
    def __init__(self, words):
        words = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.itos = words
        self.stoi = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def pad(self):
        return self.stoi[PAD]

    @property
    def bos(self):
        return self.stoi[BOS]

    @property
    def eos(self):
        return self.stoi[EOS]

    @property
    def sep(self):
        return self.stoi[SEP]

    @property
    def act(self):
        return self.stoi[ACT]

    def encode(self, tokens, strict=True):
        out = []
        for tok in tokens:
            if tok in self.stoi:
                out.append(self.stoi[tok])
            elif strict:
                raise DataError(f"token {tok!r} is not in the vocabulary")
            else:
                out.append(self.stoi[UNK])
        return out

    def decode(self, ids, strip_special=True):
        words = [self.itos[int(i)] for i in ids]
        if strip_special:
            words = [w for w in words if w not in SPECIALS]
        return words

    def to_list(self):
        return list(self.itos)

    @classmethod
    def from_list(cls, itos):
        vocab = cls([])
        vocab.itos = list(itos)
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        return vocab


def build_vocabulary(texts=(), prompts: PromptRegistry | None = None, k=36,
                     objects=OBJECT_VOCAB, rooms=ROOM_TYPES):
    """Closed vocabulary: corpus tokens, prompt words, grammar words, nouns, view ids."""
    prompts = prompts or PromptRegistry()
    words = set()
    for text in texts:
        words.update(text)
    for template in list(prompts.landmark.values()) + list(prompts.instruction.values()) + [prompts.backtrack]:
        words.update(w for w in template.split() if w not in (LANDMARK_SLOT, VIEWPOINT_SLOT))
    for phrases in grammar.PHRASES.values():
        for phrase in phrases:
            words.update(w for w in phrase.split() if w != "{}")
    words.update(grammar.DIRECTIONS)
    words.update((",", "and", "then", ".", NO_LANDMARKS))
    words.update(objects)
    words.update(rooms)
    words.update(str(i) for i in range(k))
    return Vocabulary(words)
