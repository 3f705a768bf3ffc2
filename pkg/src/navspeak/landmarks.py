"""Landmark selection: linguistic nouns plus temporally and spatially salient visual objects."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFeatureError
from .world import OBJECT_VOCAB, ROOM_TYPES, navigable_views

DEFAULT_BETA = 0.25
STRATEGIES = ("linguistic", "spatial", "full")


@dataclass(frozen=True)
class ScoredLandmark:
    name: str
    step: int
    temporal_score: float
    spatial_score: float
    final_score: float

    def to_record(self):
        return {
            "name": self.name,
            "step": self.step,
            "delta_tau": self.temporal_score,
            "delta_a": self.spatial_score,
            "delta": self.final_score,
        }


@dataclass
class LandmarkSet:
    linguistic: list
    visual: list = field(default_factory=list)
    full: list = field(default_factory=list)


def extract_linguistic(text, nouns=OBJECT_VOCAB + ROOM_TYPES):
    """Ordered, de-duplicated nouns of ``text`` (token list, string or sample)."""
    if hasattr(text, "text"):
        text = text.text
    if isinstance(text, str):
        text = text.split()
    nouns = set(nouns)
    return list(dict.fromkeys(tok for tok in text if tok in nouns))


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateFeatureError("cosine of a zero-norm feature is undefined")
    return float(np.dot(a, b) / (na * nb))


def cosine_distance(a, b):
    return 1.0 - _cosine(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def temporal_scores(projected_features):
    """Cosine distance between mean-pooled panoramas of consecutive steps, length T-1."""
    feats = np.asarray(projected_features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[0] < 2:
        raise DegenerateFeatureError("temporal scores need a T x K x D array with T >= 2")
    pooled = feats.mean(axis=1)
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(norms == 0):
        raise DegenerateFeatureError(f"zero-norm pooled feature at step {int(np.argmin(norms))}")
    unit = pooled / norms[:, None]
    return 1.0 - np.sum(unit[:-1] * unit[1:], axis=1)


def candidate_views(world, trajectory):
    """Per step: subviews toward navigable neighbours, minus the action view."""
    out = []
    for step in trajectory.steps:
        views = navigable_views(world, step.viewpoint, trajectory.K)
        out.append(sorted(v for v in set(views) if v != step.action))
    return out


def spatial_scores(panorama, action, candidates, features=None):
    """Distinctiveness of each object seen in the action view.

    Score is ``1 - sum of cosine distances`` between the action view and every
    candidate view that also shows the object. Negative scores are kept.
    """
    if action >= panorama.K:
        return {}
    features = panorama.subviews if features is None else features
    features = np.asarray(features, dtype=np.float64)
    scores = {}
    for name in dict.fromkeys(panorama.visible_objects[action]):
        total = 0.0
        for c in candidates:
            if c != action and name in panorama.visible_objects[c]:
                total += cosine_distance(features[action], features[c])
        scores[name] = 1.0 - total
    return scores


def score_occurrences(trajectory, projected_features, candidates, strategy="full"):
    """Every (object, step) candidate with its temporal, spatial and final score."""
    feats = np.asarray(projected_features, dtype=np.float64)
    tau = temporal_scores(feats) if strategy == "full" else None
    out = []
    for t, step in enumerate(trajectory.steps):
        if strategy == "full":
            temporal = float(tau[min(t, len(tau) - 1)])
        else:
            temporal = 1.0
        for name, spatial in spatial_scores(step.observation, step.action, candidates[t], feats[t]).items():
            out.append(ScoredLandmark(name, t, temporal, spatial, spatial * temporal))
    return out


def select_visual(trajectory, projected_features, beta=DEFAULT_BETA, candidates=None, world=None,
                  strategy="full"):
    """Visual landmarks with final score >= beta, one entry per name (best score kept).

    Ordered by step, then by first appearance within the step.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "linguistic" or (math.isinf(beta) and beta > 0):
        return []
    if candidates is None:
        if world is None:
            raise ValueError("pass either candidate views or the world")
        candidates = candidate_views(world, trajectory)
    best = {}
    for occ in score_occurrences(trajectory, projected_features, candidates, strategy):
        if occ.final_score >= beta:
            cur = best.get(occ.name)
            if cur is None or occ.final_score > cur.final_score:
                best[occ.name] = occ
    return sorted(best.values(), key=lambda o: (o.step, _first_index(trajectory, o)))


def _first_index(trajectory, occ):
    step = trajectory.steps[occ.step]
    return step.observation.visible_objects[step.action].index(occ.name)


def full_set(linguistic, visual):
    """Name-set union, linguistic names first, then visual names by step."""
    names = list(linguistic) + [v.name if isinstance(v, ScoredLandmark) else v for v in visual]
    return list(dict.fromkeys(names))


def select_landmarks(trajectory, world, instruction, beta=DEFAULT_BETA, strategy="full",
                     projected_features=None):
    """Full landmark set for one (trajectory, instruction) pair.

    Without ``projected_features`` the raw subview features are scored, which
    is how landmarks are prepared before any model exists.
    """
    feats = trajectory.raw_features() if projected_features is None else projected_features
    nouns = tuple(world.vocab) + ROOM_TYPES
    lx = extract_linguistic(instruction, nouns)
    lv = select_visual(trajectory, feats, beta, world=world, strategy=strategy)
    return LandmarkSet(linguistic=lx, visual=lv, full=full_set(lx, lv))
