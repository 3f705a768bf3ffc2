"""Rule-based follower: executes instructions in the clause grammar, scores SR and SPL."""
from __future__ import annotations

from dataclasses import dataclass

from .. import grammar
from ..world import DEFAULT_VIS_RANGE, ROOM_TYPES
from .metrics import clean

SUCCESS_RADIUS = 1  # nav-graph hops


@dataclass
class FollowResult:
    path: list
    success: bool
    spl: float
    parsed: bool = True


def follow(world, tokens, start, goal, vis_range=DEFAULT_VIS_RANGE, budget=None):
    """Execute ``tokens`` from ``start``; success means ending within one hop of ``goal``.

    Unparseable text stops immediately and counts as a failure. The move
    budget defaults to three times the shortest start-goal distance.
    """
    dist_to_goal = world.distances_from(goal)
    shortest = dist_to_goal.get(start)
    if shortest is None:
        return FollowResult([start], False, 0.0, True)
    clauses = grammar.parse(clean(tokens), set(world.vocab), set(ROOM_TYPES))
    if clauses is None:
        return FollowResult([start], False, 0.0, False)
    budget = 3 * shortest if budget is None else budget
    path = grammar.execute(world, start, clauses, budget, vis_range)
    end = dist_to_goal.get(path[-1])
    success = end is not None and end <= SUCCESS_RADIUS
    length = len(path) - 1
    denom = max(length, shortest)
    spl = float(success) if denom == 0 else float(success) * shortest / denom
    return FollowResult(path, success, spl)


def follow_corpus(items, vis_range=DEFAULT_VIS_RANGE):
    """``items``: (world, tokens, start, goal) tuples -> (results, SR, SPL)."""
    results = [follow(w, t, s, g, vis_range) for w, t, s, g in items]
    n = max(len(results), 1)
    return results, sum(r.success for r in results) / n, sum(r.spl for r in results) / n
