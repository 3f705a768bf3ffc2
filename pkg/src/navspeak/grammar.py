"""Clause grammar shared by the instruction templates and the rule-based follower.

The synthesizer only emits a clause after checking that :func:`execute_clause`
reproduces the intended move, so ground-truth fine-grained instructions are
always followable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

DIRECTIONS = {"north": (-1, 0), "east": (0, 1), "south": (1, 0), "west": (0, -1)}

# "{}" marks the argument slot
PHRASES = {
    "move": ("go {}", "walk {}", "head {}"),
    "pass": ("pass the {}", "walk past the {}", "go past the {}"),
    "stop_at": ("stop at the {}", "wait at the {}"),
    "stop": ("stop", "stop there"),
    "goto": ("go to the {}", "walk to the {}", "head to the {}"),
    "find": ("find the {}", "look for the {}"),
}
LANDMARK_KINDS = ("pass", "stop_at", "goto", "find")
SEPARATORS = {"fine_grained": ",", "high_level": "and"}
_ALL_SEPARATORS = (",", "and", "then", ".")
_FINE_KINDS = ("move", "pass", "stop_at", "stop")
_HIGH_SEQUENCES = (("find",), ("goto",), ("goto", "find"))


@dataclass(frozen=True)
class Clause:
    kind: str
    arg: str | None = None


def render(clauses, style, choice=None):
    """Token list for ``clauses``; ``choice[i]`` picks the phrasing (mod count)."""
    sep = SEPARATORS[style]
    tokens = []
    for i, clause in enumerate(clauses):
        phrases = PHRASES[clause.kind]
        idx = 0 if choice is None else choice[i] % len(phrases)
        if i:
            tokens.append(sep)
        tokens.extend(phrases[idx].format(clause.arg or "").split())
    return tokens


def _slot_ok(kind, word, objects, rooms):
    if kind == "move":
        return word in DIRECTIONS
    if kind in ("pass", "stop_at", "find"):
        return word in objects
    if kind == "goto":
        return word in rooms
    return False


def _parse_segment(segment, objects, rooms):
    for kind, phrases in PHRASES.items():
        for phrase in phrases:
            pattern = phrase.split()
            if len(pattern) != len(segment):
                continue
            arg = None
            for p, w in zip(pattern, segment):
                if p == "{}":
                    if not _slot_ok(kind, w, objects, rooms):
                        break
                    arg = w
                elif p != w:
                    break
            else:
                return Clause(kind, arg)
    return None


def split_segments(tokens):
    """Split on clause separators, returning (segments, separators used)."""
    segments, seps, cur = [], [], []
    for tok in tokens:
        if tok in _ALL_SEPARATORS:
            segments.append(cur)
            seps.append(tok)
            cur = []
        else:
            cur.append(tok)
    segments.append(cur)
    # a single trailing full stop is tolerated
    if seps and seps[-1] == "." and not segments[-1]:
        segments.pop()
        seps.pop()
    return segments, seps


def parse(tokens, objects, rooms):
    """Clauses for ``tokens`` or ``None`` when any segment is unparseable."""
    tokens = [t for t in tokens if t]
    if not tokens:
        return []
    segments, _ = split_segments(tokens)
    clauses = []
    for seg in segments:
        clause = _parse_segment(seg, objects, rooms)
        if clause is None:
            return None
        clauses.append(clause)
    return clauses


def validate(tokens, style, objects, rooms):
    """True when ``tokens`` is a well-formed instruction of ``style``."""
    tokens = list(tokens)
    if not tokens:
        return False
    segments, seps = split_segments(tokens)
    if any(s != SEPARATORS[style] for s in seps):
        return False
    clauses = parse(tokens, objects, rooms)
    if not clauses:
        return False
    kinds = tuple(c.kind for c in clauses)
    if style == "fine_grained":
        if any(k not in _FINE_KINDS for k in kinds):
            return False
        if kinds[-1] not in ("stop", "stop_at"):
            return False
        return all(k not in ("stop", "stop_at") for k in kinds[:-1])
    return kinds in _HIGH_SEQUENCES


def direction_between(world, src, dst):
    r0, c0 = divmod(src, world.width)
    r1, c1 = divmod(dst, world.width)
    for name, off in DIRECTIONS.items():
        if off == (r1 - r0, c1 - c0):
            return name
    raise ValueError(f"{src} and {dst} are not grid neighbours")


def _nearest_visible(world, pos, name, vis_range):
    from .world import visible_objects_from

    row, col = divmod(pos, world.width)
    cells = [v for v, n in visible_objects_from(world, pos, vis_range) if n == name]
    if not cells:
        return None

    def key(v):
        r, c = divmod(v, world.width)
        return (math.hypot(r - row, c - col), v)

    return min(cells, key=key)


def _nearest_by_bfs(world, pos, predicate):
    dist = world.distances_from(pos)
    best = [v for v in dist if predicate(v)]
    if not best:
        return None
    return min(best, key=lambda v: (dist[v], v))


def execute_clause(world, pos, clause, vis_range):
    """Run one clause from ``pos``.

    Returns (cells moved through, stopped). A clause that cannot be grounded
    (no such object in sight, wall ahead) is a no-op.
    """
    kind = clause.kind
    if kind == "stop":
        return [], True
    if kind == "move":
        dr, dc = DIRECTIONS[clause.arg]
        row, col = divmod(pos, world.width)
        if world.in_bounds(row + dr, col + dc):
            nb = world.vid(row + dr, col + dc)
            if nb in world.nav_graph[pos]:
                return [nb], False
        return [], False
    if kind in ("pass", "stop_at"):
        target = _nearest_visible(world, pos, clause.arg, vis_range)
        if target is None:
            return [], kind == "stop_at"
        path = world.shortest_path(pos, target)[1:]
        if kind == "pass":
            return path[:1], False
        return path, True
    if kind == "goto":
        if world.room_of(pos).kind == clause.arg:
            return [], False
        target = _nearest_by_bfs(world, pos, lambda v: world.room_of(v).kind == clause.arg)
    elif kind == "find":
        target = _nearest_by_bfs(world, pos, lambda v: world.objects.get(v) == clause.arg)
    else:
        raise ValueError(f"unknown clause kind {kind!r}")
    if target is None:
        return [], False
    return world.shortest_path(pos, target)[1:], False


def execute(world, start, clauses, budget, vis_range):
    """Follow ``clauses`` from ``start``; at most ``budget`` moves."""
    path = [start]
    for clause in clauses:
        moved, stopped = execute_clause(world, path[-1], clause, vis_range)
        room = budget - (len(path) - 1)
        path.extend(moved[:max(room, 0)])
        if stopped or len(path) - 1 >= budget:
            break
    return path
