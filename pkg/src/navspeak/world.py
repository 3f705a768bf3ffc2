"""Procedural gridworld: rooms, objects, panoramas and ground-truth instructions.

Cells are addressed by integer viewpoint ids ``row * width + col``. Row 0 is
the northern edge. Subview ``k`` of a panorama looks along heading
``2*pi*k/K`` measured clockwise from north, so for ``K`` divisible by four the
cardinal moves land on subviews ``0, K/4, K/2, 3K/4``.
"""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import grammar
from .errors import (
    DataError,
    SizingError,
    UnreachableLengthError,
    ViewpointLookupError,
)

SCHEMA_VERSION = 1

OBJECT_VOCAB = (
    "sofa", "lamp", "table", "chair", "bed", "plant",
    "sink", "fridge", "piano", "mirror", "shelf", "stove",
)
ROOM_TYPES = ("kitchen", "bedroom", "bathroom", "hallway", "office", "lounge")
STYLES = ("fine_grained", "high_level")

DEFAULT_K = 36
DEFAULT_D_RAW = 64
DEFAULT_VIS_RANGE = 3.0

# neighbour order doubles as the deterministic tie-break everywhere
_OFFSETS = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class Room:
    top: int
    left: int
    bottom: int  # exclusive
    right: int  # exclusive
    kind: str

    def contains(self, row, col):
        return self.top <= row < self.bottom and self.left <= col < self.right


@dataclass
class WorldGrid:
    width: int
    height: int
    rooms: tuple
    objects: dict  # viewpoint id -> object name
    blocked: frozenset
    nav_graph: dict  # viewpoint id -> tuple of neighbour ids
    seed: int
    vocab: tuple
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def cell(self, vid):
        if vid not in self.nav_graph:
            raise ViewpointLookupError(f"viewpoint {vid!r} is not a walkable cell")
        return divmod(vid, self.width)

    def vid(self, row, col):
        return row * self.width + col

    def in_bounds(self, row, col):
        return 0 <= row < self.height and 0 <= col < self.width

    def walkable(self, vid):
        return vid in self.nav_graph

    def room_of(self, vid) -> Room:
        row, col = divmod(vid, self.width)
        for room in self.rooms:
            if room.contains(row, col):
                return room
        raise ViewpointLookupError(f"viewpoint {vid!r} lies outside every room")

    def distances_from(self, src):
        """BFS hop counts from ``src`` to every walkable cell (cached)."""
        key = ("bfs", src)
        if key not in self._cache:
            dist = {src: 0}
            queue = deque([src])
            while queue:
                cur = queue.popleft()
                for nb in self.nav_graph[cur]:
                    if nb not in dist:
                        dist[nb] = dist[cur] + 1
                        queue.append(nb)
            self._cache[key] = dist
        return self._cache[key]

    def shortest_path(self, src, dst):
        """Deterministic shortest path; ties resolved by N, E, S, W order."""
        dist_to_dst = self.distances_from(dst)
        if src not in dist_to_dst:
            raise DataError(f"no path from {src} to {dst}")
        path = [src]
        cur = src
        while cur != dst:
            cur = min(self.nav_graph[cur], key=lambda nb: dist_to_dst.get(nb, math.inf))
            path.append(cur)
        return path

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "vocab": list(self.vocab),
            "rooms": [[r.top, r.left, r.bottom, r.right, r.kind] for r in self.rooms],
            "objects": {str(k): v for k, v in sorted(self.objects.items())},
            "blocked": sorted(self.blocked),
        }

    @classmethod
    def from_dict(cls, data):
        width, height = int(data["width"]), int(data["height"])
        blocked = frozenset(int(b) for b in data["blocked"])
        return cls(
            width=width,
            height=height,
            rooms=tuple(Room(*r) for r in data["rooms"]),
            objects={int(k): v for k, v in data["objects"].items()},
            blocked=blocked,
            nav_graph=_build_nav_graph(width, height, blocked),
            seed=int(data["seed"]),
            vocab=tuple(data["vocab"]),
        )


@dataclass(frozen=True)
class PanoramaObservation:
    subviews: np.ndarray  # K x D_raw, unit rows
    subview_headings: np.ndarray  # K radians
    visible_objects: tuple  # K tuples of object names
    room: str = ""

    @property
    def K(self):
        return len(self.visible_objects)

    def __eq__(self, other):
        if not isinstance(other, PanoramaObservation):
            return NotImplemented
        return (
            self.visible_objects == other.visible_objects
            and self.room == other.room
            and np.array_equal(self.subviews, other.subviews)
            and np.array_equal(self.subview_headings, other.subview_headings)
        )

    __hash__ = None


@dataclass(frozen=True)
class Step:
    viewpoint: int
    observation: PanoramaObservation
    action: int


@dataclass(frozen=True)
class Trajectory:
    steps: tuple
    trajectory_id: str = ""
    world_seed: int | None = None

    def __post_init__(self):
        if len(self.steps) < 2:
            raise DataError("a trajectory needs at least two steps")

    @property
    def T(self):
        return len(self.steps)

    @property
    def K(self):
        return self.steps[0].observation.K

    @property
    def stop_index(self):
        return self.K

    @property
    def viewpoints(self):
        return [s.viewpoint for s in self.steps]

    @property
    def actions(self):
        return [s.action for s in self.steps]

    def raw_features(self):
        """T x K x D_raw array of subview features."""
        return np.stack([s.observation.subviews for s in self.steps])

    def prefix(self, t):
        """First ``t`` steps as a trajectory-like tuple (keeps original actions)."""
        return self.steps[:t]


@dataclass
class InstructionSample:
    trajectory_id: str
    style: str
    text: list
    linguistic_landmarks: list
    reference_texts: list

    def to_record(self):
        return {
            "trajectory_id": self.trajectory_id,
            "style": self.style,
            "text": " ".join(self.text),
            "landmarks": list(self.linguistic_landmarks),
            "references": [" ".join(r) for r in self.reference_texts],
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            trajectory_id=rec["trajectory_id"],
            style=rec["style"],
            text=rec["text"].split(),
            linguistic_landmarks=list(rec["landmarks"]),
            reference_texts=[r.split() for r in rec["references"]],
        )


# ---------------------------------------------------------------- geometry


def heading_bucket(drow, dcol, k):
    """Index of the subview whose cone contains the offset (drow, dcol)."""
    theta = math.atan2(dcol, -drow) % (2 * math.pi)
    return int(math.floor(theta * k / (2 * math.pi) + 0.5)) % k


def _build_nav_graph(width, height, blocked):
    graph = {}
    for row in range(height):
        for col in range(width):
            vid = row * width + col
            if vid in blocked:
                continue
            nbs = []
            for dr, dc in _OFFSETS:
                r2, c2 = row + dr, col + dc
                if 0 <= r2 < height and 0 <= c2 < width and r2 * width + c2 not in blocked:
                    nbs.append(r2 * width + c2)
            graph[vid] = tuple(nbs)
    return graph


def _connected(graph):
    if not graph:
        return False
    start = next(iter(graph))
    seen = {start}
    queue = [start]
    while queue:
        cur = queue.pop()
        for nb in graph[cur]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == len(graph)


def _line_of_sight(world, src, dst):
    r0, c0 = divmod(src, world.width)
    r1, c1 = divmod(dst, world.width)
    n = int(math.ceil(4 * max(abs(r1 - r0), abs(c1 - c0))))
    for i in range(1, n):
        f = i / n
        r = int(math.floor(r0 + f * (r1 - r0) + 0.5))
        c = int(math.floor(c0 + f * (c1 - c0) + 0.5))
        vid = r * world.width + c
        if vid in (src, dst):
            continue
        if vid in world.blocked:
            return False
    return True


def visible_objects_from(world, vid, vis_range=DEFAULT_VIS_RANGE):
    """All (object cell, name) pairs in range and line of sight of ``vid``.

    The viewer's own cell is excluded: an object underfoot has no heading.
    """
    key = ("vis", vid, float(vis_range))
    if key in world._cache:
        return world._cache[key]
    row, col = world.cell(vid)
    out = []
    for ovid, name in sorted(world.objects.items()):
        if ovid == vid:
            continue
        orow, ocol = divmod(ovid, world.width)
        if math.hypot(orow - row, ocol - col) > vis_range + 1e-9:
            continue
        if _line_of_sight(world, vid, ovid):
            out.append((ovid, name))
    world._cache[key] = out
    return out


# ---------------------------------------------------------------- features


@lru_cache(maxsize=None)
def _hash_vector(tag, dim):
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def subview_feature(objects, bucket, k, room, dim):
    """Bag-of-objects embedding plus heading and room components, unit norm."""
    v = 0.5 * _hash_vector(f"heading:{k}:{bucket}", dim) + 0.5 * _hash_vector(f"room:{room}", dim)
    for name in objects:
        v = v + _hash_vector(f"object:{name}", dim)
    return v / np.linalg.norm(v)


def render_panorama(world, viewpoint_id, k=DEFAULT_K, d_raw=DEFAULT_D_RAW,
                    vis_range=DEFAULT_VIS_RANGE) -> PanoramaObservation:
    key = ("pano", viewpoint_id, k, d_raw, float(vis_range))
    if key in world._cache:
        return world._cache[key]
    row, col = world.cell(viewpoint_id)
    buckets = [[] for _ in range(k)]
    for ovid, name in visible_objects_from(world, viewpoint_id, vis_range):
        orow, ocol = divmod(ovid, world.width)
        buckets[heading_bucket(orow - row, ocol - col, k)].append(name)
    room = world.room_of(viewpoint_id).kind
    feats = np.stack([subview_feature(b, i, k, room, d_raw) for i, b in enumerate(buckets)])
    feats.setflags(write=False)
    headings = 2 * np.pi * np.arange(k) / k
    obs = PanoramaObservation(
        subviews=feats,
        subview_headings=headings,
        visible_objects=tuple(tuple(b) for b in buckets),
        room=room,
    )
    world._cache[key] = obs
    return obs


def navigable_views(world, viewpoint_id, k):
    """Subview indices pointing at nav-graph neighbours of ``viewpoint_id``."""
    row, col = world.cell(viewpoint_id)
    views = []
    for nb in world.nav_graph[viewpoint_id]:
        nrow, ncol = divmod(nb, world.width)
        views.append(heading_bucket(nrow - row, ncol - col, k))
    return views


# ---------------------------------------------------------------- generation


def _split_rooms(rng, top, left, bottom, right, max_area):
    h, w = bottom - top, right - left
    can_rows = h >= 4
    can_cols = w >= 4
    if h * w <= max_area or not (can_rows or can_cols):
        return [(top, left, bottom, right)]
    if can_rows and (h >= w or not can_cols):
        cut = int(rng.integers(top + 2, bottom - 1))
        return (_split_rooms(rng, top, left, cut, right, max_area)
                + _split_rooms(rng, cut, left, bottom, right, max_area))
    cut = int(rng.integers(left + 2, right - 1))
    return (_split_rooms(rng, top, left, bottom, cut, max_area)
            + _split_rooms(rng, top, cut, bottom, right, max_area))


def generate_world(seed, width, height, vocab=OBJECT_VOCAB, *, object_density=0.3,
                   obstacle_fraction=0.08) -> WorldGrid:
    if width < 4 or height < 4:
        raise SizingError(f"world must be at least 4x4 cells, got {width}x{height}")
    vocab = tuple(vocab)
    if not vocab:
        raise SizingError("object vocabulary is empty")
    rng = np.random.default_rng([int(seed), width, height])

    rects = _split_rooms(rng, 0, 0, height, width, max_area=max(16, width * height // 4))
    kinds = list(rng.permutation(len(ROOM_TYPES)))
    rooms = tuple(
        Room(*rect, ROOM_TYPES[kinds[i % len(kinds)]]) for i, rect in enumerate(rects)
    )

    blocked = set()
    order = rng.permutation(width * height)
    n_obstacles = int(round(obstacle_fraction * width * height))
    for vid in order:
        if len(blocked) >= n_obstacles:
            break
        trial = blocked | {int(vid)}
        if _connected(_build_nav_graph(width, height, trial)):
            blocked = trial
    blocked = frozenset(blocked)
    graph = _build_nav_graph(width, height, blocked)

    objects = {}
    for vid in sorted(graph):
        if rng.random() < object_density:
            objects[vid] = vocab[int(rng.integers(len(vocab)))]

    return WorldGrid(
        width=width, height=height, rooms=rooms, objects=objects, blocked=blocked,
        nav_graph=graph, seed=int(seed), vocab=vocab,
    )


def trajectory_from_viewpoints(world, viewpoints, k=DEFAULT_K, d_raw=DEFAULT_D_RAW,
                               vis_range=DEFAULT_VIS_RANGE, trajectory_id=""):
    """Build a Trajectory along an explicit viewpoint sequence."""
    viewpoints = [int(v) for v in viewpoints]
    steps = []
    for i, vp in enumerate(viewpoints):
        obs = render_panorama(world, vp, k, d_raw, vis_range)
        if i + 1 < len(viewpoints):
            nxt = viewpoints[i + 1]
            if nxt not in world.nav_graph[vp]:
                raise DataError(f"viewpoints {vp} and {nxt} are not nav-graph neighbours")
            r0, c0 = divmod(vp, world.width)
            r1, c1 = divmod(nxt, world.width)
            action = heading_bucket(r1 - r0, c1 - c0, k)
        else:
            action = k
        steps.append(Step(vp, obs, action))
    return Trajectory(tuple(steps), trajectory_id=trajectory_id, world_seed=world.seed)


def sample_trajectory(world, seed, len_range=(4, 7), *, k=DEFAULT_K, d_raw=DEFAULT_D_RAW,
                      vis_range=DEFAULT_VIS_RANGE, trajectory_id="", object_goal_bias=0.8,
                      max_tries=64) -> Trajectory:
    """Shortest path between a random start and a goal at the requested length.

    ``len_range`` bounds T, the number of viewpoints (moves + 1), inclusive.
    """
    lo, hi = len_range
    if lo < 2 or hi < lo:
        raise DataError(f"invalid length range {len_range}")
    rng = np.random.default_rng([int(seed), world.seed, 7919])
    cells = sorted(world.nav_graph)
    for _ in range(max_tries):
        start = cells[int(rng.integers(len(cells)))]
        dist = world.distances_from(start)
        goals = [v for v, d in dist.items() if lo - 1 <= d <= hi - 1]
        if not goals:
            continue
        with_obj = [g for g in goals if g in world.objects]
        pool = with_obj if with_obj and rng.random() < object_goal_bias else goals
        goal = pool[int(rng.integers(len(pool)))]
        path = world.shortest_path(start, goal)
        return trajectory_from_viewpoints(world, path, k, d_raw, vis_range, trajectory_id)
    raise UnreachableLengthError(
        f"no path with {lo}..{hi} viewpoints found in world seed {world.seed}"
    )


def synthesize_instruction(trajectory, world, style, seed, *, landmark_prob=0.5,
                           vis_range=DEFAULT_VIS_RANGE) -> InstructionSample:
    if style not in STYLES:
        raise DataError(f"unknown style {style!r}")
    rng = np.random.default_rng([int(seed), 104729])
    if style == "fine_grained":
        clauses = _fine_grained_clauses(trajectory, world, rng, landmark_prob, vis_range)
    else:
        clauses = _high_level_clauses(trajectory, world)
    choice = [int(rng.integers(len(grammar.PHRASES[c.kind]))) for c in clauses]
    text = grammar.render(clauses, style, choice)
    refs = [text]
    for shift in (1, 2):
        alt = grammar.render(clauses, style, [i + shift for i in choice])
        if alt not in refs:
            refs.append(alt)
    landmarks = [c.arg for c in clauses if c.kind in grammar.LANDMARK_KINDS]
    return InstructionSample(
        trajectory_id=trajectory.trajectory_id,
        style=style,
        text=text,
        linguistic_landmarks=list(dict.fromkeys(landmarks)),
        reference_texts=refs,
    )


def _fine_grained_clauses(trajectory, world, rng, landmark_prob, vis_range):
    vps = trajectory.viewpoints
    clauses = []
    for i in range(len(vps) - 1):
        cur, nxt = vps[i], vps[i + 1]
        if i == len(vps) - 2 and nxt in world.objects:
            stop = grammar.Clause("stop_at", world.objects[nxt])
            if grammar.execute_clause(world, cur, stop, vis_range)[0] == [nxt]:
                clauses.append(stop)
                return clauses
        action_view = trajectory.steps[i].observation.visible_objects[trajectory.steps[i].action]
        options = []
        for name in dict.fromkeys(action_view):
            cl = grammar.Clause("pass", name)
            if grammar.execute_clause(world, cur, cl, vis_range)[0] == [nxt]:
                options.append(cl)
        if options and rng.random() < landmark_prob:
            clauses.append(options[int(rng.integers(len(options)))])
        else:
            clauses.append(grammar.Clause("move", grammar.direction_between(world, cur, nxt)))
    clauses.append(grammar.Clause("stop"))
    return clauses


def _high_level_clauses(trajectory, world):
    vps = trajectory.viewpoints
    start_room = world.room_of(vps[0]).kind
    end_room = world.room_of(vps[-1]).kind
    target = world.objects.get(vps[-1])
    if target is not None and start_room == end_room:
        return [grammar.Clause("find", target)]
    if target is not None:
        return [grammar.Clause("goto", end_room), grammar.Clause("find", target)]
    return [grammar.Clause("goto", end_room)]


# ---------------------------------------------------------------- serialization


def trajectory_to_dict(trajectory, k, d_raw, vis_range):
    return {
        "trajectory_id": trajectory.trajectory_id,
        "world_seed": trajectory.world_seed,
        "viewpoints": trajectory.viewpoints,
        "actions": trajectory.actions,
        "k": k,
        "d_raw": d_raw,
        "vis_range": vis_range,
    }


def trajectory_from_dict(data, world):
    traj = trajectory_from_viewpoints(
        world, data["viewpoints"], int(data["k"]), int(data["d_raw"]),
        float(data["vis_range"]), data["trajectory_id"],
    )
    if traj.actions != list(data["actions"]):
        raise DataError(f"stored actions disagree with world for {data['trajectory_id']}")
    return traj
