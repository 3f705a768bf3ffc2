"""Synthetic corpus: worlds, trajectories, two-style instructions, and their files.

On disk a corpus directory holds ``corpus.jsonl`` (one instruction per line)
and ``worlds.json`` (versioned sidecar with worlds, trajectories and splits).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import WorldConfig
from .errors import DataError
from .world import (
    OBJECT_VOCAB,
    SCHEMA_VERSION,
    STYLES,
    InstructionSample,
    WorldGrid,
    generate_world,
    sample_trajectory,
    synthesize_instruction,
    trajectory_from_dict,
    trajectory_to_dict,
)

CORPUS_FILE = "corpus.jsonl"
SIDECAR_FILE = "worlds.json"


@dataclass
class Corpus:
    worlds: dict  # world seed -> WorldGrid
    trajectories: dict  # trajectory id -> Trajectory
    instructions: list  # InstructionSample
    splits: dict  # trajectory id -> "train" | "val"
    k: int
    d_raw: int
    vis_range: float
    meta: dict = field(default_factory=dict)

    def world_of(self, trajectory_id) -> WorldGrid:
        return self.worlds[self.trajectories[trajectory_id].world_seed]

    def split_ids(self, split):
        return [tid for tid in self.trajectories if self.splits[tid] == split]

    def instructions_for(self, trajectory_id, style=None):
        return [s for s in self.instructions
                if s.trajectory_id == trajectory_id and (style is None or s.style == style)]

    def texts(self):
        return [s.text for s in self.instructions] + [r for s in self.instructions for r in s.reference_texts]


def world_seed(run_seed, index):
    return int(run_seed) * 100_003 + int(index)


def generate_corpus(cfg: WorldConfig, seed, styles=STYLES, vocab=OBJECT_VOCAB) -> Corpus:
    worlds, trajectories, instructions, splits = {}, {}, [], {}
    n_val = max(1, int(round(cfg.heldout_fraction * cfg.n_worlds))) if cfg.n_worlds > 1 else 0
    rng = np.random.default_rng([int(seed), 31337])
    val_worlds = set(int(i) for i in rng.permutation(cfg.n_worlds)[:n_val])
    for wi in range(cfg.n_worlds):
        wseed = world_seed(seed, wi)
        world = generate_world(wseed, cfg.width, cfg.height, vocab, object_density=cfg.object_density)
        worlds[wseed] = world
        for pi in range(cfg.paths_per_world):
            tid = f"w{wi:03d}_p{pi:03d}"
            traj = sample_trajectory(
                world, pi, (cfg.len_min, cfg.len_max), k=cfg.k, d_raw=cfg.d_raw,
                vis_range=cfg.vis_range, trajectory_id=tid,
            )
            trajectories[tid] = traj
            splits[tid] = "val" if wi in val_worlds else "train"
            for si, style in enumerate(styles):
                instructions.append(synthesize_instruction(
                    traj, world, style, seed=wseed * 1000 + pi * 10 + si,
                    landmark_prob=cfg.landmark_prob, vis_range=cfg.vis_range,
                ))
    return Corpus(worlds, trajectories, instructions, splits, cfg.k, cfg.d_raw, cfg.vis_range,
                  meta={"seed": int(seed)})


def save_corpus(corpus: Corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CORPUS_FILE), "w", encoding="utf-8") as fh:
        for sample in corpus.instructions:
            fh.write(json.dumps(sample.to_record(), sort_keys=True) + "\n")
    sidecar = {
        "version": SCHEMA_VERSION,
        "k": corpus.k,
        "d_raw": corpus.d_raw,
        "vis_range": corpus.vis_range,
        "meta": corpus.meta,
        "worlds": [w.to_dict() for _, w in sorted(corpus.worlds.items())],
        "trajectories": [
            dict(trajectory_to_dict(t, corpus.k, corpus.d_raw, corpus.vis_range), split=corpus.splits[tid])
            for tid, t in corpus.trajectories.items()
        ],
    }
    with open(os.path.join(out_dir, SIDECAR_FILE), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    return [os.path.join(out_dir, CORPUS_FILE), os.path.join(out_dir, SIDECAR_FILE)]


def load_worlds(path):
    """Worlds, trajectories and splits from a sidecar file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("version") != SCHEMA_VERSION:
        raise DataError(f"sidecar version {data.get('version')!r}, expected {SCHEMA_VERSION}")
    worlds = {}
    for wd in data["worlds"]:
        w = WorldGrid.from_dict(wd)
        worlds[w.seed] = w
    trajectories, splits = {}, {}
    for td in data["trajectories"]:
        traj = trajectory_from_dict(td, worlds[td["world_seed"]])
        trajectories[traj.trajectory_id] = traj
        splits[traj.trajectory_id] = td.get("split", "train")
    return data, worlds, trajectories, splits


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_corpus(corpus_dir) -> Corpus:
    sidecar = os.path.join(corpus_dir, SIDECAR_FILE)
    corpus_path = os.path.join(corpus_dir, CORPUS_FILE)
    if not os.path.exists(sidecar) or not os.path.exists(corpus_path):
        raise DataError(f"{corpus_dir} does not contain {CORPUS_FILE} and {SIDECAR_FILE}")
    data, worlds, trajectories, splits = load_worlds(sidecar)
    instructions = [InstructionSample.from_record(r) for r in read_jsonl(corpus_path)]
    for s in instructions:
        if s.trajectory_id not in trajectories:
            raise DataError(f"instruction references unknown trajectory {s.trajectory_id!r}")
    return Corpus(worlds, trajectories, instructions, splits, int(data["k"]), int(data["d_raw"]),
                  float(data["vis_range"]), meta=data.get("meta", {}))
