"""``navspeak`` command line: data generation, training, generation, evaluation, pipeline.

Relative output paths resolve under ``$NAVSPEAK_OUTPUT_ROOT`` when it is set.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

from . import dataset, trainer
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, DataError, NavSpeakError, NumericError
from .landmarks import select_landmarks
from .world import STYLES

log = logging.getLogger("navspeak")

OUTPUT_ROOT_ENV = "NAVSPEAK_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"
EXIT_CODES = ((ConfigError, 2), (DataError, 3), (NumericError, 4))


class StageError(Exception):
    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {error}")
        self.stage = stage
        self.error = error


def out_path(path):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_jsonl(path, records):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
    return path


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig.toy()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


# ---------------------------------------------------------------- stages


def gen_data(cfg: RunConfig, out_dir):
    corpus = dataset.generate_corpus(cfg.world, cfg.seed)
    return dataset.save_corpus(corpus, out_dir)


def landmark_records(corpus, beta, strategy="full"):
    records = []
    for sample in corpus.instructions:
        traj = corpus.trajectories[sample.trajectory_id]
        lset = select_landmarks(traj, corpus.world_of(sample.trajectory_id), sample, beta, strategy)
        records.append({
            "trajectory_id": sample.trajectory_id,
            "style": sample.style,
            "lambda_x": list(lset.linguistic),
            "lambda_v": [v.to_record() for v in lset.visual],
            "beta": beta,
        })
    return records


def generate_split(ckpt, corpus, split, styles=STYLES, seed=0, temperature=None, greedy=False):
    """One prediction record per (trajectory, style) in ``split``; ``ckpt`` is a path or a model."""
    from .generator import GenerationRequest, Generator

    model = trainer.load_model(ckpt)[0] if isinstance(ckpt, (str, os.PathLike)) else ckpt
    gen = Generator(model)
    ids = sorted(corpus.split_ids(split))
    reqs, keys = [], []
    for i, tid in enumerate(ids):
        for style in styles:
            reqs.append(GenerationRequest(corpus.trajectories[tid], style, None, temperature,
                                          model.cfg.generate.max_tokens, seed + i))
            keys.append((tid, style))
    out = []
    for (tid, style), rec in zip(keys, gen.generate_many(reqs, greedy=greedy)):
        out.append(dict(rec.to_dict(), trajectory_id=tid, style=style))
    return out


def reference_table(records):
    """(trajectory id, style) -> every reference token list."""
    refs = {}
    for r in records:
        refs.setdefault((r["trajectory_id"], r["style"]), []).extend(
            [r["text"].split()] + [x.split() for x in r.get("references", [])]
        )
    return refs


def evaluate_predictions(preds, ref_records, metrics):
    from .evaluator import evaluate

    refs = reference_table(ref_records)
    missing = [(p["trajectory_id"], p["style"]) for p in preds if (p["trajectory_id"], p["style"]) not in refs]
    if missing:
        raise DataError(f"no references for {missing[0]} (and {len(missing) - 1} more)")
    cands = [p["instruction"].split() for p in preds]
    report = evaluate(cands, [refs[(p["trajectory_id"], p["style"])] for p in preds], metrics)
    return report


def follow_predictions(worlds_path, preds, vis_range=None):
    from .evaluator import follow

    data, worlds, trajectories, _ = dataset.load_worlds(worlds_path)
    vis_range = float(data["vis_range"]) if vis_range is None else vis_range
    rows = []
    for p in preds:
        traj = trajectories.get(p["trajectory_id"])
        if traj is None:
            raise DataError(f"unknown trajectory {p['trajectory_id']!r}")
        world = worlds[traj.world_seed]
        res = follow(world, p["instruction"].split(), traj.viewpoints[0], traj.viewpoints[-1], vis_range)
        rows.append({"trajectory_id": p["trajectory_id"], "style": p.get("style", ""),
                     "success": res.success, "spl": res.spl, "path_length": len(res.path) - 1})
    n = max(len(rows), 1)
    summary = {"n": len(rows), "sr": sum(r["success"] for r in rows) / n, "spl": sum(r["spl"] for r in rows) / n}
    return rows, summary


def write_report(prefix, report):
    """``prefix.json`` (full report) and ``prefix.csv`` (one row per sample)."""
    paths = [write_json(f"{prefix}.json", report.to_dict())]
    metrics = list(report.per_sample)
    with open(f"{prefix}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + metrics)
        n = len(next(iter(report.per_sample.values()), []))
        for i in range(n):
            w.writerow([i] + [f"{report.per_sample[m][i]:.6f}" for m in metrics])
        w.writerow(["corpus"] + [f"{report.corpus[m]:.6f}" for m in metrics])
    paths.append(f"{prefix}.csv")
    return paths


def write_follow(prefix, rows, summary):
    write_json(f"{prefix}.json", {"summary": summary, "samples": rows})
    with open(f"{prefix}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["trajectory_id", "style", "success", "spl", "path_length"])
        w.writeheader()
        w.writerows(rows)
    return [f"{prefix}.json", f"{prefix}.csv"]


def run_pipeline(cfg: RunConfig, out_dir, split="val"):
    """gen-data, train, generate, evaluate, follow; returns the manifest dict."""
    from .evaluator import METRICS

    os.makedirs(out_dir, exist_ok=True)
    produced = []

    def stage(name, fn):
        try:
            return fn()
        except NavSpeakError as exc:
            raise StageError(name, exc) from exc

    config_path = os.path.join(out_dir, "config.ini")
    with open(config_path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    produced.append(config_path)
    corpus_dir = os.path.join(out_dir, "corpus")
    produced += stage("gen-data", lambda: gen_data(cfg, corpus_dir))
    corpus = stage("gen-data", lambda: dataset.load_corpus(corpus_dir))
    lm_path = os.path.join(out_dir, "landmarks.jsonl")
    produced.append(stage("landmarks", lambda: write_jsonl(
        lm_path, landmark_records(corpus, cfg.landmarks.beta, cfg.landmarks.strategy))))
    run_dir = os.path.join(out_dir, "train")
    result = stage("train", lambda: trainer.train(cfg, corpus_dir, run_dir))
    produced += [result.checkpoint, os.path.join(run_dir, trainer.METRICS_NAME)]
    preds = stage("generate", lambda: generate_split(result.checkpoint, corpus, split, seed=cfg.seed))
    pred_path = write_jsonl(os.path.join(out_dir, "predictions.jsonl"), preds)
    produced.append(pred_path)
    ref_records = dataset.read_jsonl(os.path.join(corpus_dir, dataset.CORPUS_FILE))
    report = stage("evaluate", lambda: evaluate_predictions(preds, ref_records, METRICS))
    produced += write_report(os.path.join(out_dir, "metrics"), report)
    rows, summary = stage("follow", lambda: follow_predictions(
        os.path.join(corpus_dir, dataset.SIDECAR_FILE), preds))
    produced += write_follow(os.path.join(out_dir, "follow"), rows, summary)
    manifest = {
        "seed": cfg.seed,
        "schema": cfg.schema,
        "files": {os.path.relpath(p, out_dir): sha256_file(p) for p in produced},
        "metrics": report.corpus,
        "follow": summary,
    }
    write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)
    return manifest


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    cfg = _config(args)
    for attr, key in (("worlds", "n_worlds"), ("paths_per_world", "paths_per_world"), ("k", "k")):
        value = getattr(args, attr)
        if value is not None:
            setattr(cfg.world, key, value)
    cfg.validate()
    for p in gen_data(cfg, out_path(args.out)):
        print(p)


def cmd_landmarks(args):
    corpus = dataset.load_corpus(args.corpus)
    beta = args.beta if args.beta is not None else _config(args).landmarks.beta
    print(write_jsonl(out_path(args.out), landmark_records(corpus, beta, args.strategy)))


def cmd_train(args):
    cfg = _config(args)
    result = trainer.train(cfg, args.corpus, out_path(args.out), resume=args.resume, steps=args.steps)
    print(result.checkpoint)


def cmd_generate(args):
    from .generator import GenerationRequest, Generator

    corpus = dataset.load_corpus(args.corpus)
    model, _ = trainer.load_model(args.ckpt)
    if args.trajectory_id is None:
        if args.landmarks is not None:
            raise ConfigError("--landmarks needs --trajectory-id")
        recs = generate_split(model, corpus, args.split, (args.style,) if args.style else STYLES,
                              seed=args.seed or 0, temperature=args.temperature)
        print(write_jsonl(out_path(args.out), recs) if args.out else "\n".join(json.dumps(r) for r in recs))
        return
    if args.trajectory_id not in corpus.trajectories:
        raise DataError(f"unknown trajectory {args.trajectory_id!r}")
    override = None if args.landmarks is None else [w for w in args.landmarks.split(",") if w]
    req = GenerationRequest(corpus.trajectories[args.trajectory_id], args.style or STYLES[0], override,
                            args.temperature, model.cfg.generate.max_tokens, args.seed or 0)
    rec = Generator(model).generate(req).to_dict()
    rec.update(trajectory_id=args.trajectory_id, style=req.style)
    if args.out:
        write_jsonl(out_path(args.out), [rec])
    print(json.dumps(rec, sort_keys=True))


def cmd_evaluate(args):
    preds = dataset.read_jsonl(args.pred)
    report = evaluate_predictions(preds, dataset.read_jsonl(args.ref), args.metrics.split(","))
    for p in write_report(out_path(args.out), report):
        print(p)
    print(json.dumps(report.corpus, sort_keys=True))


def cmd_follow(args):
    rows, summary = follow_predictions(args.world, dataset.read_jsonl(args.pred))
    for p in write_follow(out_path(args.out), rows, summary):
        print(p)
    print(json.dumps(summary, sort_keys=True))


def cmd_pipeline(args):
    cfg = _config(args)
    out_dir = out_path(args.out or cfg.out_dir)
    manifest = run_pipeline(cfg, out_dir)
    print(os.path.join(out_dir, MANIFEST_NAME))
    print(json.dumps({"metrics": manifest["metrics"], "follow": manifest["follow"]}, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="navspeak", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate worlds, trajectories and instructions")
    sp.add_argument("--config")
    sp.add_argument("--worlds", type=int)
    sp.add_argument("--paths-per-world", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--out", required=True)

    sp = add("landmarks", cmd_landmarks, "score and select landmarks for a corpus")
    sp.add_argument("--config")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--strategy", default="full")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the speaker")
    sp.add_argument("--config")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--steps", type=int)

    sp = add("generate", cmd_generate, "two-stage generation from a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--trajectory-id")
    sp.add_argument("--split", default="val", help="used when no trajectory id is given")
    sp.add_argument("--style", choices=STYLES)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--landmarks", help="comma-separated override, e.g. sofa,lamp")
    sp.add_argument("--out")

    sp = add("evaluate", cmd_evaluate, "text metrics against the corpus references")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--metrics", default="bleu1,bleu4,rougeL,cider,meteorLite")
    sp.add_argument("--out", default="metrics")

    sp = add("follow", cmd_follow, "run the rule-based follower on predictions")
    sp.add_argument("--world", required=True, help="worlds.json sidecar")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out", default="follow")

    sp = add("pipeline", cmd_pipeline, "run every stage and write a manifest")
    sp.add_argument("--config")
    sp.add_argument("--out")
    return p


def exit_code(exc):
    for klass, code in EXIT_CODES:
        if isinstance(exc, klass):
            return code
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc.error)
    except (NavSpeakError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
