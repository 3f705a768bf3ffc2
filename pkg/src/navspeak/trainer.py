"""Training data construction, style/task mixing and the joint optimization loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt
from .adapter_lm import TokenSequence, per_position_loss
from .config import RunConfig
from .dataset import Corpus, load_corpus
from .errors import ConfigError, DataError, NumericError
from .landmarks import select_landmarks
from .model import SpeakerModel, raw_and_actions
from .prompts import PromptRegistry, Vocabulary, build_vocabulary, serialize_landmarks
from .stmt import build_stmt_input, make_stmt_samples

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"


@dataclass
class TrainingItem:
    task: str  # "instruction" | "landmark" | "stmt"
    style: str | None
    sequence: TokenSequence
    raw: np.ndarray  # T x K x D_raw
    actions: list
    target: int | None = None  # backtrack subview for stmt items
    trajectory_id: str = ""


# ---------------------------------------------------------------- sample builders


def build_landmark_sample(raw, actions, landmarks, style, vocab: Vocabulary, prompts: PromptRegistry,
                          trajectory_id=""):
    """``[BOS] prompt_lambda [SEP] landmarks [EOS]``; only landmarks and EOS are supervised.

    Returns ``None`` (with a warning) for an empty landmark set.
    """
    if not landmarks:
        log.warning("skipping landmark sample for %s: empty landmark set", trajectory_id or "<trajectory>")
        return None
    prompt = [vocab.bos] + vocab.encode(prompts.landmark_prompt(style)) + [vocab.sep]
    target = vocab.encode(serialize_landmarks(landmarks)) + [vocab.eos]
    seq = TokenSequence(prompt + target, [False] * len(prompt) + [True] * len(target))
    return TrainingItem("landmark", style, seq, raw, list(actions), trajectory_id=trajectory_id)


def build_instruction_sample(raw, actions, linguistic, text, style, vocab: Vocabulary,
                             prompts: PromptRegistry, trajectory_id=""):
    """``[BOS] prompt_w(landmarks) [SEP] X [EOS]``; only X and EOS are supervised."""
    if not text:
        raise DataError("instruction text is empty")
    prompt = [vocab.bos] + vocab.encode(prompts.instruction_prompt(style, linguistic)) + [vocab.sep]
    target = vocab.encode(text) + [vocab.eos]
    seq = TokenSequence(prompt + target, [False] * len(prompt) + [True] * len(target))
    return TrainingItem("instruction", style, seq, raw, list(actions), trajectory_id=trajectory_id)


def build_stmt_item(sample, vocab: Vocabulary, prompts: PromptRegistry):
    prompt_ids = vocab.encode(prompts.backtrack_prompt(sample.candidates))
    seq, _, actions = build_stmt_input(sample.steps, prompt_ids, vocab.act, bos_id=vocab.bos)
    raw, _ = raw_and_actions(sample.steps)
    return TrainingItem("stmt", None, seq, raw, actions, target=sample.target,
                        trajectory_id=sample.trajectory_id)


def build_streams(corpus: Corpus, cfg: RunConfig, vocab: Vocabulary, prompts: PromptRegistry, split):
    """Training items keyed by stream: (task, style) for LM tasks, ("stmt", None)."""
    streams = {}
    ids = set(corpus.split_ids(split))
    raws = {}
    for sample in corpus.instructions:
        if sample.trajectory_id not in ids or sample.style not in cfg.train.styles:
            continue
        traj = corpus.trajectories[sample.trajectory_id]
        if sample.trajectory_id not in raws:
            raws[sample.trajectory_id] = raw_and_actions(traj)
        raw, actions = raws[sample.trajectory_id]
        world = corpus.world_of(sample.trajectory_id)
        lset = select_landmarks(traj, world, sample, cfg.landmarks.beta, cfg.landmarks.strategy)
        item = build_instruction_sample(raw, actions, lset.linguistic, sample.text, sample.style, vocab,
                                        prompts, sample.trajectory_id)
        streams.setdefault(("instruction", sample.style), []).append(item)
        if cfg.train.full_landmark_copies and lset.full != lset.linguistic:
            item = build_instruction_sample(raw, actions, lset.full, sample.text, sample.style, vocab,
                                            prompts, sample.trajectory_id)
            streams[("instruction", sample.style)].append(item)
        item = build_landmark_sample(raw, actions, lset.full, sample.style, vocab, prompts,
                                     sample.trajectory_id)
        if item is not None:
            streams.setdefault(("landmark", sample.style), []).append(item)
    for tid in sorted(ids):
        traj = corpus.trajectories[tid]
        for s in make_stmt_samples(traj, corpus.world_of(tid)):
            streams.setdefault(("stmt", None), []).append(build_stmt_item(s, vocab, prompts))
    return streams


def stream_ratios(cfg: RunConfig):
    t = cfg.train
    styles = list(t.styles)
    ratios = {}
    for style in styles:
        ratios[("instruction", style)] = t.instruction_ratio / len(styles)
        ratios[("landmark", style)] = t.landmark_ratio / len(styles)
    ratios[("stmt", None)] = t.stmt_ratio
    return ratios


def mix_batches(streams, ratios, seed, batch_size=1, start=0, stop=None):
    """Yield batches of (stream key, item) drawn by ``ratios``.

    Batch ``i`` depends only on (seed, i), so a resumed run sees the same data.
    """
    keys = [k for k in ratios if ratios[k] > 0]
    probs = np.array([ratios[k] for k in keys], dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigError(f"mixing ratios sum to {probs.sum()}, expected 1")
    for k in keys:
        if not streams.get(k):
            raise ConfigError(f"stream {k} has ratio {ratios[k]} but no samples")
    i = start
    while stop is None or i < stop:
        rng = np.random.default_rng([int(seed), int(i), 2718])
        picks = rng.choice(len(keys), size=batch_size, p=probs)
        batch = []
        for p in picks:
            key = keys[int(p)]
            pool = streams[key]
            batch.append((key, pool[int(rng.integers(len(pool)))]))
        yield batch
        i += 1


# ---------------------------------------------------------------- losses


def batch_losses(model: SpeakerModel, items, stmt_weight=1.0):
    """Total loss plus per-task mean losses (floats) for one mixed batch.

    Each task's mean loss is weighted by its share of the batch items, so the
    mixing ratios set how much each task moves the shared weights.
    """
    lm_items = [it for it in items if it.task != "stmt"]
    st_items = [it for it in items if it.task == "stmt"]
    parts = {}
    total = None
    if lm_items:
        seqs = [it.sequence.token_ids for it in lm_items]
        logits = model.lm_logits(seqs, [it.raw for it in lm_items], [it.actions for it in lm_items])
        tokens = model.pad_tokens(seqs)
        mask = torch.zeros(tokens.shape, dtype=torch.bool)
        for i, it in enumerate(lm_items):
            mask[i, : len(it.sequence)] = torch.as_tensor(it.sequence.supervision_mask)
        losses, supervised = per_position_loss(logits, tokens, mask)
        total = losses[supervised].sum() / supervised.sum() * (len(lm_items) / len(items))
        for task in ("instruction", "landmark"):
            rows = torch.as_tensor([it.task == task for it in lm_items])
            sel = supervised & rows.unsqueeze(1)
            if sel.any():
                parts[task] = float(losses[sel].detach().sum() / sel.sum())
    if st_items and stmt_weight != 0:
        logits = model.stmt_logits([it.sequence.token_ids for it in st_items],
                                   [it.raw for it in st_items], [it.actions for it in st_items])
        target = torch.as_tensor([it.target for it in st_items])
        st_loss = torch.nn.functional.cross_entropy(logits, target)
        parts["stmt"] = float(st_loss.detach())
        st_loss = stmt_weight * st_loss * (len(st_items) / len(items))
        total = st_loss if total is None else total + st_loss
    return total, parts


@torch.no_grad()
def stmt_accuracy(model: SpeakerModel, items, batch_size=64):
    correct = 0
    for i in range(0, len(items), batch_size):
        chunk = items[i: i + batch_size]
        logits = model.stmt_logits([it.sequence.token_ids for it in chunk],
                                   [it.raw for it in chunk], [it.actions for it in chunk])
        correct += int((logits.argmax(-1) == torch.as_tensor([it.target for it in chunk])).sum())
    return correct / len(items)


@torch.no_grad()
def evaluate_streams(model: SpeakerModel, streams, max_items=None, batch_size=32):
    """Mean loss per task over the first ``max_items`` (default all) of each validation stream."""
    out = {}
    for key in sorted(streams, key=str):
        task = key[0]
        items = streams[key][:max_items]
        total, n = 0.0, 0
        for i in range(0, len(items), batch_size):
            chunk = items[i: i + batch_size]
            _, parts = batch_losses(model, chunk, stmt_weight=1.0)
            total += parts[task] * len(chunk)
            n += len(chunk)
        out.setdefault(task, []).append((total, n))
    return {task: sum(t for t, _ in v) / sum(n for _, n in v) for task, v in out.items()}


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: SpeakerModel
    history: list = field(default_factory=list)  # dicts: step, task, split, loss
    checkpoint: str | None = None
    step: int = 0

    def losses(self, task, split):
        return [(r["step"], r["loss"]) for r in self.history if r["task"] == task and r["split"] == split]


def _lr_at(step, cfg):
    t = cfg.train
    if step < t.warmup:
        return t.lr * (step + 1) / t.warmup
    progress = (step - t.warmup) / max(1, t.steps - t.warmup)
    return t.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0))))


def _grad_norms(model):
    norms = {}
    for name, p in model.named_parameters():
        if p.grad is not None:
            g = ckpt.group_of(name)
            norms[g] = norms.get(g, 0.0) + float(p.grad.double().pow(2).sum())
    return {g: math.sqrt(v) for g, v in norms.items()}


def clip_by_group(model, max_norm):
    """Clip each checkpoint group separately.

    The bilinear backtrack readout has gradients an order of magnitude above
    the LM's; a single global clip would shrink every LM step whenever a
    batch holds backtrack items.
    """
    groups = {}
    for name, p in model.named_parameters():
        if p.grad is not None:
            groups.setdefault(ckpt.group_of(name), []).append(p)
    for params in groups.values():
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def make_optimizer(model, cfg):
    """AdamW; gates get ``gate_lr_scale`` times the step, gates/biases/norms no decay."""
    gates, no_decay, decay = [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if name.endswith(".gate"):
            gates.append(p)
        elif p.dim() < 2:
            no_decay.append(p)
        else:
            decay.append(p)
    t = cfg.train
    groups = [
        {"params": decay, "weight_decay": t.weight_decay, "lr_scale": 1.0},
        {"params": no_decay, "weight_decay": 0.0, "lr_scale": 1.0},
        {"params": gates, "weight_decay": 0.0, "lr_scale": t.gate_lr_scale},
    ]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=t.lr)


def save_training_checkpoint(path, model, cfg, step, optimizer=None):
    return ckpt.save_checkpoint(
        path, config=cfg.to_dict(), vocab=model.vocab.to_list(), state_dict=model.state_dict(),
        step=step, optimizer=None if optimizer is None else optimizer.state_dict(),
    )


def load_model(path):
    """(model, payload) from a checkpoint file."""
    payload = ckpt.load_checkpoint(path)
    cfg = RunConfig.from_dict(payload["config"])
    model = SpeakerModel(cfg, Vocabulary.from_list(payload["vocab"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload


def fit(model: SpeakerModel, cfg: RunConfig, train_streams, val_streams=None, *, steps=None,
        start_step=0, optimizer=None, log_every=1, on_step=None):
    """Run optimizer steps ``start_step .. steps``; returns (optimizer, history)."""
    torch.set_num_threads(cfg.train.num_threads)
    steps = cfg.train.steps if steps is None else steps
    optimizer = optimizer or make_optimizer(model, cfg)
    ratios = stream_ratios(cfg)
    stmt_weight = cfg.stmt.loss_weight if cfg.stmt.enabled else 0.0
    history = []
    model.train()
    batches = mix_batches(train_streams, ratios, cfg.seed, cfg.train.batch_size, start=start_step, stop=steps)
    for step, batch in zip(range(start_step, steps), batches):
        items = [it for _, it in batch]
        for group in optimizer.param_groups:
            group["lr"] = _lr_at(step, cfg) * group.get("lr_scale", 1.0)
        optimizer.zero_grad(set_to_none=True)
        total, parts = batch_losses(model, items, stmt_weight)
        if total is None:
            continue
        total.backward()
        norms = _grad_norms(model)
        if not math.isfinite(float(total.detach())) or not all(math.isfinite(v) for v in norms.values()):
            bad = next((task for task, v in parts.items() if not math.isfinite(v)), "total")
            raise NumericError(
                f"non-finite loss at step {step} (task {bad}); grad norms {norms}",
                step=step, task=bad, grad_norms=norms,
            )
        if cfg.train.grad_clip:
            clip_by_group(model, cfg.train.grad_clip)
        optimizer.step()
        if step % log_every == 0 or step == steps - 1:
            history.append({"step": step, "task": "total", "split": "train", "loss": float(total.detach())})
            for task, v in parts.items():
                history.append({"step": step, "task": task, "split": "train", "loss": v})
        last = step == steps - 1
        if val_streams and (last or (cfg.train.eval_every and (step + 1) % cfg.train.eval_every == 0)):
            model.eval()
            for task, v in evaluate_streams(model, val_streams, cfg.train.val_items).items():
                history.append({"step": step, "task": task, "split": "val", "loss": v})
            model.train()
        if on_step is not None:
            on_step(step, float(total.detach()), parts)
    model.eval()
    return optimizer, history


def write_metrics(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "task", "split", "loss"])
        for r in history:
            writer.writerow([r["step"], r["task"], r["split"], f"{r['loss']:.6f}"])


def prepare(cfg: RunConfig, corpus: Corpus):
    """Vocabulary, prompt registry and train/val streams for a corpus."""
    prompts = PromptRegistry()
    vocab = build_vocabulary(corpus.texts(), prompts, k=cfg.world.k,
                             objects=next(iter(corpus.worlds.values())).vocab)
    train_streams = build_streams(corpus, cfg, vocab, prompts, "train")
    val_streams = build_streams(corpus, cfg, vocab, prompts, "val")
    return vocab, prompts, train_streams, val_streams


def train(cfg: RunConfig, corpus_dir, out_dir, *, resume=None, steps=None) -> TrainResult:
    """Train on ``corpus_dir``; writes ``model.ckpt`` and ``metrics.csv`` into ``out_dir``."""
    cfg.validate()
    corpus = load_corpus(corpus_dir)
    if corpus.k != cfg.world.k or corpus.d_raw != cfg.world.d_raw:
        raise ConfigError(
            f"corpus was generated with k={corpus.k}, d_raw={corpus.d_raw}; "
            f"config has k={cfg.world.k}, d_raw={cfg.world.d_raw}"
        )
    vocab, _, train_streams, val_streams = prepare(cfg, corpus)
    os.makedirs(out_dir, exist_ok=True)
    start, optimizer, history = 0, None, []
    if resume is not None:
        model, payload = load_model(resume)
        if model.vocab != vocab:
            raise DataError("checkpoint vocabulary does not match the corpus")
        optimizer = make_optimizer(model, cfg)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start = payload["step"]
    else:
        model = SpeakerModel(cfg, vocab)
    optimizer, new_history = fit(model, cfg, train_streams, val_streams, steps=steps, start_step=start,
                                 optimizer=optimizer)
    history.extend(new_history)
    end = steps if steps is not None else cfg.train.steps
    path = save_training_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), model, cfg, end, optimizer)
    write_metrics(os.path.join(out_dir, METRICS_NAME), history)
    return TrainResult(model, history, path, end)
