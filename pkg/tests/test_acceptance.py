"""Acceptance criteria 1-10, one test each; every test prints a pass/fail line."""
import json
import math
import os
import time

import numpy as np
import pytest
import torch

from conftest import record_acceptance
from navspeak import grammar, trainer
from navspeak.adapter_lm import AdapterLM, loss_autoregressive, per_position_loss
from navspeak.config import RunConfig
from navspeak.evaluator import bleu, cider, follow, follow_corpus, meteor_lite, rouge_l
from navspeak.generator import GenerationRequest, Generator
from navspeak.landmarks import select_visual, spatial_scores, temporal_scores
from navspeak.model import SpeakerModel
from navspeak.prompts import Vocabulary, build_vocabulary
from navspeak.stmt import make_stmt_samples
from navspeak.world import ROOM_TYPES, PanoramaObservation, Step, Trajectory, generate_world, sample_trajectory
from oracles import bleu_oracle, cider_oracle, lcs_oracle, meteor_oracle, rouge_l_oracle

DATA = os.path.join(os.path.dirname(__file__), "data")

# Regression pins, recorded on the first green run of the default toy pipeline.
# measured 0.390 with STMT on
PINNED_HELDOUT_INSTRUCTION_CE = 0.42
STMT_SLACK = 1.02


# ---------------------------------------------------------------- 1. landmark oracle


def _brute_force(objects, feats, actions, candidates, beta):
    """Enumerate every (name, step) pair with plain loops."""

    def cos(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))

    T, K = len(feats), len(feats[0])
    pooled = [[sum(feats[t][k][d] for k in range(K)) / K for d in range(len(feats[t][0]))] for t in range(T)]
    tau = [1 - cos(pooled[t], pooled[t + 1]) for t in range(T - 1)]
    best = {}
    for t in range(T):
        a = actions[t]
        if a >= K:
            continue
        temporal = tau[min(t, T - 2)]
        for name in objects[t][a]:
            spatial = 1.0
            for c in candidates[t]:
                if c != a and name in objects[t][c]:
                    spatial -= 1 - cos(feats[t][a], feats[t][c])
            score = spatial * temporal
            if score >= beta and (name not in best or score > best[name][3]):
                best[name] = (t, temporal, spatial, score)
    return best


def _random_instance(rng):
    T, K, D = int(rng.integers(2, 5)), int(rng.integers(2, 7)), 5
    names = [f"obj{i}" for i in range(int(rng.integers(1, 9)))]
    feats = rng.normal(size=(T, K, D))
    objects = [[tuple(rng.choice(names, size=int(rng.integers(0, 4)))) for _ in range(K)] for _ in range(T)]
    actions = [int(rng.integers(0, K + 1)) for _ in range(T)]
    candidates = [sorted(set(int(c) for c in rng.integers(0, K, size=int(rng.integers(0, K + 1))))) for _ in range(T)]
    steps = tuple(
        Step(t, PanoramaObservation(feats[t], np.zeros(K), tuple(objects[t])), actions[t]) for t in range(T)
    )
    beta = float(rng.choice([0.0, 0.25, 0.5, rng.uniform(-0.5, 1.0)]))
    return Trajectory(steps), feats, objects, actions, candidates, beta


def test_landmark_selection_matches_brute_force():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst, same_sets = 0.0, True
    for _ in range(200):
        traj, feats, objects, actions, candidates, beta = _random_instance(rng)
        got = select_visual(traj, feats, beta, candidates=candidates)
        want = _brute_force(objects, feats.tolist(), actions, candidates, beta)
        same_sets &= {o.name for o in got} == set(want)
        for o in got:
            if o.name in want:
                t, temporal, spatial, _ = want[o.name]
                same_sets &= o.step == t
                worst = max(worst, abs(o.temporal_score - temporal), abs(o.spatial_score - spatial))
    elapsed = time.perf_counter() - start
    passed = same_sets and worst < 1e-9 and elapsed < 10
    record_acceptance(1, "landmark selection oracle", passed, f"max err {worst:.1e}, {elapsed:.2f}s")
    assert same_sets
    assert worst < 1e-9
    assert elapsed < 10


# ---------------------------------------------------------------- 2. forced values


def _pano(feats, objects):
    feats = np.asarray(feats, dtype=np.float64)
    return PanoramaObservation(feats, np.zeros(len(feats)), tuple(tuple(o) for o in objects))


def _unit(angle):
    return [math.cos(angle), math.sin(angle)]


def test_forced_values():
    checks = {}
    rng = np.random.default_rng(1)
    pano = rng.normal(size=(4, 6))
    checks["identical panoramas"] = abs(temporal_scores(np.stack([pano, pano, pano]))[0]) < 1e-12

    unique = _pano(rng.normal(size=(3, 4)), [["sofa"], ["lamp"], []])
    checks["unique landmark"] = spatial_scores(unique, 0, [1, 2]) == {"sofa": 1.0}

    # candidate views at cosine distances 0.2, 0.3 and 0.4 from the action view
    views = [_unit(0.0)] + [_unit(math.acos(1 - d)) for d in (0.2, 0.3, 0.4)]
    shared = _pano(views, [["sofa"]] * 4)
    checks["distances 0.2/0.3/0.4"] = abs(spatial_scores(shared, 0, [1, 2, 3])["sofa"] - 0.1) < 1e-12

    checks["beta=inf"] = True
    monotone = True
    for case in range(50):
        traj, feats, _, _, candidates, _ = _random_instance(np.random.default_rng(100 + case))
        checks["beta=inf"] &= select_visual(traj, feats, math.inf, candidates=candidates) == []
        grid = [0.0, 0.25, 0.5] + sorted(np.random.default_rng(case).uniform(-1, 1, size=5).tolist())
        grid.sort()
        sets = [{o.name for o in select_visual(traj, feats, b, candidates=candidates)} for b in grid]
        monotone &= all(a >= b for a, b in zip(sets, sets[1:]))
    checks["monotone in beta"] = monotone
    failed = [k for k, ok in checks.items() if not ok]
    record_acceptance(2, "forced landmark values", not failed, "failed: " + ", ".join(failed) if failed else "")
    assert not failed


# ---------------------------------------------------------------- 3. zero-gate identity


def test_zero_gate_identity():
    torch.manual_seed(0)
    lm = AdapterLM(30, width=16, n_layers=2, n_heads=2, context_len=24, M=3).eval()
    exact = True
    with torch.no_grad():
        for _ in range(100):
            B, S, T = int(torch.randint(1, 4, ())), int(torch.randint(1, 24, ())), int(torch.randint(1, 6, ()))
            tokens = torch.randint(0, 30, (B, S))
            feats = torch.randn(B, T, 3, 16) * 3
            exact &= torch.equal(lm(tokens, feats), lm(tokens, None))
    record_acceptance(3, "zero-gate identity", exact, "100 inputs")
    assert exact


# ---------------------------------------------------------------- 4. finite differences


def _tiny_model():
    cfg = RunConfig()
    cfg.world.k, cfg.world.d_raw = 4, 6
    cfg.encoder.m, cfg.encoder.d_i, cfg.encoder.n_blocks, cfg.encoder.n_heads, cfg.encoder.t_max = 2, 8, 1, 2, 4
    cfg.lm.width, cfg.lm.n_layers, cfg.lm.n_heads, cfg.lm.context_len = 16, 2, 2, 16
    vocab = Vocabulary(["a", "b", "c", "d", "e"])
    model = SpeakerModel(cfg, vocab, seed=3).double()
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        # nonzero gates and cross-attention outputs so every parameter is live
        for block in model.lm.blocks:
            block.adapter.gate.fill_(0.3)
        for attn in model.stmt.cross.values():
            attn.out.weight.copy_(torch.randn(attn.out.weight.shape, generator=gen, dtype=torch.float64) * 0.3)
    return model, vocab


def _fd_inputs(vocab, rng):
    raw = [rng.normal(size=(3, 4, 6)), rng.normal(size=(2, 4, 6))]
    actions = [[0, 2, 4], [1, 4]]
    seqs = [[1, 5, 6, 7, 8, 2], [1, 6, 9, 5]]
    masks = [[False, False, True, True, True, True], [False, True, False, True]]
    return raw, actions, seqs, masks


def _fd_loss(model, raw, actions, seqs, masks):
    logits = model.lm_logits(seqs, raw, actions)
    tokens = model.pad_tokens(seqs)
    mask = torch.zeros(tokens.shape, dtype=torch.bool)
    for i, m in enumerate(masks):
        mask[i, : len(m)] = torch.as_tensor(m)
    lm_loss = loss_autoregressive(logits, tokens, mask)
    st_logits = model.stmt_logits(seqs, raw, actions)
    return lm_loss + torch.nn.functional.cross_entropy(st_logits, torch.as_tensor([1, 3]))


def _rel_err(analytic, numeric):
    scale = max(abs(analytic), abs(numeric))
    return abs(analytic - numeric) / scale if scale > 1e-8 else abs(analytic - numeric)


def _check_params(model, params, loss_fn, rng, per_tensor=4, eps=1e-6):
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            grad = p.grad.reshape(-1).clone()
            for idx in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                worst = max(worst, _rel_err(float(grad[idx]), (up - down) / (2 * eps)))
    return worst


def test_finite_difference_gradients():
    start = time.perf_counter()
    model, vocab = _tiny_model()
    rng = np.random.default_rng(0)
    raw, actions, seqs, masks = _fd_inputs(vocab, rng)
    loss_fn = lambda: _fd_loss(model, raw, actions, seqs, masks)  # noqa: E731
    named = dict(model.named_parameters())
    groups = {
        "encoder": [(n, p) for n, p in named.items() if n.startswith("encoder.")],
        "adapter q/proj/gate": [(n, p) for n, p in named.items()
                                if ".adapter." in n and n.split(".adapter.")[1].split(".")[0] in ("query", "proj", "gate")],
        "stmt cross/W": [(n, p) for n, p in named.items() if n.startswith("stmt.")],
    }
    errors = {k: _check_params(model, v, loss_fn, rng) for k, v in groups.items()}

    logits = torch.randn(2, 6, 11, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    logits.requires_grad_(True)
    tokens = torch.randint(0, 11, (2, 6))
    mask = torch.tensor([[0, 0, 1, 1, 0, 1], [0, 1, 1, 0, 1, 1]], dtype=torch.bool)
    errors["masked CE"] = float(torch.autograd.gradcheck(
        lambda x: loss_autoregressive(x, tokens, mask), (logits,), eps=1e-6, atol=1e-8, rtol=1e-4) is not True)

    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    passed = worst < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f", {elapsed:.1f}s"
    record_acceptance(4, "finite-difference gradients", passed, detail)
    assert all(len(v) for v in groups.values())
    assert worst < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------- 5. mask discipline


def test_mask_discipline():
    gen = torch.Generator().manual_seed(0)
    ok = True
    for trial in range(20):
        B, S, V = 3, 9, 13
        logits = torch.randn(B, S, V, dtype=torch.float64, generator=gen, requires_grad=True)
        tokens = torch.randint(0, V, (B, S), generator=gen)
        mask = torch.rand(B, S, generator=gen) < 0.5
        mask[0, -1] = True
        loss = loss_autoregressive(logits, tokens, mask)
        (grad,) = torch.autograd.grad(loss, logits)
        losses, supervised = per_position_loss(logits, tokens, mask)
        # row s of the logits predicts token s + 1
        target_supervised = torch.zeros(B, S, dtype=torch.bool)
        target_supervised[:, :-1] = supervised[:, 1:]
        ok &= bool((grad[~target_supervised] == 0).all())
        # the loss is exactly the mean of the supervised per-position terms
        terms = [losses[b, s] for b in range(B) for s in range(S) if supervised[b, s]]
        recomposed = sum(terms) / len(terms)
        ok &= abs(float(recomposed.detach()) - float(loss.detach())) < 1e-12
        (grad_terms,) = torch.autograd.grad(recomposed, logits)
        ok &= torch.allclose(grad, grad_terms, atol=1e-14)
    # changing an unsupervised target token leaves the loss untouched
    tokens2 = tokens.clone()
    free = (~supervised).nonzero()
    b, s = free[-1].tolist()
    tokens2[b, s] = (tokens2[b, s] + 1) % V
    ok &= float(loss_autoregressive(logits.detach(), tokens2, mask)) == float(loss.detach())
    record_acceptance(5, "supervision-mask discipline", ok, "20 random batches")
    assert ok


# ---------------------------------------------------------------- 6. backtrack learnability


def test_stmt_learnability():
    start = time.perf_counter()
    cfg = RunConfig.toy()
    cfg.seed = 17
    cfg.train.steps = 500
    cfg.train.instruction_ratio, cfg.train.landmark_ratio, cfg.train.stmt_ratio = 0.0, 0.0, 1.0
    world = generate_world(17, 8, 8)
    samples = []
    seed = 0
    while len(samples) < 50:
        traj = sample_trajectory(world, seed, (4, 7), k=cfg.world.k, d_raw=cfg.world.d_raw)
        samples.extend(make_stmt_samples(traj, world))
        seed += 1
    samples = samples[:50]
    vocab = build_vocabulary(k=cfg.world.k, objects=world.vocab)
    model = SpeakerModel(cfg, vocab)
    items = [trainer.build_stmt_item(s, vocab, model.prompts) for s in samples]
    trainer.fit(model, cfg, {("stmt", None): items}, log_every=100)
    acc = trainer.stmt_accuracy(model, items)
    elapsed = time.perf_counter() - start
    passed = acc >= 0.9 and elapsed < 120
    record_acceptance(6, "backtrack learnability", passed, f"accuracy {acc:.3f} vs chance 0.125, {elapsed:.1f}s")
    assert acc >= 0.9
    assert elapsed < 120


# ---------------------------------------------------------------- 7. end-to-end training


def _final_val(history, task):
    rows = [h for h in history if h["split"] == "val" and h["task"] == task]
    return rows[-1]["loss"]


@pytest.mark.slow
def test_end_to_end_training(trained_runs):
    with_stmt = trained_runs["stmt"]["result"].history
    without = trained_runs["no_stmt"]["result"].history
    ce = _final_val(with_stmt, "instruction")
    ce_ablation = _final_val(without, "instruction")
    seconds = trained_runs["seconds"]
    below_pin = ce < PINNED_HELDOUT_INSTRUCTION_CE
    regularized = ce <= ce_ablation * STMT_SLACK
    fast = seconds < 600
    detail = (f"held-out instruction CE {ce:.4f} (pin {PINNED_HELDOUT_INSTRUCTION_CE}), "
              f"without backtrack task {ce_ablation:.4f}, {seconds:.0f}s for both runs")
    record_acceptance(7, "end-to-end toy training", below_pin and regularized and fast, detail)
    assert below_pin
    assert regularized, detail
    assert fast


# ---------------------------------------------------------------- 8. controllability


def _heldout(corpus):
    return sorted(corpus.split_ids("val"))


def _route_objects(trajectory):
    names = set()
    for step in trajectory.steps:
        for view in step.observation.visible_objects:
            names.update(view)
    return sorted(names)


VALIDITY_MIN, OVERRIDE_MIN, SWAP_MIN = 0.95, 0.80, 0.70


@pytest.mark.slow
def test_controllability(trained_model, corpus):
    gen = Generator(trained_model)
    ids = _heldout(corpus)
    rates = {}
    for style in ("fine_grained", "high_level"):
        reqs = [GenerationRequest(corpus.trajectories[i], style, seed=n) for n, i in enumerate(ids)]
        recs = gen.generate_many(reqs)
        valid = [grammar.validate(r.instruction, style, set(corpus.world_of(i).vocab), set(ROOM_TYPES))
                 for i, r in zip(ids, recs)]
        rates[f"valid {style}"] = sum(valid) / len(valid)

        pairs = [(i, name) for i in ids for name in _route_objects(corpus.trajectories[i])]
        reqs = [GenerationRequest(corpus.trajectories[i], style, [name], seed=n) for n, (i, name) in enumerate(pairs)]
        recs = gen.generate_many(reqs)
        rates[f"override {style}"] = sum(name in r.instruction for (_, name), r in zip(pairs, recs)) / len(pairs)

        swaps = [(i, objs[0], objs[1]) for i in ids if len(objs := _route_objects(corpus.trajectories[i])) >= 2]
        first = gen.generate_many([GenerationRequest(corpus.trajectories[i], style, [a], seed=n)
                                   for n, (i, a, _) in enumerate(swaps)])
        second = gen.generate_many([GenerationRequest(corpus.trajectories[i], style, [b], seed=n)
                                    for n, (i, _, b) in enumerate(swaps)])
        rates[f"swap {style}"] = sum(x.instruction != y.instruction for x, y in zip(first, second)) / len(swaps)
    minimum = {"valid": VALIDITY_MIN, "override": OVERRIDE_MIN, "swap": SWAP_MIN}
    failed = [k for k, v in rates.items() if v < minimum[k.split()[0]]]
    record_acceptance(8, "controllability", not failed, ", ".join(f"{k} {v:.2f}" for k, v in rates.items()))
    assert not failed, rates


# ---------------------------------------------------------------- 9. metric oracles


def _metric_table():
    with open(os.path.join(DATA, "metric_pairs.json"), encoding="utf-8") as fh:
        return json.load(fh)


def test_metric_oracles(corpus):
    table = _metric_table()
    cands = [row["candidate"].split() for row in table["pairs"]]
    refs = [[r.split() for r in row["references"]] for row in table["pairs"]]
    ours = {
        "bleu1": [bleu(c, r, 1) for c, r in zip(cands, refs)],
        "bleu4": [bleu(c, r, 4) for c, r in zip(cands, refs)],
        "rougeL": [rouge_l(c, r) for c, r in zip(cands, refs)],
        "meteorLite": [meteor_lite(c, r) for c, r in zip(cands, refs)],
        "cider": cider(cands, refs).per_sample,
    }
    live = {
        "bleu1": [bleu_oracle(c, r, 1) for c, r in zip(cands, refs)],
        "bleu4": [bleu_oracle(c, r, 4) for c, r in zip(cands, refs)],
        "rougeL": [rouge_l_oracle(c, r) for c, r in zip(cands, refs)],
        "meteorLite": [meteor_oracle(c, r) for c, r in zip(cands, refs)],
        "cider": cider_oracle(cands, refs),
    }
    worst = 0.0
    for metric, values in ours.items():
        frozen = [row["expected"][metric] for row in table["pairs"]]
        worst = max(worst, max(abs(a - b) for a, b in zip(values, frozen)),
                    max(abs(a - b) for a, b in zip(values, live[metric])))

    # identity inputs: every candidate is its own single reference, sentences pairwise disjoint
    identity = [["go", "north", str(i), f"w{i}"] for i in range(6)]
    id_refs = [[c] for c in identity]
    identity_ok = all(abs(bleu(c, r, n) - 1) < 1e-12 for c, r in zip(identity, id_refs) for n in (1, 4))
    identity_ok &= all(abs(rouge_l(c, r) - 1) < 1e-12 for c, r in zip(identity, id_refs))
    identity_ok &= all(abs(meteor_lite(c, r) - (1 - 0.5 * (1 / 4) ** 3)) < 1e-12 for c, r in zip(identity, id_refs))
    identity_ok &= all(abs(v - 10) < 1e-9 for v in cider(identity, id_refs).per_sample)

    # SPL <= SR on ground-truth and shuffled corpus runs
    ids = sorted(corpus.trajectories)[:120]
    spl_ok = True
    for shift in (0, 1):
        items = []
        for n, tid in enumerate(ids):
            src = ids[(n + shift) % len(ids)]
            traj = corpus.trajectories[tid]
            text = corpus.instructions_for(src, "fine_grained")[0].text
            items.append((corpus.world_of(tid), text, traj.viewpoints[0], traj.viewpoints[-1]))
        results, sr, spl = follow_corpus(items)
        spl_ok &= spl <= sr + 1e-12 and all(r.spl <= float(r.success) for r in results)

    passed = worst < 1e-6 and identity_ok and spl_ok
    record_acceptance(9, "metric oracles", passed, f"max err {worst:.1e}, identity {identity_ok}, SPL<=SR {spl_ok}")
    assert worst < 1e-6
    assert identity_ok
    assert spl_ok
    assert lcs_oracle("abcbdab", "bdcaba") == 4


# ---------------------------------------------------------------- 10. follower duality


@pytest.mark.slow
def test_follower_duality(trained_model, corpus):
    gt_items = []
    for tid, traj in sorted(corpus.trajectories.items()):
        for sample in corpus.instructions_for(tid, "fine_grained"):
            gt_items.append((corpus.world_of(tid), sample.text, traj.viewpoints[0], traj.viewpoints[-1]))
    _, gt_sr, gt_spl = follow_corpus(gt_items)

    ids = _heldout(corpus)
    gen = Generator(trained_model)
    recs = gen.generate_many([GenerationRequest(corpus.trajectories[i], "fine_grained", seed=n)
                              for n, i in enumerate(ids)])

    def run(shift):
        items = []
        for n, tid in enumerate(ids):
            traj = corpus.trajectories[tid]
            items.append((corpus.world_of(tid), recs[(n + shift) % len(ids)].instruction,
                          traj.viewpoints[0], traj.viewpoints[-1]))
        return follow_corpus(items)

    _, sr, spl = run(0)
    shuffled = [run(s)[1] for s in range(1, 6)]
    baseline = sum(shuffled) / len(shuffled)
    passed = gt_sr == 1.0 and gt_spl == 1.0 and sr > baseline and spl <= sr
    detail = f"ground truth SR {gt_sr:.3f} SPL {gt_spl:.3f}; generated SR {sr:.3f} vs shuffled {baseline:.3f}"
    record_acceptance(10, "follower duality and guidance", passed, detail)
    assert gt_sr == 1.0 and gt_spl == 1.0
    assert sr > baseline
