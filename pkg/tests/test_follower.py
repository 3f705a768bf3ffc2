from navspeak.evaluator import follow, follow_corpus
from navspeak.world import sample_trajectory, synthesize_instruction


def test_ground_truth_succeeds_with_full_spl(world):
    for seed in range(10):
        traj = sample_trajectory(world, seed, (4, 6), k=8, d_raw=32)
        text = synthesize_instruction(traj, world, "fine_grained", seed).text
        res = follow(world, text, traj.viewpoints[0], traj.viewpoints[-1])
        assert res.success and res.spl == 1.0
        assert res.path == traj.viewpoints


def test_unparseable_text_fails(world, trajectory):
    res = follow(world, "fly to the moon".split(), trajectory.viewpoints[0], trajectory.viewpoints[-1])
    assert not res.success and not res.parsed and res.spl == 0.0


def test_stop_within_one_hop_counts(world, trajectory):
    vps = trajectory.viewpoints
    res = follow(world, ["stop"], vps[-2], vps[-1])
    assert res.success
    assert res.spl == 1.0  # zero moves against a one-hop shortest path: max(0, 1) = 1


def test_start_at_goal(world, trajectory):
    v = trajectory.viewpoints[0]
    res = follow(world, ["stop"], v, v)
    assert res.success and res.spl == 1.0


def test_spl_never_exceeds_success(world):
    items = []
    for seed in range(15):
        traj = sample_trajectory(world, seed, (4, 6), k=8, d_raw=32)
        other = sample_trajectory(world, seed + 100, (4, 6), k=8, d_raw=32)
        text = synthesize_instruction(other, world, "fine_grained", seed).text
        items.append((world, text, traj.viewpoints[0], traj.viewpoints[-1]))
    results, sr, spl = follow_corpus(items)
    assert spl <= sr
    assert all(r.spl <= float(r.success) for r in results)
