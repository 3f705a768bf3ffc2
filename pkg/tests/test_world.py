import numpy as np
import pytest

from navspeak import grammar
from navspeak.errors import DataError, SizingError, ViewpointLookupError
from navspeak.world import (
    ROOM_TYPES, STYLES, WorldGrid, generate_world, heading_bucket, navigable_views, render_panorama,
    sample_trajectory, synthesize_instruction, trajectory_from_dict, trajectory_to_dict,
    trajectory_from_viewpoints, visible_objects_from,
)


def test_world_is_deterministic_and_connected():
    a, b = generate_world(5, 8, 8), generate_world(5, 8, 8)
    assert a.to_dict() == b.to_dict()
    start = next(iter(a.nav_graph))
    assert set(a.distances_from(start)) == set(a.nav_graph)


def test_world_round_trips_through_dict(world):
    again = WorldGrid.from_dict(world.to_dict())
    assert again.to_dict() == world.to_dict()
    assert again.nav_graph == world.nav_graph


def test_tiny_world_is_rejected():
    with pytest.raises(SizingError):
        generate_world(0, 3, 8)


def test_unknown_viewpoint(world):
    blocked = next(iter(world.blocked))
    with pytest.raises(ViewpointLookupError):
        world.cell(blocked)


def test_heading_buckets_are_cardinal_for_k8():
    assert heading_bucket(-1, 0, 8) == 0  # north
    assert heading_bucket(0, 1, 8) == 2  # east
    assert heading_bucket(1, 0, 8) == 4
    assert heading_bucket(0, -1, 8) == 6


def test_own_cell_object_is_not_visible(world):
    vid = next(v for v in world.objects if v in world.nav_graph)
    assert all(ov != vid for ov, _ in visible_objects_from(world, vid))


def test_panorama_rows_are_unit_and_cached(world):
    vid = next(iter(world.nav_graph))
    pano = render_panorama(world, vid, k=8, d_raw=32)
    assert pano.subviews.shape == (8, 32)
    np.testing.assert_allclose(np.linalg.norm(pano.subviews, axis=1), 1.0)
    assert render_panorama(world, vid, k=8, d_raw=32) is pano


def test_trajectory_actions_follow_the_path(world, trajectory):
    vps = trajectory.viewpoints
    assert trajectory.actions[-1] == trajectory.K
    for i, step in enumerate(trajectory.steps[:-1]):
        assert vps[i + 1] in world.nav_graph[vps[i]]
        assert step.action in navigable_views(world, vps[i], trajectory.K)
    assert len(vps) - 1 == world.distances_from(vps[0])[vps[-1]]


def test_trajectory_round_trip(world, trajectory):
    data = trajectory_to_dict(trajectory, 8, 32, 3.0)
    assert trajectory_from_dict(data, world).viewpoints == trajectory.viewpoints


def test_non_neighbour_path_is_rejected(world):
    cells = sorted(world.nav_graph)
    far = max(cells, key=lambda v: world.distances_from(cells[0])[v])
    with pytest.raises(DataError):
        trajectory_from_viewpoints(world, [cells[0], far], k=8, d_raw=32)


@pytest.mark.parametrize("style", STYLES)
def test_synthesized_instructions_validate(world, style):
    for seed in range(20):
        traj = sample_trajectory(world, seed, (4, 6), k=8, d_raw=32)
        sample = synthesize_instruction(traj, world, style, seed)
        assert grammar.validate(sample.text, style, set(world.vocab), set(ROOM_TYPES))
        assert all(name in sample.text for name in sample.linguistic_landmarks)
        assert sample.text in sample.reference_texts


def test_ground_truth_fine_grained_reaches_goal(world):
    for seed in range(20):
        traj = sample_trajectory(world, seed, (4, 6), k=8, d_raw=32)
        sample = synthesize_instruction(traj, world, "fine_grained", seed)
        clauses = grammar.parse(sample.text, set(world.vocab), set(ROOM_TYPES))
        path = grammar.execute(world, traj.viewpoints[0], clauses, 100, 3.0)
        assert path == traj.viewpoints
