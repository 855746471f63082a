import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import cKDTree

from oracles import brute_force_select
from reldistill.errors import DomainError, NoGraspError, ParseError
from reldistill.geomcore import RigidPose
from reldistill.graspsel import (DEFAULT_K, DEFAULT_LIFT, GraspCandidate, GraspSelection, GripperConfig,
                                 estimate_normals, gripper_pose, handover_orientation, handover_plan, knn_indices,
                                 load_candidates, parse_candidates, pick_place_plan, sample_candidates,
                                 save_candidates, select_grasp)
from reldistill.relfield import PointCloud


def make_candidate(center, score=0.5, axis=(1.0, 0.0, 0.0), width=0.04):
    return GraspCandidate(gripper_pose(center, axis), center, width, score)


def make_cloud(xyz, rel):
    xyz = np.asarray(xyz, float)
    rel = np.asarray(rel, float).reshape(len(xyz), -1)
    return PointCloud(xyz, np.zeros((len(xyz), 3)), rel)


def random_fixture(rng, n_cand=50, n_pts=5000, levels=None, grid=False):
    if grid:
        # integer lattice: tied distances are exactly equal in floating point
        xyz = rng.integers(0, 6, (n_pts, 3)).astype(float)
        centers = rng.integers(0, 6, (n_cand, 3)).astype(float)
    else:
        xyz = rng.uniform(-0.2, 0.2, (n_pts, 3))
        centers = rng.uniform(-0.2, 0.2, (n_cand, 3))
    rel = rng.random((n_pts, 2)) if levels is None else rng.integers(0, levels, (n_pts, 2)) / (levels - 1)
    scores = rng.random(n_cand) if levels is None else rng.integers(0, 3, n_cand) / 2
    return [make_candidate(c, s) for c, s in zip(centers, scores)], make_cloud(xyz, rel)


def test_default_k_and_lift():
    assert DEFAULT_K == 30
    assert DEFAULT_LIFT == 0.20


# -- candidates

def test_candidate_validation():
    with pytest.raises(DomainError):
        make_candidate(np.zeros(3), width=0.0)
    with pytest.raises(DomainError):
        make_candidate(np.zeros(3), score=1.2)


def test_gripper_pose_frame():
    p = gripper_pose([0, 0, 0.1], [0, 1, 0])
    np.testing.assert_allclose(p.rotation[:, 0], [0, 1, 0])
    np.testing.assert_allclose(p.rotation[:, 2], [0, 0, -1])
    vertical = gripper_pose([0, 0, 0], [0, 0, 1])
    assert abs(np.linalg.det(vertical.rotation) - 1) < 1e-12


def test_two_point_pair():
    xyz = np.array([[0.0, 0, 0.05], [0.04, 0, 0.05]])
    normals = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    (c,) = sample_candidates(xyz, GripperConfig(), normals=normals)
    np.testing.assert_allclose(c.contact_center, [0.02, 0, 0.05])
    assert c.width == pytest.approx(0.04)
    assert c.score == pytest.approx(1.0)
    np.testing.assert_allclose(np.abs(c.pose.rotation[:, 0]), [1, 0, 0])


def test_empty_width_range():
    xyz = np.array([[0.0, 0, 0], [0.04, 0, 0]])
    normals = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert sample_candidates(xyz, GripperConfig(min_width=0.05, max_width=0.01), normals=normals) == []
    assert sample_candidates(xyz, GripperConfig(min_width=0.05, max_width=0.08), normals=normals) == []


def test_empty_cloud_rejected():
    with pytest.raises(DomainError):
        sample_candidates(np.zeros((0, 3)))


def sphere_points(n, r, center, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return center + r * v / np.linalg.norm(v, axis=1, keepdims=True)


def test_pca_normals_on_sphere():
    c = np.array([0.0, 0.0, 0.1])
    xyz = sphere_points(4000, 0.05, c)
    n = estimate_normals(xyz, 16)
    radial = (xyz - c) / 0.05
    assert np.median(np.abs(np.einsum("ij,ij->i", n, radial))) > 0.99


def test_sphere_candidates_are_antipodal():
    voxel = 0.5 / 95
    r = 0.05
    c = np.array([0.0, 0.0, 0.1])
    xyz = sphere_points(6000, r, c)
    # the midpoint of a chord meeting both normals within angle a lies r sin(a) from the center
    tight = math.degrees(math.asin(1.5 * voxel / r)) * 0.6  # headroom for PCA normal error
    cands = sample_candidates(xyz, GripperConfig(friction_deg=tight, max_width=0.12, count=200))
    assert len(cands) >= 20
    d = np.array([np.linalg.norm(g.contact_center - c) for g in cands])
    assert (d <= 1.5 * voxel).all()
    wide = sample_candidates(xyz, GripperConfig(max_width=0.12, count=200))
    d = np.array([np.linalg.norm(g.contact_center - c) for g in wide])
    assert len(wide) > 0 and (d <= r * math.sin(math.radians(30)) + 0.2 * voxel).all()


def test_sampler_deterministic_and_table_exclusion():
    xyz = sphere_points(3000, 0.04, np.array([0, 0, 0.04]))
    table = np.stack(np.meshgrid(np.linspace(-0.1, 0.1, 40), np.linspace(-0.1, 0.1, 40), [0.0]), -1).reshape(-1, 3)
    pts = np.concatenate([xyz, table])
    cfg = GripperConfig(count=100, min_seed_z=0.005)
    a = sample_candidates(pts, cfg)
    b = sample_candidates(pts, cfg)
    assert [x.to_dict() for x in a] == [x.to_dict() for x in b]
    assert all(g.contact_center[2] > 0.005 for g in a)


# -- candidate files

def test_candidate_file_roundtrip(tmp_path, rng):
    cands, _ = random_fixture(rng, 5, 10)
    save_candidates(cands, tmp_path / "c.json")
    back = load_candidates(tmp_path / "c.json")
    assert [c.to_dict() for c in back] == [c.to_dict() for c in cands]
    assert json.loads((tmp_path / "c.json").read_text())[0]["pose"][3] == [0, 0, 0, 1]


@pytest.mark.parametrize("text", ["", "  \n", "[]", "[\n]\n"])
def test_empty_candidate_file(text):
    assert parse_candidates(text) == []


def test_parse_error_reports_line(tmp_path, rng):
    cands, _ = random_fixture(rng, 5, 10)
    save_candidates(cands, tmp_path / "c.json")
    lines = (tmp_path / "c.json").read_text().split("\n")
    # candidate i sits on line i + 2
    row = json.loads(lines[3].rstrip(","))
    row["width"] = "wide"
    lines[3] = json.dumps(row) + ","
    with pytest.raises(ParseError) as e:
        parse_candidates("\n".join(lines))
    assert e.value.line == 4


bad_rows = st.sampled_from([
    {"pose": [[1, 0, 0, 0]] * 4, "contact_center": [0, 0, 0], "width": 0.1, "score": 0.5},
    {"pose": np.eye(4).tolist(), "contact_center": [0, 0], "width": 0.1, "score": 0.5},
    {"pose": np.eye(4).tolist(), "contact_center": [0, 0, 0], "width": -1, "score": 0.5},
    {"pose": np.eye(4).tolist(), "contact_center": [0, 0, 0], "width": 0.1, "score": 2},
    {"pose": np.eye(4).tolist(), "contact_center": [0, 0, 0], "width": True, "score": 0.5},
    {"pose": np.eye(4).tolist(), "contact_center": [0, 0, 0], "width": 0.1},
    {"pose": np.eye(3).tolist(), "contact_center": [0, 0, 0], "width": 0.1, "score": 0.5},
    [1, 2, 3], "text", None,
])


@given(n_good=st.integers(0, 4), bad=bad_rows, where=st.integers(0, 4))
def test_fuzzed_invalid_rows(n_good, bad, where):
    good = {"pose": np.eye(4).tolist(), "contact_center": [0, 0, 0], "width": 0.1, "score": 0.5}
    rows = [good] * n_good
    where = min(where, n_good)
    rows.insert(where, bad)
    text = "[\n" + ",\n".join(json.dumps(r) for r in rows) + "\n]\n"
    with pytest.raises(ParseError) as e:
        parse_candidates(text)
    assert e.value.line == where + 2


@pytest.mark.parametrize("text", ["{", "[", "[{}", "[1 2]", "[] x", '{"a": 1}'])
def test_malformed_json(text):
    with pytest.raises(ParseError):
        parse_candidates(text)


# -- selection

def test_single_candidate_always_returned():
    cloud = make_cloud([[0, 0, 0], [1, 1, 1]], [0.0, 0.0])
    sel = select_grasp([make_candidate([5, 5, 5])], cloud, k=1)
    assert sel.index == 0 and sel.relevancy == 0.0


def test_picks_neighborhood_with_highest_relevancy():
    cloud = make_cloud([[0, 0, 0], [1, 0, 0]], [1.0, 0.1])
    cands = [make_candidate([1.01, 0, 0], 0.9), make_candidate([0.01, 0, 0], 0.1)]
    sel = select_grasp(cands, cloud, k=1)
    assert sel.index == 1 and sel.relevancy == 1.0 and sel.point_index == 0


def test_selection_errors():
    cloud = make_cloud([[0, 0, 0]], [0.5])
    with pytest.raises(NoGraspError):
        select_grasp([], cloud)
    with pytest.raises(DomainError):
        select_grasp([make_candidate([0, 0, 0])], cloud, k=0)
    with pytest.raises(DomainError):
        select_grasp([make_candidate([0, 0, 0])], cloud, channel=1)


def test_tie_breaks():
    cloud = make_cloud([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [0.7, 0.7, 0.2])
    # equal top relevancy: higher score wins
    cands = [make_candidate([0, 0, 0], 0.3), make_candidate([1, 0, 0], 0.8), make_candidate([2, 0, 0], 1.0)]
    assert select_grasp(cands, cloud, k=1).index == 1
    # equal top and score: earlier index wins
    cands = [make_candidate([0, 0, 0], 0.3), make_candidate([1, 0, 0], 0.3)]
    assert select_grasp(cands, cloud, k=1).index == 0
    # within a neighborhood the reported point is the lowest-index maximum
    sel = select_grasp([make_candidate([0.5, 0, 0])], cloud, k=2)
    assert sel.point_index == 0


def test_matches_brute_force(rng):
    cands, cloud = random_fixture(rng)
    for ch in range(2):
        assert select_grasp(cands, cloud, ch, 30).index == brute_force_select(cands, cloud, ch, 30)


@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 12))
def test_matches_brute_force_with_ties(seed, k):
    rng = np.random.default_rng(seed)
    cands, cloud = random_fixture(rng, 8, 40, levels=3, grid=True)
    assert select_grasp(cands, cloud, 0, k).index == brute_force_select(cands, cloud, 0, k)


@given(seed=st.integers(0, 2**32 - 1), power=st.floats(0.2, 5))
def test_monotone_rescale_invariance(seed, power):
    rng = np.random.default_rng(seed)
    cands, cloud = random_fixture(rng, 10, 200, levels=4)
    scaled = make_cloud(cloud.xyz, cloud.relevancy ** power)
    a, b = select_grasp(cands, cloud, 0, 5), select_grasp(cands, scaled, 0, 5)
    assert a.index == b.index and a.point_index == b.point_index


@given(seed=st.integers(0, 2**32 - 1))
def test_order_independence(seed):
    rng = np.random.default_rng(seed)
    cands, cloud = random_fixture(rng, 10, 200, levels=3)
    perm = rng.permutation(len(cands))
    shuffled = [cands[i] for i in perm]
    a = select_grasp(cands, cloud, 0, 5)
    b = select_grasp(shuffled, cloud, 0, 5)
    assert (a.relevancy, a.candidate.score) == (b.relevancy, b.candidate.score)
    # the winner in each order is the first of the tied best set in that order
    tied = [i for i, c in enumerate(shuffled)
            if (select_grasp([c], cloud, 0, 5).relevancy, c.score) == (b.relevancy, b.candidate.score)]
    assert b.index == tied[0]


def test_knn_matches_brute_force(rng):
    xyz = rng.integers(0, 10, (3000, 3)).astype(float)  # lattice: plenty of distance ties
    tree = cKDTree(xyz)
    for q in rng.integers(0, 18, (1000, 3)) / 2:
        k = int(rng.integers(1, 40))
        d2 = ((xyz - q) ** 2).sum(1)
        expected = np.lexsort((np.arange(len(xyz)), d2))[:k]
        got = knn_indices(tree, xyz, q, k)
        assert set(got) == set(expected)


# -- planners

@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9).filter(
    lambda v: np.linalg.norm(np.subtract(v[3:6], v[:3])) > 1e-3 and np.linalg.norm(v[6:]) > 1e-3))
def test_handover_alignment(v):
    g, d, s = np.array(v[:3]), np.array(v[3:6]), np.array(v[6:])
    R = handover_orientation(g, d, s)
    u = (d - g) / np.linalg.norm(d - g)
    assert np.abs(R @ u - s / np.linalg.norm(s)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_handover_special_cases():
    np.testing.assert_allclose(handover_orientation([0, 0, 0], [0, 0, 1], [0, 0, 2]), np.eye(3), atol=1e-15)
    R = handover_orientation([0, 0, 0], [0, 0, 1], [0, 0, -1])
    np.testing.assert_allclose(R @ [0, 0, 1], [0, 0, -1], atol=1e-12)
    with pytest.raises(DomainError):
        handover_orientation([1, 1, 1], [1, 1, 1], [0, 0, 1])
    with pytest.raises(DomainError):
        handover_orientation([0, 0, 0], [1, 1, 1], [0, 0, 0])


def _selection(center=(0.05, -0.02, 0.06)):
    c = make_candidate(np.array(center), 0.8)
    return GraspSelection(c, 0, 0.9, 3)


def test_pick_place_default_lift():
    sel = _selection()
    plan = pick_place_plan(sel, [0.15, -0.15, 0.0])
    assert [s.label for s in plan.steps] == ["approach", "grasp", "lift", "translate", "descend", "release"]
    np.testing.assert_array_equal(plan.steps[2].pose.translation - plan.steps[1].pose.translation, [0, 0, 0.20])
    assert [s.gripper for s in plan.steps] == ["open", "closed", "closed", "closed", "closed", "open"]
    np.testing.assert_array_equal(plan.step("translate").pose.translation[:2], [0.15, -0.15])


def test_pick_place_zero_lift_and_merge():
    sel = _selection()
    plan = pick_place_plan(sel, [0.0, 0.0, 0.0], lift=0.0)
    np.testing.assert_array_equal(plan.step("lift").pose.translation, sel.candidate.pose.translation)
    same_xy = pick_place_plan(sel, [0.05, -0.02, 0.0])
    assert [s.label for s in same_xy.steps] == ["approach", "grasp", "lift", "descend", "release"]
    with pytest.raises(DomainError):
        pick_place_plan(sel, [0, 0, 0], lift=-0.1)
    with pytest.raises(KeyError):
        same_xy.step("translate")


def test_handover_plan_presents_safely():
    sel = _selection()
    danger = np.array([0.05, 0.08, 0.06])
    safe = np.array([0.0, 1.0, 0.0])
    plan = handover_plan(sel, danger, safe, [0.3, 0.0, 0.3])
    present = plan.step("present")
    turn = present.pose.rotation @ sel.candidate.pose.rotation.T
    v = (danger - sel.candidate.contact_center) / np.linalg.norm(danger - sel.candidate.contact_center)
    np.testing.assert_allclose(turn @ v, safe, atol=1e-9)
    assert plan.steps[0].label == "approach"
    data = json.loads(plan.to_json())
    assert len(data) == 4 and data[-1]["gripper"] == "closed"
