import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superseg.errors import LabelConflictError, ValidationError
from superseg.overseg import (
    OversegParams,
    Superpointization,
    lift_labels,
    load_superpointization,
    oversegment,
)
from superseg.pcio import PointCloud
from superseg.synth import SceneSpec, WeakAnnotation, generate_scene

from oracles import canonical_partition


def test_one_point_cloud():
    sp = oversegment(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    assert sp.num_superpoints == 1
    assert list(sp.member_lists[0]) == [0]


def test_empty_cloud_rejected():
    with pytest.raises(ValidationError):
        oversegment(PointCloud(np.zeros((0, 3))))


def _opposite_slabs():
    # two touching square slabs, normals +z and -z, 0.02 apart in z
    g = np.linspace(0, 0.5, 11)
    xy = np.array([(x, y) for x in g for y in g])
    top = np.column_stack([xy, np.full(len(xy), 0.02)])
    bot = np.column_stack([xy, np.zeros(len(xy))])
    normals = np.vstack([np.tile([0, 0, 1.0], (len(xy), 1)), np.tile([0, 0, -1.0], (len(xy), 1))])
    inst = np.repeat([0, 1], len(xy))
    return PointCloud(np.vstack([top, bot]), normals=normals, gt_semantic=inst, gt_instance=inst)


def test_opposite_slabs_never_share_a_superpoint():
    cloud = _opposite_slabs()
    sp = oversegment(cloud, OversegParams(normal_angle_max=30.0, grid_size=0.05))
    for members in sp.member_lists:
        assert len(np.unique(cloud.gt_instance[members])) == 1
    # spatially interleaved but incompatible: without the normal test they would merge
    merged = oversegment(PointCloud(cloud.positions), OversegParams(grid_size=0.05, target_superpoint_size=10**6))
    assert merged.num_superpoints == 1


def test_purity_and_granularity_on_synthetic_scene(scene):
    cloud, sp = scene
    for members in sp.member_lists:
        assert len(np.unique(cloud.gt_instance[members])) == 1
    mean_size = len(cloud) / sp.num_superpoints
    target = OversegParams().target_superpoint_size
    assert target / 4 <= mean_size <= target * 4


def test_superpointization_invariants(scene):
    cloud, sp = scene
    assert sorted(np.concatenate(sp.member_lists).tolist()) == list(range(len(cloud)))
    for s, members in enumerate(sp.member_lists):
        assert len(members) > 0
        np.testing.assert_allclose(sp.centroids[s], cloud.positions[members].mean(axis=0), atol=1e-6)
        assert (sp.assignment[members] == s).all()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32))
def test_partition_is_permutation_invariant(seed):
    cloud = generate_scene(SceneSpec(num_instances=2, points_per_instance=(150, 250), rng_seed=seed))
    perm = np.random.default_rng(seed).permutation(len(cloud))
    a = oversegment(cloud)
    b = oversegment(cloud.subset(perm))
    # map the permuted assignment back onto original point ids
    back = np.empty(len(cloud), dtype=np.int64)
    back[perm] = b.assignment
    assert canonical_partition(a.assignment) == canonical_partition(back)


def test_oversegment_is_deterministic(scene):
    cloud, sp = scene
    np.testing.assert_array_equal(oversegment(cloud).assignment, sp.assignment)


def test_load_examples(tmp_path):
    cloud = PointCloud(np.arange(9.0).reshape(3, 3))
    f = tmp_path / "a.txt"
    f.write_text("0 0 1")
    sp = load_superpointization(f, cloud)
    assert sp.num_superpoints == 2
    f.write_text("0 2")
    with pytest.raises(ValidationError):
        load_superpointization(f, PointCloud(np.zeros((2, 3))))
    f.write_text("0\n0\n")
    with pytest.raises(ValidationError, match="entries"):
        load_superpointization(f, cloud)


def test_load_round_trip(tmp_path, scene):
    cloud, sp = scene
    sp.save(tmp_path / "sp.txt")
    back = load_superpointization(tmp_path / "sp.txt", cloud)
    assert {frozenset(m.tolist()) for m in back.member_lists} == {frozenset(m.tolist()) for m in sp.member_lists}
    np.testing.assert_allclose(back.centroids, sp.centroids)


def _ten_superpoints():
    cloud = PointCloud(np.arange(60.0).reshape(20, 3), gt_semantic=[0] * 20, gt_instance=[0] * 10 + [1] * 10)
    return Superpointization.from_assignment(np.repeat(np.arange(10), 2), cloud)


def test_lift_single_click():
    sp = _ten_superpoints()
    weak = lift_labels(sp, WeakAnnotation(((8, 0, 0),)))
    assert np.flatnonzero(weak.annotated_mask).tolist() == [4]
    assert weak.instance_label[4] == 0 and weak.semantic_label[4] == 0


def test_lift_no_clicks():
    weak = lift_labels(_ten_superpoints(), WeakAnnotation(()))
    assert not weak.annotated_mask.any() and (weak.instance_label == -1).all()


def test_lift_same_instance_twice_merges():
    weak = lift_labels(_ten_superpoints(), WeakAnnotation(((8, 0, 0), (9, 0, 0))))
    assert weak.annotated_mask.sum() == 1


def test_lift_conflict_carries_both_ids():
    with pytest.raises(LabelConflictError) as info:
        lift_labels(_ten_superpoints(), WeakAnnotation(((8, 0, 0), (9, 1, 0))))
    assert set(info.value.instances) == {0, 1}


def test_lift_rejects_out_of_range_click():
    with pytest.raises(ValidationError):
        lift_labels(_ten_superpoints(), WeakAnnotation(((20, 0, 0),)))
