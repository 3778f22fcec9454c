import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from donpipe.descriptor import DimensionMismatch
from donpipe.geometry import CameraIntrinsics, Pose, default_intrinsics
from donpipe.keypoints import (DEPTH_FALLBACK_MEDIAN, DEPTH_FROM_NEIGHBOR, UNCERTAIN, EmptyMask, Keypoint,
                               ManualOutsideMask, OutOfBounds, activation_map, distance_map, extract_keypoint,
                               extract_keypoints, keypoint_vector, lift_keypoint, normalize_pixels,
                               select_references)
from donpipe.geometry import PixelCoord
from donpipe.scenegen import Frame, SceneObject, SceneSpec, build_scene, render_frame


def two_masks(H=8, W=8):
    a = np.zeros((H, W), bool)
    b = np.zeros((H, W), bool)
    a[1:4, 1:4] = True
    b[5:8, 4:8] = True
    return {1: a, 2: b}


def test_select_references_cardinality_and_determinism():
    desc = np.random.default_rng(0).standard_normal((8, 8, 3))
    masks = two_masks()
    r = select_references(desc, masks, 4, seed=3)
    assert len(r) == 8 and list(np.bincount(r.labels)) == [0, 4, 4]
    for (u, v), lab in zip(r.pixels, r.labels):
        assert masks[lab][v, u]
    r2 = select_references(desc, masks, 4, seed=3)
    assert np.array_equal(r.descriptors, r2.descriptors) and np.array_equal(r.pixels, r2.pixels)


def test_select_references_errors():
    desc = np.zeros((8, 8, 3))
    with pytest.raises(ManualOutsideMask):
        select_references(desc, two_masks(), 1, mode="manual", manual={1: [(2, 2)], 2: [(0, 0)]})
    masks = two_masks()
    masks[2][:] = False
    with pytest.raises(EmptyMask):
        select_references(desc, masks, 1)


def test_uniform_activation():
    act = activation_map(np.ones((5, 7, 3)), np.zeros(3))
    np.testing.assert_allclose(act, 1 / 35, rtol=1e-12)


def test_concentration_on_three_pixel_map():
    desc = np.array([[[0.0], [0.3], [0.6]]])
    act = activation_map(desc, np.array([0.0]), 0.01)
    assert act[0, 0] > 0.99


def test_tie_break_lowest_index():
    desc = np.array([[[1.0], [0.0]], [[0.0], [2.0]]])
    kp = extract_keypoint(activation_map(desc, [0.0]), desc, [0.0])
    assert kp.pixel == PixelCoord(1.0, 0.0)


@settings(max_examples=200)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 12), st.integers(1, 12))
def test_argmax_equals_exhaustive_scan(seed, D, H, W):
    rng = np.random.default_rng(seed)
    desc = rng.standard_normal((H, W, D))
    ref = rng.standard_normal(D)
    best, bd = None, np.inf
    for v in range(H):
        for u in range(W):
            d = np.sqrt(np.sum((desc[v, u] - ref) ** 2))
            if d < bd:
                best, bd = (u, v), d
    for t in (0.01, 0.05, 1.0):
        act = activation_map(desc, ref, t)
        assert abs(act.sum() - 1) < 1e-6
        kp = extract_keypoint(act, desc, ref)
        assert (kp.pixel.u, kp.pixel.v) == best
        assert kp.min_distance == pytest.approx(bd / np.sqrt(D), rel=1e-12)


def test_distance_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        distance_map(np.zeros((2, 2, 3)), np.zeros(2))


def test_normalize_corners():
    assert normalize_pixels((0, 0), 64, 48) == (-1.0, -1.0)
    assert normalize_pixels((63, 47), 64, 48) == (1.0, 1.0)
    assert normalize_pixels((32, 0), 65, 10) == (0.0, -1.0)
    with pytest.raises(OutOfBounds):
        normalize_pixels((64, 0), 64, 48)


def on_axis_frame():
    scene = build_scene(SceneSpec((SceneObject("sphere", (0, 0, 2), 0.5, 1),), (-3, -3, -3), (3, 3, 3), -10.0))
    return render_frame(scene, Pose.identity(), CameraIntrinsics(50, 50, 32, 32, 65, 65))[0]


def test_lift_center_of_sphere():
    f = on_axis_frame()
    kp = lift_keypoint(Keypoint(PixelCoord(32.0, 32.0), 1.0, 0.0), f, "camera_frame")
    np.testing.assert_allclose(kp.lift, (0, 0, 1.5), atol=1e-6)
    kp2 = lift_keypoint(Keypoint(PixelCoord(30.0, 33.0), 1.0, 0.0), f, "depth_append")
    assert kp2.lift[2] == float(f.depth[33, 30])
    assert kp2.lift[:2] == normalize_pixels((30, 33), 65, 65)


def test_lift_depth_fallbacks():
    f = on_axis_frame()
    depth = f.depth.copy()
    depth[32, 32] = 0
    g = Frame(0, f.rgb, depth, f.pose, f.intr)
    kp = lift_keypoint(Keypoint(PixelCoord(32.0, 32.0), 1.0, 0.0), g)
    assert kp.flags & DEPTH_FROM_NEIGHBOR
    assert kp.depth == float(depth[31, 32])  # first 4-neighbor in row-major order
    far = lift_keypoint(Keypoint(PixelCoord(0.0, 0.0), 1.0, 0.0), g)
    assert far.flags & DEPTH_FALLBACK_MEDIAN and far.depth == 0.0
    assert far.lift[2] == pytest.approx(float(np.median(depth[depth > 0])))


def test_uncertain_flag_and_vector():
    f = on_axis_frame()
    rng = np.random.default_rng(0)
    desc = rng.standard_normal((65, 65, 3))
    masks = {1: f.depth > 0}
    refs = select_references(desc, masks, 2, seed=0)
    kps = extract_keypoints(desc, f, refs, uncertain_above=-1.0)
    assert all(k.flags & UNCERTAIN for k in kps)
    assert all((k.pixel.u, k.pixel.v) == tuple(p) for k, p in zip(kps, refs.pixels))
    vec = keypoint_vector([kps, kps[::-1]])
    assert vec.shape == (12,)
    np.testing.assert_array_equal(vec[:3], kps[0].lift)
    np.testing.assert_array_equal(vec[6:9], kps[1].lift)


def test_reference_frame_self_match(labeled, trained):
    """A trained encoder maps each reference back onto its own pixel (1 px)."""
    from donpipe.descriptor import encode
    ho = labeled[3]
    dmap = encode(trained.params, ho.frames[0])
    refs = select_references(dmap, ho.masks[0], 4, seed=0)
    for ref, (u, v) in zip(refs.descriptors, refs.pixels):
        kp = extract_keypoint(activation_map(dmap, ref), dmap, ref)
        assert np.hypot(kp.pixel.u - u, kp.pixel.v - v) <= 1.0
