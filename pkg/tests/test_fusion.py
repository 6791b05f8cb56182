import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import loop_fuse
from posefuse import geometry as geo
from posefuse.errors import DegenerateQuaternion, EmptyEnsemble, LineageMismatch, ShapeMismatch
from posefuse.fusion import (
    FusionOp,
    FusionSpec,
    build_ahl,
    build_hlff,
    build_lf,
    build_mhl,
    early_fuse_weights,
    hlff_from_predictions,
    late_fuse,
    late_fuse_poses,
    retrain_after_sewing,
    sew_into_models,
    signed_geometric_mean,
)
from posefuse.nn import Dense, TrainConfig, TrainingData, build_model


def dense(rng, out=4, inp=4):
    layer = Dense(inp, out, rng=rng, bias_init="uniform")
    layer.params["weight"] = rng.normal(size=(out, inp))
    layer.params["bias"] = rng.normal(size=out)
    return layer


def random_poses(rng, m, n):
    p = rng.normal(size=(m, n, 7)) * np.array([5, 5, 5, 1, 1, 1, 1])
    p[..., 3:] /= np.linalg.norm(p[..., 3:], axis=-1, keepdims=True)
    return p


def clustered_poses(rng, m, n, spread=0.2):
    """Members whose quaternions lie near a common rotation, so every pair is sign-consistent."""
    p = random_poses(rng, m, n)
    centre = random_poses(rng, 1, n)[0, :, 3:]
    q = centre[None] + spread * rng.normal(size=(m, n, 4))
    p[..., 3:] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    signs = rng.choice([-1.0, 1.0], size=(m, n, 1))
    p[..., 3:] *= signs  # stored sign is arbitrary; alignment must undo it
    return p


def small_pair(seed=0):
    return (build_model("A", seed=seed, feature_dim=16), build_model("B", seed=seed, feature_dim=16))


# ---------------------------------------------------------------- early fusion

@pytest.mark.parametrize("op", ["add", "multiply"])
def test_early_fusion_matches_loop_oracle_bitwise(op):
    rng = np.random.default_rng(0)
    a, b = dense(rng), dense(rng)
    fused = early_fuse_weights(a, b, op)
    for k in ("weight", "bias"):
        assert fused.params[k].tobytes() == loop_fuse(a.params[k], b.params[k], op).tobytes()


def test_early_fusion_identities():
    rng = np.random.default_rng(1)
    a = dense(rng)
    zero = dense(rng)
    for k in zero.params:
        zero.params[k] = np.zeros_like(zero.params[k])
    ones = dense(rng)
    for k in ones.params:
        ones.params[k] = np.ones_like(ones.params[k])
    for k in ("weight", "bias"):
        np.testing.assert_array_equal(early_fuse_weights(a, zero, "add").params[k], a.params[k])
        np.testing.assert_array_equal(early_fuse_weights(a, ones, "multiply").params[k], a.params[k])


def test_early_fusion_commutative_and_associative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = dense(rng), dense(rng), dense(rng)
        for op in ("add", "multiply"):
            ab = early_fuse_weights(a, b, op).params["weight"]
            ba = early_fuse_weights(b, a, op).params["weight"]
            assert ab.tobytes() == ba.tobytes()
            left = early_fuse_weights(early_fuse_weights(a, b, op), c, op).params["weight"]
            right = early_fuse_weights(a, early_fuse_weights(b, c, op), op).params["weight"]
            np.testing.assert_allclose(left, right, atol=1e-12)


def test_early_fusion_rejects_bad_inputs():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeMismatch):
        early_fuse_weights(dense(rng, 4, 4), dense(rng, 4, 5), "add")
    with pytest.raises(ValueError):
        early_fuse_weights(dense(rng), dense(rng), "average")


def test_sewing_writes_fused_values_and_leaves_everything_else():
    a, b = small_pair()
    before_a = {k: v.copy() for k, v in a.parameters().items()}
    fused = early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, "add")
    sa, sb = sew_into_models(a, b, fused)
    for m in (sa, sb):
        assert m.backbone.top_dense.weight.tobytes() == fused.weight.tobytes()
        assert m.backbone.top_dense.bias.tobytes() == fused.bias.tobytes()
    assert sa.backbone.top_dense.weight.tobytes() == sb.backbone.top_dense.weight.tobytes()
    for k, v in sa.parameters().items():
        if not k.startswith("backbone.top_dense"):
            assert v.tobytes() == before_a[k].tobytes(), k
    # inputs untouched
    for k, v in a.parameters().items():
        assert v.tobytes() == before_a[k].tobytes()
    assert (sa.name, sb.name) == ("AEFA", "AEFB")
    assert sa.lineage["tag"] == "AEF" and sa.lineage["partner"] == "B"


def test_sewing_twice_doubles_the_fused_values():
    a, b = small_pair(1)
    fused = early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, "add")
    sa, sb = sew_into_models(a, b, fused)
    again = early_fuse_weights(sa.backbone.top_dense, sb.backbone.top_dense, "add")
    expected = loop_fuse(fused.weight, fused.weight, "add")
    assert again.weight.tobytes() == expected.tobytes()
    np.testing.assert_array_equal(again.weight, 2 * fused.weight)


def test_sewing_shape_mismatch():
    a = build_model("A", feature_dim=16)
    b = build_model("B", feature_dim=8)
    with pytest.raises(ShapeMismatch):
        sew_into_models(a, b, early_fuse_weights(a.backbone.top_dense, a.backbone.top_dense, "add"))


def test_retrain_after_sewing():
    a, b = small_pair(2)
    rng = np.random.default_rng(4)
    feats = a.backbone.trunk_forward(rng.normal(size=(20, 3, 16, 16)))
    targets = random_poses(rng, 1, 20)[0]
    data = TrainingData(targets, trunk_features=feats)
    sewn, _ = sew_into_models(a, b, early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, "multiply"))
    same, hist = retrain_after_sewing(sewn, data, TrainConfig(epochs=0))
    assert hist == []
    for k, v in sewn.parameters().items():
        assert v.tobytes() == same.parameters()[k].tobytes()
    r1, h1 = retrain_after_sewing(sewn, data, TrainConfig(epochs=5, seed=1))
    r2, h2 = retrain_after_sewing(sewn, data, TrainConfig(epochs=5, seed=1))
    assert h1 == h2 and r1.lineage["tag"] == "MEF" and r1.lineage["retrained_epochs"] == 5
    with pytest.raises(LineageMismatch):
        retrain_after_sewing(a, data, TrainConfig(epochs=1))


# ----------------------------------------------------------------- late fusion

def test_late_fusion_simple_cases():
    p = geo.Pose(geo.Translation(1, 2, 3), geo.Quaternion(0.5, 0.5, 0.5, 0.5))
    assert late_fuse_poses([p, p]) == p
    a = geo.Pose(geo.Translation(1, 2, 3), geo.Quaternion(1, 0, 0, 0))
    b = geo.Pose(geo.Translation(3, 2, 1), geo.Quaternion(1, 0, 0, 0))
    np.testing.assert_array_equal(late_fuse_poses([a, b]).t.as_array(), [2, 2, 2])
    q = geo.Quaternion(0.5, -0.5, 0.5, 0.5)
    fused = late_fuse_poses([geo.Pose(a.t, q), geo.Pose(a.t, -q)])
    np.testing.assert_allclose(fused.q.as_array(), q.as_array(), atol=1e-15)


def test_average_translation_is_exact_mean_and_quaternion_unit():
    rng = np.random.default_rng(5)
    members = random_poses(rng, 3, 100)
    fused = late_fuse(members, "average")
    np.testing.assert_array_equal(fused[:, :3], (members[0, :, :3] + members[1, :, :3] + members[2, :, :3]) / 3)
    np.testing.assert_allclose(np.linalg.norm(fused[:, 3:], axis=1), 1.0, atol=1e-9)


def test_multiply_translation_is_elementwise_product():
    rng = np.random.default_rng(6)
    members = random_poses(rng, 2, 10)
    fused = late_fuse(members, "multiply")
    np.testing.assert_array_equal(fused[:, :3], members[0, :, :3] * members[1, :, :3])
    geo_fused = late_fuse(members, "multiply", geometric_translation=True)
    np.testing.assert_allclose(geo_fused[:, :3], signed_geometric_mean(members[:, :, :3]))


def test_jensen_inequality_for_average_fusion():
    rng = np.random.default_rng(7)
    worst = -np.inf
    for _ in range(100):
        m = rng.integers(2, 7)
        members = random_poses(rng, m, 100)
        gt = rng.normal(size=(100, 3)) * 5
        fused = late_fuse(members, "average")
        fused_err = np.linalg.norm(fused[:, :3] - gt, axis=1)
        mean_err = np.mean(np.linalg.norm(members[:, :, :3] - gt, axis=2), axis=0)
        worst = max(worst, float(np.max(fused_err - mean_err)))
    assert worst <= 1e-12


def test_fusion_is_permutation_invariant():
    rng = np.random.default_rng(8)
    members = clustered_poses(rng, 4, 50)
    for op in ("average", "multiply"):
        base = late_fuse(members, op)
        for perm in itertools.permutations(range(4)):
            out = late_fuse(members[list(perm)], op)
            np.testing.assert_allclose(out[:, :3], base[:, :3], atol=1e-12)
            # same rotation; the overall sign follows the first member
            np.testing.assert_allclose(geo.sign_align(base[:, 3:], out[:, 3:]), base[:, 3:], atol=1e-12)


def test_fusion_does_not_mutate_inputs():
    rng = np.random.default_rng(9)
    members = random_poses(rng, 3, 5)
    copy = members.copy()
    late_fuse(members, "average")
    late_fuse(members, "multiply")
    np.testing.assert_array_equal(members, copy)


def test_late_fusion_errors():
    rng = np.random.default_rng(10)
    with pytest.raises(EmptyEnsemble):
        late_fuse(random_poses(rng, 1, 3))
    # orthogonal quaternions whose elementwise product vanishes
    a = np.array([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]])
    with pytest.raises(DegenerateQuaternion):
        late_fuse(np.stack([a, b]), "multiply")
    with pytest.raises(ValueError):
        late_fuse(np.stack([a, a]), "add")


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_average_fused_quaternion_is_unit(m, seed):
    members = random_poses(np.random.default_rng(seed), m, 8)
    try:
        fused = late_fuse(members, "average")
    except DegenerateQuaternion:
        return
    np.testing.assert_allclose(np.linalg.norm(fused[:, 3:], axis=1), 1.0, atol=1e-9)


# --------------------------------------------------------------------- hybrids

@pytest.fixture(scope="module")
def sewn_four():
    a, b = small_pair(3)
    aef = sew_into_models(a, b, early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, "add"))
    mef = sew_into_models(a, b, early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, "multiply"))
    batch = np.random.default_rng(11).normal(size=(4, 3, 16, 16))
    return a, b, aef, mef, batch


def test_hybrid_builders(sewn_four):
    a, b, (aa, ab), (ma, mb), batch = sewn_four
    ahl = build_ahl(aa, ab, batch)
    np.testing.assert_allclose(ahl.pose, late_fuse(np.stack([aa.forward(batch), ab.forward(batch)])))
    mhl = build_mhl(ma, mb, batch)
    assert mhl.op is FusionOp.MULTIPLY
    hlff = build_hlff(aa, ab, ma, mb, batch)
    assert hlff.members.shape == (4, 4, 7)
    np.testing.assert_allclose(hlff.pose, late_fuse(hlff.members, "average"))
    hyb = build_hlff(aa, ab, ma, mb, batch, variant="hybrids")
    np.testing.assert_allclose(hyb.pose, late_fuse(np.stack([ahl.pose, mhl.pose])), atol=1e-12)
    lf = build_lf([a, b, aa, ab, ma], batch, threads=2)
    np.testing.assert_allclose(lf.pose, late_fuse(lf.members), atol=0)


def test_hybrid_lineage_guards(sewn_four):
    a, b, (aa, ab), (ma, mb), batch = sewn_four
    with pytest.raises(LineageMismatch):
        build_ahl(aa, mb, batch)
    with pytest.raises(LineageMismatch):
        build_mhl(ma, a, batch)
    with pytest.raises(LineageMismatch):
        build_hlff(ma, mb, aa, ab, batch)
    with pytest.raises(EmptyEnsemble):
        build_lf([a], batch)


def test_identical_members_are_fixed_points():
    rng = np.random.default_rng(12)
    p = random_poses(rng, 1, 6)[0]
    four = np.stack([p] * 4)
    np.testing.assert_allclose(hlff_from_predictions(four).pose, p, atol=1e-15)
    np.testing.assert_allclose(late_fuse(np.stack([p] * 5)), p, atol=1e-15)
    sq = late_fuse(np.stack([p, p]), "multiply")
    np.testing.assert_array_equal(sq[:, :3], p[:, :3] ** 2)


def test_multiplicative_identity_member():
    """Unit translation and the elementwise-product identity direction leave the partner unchanged."""
    rng = np.random.default_rng(13)
    a = random_poses(rng, 1, 5)[0]
    ident = np.tile([1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5], (5, 1))
    fused = late_fuse(np.stack([a, ident]), "multiply")
    np.testing.assert_array_equal(fused[:, :3], a[:, :3])
    np.testing.assert_allclose(np.abs(fused[:, 3:]), np.abs(a[:, 3:]), atol=1e-12)


def test_hlff_permutation_of_members():
    rng = np.random.default_rng(14)
    members = clustered_poses(rng, 4, 20)
    base = hlff_from_predictions(members).pose
    for perm in itertools.permutations(range(4)):
        out = hlff_from_predictions(members[list(perm)]).pose
        np.testing.assert_allclose(out[:, :3], base[:, :3], atol=1e-12)
        np.testing.assert_allclose(geo.sign_align(base[:, 3:], out[:, 3:]), base[:, 3:], atol=1e-12)


def test_fusion_spec_validation():
    spec = FusionSpec("late", "avg", ["a", "b"])
    assert spec.op is FusionOp.AVERAGE and spec.members == ("a", "b")
    with pytest.raises(ValueError):
        FusionSpec("early", "average", ["a", "b"])
    with pytest.raises(ValueError):
        FusionSpec("early", "add", ["a"])
    with pytest.raises(ValueError):
        FusionSpec("sideways", "add", ["a", "b"])
