import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_tamperlab import models as M
from ecg_tamperlab.models import ModelConfig, ModelKind, build
from ecg_tamperlab.nn import Dense, Tensor, load_weights, save_checkpoint


def test_cnn_layer_summary():
    m = build(ModelKind.CNN, ModelConfig())
    assert M.layer_summary(m) == [
        "Conv(64,k7,relu)", "BN", "Pool", "Drop",
        "Conv(128,k5,relu)", "BN", "Pool", "Drop",
        "Conv(256,k3,relu)", "BN", "Pool", "Drop",
        "Flatten", "Dense128(relu)", "Dense64(relu)", "Dense1(sigmoid)",
    ]


def test_scaled_cnn_shape_and_widths():
    cfg = ModelConfig(scale=0.25)
    m = build("cnn", cfg)
    assert m.input_shape == (512, 1)
    assert [cfg.width(w) for w in (64, 128, 256)] == [16, 32, 64]
    assert M.layer_summary(m)[:1] == ["Conv(16,k7,relu)"]


def test_scale_too_small_rejected():
    with pytest.raises(ValueError):
        ModelConfig(scale=0.02)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_input_shapes(kind):
    t, c = M.input_shape(kind, ModelConfig())
    assert t == 2048
    assert c == (96 if kind.uses_cwt else 1)


def test_wrong_input_shape_rejected():
    m = build(ModelKind.TRAN_DEEP_FFN, ModelConfig(scale=0.05))
    t, c = m.input_shape
    for bad in [(1, t, c + 1), (1, t + 1, c), (t, c)]:
        with pytest.raises(ValueError):
            m(Tensor(np.zeros(bad, dtype=np.float32)))


def test_parse_aliases():
    assert ModelKind.parse("resnet") is ModelKind.RESNET
    assert ModelKind.parse("SiameseFeatCNNTran") is ModelKind.SIAMESE_FEAT_CNN_TRAN
    with pytest.raises(ValueError):
        ModelKind.parse("lstm")


def test_flops_bands_and_order():
    cnn = M.flops_for("CNN").total_flops
    resnet = M.flops_for("ResNet").total_flops
    assert 288e6 / 2 <= cnn <= 288e6 * 2
    assert 728e6 / 2 <= resnet <= 728e6 * 2
    assert resnet > cnn
    assert M.flops_for("TranDeepFFN").total_flops > M.flops_for("TranCNNFFN").total_flops
    assert M.flops_for("CWTFeatCNNTran").total_flops < M.flops_for("TranCNNFFN").total_flops


def test_flops_is_twice_macs():
    r = M.flops_for("CNN", 0.25)
    assert r.total_flops >= 2 * r.total_macs


def test_dense_cost_oracle():
    cost = Dense(96, 96, rng=np.random.default_rng(0)).cost((96,))
    assert cost[0].macs == 96 * 96


@pytest.mark.parametrize("kind", list(ModelKind))
def test_flops_monotone_in_scale(kind):
    totals = [M.flops_for(kind, s).total_flops for s in (0.25, 0.5, 1.0)]
    assert totals[0] < totals[1] < totals[2]


def test_siamese_weight_sharing():
    m = build(ModelKind.SIAMESE_TRAN, ModelConfig(scale=0.05))
    x = np.random.default_rng(1).standard_normal(m.input_shape).astype(np.float32)
    z = M.embed(m, np.stack([x, x]))
    assert z.shape == (2, 128)
    np.testing.assert_array_equal(z[0], z[1])
    d = M.pair_distance(m.eval(), Tensor(x[None]), Tensor(x[None]))
    assert float(d.data[0]) < 1e-5


def test_verify_identity_and_infinite_threshold():
    m = build(ModelKind.SIAMESE_FEAT_CNN_TRAN, ModelConfig(scale=0.05))
    rng = np.random.default_rng(2)
    a = rng.standard_normal(m.input_shape).astype(np.float32)
    b = rng.standard_normal(m.input_shape).astype(np.float32)
    same, dist = M.verify(m, a, a, 0.5)
    assert same and dist == 0.0
    assert M.verify(m, a, b, np.inf)[0]
    with pytest.raises(ValueError):
        M.verify(m, a, b, 0.0)


def test_predict_range_and_determinism():
    m = build(ModelKind.CNN, ModelConfig(scale=0.25, seed=3))
    x = np.random.default_rng(0).uniform(0, 1, (100, *m.input_shape)).astype(np.float32)
    p1, p2 = M.predict(m, x), M.predict(m, x)
    assert p1.shape == (100,)
    assert np.all((p1 >= 0) & (p1 <= 1))
    np.testing.assert_array_equal(p1, p2)
    assert 0.2 < p1.mean() < 0.8


def test_build_is_bit_reproducible():
    cfg = ModelConfig(scale=0.035, seed=9)
    x = Tensor(np.random.default_rng(0).standard_normal((2, *M.input_shape(ModelKind.FEAT_CNN_TRAN_CNN, cfg)))
               .astype(np.float32))
    outs = [build("FeatCNNTranCNN", cfg).eval()(x).data for _ in range(2)]
    np.testing.assert_array_equal(*outs)


def test_predict_rejects_siamese():
    m = build("SiameseTran", ModelConfig(scale=0.05))
    with pytest.raises(ValueError):
        M.predict(m, np.zeros(m.input_shape))


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(scale=0.25, seed=4)
    a, b = build("CNN", cfg), build("CNN", ModelConfig(scale=0.25, seed=5))
    save_checkpoint(a, tmp_path / "w", {"kind": "CNN", **cfg.as_dict()})
    manifest = load_weights(b, tmp_path / "w")
    assert manifest["kind"] == "CNN"
    x = np.random.default_rng(0).uniform(0, 1, (4, *a.input_shape)).astype(np.float32)
    np.testing.assert_array_equal(M.predict(a, x), M.predict(b, x))


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(build("CNN", ModelConfig(scale=0.25)), tmp_path / "w", {})
    with pytest.raises(ValueError):
        load_weights(build("CNN", ModelConfig(scale=0.5)), tmp_path / "w")


@pytest.mark.parametrize("kind", ["CNN", "ResNet"])
def test_gradcheck_small_kinds(kind):
    r = M.gradcheck_model(kind)
    assert r.passed, r
    assert r.n_parameters > 0


def test_gradcheck_detects_corruption():
    r = M.gradcheck_model("CNN", corrupt=True)
    assert not r.passed


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.035, max_value=1.5))
def test_scaled_dimensions_stay_valid(scale):
    cfg = ModelConfig(scale=scale)
    assert cfg.time >= M.MIN_TIME
    for w in (64, 96, 256):
        width = cfg.width(w)
        assert width >= M.MIN_WIDTH and width % 2 == 0
