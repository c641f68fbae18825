import json

import numpy as np
import pytest

from hfthlf.encode import FeatureLayout, decode_target, encode_dataset, fit_normalizer
from hfthlf.ingest import build_vocabulary
from hfthlf.model import (
    BACKBONE_WIDTHS,
    HEAD_WIDTHS,
    BadDim,
    CorruptCheckpoint,
    KindMismatch,
    ModelCheckpoint,
    VersionMismatch,
    build_hft_hlf,
    build_traditional,
    dumps_checkpoint,
    load_checkpoint,
    predict_prices,
    save_checkpoint,
    stack_param_count,
    transfer_backbone,
)
from hfthlf.neural import BatchTooSmall, Mode, ShapeMismatch, mse_loss
from hfthlf.protocol import TrainConfig, train
from hfthlf.synth import CitySpec, UniverseSpec, generate_universe

from helpers import numeric_grad, rel_error


@pytest.fixture(scope="module")
def universe():
    spec = UniverseSpec(cities=(CitySpec("A", 1, 3, 10, 200, 10.0), CitySpec("B", 3, 2, 6, 120, 9.0)), seed=5)
    return generate_universe(spec)


def small_checkpoint(records, rng_seed=0, kind="hft_hlf", epochs=2):
    vocab = build_vocabulary(records)
    norm = fit_normalizer(records)
    layout = FeatureLayout.from_vocabularies(vocab)
    rng = np.random.default_rng(rng_seed)
    build = build_hft_hlf if kind == "hft_hlf" else build_traditional
    model = build(layout.homog_dim, layout.heterog_dim, rng)
    data = encode_dataset(records, norm, layout)
    train(model, data, TrainConfig(0.01, 32, epochs, rng_seed))
    return ModelCheckpoint(model, norm, vocab, layout, {"seed": rng_seed, "source_city": vocab.city})


def test_build_shapes():
    m = build_hft_hlf(35, 1259, np.random.default_rng(0))
    assert m.backbone.dense[0].weight.shape == (200, 35)
    assert m.head.dense[0].weight.shape == (100, 1269)
    assert m.head.output.weight.shape == (1, 10)
    assert m.backbone.widths == BACKBONE_WIDTHS and m.head.widths == HEAD_WIDTHS
    assert not m.backbone_frozen


def test_build_deterministic():
    a = build_hft_hlf(12, 7, np.random.default_rng(3))
    b = build_hft_hlf(12, 7, np.random.default_rng(3))
    np.testing.assert_array_equal(a.backbone.params, b.backbone.params)
    np.testing.assert_array_equal(a.head.params, b.head.params)


def test_build_rejects_bad_dims():
    with pytest.raises(BadDim):
        build_hft_hlf(0, 5, np.random.default_rng(0))
    with pytest.raises(BadDim):
        build_traditional(5, 0, np.random.default_rng(0))


def test_param_count_closed_form():
    m = build_hft_hlf(35, 60, np.random.default_rng(0))
    # backbone: dense (w*in + w) + batch norm (2w) per block
    expected = (
        (200 * 35 + 200 + 400) + (100 * 200 + 100 + 200) + (50 * 100 + 50 + 100)
        + (20 * 50 + 20 + 40) + (10 * 20 + 10 + 20)
        + (100 * 70 + 100 + 200) + (50 * 100 + 50 + 100) + (20 * 50 + 20 + 40)
        + (10 * 20 + 10 + 20) + (1 * 10 + 1)
    )
    assert m.n_params() == expected
    assert stack_param_count(35, BACKBONE_WIDTHS, None) + stack_param_count(70, HEAD_WIDTHS, 1) == expected
    t = build_traditional(35, 60, np.random.default_rng(0))
    assert t.n_params() == stack_param_count(95, BACKBONE_WIDTHS, 1)


def test_forward_shape_and_infer_determinism():
    rng = np.random.default_rng(0)
    m = build_hft_hlf(6, 3, rng)
    xh, xe = rng.standard_normal((5, 6)), rng.standard_normal((5, 3))
    assert m.forward(xh, xe, Mode.TRAIN, rng).shape == (5, 1)
    a = m.forward(xh, xe, Mode.INFER)
    b = m.forward(xh, xe, Mode.INFER)
    assert a.shape == (5, 1)
    np.testing.assert_array_equal(a, b)


def test_forward_errors():
    rng = np.random.default_rng(0)
    m = build_hft_hlf(6, 3, rng)
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((4, 5)), np.zeros((4, 3)), Mode.INFER)
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((4, 6)), np.zeros((3, 3)), Mode.INFER)
    with pytest.raises(BatchTooSmall):
        m.forward(np.zeros((1, 6)), np.zeros((1, 3)), Mode.TRAIN, rng)


def full_gradient_check(model, seed, n=4):
    rng = np.random.default_rng(seed)
    xh = rng.standard_normal((n, model.homog_dim))
    xe = rng.standard_normal((n, model.heterog_dim))
    y = rng.standard_normal(n)
    # dropout is 0, so train-mode forward is deterministic; freeze running stats
    # by restoring them after every evaluation
    stacks = list(model.stacks().values())
    saved = [[(bn.running_mean.copy(), bn.running_var.copy()) for bn in s.bn] for s in stacks]

    def restore():
        for s, sv in zip(stacks, saved):
            for bn, (m, v) in zip(s.bn, sv):
                bn.running_mean[...] = m
                bn.running_var[...] = v

    def loss():
        out = mse_loss(model.forward(xh, xe, Mode.TRAIN, rng)[:, 0], y)[0]
        restore()
        return out

    _, g = mse_loss(model.forward(xh, xe, Mode.TRAIN, rng)[:, 0], y)
    model.backward(g[:, None])
    restore()
    params, grads = model.trainable()
    # Dense biases feeding a batch norm have an exactly zero gradient; central
    # differences return roundoff of order eps * loss / h ~ 1e-10 there, so the
    # floor sits well above that noise and well below any real gradient.
    errs = [rel_error(gr, numeric_grad(loss, p), floor=1e-5) for p, gr in zip(params, grads)]
    return max(errs)


@pytest.mark.parametrize("seed", range(3))
def test_full_hft_hlf_gradient(seed):
    m = build_hft_hlf(6, 3, np.random.default_rng(seed), dropout_rate=0.0)
    assert full_gradient_check(m, seed + 100) <= 1e-4


def test_full_traditional_gradient():
    m = build_traditional(6, 3, np.random.default_rng(1), dropout_rate=0.0)
    assert full_gradient_check(m, 7) <= 1e-4


def test_bias_before_batchnorm_has_zero_gradient():
    rng = np.random.default_rng(4)
    m = build_hft_hlf(6, 3, rng, dropout_rate=0.0)
    _, g = mse_loss(m.forward(rng.standard_normal((8, 6)), rng.standard_normal((8, 3)), Mode.TRAIN, rng)[:, 0],
                    rng.standard_normal(8))
    m.backward(g[:, None])
    for stack in (m.backbone, m.head):
        for grads in stack.dense_grads:
            assert np.max(np.abs(grads.bias)) <= 1e-12
    assert abs(m.head.output_grad.bias[0]) > 1e-6


def test_frozen_model_gradient_covers_head_only():
    m = build_hft_hlf(6, 3, np.random.default_rng(2), dropout_rate=0.0)
    m.backbone_frozen = True
    params, _ = m.trainable()
    assert len(params) == 1 and params[0] is m.head.params
    assert full_gradient_check(m, 3) <= 1e-4


def test_transfer_copies_backbone(universe):
    src = small_checkpoint(universe["A"])
    new = transfer_backbone(src, 17, np.random.default_rng(1))
    assert new.backbone_frozen
    np.testing.assert_array_equal(new.backbone.params, src.model.backbone.params)
    for (m0, v0), (m1, v1) in zip(src.model.backbone.bn_running_stats(), new.backbone.bn_running_stats()):
        np.testing.assert_array_equal(m0, m1)
        np.testing.assert_array_equal(v0, v1)
    assert new.backbone.params is not src.model.backbone.params
    assert new.head.dense[0].weight.shape == (100, 10 + 17)


def test_frozen_backbone_unchanged_by_training(universe):
    src = small_checkpoint(universe["A"])
    tgt = universe["B"]
    vocab = build_vocabulary(tgt)
    layout = src.layout.with_location(vocab)
    model = transfer_backbone(src, layout.heterog_dim, np.random.default_rng(2))
    before = model.backbone.params.copy()
    stats = [(m.copy(), v.copy()) for m, v in model.backbone.bn_running_stats()]
    head_before = model.head.params.copy()
    train(model, encode_dataset(tgt, src.norm, layout), TrainConfig(0.02, 16, 3, 0))
    np.testing.assert_array_equal(model.backbone.params, before)
    for (m0, v0), (m1, v1) in zip(stats, model.backbone.bn_running_stats()):
        np.testing.assert_array_equal(m0, m1)
        np.testing.assert_array_equal(v0, v1)
    assert not np.array_equal(model.head.params, head_before)


def test_transfer_rejects_traditional(universe):
    src = small_checkpoint(universe["A"], kind="traditional")
    with pytest.raises(KindMismatch):
        transfer_backbone(src, 5, np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path, universe):
    ckpt = small_checkpoint(universe["A"])
    path = tmp_path / "m.hfthlf.json"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.kind == "hft_hlf"
    recs = universe["A"][:100]
    np.testing.assert_array_equal(predict_prices(back, recs), predict_prices(ckpt, recs))
    assert dumps_checkpoint(back) == dumps_checkpoint(ckpt)
    doc = json.loads(path.read_text())
    assert set(doc) == {"version", "kind", "dims", "layers", "batchnorm", "norm_stats", "vocab", "layout", "meta"}
    assert doc["version"] == 1


def test_checkpoint_traditional_round_trip(tmp_path, universe):
    ckpt = small_checkpoint(universe["B"], kind="traditional")
    path = tmp_path / "t.hfthlf.json"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.kind == "traditional"
    np.testing.assert_array_equal(predict_prices(back, universe["B"]), predict_prices(ckpt, universe["B"]))


def test_truncated_checkpoint(tmp_path, universe):
    path = tmp_path / "m.hfthlf.json"
    save_checkpoint(small_checkpoint(universe["A"]), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_wrong_version(tmp_path, universe):
    doc = small_checkpoint(universe["A"]).to_dict()
    doc["version"] = 2
    path = tmp_path / "m.hfthlf.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_shape_tampering_is_corrupt(tmp_path, universe):
    doc = small_checkpoint(universe["A"]).to_dict()
    doc["layers"][0]["bias"] = doc["layers"][0]["bias"][:-1]
    path = tmp_path / "m.hfthlf.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.hfthlf.json")


def test_predict_prices_is_composition(universe):
    ckpt = small_checkpoint(universe["A"])
    recs = universe["A"][:50]
    prices = predict_prices(ckpt, recs)
    assert np.all(prices > 0)
    data = encode_dataset(recs, ckpt.norm, ckpt.layout)
    manual = decode_target(ckpt.model.forward(data.homog, data.heterog, Mode.INFER)[:, 0], ckpt.norm)
    np.testing.assert_array_equal(prices, manual)


def test_predict_prices_permutation(universe):
    ckpt = small_checkpoint(universe["A"])
    recs = universe["A"][:40]
    perm = np.random.default_rng(0).permutation(40)
    a = predict_prices(ckpt, recs)
    b = predict_prices(ckpt, [recs[i] for i in perm])
    np.testing.assert_allclose(b, a[perm], rtol=1e-13)
