import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cilab.errors import DimensionError, IntegrityError, NormalizationError, ParameterError, ProtocolError
from cilab.nn import (
    Affine,
    BranchedExtractor,
    ConcatHead,
    CosineClassifier,
    FeatureExtractor,
    LinearClassifier,
    Model,
    Schedule,
    backward,
    classify,
    count_macs,
    cross_entropy,
    cross_entropy_masked,
    distill_loss,
    fit,
    fit_head,
    forward_with_taps,
    load_checkpoint,
    load_model,
    poly_lr,
    save_checkpoint,
    save_model,
    sgd_step,
)
from cilab.numeric import RngStream

from oracles import ce_def, finite_diff, kd_def, log_softmax, rel_error


def small_model(head="cosine", stages=2, seed=0):
    r = RngStream(seed)
    ext = FeatureExtractor.build(5, r.derive("e"), num_stages=stages, width=6, feature_dim=4, layers_per_stage=1)
    if head == "cosine":
        h = CosineClassifier.build(3, 4, r.derive("h"))
    else:
        h = LinearClassifier.build(3, 4, r.derive("h"))
    return Model(ext, h)


# -- forward -------------------------------------------------------------


def test_extractor_structure():
    ext = FeatureExtractor.build(32, RngStream(0))
    assert ext.stages == [0, 1, 2, 3]
    assert [l.d_out for l in ext.layers][-1] == 32
    assert ext.layers[-1].relu is False and all(l.relu for l in ext.layers[:-1])
    assert ext.tap_ids[-1] == "features" and len(ext.tap_ids) == 9
    bound = 1 / np.sqrt(32)
    assert np.abs(ext.layers[0].weight).max() <= bound


def test_zero_network_gives_zero_taps():
    ext = FeatureExtractor.build(4, RngStream(1), 2, 5, 3, 1)
    for l in ext.layers:
        l.weight[:] = 0
        l.bias[:] = 0
    out, taps = forward_with_taps(ext, RngStream(2).normal(size=(7, 4)))
    assert not out.any() and all(not a.any() for _, a in taps.items())


def test_identity_layer_taps():
    x = RngStream(3).normal(size=(6, 3))
    ext = FeatureExtractor([Affine("stage1.fc1", 0, np.eye(3), np.zeros(3), relu=False)])
    out, taps = ext.forward_with_taps(x)
    assert np.array_equal(taps["stage1.fc1"], np.maximum(x, 0))
    assert np.array_equal(out, x) and np.array_equal(taps["features"], x)


def test_forward_matches_layer_oracle():
    r = RngStream(4)
    ext = FeatureExtractor.build(5, r, 2, 7, 3, 1)
    x = r.derive("x").normal(size=(9, 5))
    w1, b1 = ext.layers[0].weight, ext.layers[0].bias
    w2, b2 = ext.layers[1].weight, ext.layers[1].bias
    h1 = np.maximum(x @ w1.T + b1, 0)
    out = h1 @ w2.T + b2
    got, taps = ext.forward_with_taps(x)
    assert np.max(np.abs(got - out)) < 1e-12
    assert np.max(np.abs(taps["stage1.fc1"] - h1)) < 1e-12
    with pytest.raises(DimensionError):
        ext.forward(np.ones((2, 4)))


def test_extractor_chain_check():
    with pytest.raises(DimensionError):
        FeatureExtractor([Affine("a", 0, np.ones((3, 2)), np.zeros(3), True),
                          Affine("b", 1, np.ones((2, 4)), np.zeros(2), False)])


# -- heads ---------------------------------------------------------------


def test_cosine_examples():
    x = np.array([[1.0, 2.0, 0.0]])
    head = CosineClassifier(np.array([[2.0, 4.0, 0.0], [-2.0, 1.0, 5.0]]))
    z = classify(head, x)
    assert abs(z[0, 0] - 24.0) < 1e-12
    assert abs(z[0, 1]) < 1e-12
    with pytest.raises(NormalizationError):
        classify(head, np.zeros((1, 3)))
    with pytest.raises(NormalizationError):
        classify(CosineClassifier(np.zeros((2, 3))), x)


def test_linear_identity():
    f = RngStream(5).normal(size=(4, 3))
    assert np.array_equal(classify(LinearClassifier(np.eye(3), np.zeros(3)), f), f)


@given(st.integers(0, 10_000))
def test_cosine_bounds_and_scale_invariant_argmax(seed):
    r = RngStream(seed)
    f = r.normal(size=(8, 5))
    w = r.normal(size=(4, 5))
    preds = [np.argmax(CosineClassifier(w, s).logits(f), axis=1) for s in (1.0, 24.0, 100.0)]
    assert all(np.array_equal(preds[0], p) for p in preds)
    z = CosineClassifier(w, 24.0).logits(f)
    assert np.all(np.abs(z) <= 24.0 + 1e-12)


def test_concat_head_equals_per_head_logits():
    r = RngStream(6)
    heads = [CosineClassifier.build(k, 4, r.derive(k)) for k in (3, 1, 2)]
    f = r.normal(size=(5, 4))
    cat = ConcatHead(heads)
    expect = np.concatenate([h.logits(f) for h in heads], axis=1)
    assert np.array_equal(cat.logits(f), expect)
    assert cat.num_classes == 6
    assert np.allclose(cat.merged().logits(f), expect, atol=1e-12)


def test_grow_keeps_old_rows():
    r = RngStream(7)
    h = LinearClassifier.build(3, 4, r)
    g = h.grow(2, 6, r.derive("g"))
    assert g.weight.shape == (5, 6)
    assert np.array_equal(g.weight[:3, :4], h.weight)
    assert np.array_equal(g.bias[:3], h.bias)


# -- losses --------------------------------------------------------------


def test_masked_ce_examples():
    z = RngStream(8).normal(size=(6, 5))
    y = np.array([2, 3, 4, 2, 3, 4])
    loss, d = cross_entropy_masked(z, np.full(6, 1), [1])
    assert loss == 0.0 and not d.any()
    loss, _ = cross_entropy_masked(np.zeros((3, 5)), [0, 1, 2], [0, 1, 2])
    assert abs(loss - np.log(3)) < 1e-15
    loss, d = cross_entropy_masked(z, y, {2, 3, 4})
    assert abs(loss - ce_def(z[:, 2:5], y - 2)) < 1e-12
    assert not d[:, :2].any()
    with pytest.raises(ProtocolError):
        cross_entropy_masked(z, y, [3, 4])


def test_masked_ce_full_set_is_plain_ce():
    z = RngStream(9).normal(size=(7, 4))
    y = np.array([0, 1, 2, 3, 0, 1, 2])
    a, _ = cross_entropy_masked(z, y, range(4))
    b, _ = cross_entropy(z, y)
    assert abs(a - b) < 1e-12 and abs(a - ce_def(z, y)) < 1e-12


def test_distill_examples():
    r = RngStream(10)
    s, t = r.normal(size=(6, 4)), r.normal(size=(6, 4))
    assert distill_loss(t, t, 2.0)[0] == 0.0
    assert abs(distill_loss(s, t, 2.0)[0] - kd_def(s, t, 2.0)) < 1e-12
    # the T^2 factor keeps the loss O(1) as T grows; the softened KL itself vanishes
    temps = (1, 2, 4, 8)
    kl = [distill_loss(s, t, temp)[0] / temp ** 2 for temp in temps]
    assert all(a > b for a, b in zip(kl, kl[1:]))
    assert distill_loss(s, t, 1e4)[0] / 1e8 < 1e-8
    with pytest.raises(ParameterError):
        distill_loss(s, t, 0.0)


# -- gradients -----------------------------------------------------------


def _check_grads(model, x, loss_fn):
    _, grads = backward(model, x, loss_fn)
    params = model.named_parameters()
    assert set(grads) == set(model.trainable_parameters())
    for key, g in grads.items():
        fd = finite_diff(lambda: loss_fn(model.logits(x))[0], params[key])
        assert rel_error(g, fd) < 1e-4, key


@pytest.mark.parametrize("head", ["cosine", "linear"])
def test_gradients_masked_ce(head):
    model = small_model(head)
    x = RngStream(11).normal(size=(6, 5))
    y = np.array([1, 2, 1, 2, 2, 1])
    _check_grads(model, x, lambda z: cross_entropy_masked(z, y, [1, 2]))


@pytest.mark.parametrize("head", ["cosine", "linear"])
def test_gradients_distill(head):
    model = small_model(head)
    x = RngStream(12).normal(size=(6, 5))
    teacher = RngStream(13).normal(size=(6, 3))
    _check_grads(model, x, lambda z: distill_loss(z, teacher, 2.0))


def test_gradients_learnable_scale():
    model = small_model()
    model.head = CosineClassifier(model.head.weight, 5.0, learnable_scale=True)
    x = RngStream(14).normal(size=(5, 5))
    y = np.array([0, 1, 2, 0, 1])
    _check_grads(model, x, lambda z: cross_entropy(z, y))


def test_gradients_branched_with_trainable_stem():
    r = RngStream(15)
    base = FeatureExtractor.build(5, r, 2, 6, 4, 1)
    stem, upper = base.split(1)
    ext = BranchedExtractor(stem, [upper, upper.fresh_like(r.derive("b"))])
    ext.branches[0].frozen = True
    model = Model(ext, CosineClassifier.build(3, 8, r.derive("h")))
    x = r.derive("x").normal(size=(6, 5))
    y = np.array([0, 1, 2, 0, 1, 2])
    _check_grads(model, x, lambda z: cross_entropy(z, y))
    _, grads = backward(model, x, lambda z: cross_entropy(z, y))
    assert not any(k.startswith("extractor.branch0") for k in grads)


def test_zero_loss_zero_grads_and_frozen_extractor():
    model = small_model()
    x = RngStream(16).normal(size=(4, 5))
    loss, grads = backward(model, x, lambda z: cross_entropy_masked(z, np.zeros(4, int), [0]))
    assert loss == 0.0 and all(not g.any() for g in grads.values())
    model.extractor.frozen = True
    _, grads = backward(model, x, lambda z: cross_entropy(z, np.zeros(4, int)))
    assert set(grads) == {"head.weight"}


# -- SGD, MACs, training -------------------------------------------------


def test_sgd_examples():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([2.0])}, 0.1, 0.0)
    assert abs(p["w"][0] - 0.8) < 1e-15
    r = RngStream(17)
    w, g = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    p = {"w": w.copy()}
    sgd_step(p, {"w": g}, 0.05, 1e-3)
    assert np.max(np.abs(p["w"] - (w - 0.05 * (g + 1e-3 * w)))) < 1e-15
    before = p["w"].copy()
    sgd_step(p, {"w": g}, 0.0, 1e-3)
    assert np.array_equal(before, p["w"])
    with pytest.raises(ParameterError):
        sgd_step(p, {"w": g}, -1.0)
    with pytest.raises(DimensionError):
        sgd_step(p, {"w": g[:2]}, 0.1)


def test_macs():
    single = FeatureExtractor([Affine("a", 0, np.zeros((5, 10)), np.zeros(5), False)])
    assert count_macs(single) == 50
    ext = FeatureExtractor.build(8, RngStream(0), 2, 6, 4, 1)
    two = BranchedExtractor(None, [ext, ext.fresh_like(RngStream(1))])
    assert count_macs(two) == 2 * count_macs(ext)
    assert count_macs(ext, [LinearClassifier(np.zeros((3, 4)))]) == count_macs(ext) + 12


def test_poly_lr():
    assert poly_lr(0.1, 0, 100) == 0.1
    assert poly_lr(0.1, 100, 100) == 0.0
    assert abs(poly_lr(0.1, 50, 100, 0.9) - 0.1 * 0.5 ** 0.9) < 1e-15


def _train(seed):
    model = small_model(seed=seed)
    r = RngStream(99)
    x = r.normal(size=(40, 5))
    y = r.integers(0, 3, size=40)
    hist = fit(model, x, lambda idx: (lambda z: cross_entropy(z, y[idx])), Schedule(3, batch_size=16), RngStream(5))
    return model, hist


def test_training_is_bitwise_deterministic():
    a, ha = _train(0)
    b, hb = _train(0)
    assert ha == hb
    assert all(np.array_equal(a.named_parameters()[k], b.named_parameters()[k]) for k in a.named_parameters())


def test_param_version_and_freezing():
    model, _ = _train(1)
    assert model.extractor.param_version == 9  # 3 epochs x 3 batches
    model.extractor.frozen = True
    digest = model.extractor.digest()
    feats = model.extractor.forward(RngStream(3).normal(size=(20, 5)))
    y = np.arange(20) % 3
    fit_head(model.head, feats, lambda idx: (lambda z: cross_entropy(z, y[idx])), Schedule(2, batch_size=8), RngStream(4))
    assert model.extractor.param_version == 9 and model.extractor.digest() == digest
    assert model.head.param_version > 9


# -- checkpoints ---------------------------------------------------------


def test_model_checkpoint_roundtrip(tmp_path):
    model, _ = _train(2)
    path = tmp_path / "m.ckpt"
    d = save_model(path, model, {"seed": 2})
    back, header = load_model(path)
    assert back.digest() == model.digest() == d
    assert header["seed"] == 2
    x = RngStream(0).normal(size=(3, 5))
    assert np.array_equal(back.logits(x), model.logits(x))


def test_branched_checkpoint_roundtrip(tmp_path):
    r = RngStream(3)
    base = FeatureExtractor.build(5, r, 3, 6, 4, 1)
    stem, upper = base.split(2)
    model = Model(BranchedExtractor(stem, [upper, upper.fresh_like(r)]),
                  ConcatHead([CosineClassifier.build(2, 8, r), CosineClassifier.build(1, 8, r.derive(1))]))
    save_model(tmp_path / "b.ckpt", model)
    back, _ = load_model(tmp_path / "b.ckpt")
    x = r.normal(size=(4, 5))
    assert np.array_equal(back.logits(x), model.logits(x))


def test_checkpoint_tamper_detected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"a": np.ones((2, 2))}, {})
    tensors, header = load_checkpoint(path)
    tensors["a"][0, 0] = 5.0
    with open(path, "wb") as fh:
        np.savez(fh, a=tensors["a"], __meta__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "missing.ckpt")
