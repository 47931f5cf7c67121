import csv
import math

import numpy as np
import pytest

from sctseg import losses, metrics, training
from sctseg import upsample as up
from sctseg.data import SynthConfig, VideoRecord, gen_synthetic
from sctseg.losses import LossWeights
from sctseg.network import ModelConfig, ParameterStore, load_checkpoint
from sctseg.training import (
    SGD,
    CompatibilityError,
    NumericError,
    RunConfig,
    evaluate,
    forward,
    gradcheck,
    predict,
    tiny_instance,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(SynthConfig(T=64, D=6, seed=1), 6, 3)


def _config(**kw):
    kw.setdefault("epochs", 2)
    model = ModelConfig(D=6, C=5, hidden=16, dtype=kw.pop("dtype", "float32"))
    return RunConfig(model=model, **kw)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_smoke_one_epoch(tmp_path, corpus):
    params, log = train(_config(epochs=1), corpus.split("train")[:2], out_dir=tmp_path)
    assert len(log) == 1 and math.isfinite(log[0]["total"])
    rows = _read_csv(tmp_path / "train_log.csv")
    assert rows[0] == training.LOG_COLUMNS and len(rows) == 2
    assert len(_read_csv(tmp_path / "loss_terms.csv")) == 1 + len(losses.TERMS) + 1
    back, extra = load_checkpoint(tmp_path / "checkpoint.npz")
    assert extra["epoch"] == 1
    assert all(back[n].data.tobytes() == params[n].data.tobytes() for n in params)


def test_training_is_deterministic(tmp_path, corpus):
    videos = corpus.split("train")
    _, log_a = train(_config(), videos, out_dir=tmp_path / "a")
    _, log_b = train(_config(), videos, out_dir=tmp_path / "b")
    assert log_a == log_b
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    _, log_c = train(_config(seed=1), videos)
    assert log_c != log_a


def test_total_is_logged_weighted_sum(corpus):
    w = LossWeights(set=0.5, region=2.0, sct=0.3)
    _, log = train(_config(epochs=1, weights=w), corpus.split("train"))
    row = log[0]
    assert row["total"] == pytest.approx(sum(getattr(w, t) * row[t] for t in losses.TERMS), rel=1e-6)


def test_length_head_frozen_without_length_terms(corpus):
    w = LossWeights(length=0.0, sct=0.0)
    params = ParameterStore.init(_config().model, seed=0)
    before = {n: params[n].data.copy() for n in params.length_head_names()}
    params, _ = train(_config(weights=w), corpus.split("train"), params=params)
    for n in params.length_head_names():
        np.testing.assert_array_equal(params[n].data, before[n])


def test_length_head_gradient_zero_over_instances():
    w = LossWeights(length=0.0, sct=0.0)
    for seed in range(10):
        rec = tiny_instance(seed=seed)
        params = ParameterStore.init(ModelConfig(D=6, C=5, hidden=16, dtype="float64"), seed=seed)
        rng = np.random.default_rng(seed)
        train_step(params, rec, w, rng, "straight_through")
        for n in params.length_head_names():
            g = params[n].grad
            assert g is None or not np.any(g)
        assert any(params[n].grad is not None and np.any(params[n].grad) for n in params.names("embed"))


@pytest.mark.parametrize("mode", ["straight_through", "smooth"])
def test_sct_alone_reaches_length_head(mode):
    rec = tiny_instance(seed=3)
    params = ParameterStore.init(ModelConfig(D=6, C=5, hidden=16, dtype="float64"), seed=3)
    train_step(params, rec, LossWeights.only("sct"), np.random.default_rng(0), mode)
    assert any(np.any(params[n].grad) for n in params.length_head_names())


def test_gradcheck_passes_on_tiny_model():
    params = ParameterStore.init(ModelConfig(D=6, C=5, hidden=8, dtype="float64"), seed=0)
    result = gradcheck(params, tiny_instance(), LossWeights(), max_entries=4)
    assert result.passed, result.report()
    assert all(result.nonzero[n] for n in params.length_head_names())
    assert "PASS" in result.report()


def test_gradcheck_flags_corrupted_backward(monkeypatch):
    original = up.sample_backward

    def doubled(grad_out, plan):
        gA, g_len = original(grad_out, plan)
        return gA, 2 * g_len

    monkeypatch.setattr(up, "sample_backward", doubled)
    params = ParameterStore.init(ModelConfig(D=6, C=5, hidden=8, dtype="float64"), seed=0)
    result = gradcheck(params, tiny_instance(), LossWeights.only("sct"), max_entries=4)
    assert not result.passed
    assert "region.length2.w" in result.failures
    assert "region.length2.w" in result.report().splitlines()[-1]
    # the class head is unaffected by the length chain
    assert "region.class.w" not in result.failures


def test_non_finite_features_raise_numeric_error(tmp_path, corpus):
    rec = corpus.split("train")[0]
    X = rec.features.copy()
    # two adjacent rows: even dilations keep a single row's NaN on one parity, which max-pool may drop
    X[10:12] = np.nan
    bad = VideoRecord("bad", X, rec.action_set)
    with pytest.raises(NumericError, match="bad"):
        train(_config(epochs=1), [bad], out_dir=tmp_path)
    # the epoch-0 checkpoint is still there and loadable
    _, extra = load_checkpoint(tmp_path / "checkpoint.npz")
    assert extra["epoch"] == 0


def test_compatibility_errors(corpus):
    params = ParameterStore.init(_config().model)
    rec = corpus.split("train")[0]
    with pytest.raises(CompatibilityError, match="D="):
        train(_config(), [VideoRecord("w", np.zeros((64, 3)), (1,))], params=params)
    with pytest.raises(CompatibilityError, match="class ids"):
        train(_config(), [VideoRecord("c", rec.features, (7,))], params=params)
    with pytest.raises(CompatibilityError):
        predict(params, np.zeros((64, 4)))


def test_evaluate_oracle(corpus, monkeypatch):
    params = ParameterStore.init(_config().model)
    videos = corpus.split("test")
    report, rows, preds = evaluate(params, videos)
    hits = sum(int(np.sum(p == v.labels)) for p, v in zip(preds, videos))
    assert report["mof"] == pytest.approx(hits / sum(v.T for v in videos), abs=1e-15)
    assert len(rows) == len(videos)

    lookup = {id(v.features): v.labels for v in videos}
    monkeypatch.setattr(training, "predict_labels", lambda p, X: (lookup[id(X)], None))
    report, _, _ = evaluate(params, videos)
    assert report["mof"] == report["jaccard"] == report["midpoint_hit"] == 1.0


def test_untrained_model_is_near_chance(corpus):
    params = ParameterStore.init(_config().model)
    report, _, _ = evaluate(params, corpus.videos.values())
    assert 0.0 <= report["mof"] <= 0.6


def test_evaluate_needs_labels(corpus):
    params = ParameterStore.init(_config().model)
    rec = corpus.split("train")[0]
    with pytest.raises(ValueError, match="no frame labels"):
        evaluate(params, [VideoRecord("u", rec.features, rec.action_set)])


def test_predict_outputs(tmp_path, corpus):
    params = ParameterStore.init(_config().model)
    X = corpus.split("test")[0].features[:50]
    labels, regions, out = predict(params, X, out_dir=tmp_path)
    assert len(labels) == 50
    np.testing.assert_array_equal(labels, np.argmax(out.Y.data, axis=1))
    assert sum(r[1] for r in regions) == out.T_pad == 64
    assert [int(v) for v in (tmp_path / "labels.txt").read_text().split()] == labels.tolist()
    table = _read_csv(tmp_path / "regions.csv")
    assert table[0] == ["k", "lint", "class", "prob"] and len(table) == len(regions) + 1
    probs = np.array(_read_csv(tmp_path / "frame_probs.csv")[1:], dtype=float)[:, 1:]
    np.testing.assert_array_equal(probs, out.Y.data)


def test_forward_straight_through_is_exact_repetition(rng):
    params = ParameterStore.init(ModelConfig(D=6, C=5, hidden=8, dtype="float64"), seed=2)
    out = forward(params, rng.normal(size=(64, 6)))
    ref = np.repeat(out.A.data, out.lengths.lint, axis=0)
    np.testing.assert_allclose(out.Y.data, ref, atol=1e-12)


def test_sgd_update_rule():
    params = ParameterStore.init(ModelConfig(D=2, C=2, hidden=2, dtype="float64"))
    name = "frame.class.w"
    p = params[name]
    w0 = p.data.copy()
    g = np.ones_like(w0)
    p.grad = g.copy()
    opt = SGD(params, lr=0.1, weight_decay=0.5, momentum=0.9)
    opt.step()
    np.testing.assert_allclose(p.data, w0 - 0.1 * g - 0.1 * 0.5 * w0)
    w1 = p.data.copy()
    opt.step()
    # the buffer is now 0.9 g + g
    np.testing.assert_allclose(p.data, w1 - 0.1 * 1.9 * g - 0.1 * 0.5 * w1)
    untouched = params["embed.in.w"].data.copy()
    assert params["embed.in.w"].grad is None
    np.testing.assert_array_equal(params["embed.in.w"].data, untouched)


def test_sgd_gradient_clipping(rng):
    params = ParameterStore.init(ModelConfig(D=2, C=2, hidden=2, dtype="float64"))
    a, b = params["frame.class.w"], params["frame.class.b"]
    a.grad, b.grad = rng.normal(size=a.shape), rng.normal(size=b.shape)
    norm = np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2))
    opt = SGD(params, lr=1.0, grad_clip=norm / 4)
    assert opt.grad_norm() == pytest.approx(norm, rel=1e-12)
    a0, b0, ga, gb = a.data.copy(), b.data.copy(), a.grad.copy(), b.grad.copy()
    opt.step()
    # both tensors shrink by the same factor, so the direction is kept
    np.testing.assert_allclose(a.data, a0 - ga / 4, atol=1e-12)
    np.testing.assert_allclose(b.data, b0 - gb / 4, atol=1e-12)
    a.grad, b.grad = ga / 100, gb / 100
    a1 = a.data.copy()
    opt.step()
    np.testing.assert_allclose(a.data, a1 - ga / 100, atol=1e-12)


def test_lr_schedule():
    cfg = _config(epochs=4, lr=0.2, lr_schedule="cosine")
    assert [round(cfg.lr_at(e), 12) for e in range(4)] == [0.2, round(0.1 * (1 + math.cos(math.pi / 4)), 12),
                                                           0.1, round(0.1 * (1 + math.cos(3 * math.pi / 4)), 12)]
    assert _config(lr=0.3).lr_at(7) == 0.3


def test_run_config_validation_and_round_trip():
    cfg = _config(weights=LossWeights(jsd=0.5), lr_schedule="cosine")
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        _config(lr=0.0)
    with pytest.raises(ValueError, match="grad_clip"):
        _config(grad_clip=-1.0)
    with pytest.raises(ValueError, match="lr_schedule"):
        _config(lr_schedule="step")
    with pytest.raises(ValueError, match="disabled"):
        _config(weights=LossWeights.only())


def test_resume_from_checkpoint_params(tmp_path, corpus):
    videos = corpus.split("train")
    params, _ = train(_config(epochs=1), videos, out_dir=tmp_path)
    back, _ = load_checkpoint(tmp_path / "checkpoint.npz")
    r1, _, _ = evaluate(params, corpus.split("test"))
    r2, _, _ = evaluate(back, corpus.split("test"))
    assert r1 == r2
    assert metrics.corpus_mof([np.zeros(3)], [np.zeros(3)]) == 1.0
