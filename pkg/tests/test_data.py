import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctseg import data


def _corpus(seed=0, n=6, n_test=2, **kw):
    return data.gen_synthetic(data.SynthConfig(seed=seed, **kw), n, n_test)


def test_generator_is_deterministic():
    a, b = _corpus(seed=3), _corpus(seed=3)
    assert a.train == b.train and a.test == b.test
    for vid in a.videos:
        assert a.videos[vid].features.tobytes() == b.videos[vid].features.tobytes()
        np.testing.assert_array_equal(a.videos[vid].labels, b.videos[vid].labels)
    assert _corpus(seed=4).videos["vid0000"].features.tobytes() != a.videos["vid0000"].features.tobytes()


def test_single_segment_without_background():
    corpus = _corpus(segments=(1, 1), background_prob=0.0, n=20)
    for rec in corpus.videos.values():
        assert len(np.unique(rec.labels)) == 1
        assert len(rec.action_set) == 1


def test_action_set_equals_label_set():
    corpus = _corpus(n=100, n_test=0)
    for rec in corpus.videos.values():
        assert set(rec.action_set) == set(np.unique(rec.labels).tolist())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), lo=st.integers(1, 3), extra=st.integers(0, 2))
def test_generated_segments_respect_config(seed, lo, extra):
    cfg = data.SynthConfig(seed=seed, segments=(lo, lo + extra), T=128, D=4)
    for rec in data.gen_synthetic(cfg, 5).videos.values():
        runs = np.flatnonzero(np.diff(rec.labels)) + 1
        lengths = np.diff(np.concatenate([[0], runs, [cfg.T]]))
        assert lengths.min() >= cfg.min_length
        acts = [c for c in rec.labels[np.r_[0, runs]] if c != 0]
        assert lo <= len(acts) <= lo + extra
        assert rec.features.shape == (cfg.T, cfg.D) and rec.features.dtype == np.float32


def test_class_means_are_separated():
    cfg = data.SynthConfig()
    means = data.class_means(cfg, np.random.default_rng(0))
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[np.triu_indices(cfg.C, 1)].min() > cfg.separation * cfg.noise


def test_infeasible_config():
    with pytest.raises(ValueError, match="cannot hold"):
        data.SynthConfig(T=40, segments=(1, 5), min_length=8)


def test_class_priors_sum_to_one():
    p = data.class_priors(_corpus())
    assert p.sum() == pytest.approx(1.0) and len(p) == 5


def test_round_trip(tmp_path):
    corpus = _corpus()
    data.save_corpus(corpus, tmp_path)
    back = data.load_corpus(tmp_path)
    assert back.train == corpus.train and back.test == corpus.test
    for vid, rec in corpus.videos.items():
        other = back.videos[vid]
        assert other.features.tobytes() == rec.features.tobytes()
        np.testing.assert_array_equal(other.labels, rec.labels)
        assert other.action_set == rec.action_set
        size = (tmp_path / "features" / f"{vid}.bin").stat().st_size
        assert size == 16 + 4 * rec.features.size


def test_feature_header_layout(tmp_path):
    X = np.arange(6, dtype=np.float32).reshape(3, 2)
    data.write_features(tmp_path / "x.bin", X)
    raw = (tmp_path / "x.bin").read_bytes()
    assert struct.unpack("<4I", raw[:16]) == (data.FEATURE_MAGIC, 1, 3, 2)
    assert raw[:4] == b"SCTF"
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4"), X.ravel())


def test_duplicate_ids_deduplicated(tmp_path, caplog):
    path = tmp_path / "set.txt"
    path.write_text("3\n1\n3\n")
    with caplog.at_level(logging.WARNING):
        assert data.read_action_set(path) == (1, 3)
    assert "duplicate" in caplog.text


def test_corrupt_magic(tmp_path):
    path = tmp_path / "x.bin"
    data.write_features(path, np.zeros((2, 2), np.float32))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(data.CorpusFormatError, match="magic") as err:
        data.read_features(path)
    assert err.value.offset == 0 and err.value.path == path


def test_truncated_payload(tmp_path):
    path = tmp_path / "x.bin"
    data.write_features(path, np.zeros((4, 3), np.float32))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(data.CorpusFormatError, match="expected 64 bytes"):
        data.read_features(path)


def test_bad_integer_names_offset(tmp_path):
    path = tmp_path / "labels.txt"
    path.write_text("1\n2\nx7\n")
    with pytest.raises(data.CorpusFormatError) as err:
        data._read_ints(path)
    assert err.value.offset == 4


def test_missing_action_set_for_training_video(tmp_path):
    corpus = _corpus()
    data.save_corpus(corpus, tmp_path)
    (tmp_path / "sets" / f"{corpus.train[0]}.txt").unlink()
    with pytest.raises(FileNotFoundError, match="action set"):
        data.load_corpus(tmp_path)


def test_test_video_without_set_uses_labels(tmp_path):
    corpus = _corpus()
    data.save_corpus(corpus, tmp_path)
    vid = corpus.test[0]
    (tmp_path / "sets" / f"{vid}.txt").unlink()
    assert data.load_corpus(tmp_path).videos[vid].action_set == corpus.videos[vid].action_set


def test_video_record_validation():
    with pytest.raises(ValueError, match="labels"):
        data.VideoRecord("v", np.zeros((4, 2)), (1,), labels=np.zeros(3))
    with pytest.raises(ValueError, match=r"\(T, D\)"):
        data.VideoRecord("v", np.zeros(4), (1,))
