"""Corpus I/O and a synthetic corpus generator.

On-disk layout under a corpus root::

    features/<id>.bin   16-byte header + row-major little-endian float32
    labels/<id>.txt     one class id per frame (optional, evaluation only)
    sets/<id>.txt       one class id per line
    split_train.txt     one video id per line
    split_test.txt

The feature header is four little-endian uint32 words: magic, version, T, D.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

FEATURE_MAGIC = 0x46544353  # b"SCTF" read as little-endian uint32
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4I")


class CorpusFormatError(ValueError):
    """A corpus file could not be parsed; names the file and byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = Path(path)
        self.offset = offset


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray
    action_set: tuple
    labels: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError(f"video {self.id}: features must be (T, D), got {self.features.shape}")
        self.action_set = tuple(sorted({int(a) for a in self.action_set}))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.features):
                raise ValueError(f"video {self.id}: {len(self.labels)} labels for {len(self.features)} frames")

    @property
    def T(self):
        return self.features.shape[0]


@dataclass
class Corpus:
    videos: dict = field(default_factory=dict)
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        ids = {"train": self.train, "test": self.test}.get(name)
        if ids is None:
            raise ValueError(f"unknown split {name!r}")
        return [self.videos[i] for i in ids]

    @property
    def dims(self):
        first = next(iter(self.videos.values()))
        return first.features.shape[1]


# feature files -------------------------------------------------------------

def write_features(path, X):
    X = np.ascontiguousarray(X, dtype="<f4")
    T, D = X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D))
        fh.write(X.tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusFormatError(path, len(raw), f"truncated header ({len(raw)} of {_HEADER.size} bytes)")
    magic, version, T, D = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise CorpusFormatError(path, 0, f"bad magic 0x{magic:08x}")
    if version != FEATURE_VERSION:
        raise CorpusFormatError(path, 4, f"unsupported version {version}")
    expected = _HEADER.size + 4 * T * D
    if len(raw) != expected:
        raise CorpusFormatError(path, min(len(raw), expected),
                                f"expected {expected} bytes for T={T}, D={D}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float32)


def _read_ints(path):
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            text = line.strip()
            if text:
                try:
                    out.append(int(text))
                except ValueError:
                    raise CorpusFormatError(path, offset, f"not an integer: {text[:20]!r}") from None
            offset += len(line)
    return out


def _write_ints(path, values):
    Path(path).write_text("".join(f"{int(v)}\n" for v in values))


def read_action_set(path):
    ids = _read_ints(path)
    if len(set(ids)) != len(ids):
        logger.warning("%s: duplicate action ids removed", path)
    return tuple(sorted(set(ids)))


def save_corpus(corpus, root):
    root = Path(root)
    for sub in ("features", "labels", "sets"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for vid, rec in corpus.videos.items():
        write_features(root / "features" / f"{vid}.bin", rec.features)
        _write_ints(root / "sets" / f"{vid}.txt", rec.action_set)
        if rec.labels is not None:
            _write_ints(root / "labels" / f"{vid}.txt", rec.labels)
    (root / "split_train.txt").write_text("".join(f"{v}\n" for v in corpus.train))
    (root / "split_test.txt").write_text("".join(f"{v}\n" for v in corpus.test))


def _read_split(path):
    if not path.exists():
        return []
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def load_video(root, vid, require_set=True):
    root = Path(root)
    X = read_features(root / "features" / f"{vid}.bin")
    set_path = root / "sets" / f"{vid}.txt"
    label_path = root / "labels" / f"{vid}.txt"
    labels = np.array(_read_ints(label_path), dtype=np.int64) if label_path.exists() else None
    if set_path.exists():
        action_set = read_action_set(set_path)
    elif require_set:
        raise FileNotFoundError(f"missing action set file {set_path} for training video {vid}")
    else:
        action_set = tuple(sorted(set(labels.tolist()))) if labels is not None else ()
    if labels is not None and len(labels) != len(X):
        raise CorpusFormatError(label_path, 0, f"{len(labels)} labels for {len(X)} frames")
    return VideoRecord(vid, X, action_set, labels)


def load_corpus(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    train = _read_split(root / "split_train.txt")
    test = _read_split(root / "split_test.txt")
    if not train and not test:
        train = sorted(p.stem for p in (root / "features").glob("*.bin"))
    corpus = Corpus(train=train, test=test)
    for vid in train:
        corpus.videos[vid] = load_video(root, vid, require_set=True)
    for vid in test:
        if vid not in corpus.videos:
            corpus.videos[vid] = load_video(root, vid, require_set=False)
    return corpus


# synthetic data ------------------------------------------------------------

@dataclass
class SynthConfig:
    """Class-conditional Gaussian features over random segmentations.

    Class 0 is background. Each video has ``segments`` action segments (a
    range, inclusive) with no immediate repeats, optionally framed by short
    background segments.
    """

    C: int = 5
    D: int = 16
    T: int = 256
    segments: tuple = (1, 3)
    min_length: int = 8
    dirichlet: float = 4.0
    background_prob: float = 0.5
    background_scale: float = 0.35
    mean_scale: float = 1.0
    noise: float = 1.0
    smoothing: int = 5
    separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.segments = tuple(int(s) for s in self.segments)
        lo, hi = self.segments
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid segment range {self.segments}")
        if self.C < 2:
            raise ValueError("need at least one action class besides background")
        if self.C < 3 and hi > 1:
            raise ValueError("non-repeating sequences of several actions need C >= 3")
        if (hi + 2) * self.min_length > self.T:
            raise ValueError(
                f"T={self.T} cannot hold {hi + 2} segments of at least {self.min_length} frames")
        if not 0 <= self.background_prob <= 1:
            raise ValueError("background_prob must be in [0, 1]")


def class_means(cfg, rng):
    """Class means whose pairwise distances exceed ``separation * noise``."""
    for _ in range(1000):
        means = rng.normal(0.0, cfg.mean_scale, size=(cfg.C, cfg.D))
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if np.all(d[np.triu_indices(cfg.C, 1)] > cfg.separation * cfg.noise):
            return means
    raise ValueError("could not draw separable class means; raise mean_scale or D")


def _segment_lengths(weights, T, min_length, rng, alpha):
    n = len(weights)
    share = rng.dirichlet(alpha * np.asarray(weights))
    free = T - n * min_length
    raw = share * free
    base = np.floor(raw).astype(int)
    rest = free - base.sum()
    base[np.argsort(-(raw - base), kind="stable")[:rest]] += 1
    return base + min_length


def _smooth(X, width):
    if width <= 1:
        return X
    kernel = np.ones(width) / width
    pad = width // 2
    Xp = np.pad(X, ((pad, width - 1 - pad), (0, 0)), mode="edge")
    return np.stack([np.convolve(Xp[:, d], kernel, mode="valid") for d in range(X.shape[1])], axis=1)


def gen_video(cfg, means, rng, vid):
    lo, hi = cfg.segments
    n_act = int(rng.integers(lo, hi + 1))
    seq = []
    for _ in range(n_act):
        choices = [c for c in range(1, cfg.C) if not seq or c != seq[-1]]
        seq.append(int(rng.choice(choices)))
    weights = [1.0] * n_act
    if rng.random() < cfg.background_prob:
        seq.insert(0, 0)
        weights.insert(0, cfg.background_scale)
    if rng.random() < cfg.background_prob:
        seq.append(0)
        weights.append(cfg.background_scale)
    lengths = _segment_lengths(weights, cfg.T, cfg.min_length, rng, cfg.dirichlet)
    labels = np.repeat(np.array(seq, dtype=np.int64), lengths)
    X = means[labels] + rng.normal(0.0, cfg.noise, size=(cfg.T, cfg.D))
    X = _smooth(X, cfg.smoothing).astype(np.float32)
    return VideoRecord(vid, X, tuple(np.unique(labels).tolist()), labels)


def gen_synthetic(cfg, n_videos, n_test=0):
    """Generate ``n_videos`` training and ``n_test`` test videos, deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    means = class_means(cfg, rng)
    corpus = Corpus()
    for i in range(n_videos + n_test):
        vid = f"vid{i:04d}"
        corpus.videos[vid] = gen_video(cfg, means, rng, vid)
        (corpus.train if i < n_videos else corpus.test).append(vid)
    _check_priors(corpus, cfg)
    return corpus


def class_priors(corpus, split=None):
    """Fraction of frames carrying each class id."""
    videos = corpus.split(split) if split else list(corpus.videos.values())
    counts = np.bincount(np.concatenate([rec.labels for rec in videos]))
    return counts / counts.sum()


def _check_priors(corpus, cfg):
    """Action classes are exchangeable under the generator; warn if their segment counts are not."""
    counts = np.zeros(cfg.C, dtype=np.int64)
    for rec in corpus.videos.values():
        for c in rec.labels[np.r_[True, rec.labels[1:] != rec.labels[:-1]]]:
            counts[c] += 1
    observed = counts[1:]
    if observed.sum() < 5 * len(observed):
        return
    p = stats.chisquare(observed).pvalue
    if p < 1e-3 or not math.isfinite(p):
        logger.warning("synthetic action-class counts %s deviate from uniform (chi2 p=%.2g)",
                       observed.tolist(), p)
