"""Temporal embedding, region estimator and frame branch.

All three subnetworks are stacks of temporal convolution blocks (TCB):
dilated conv (k=3) -> ReLU -> 1x1 conv -> residual add -> dropout.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "sctseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    D: int
    C: int
    hidden: int = 128
    n_embed_blocks: int = 6
    n_region_blocks: int = 4
    embed_pools: tuple = (1, 2, 4)
    region_pools: tuple = (2, 4)
    kernel: int = 3
    dropout: float = 0.25
    J: int = 100
    delta: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        self.embed_pools = tuple(int(b) for b in self.embed_pools)
        self.region_pools = tuple(int(b) for b in self.region_pools)
        if self.D < 1 or self.C < 2:
            raise ValueError(f"need D >= 1 and C >= 2, got D={self.D}, C={self.C}")
        if self.hidden < 2 or self.hidden % 2:
            raise ValueError(f"hidden size must be even and >= 2, got {self.hidden}")
        for b in self.embed_pools:
            if not 1 <= b <= self.n_embed_blocks:
                raise ValueError(f"embedding pool index {b} outside 1..{self.n_embed_blocks}")
        for b in self.region_pools:
            if not 1 <= b <= self.n_region_blocks:
                raise ValueError(f"region pool index {b} outside 1..{self.n_region_blocks}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def embed_dilations(self):
        return [2 ** b for b in range(1, self.n_embed_blocks + 1)]

    @property
    def region_dilations(self):
        B = self.n_embed_blocks
        return [2 ** b for b in range(B + 1, B + self.n_region_blocks + 1)]

    @property
    def downsample(self):
        """Overall factor from frames to regions, i.e. T / K."""
        return 2 ** (len(self.embed_pools) + len(self.region_pools))

    @property
    def embed_downsample(self):
        return 2 ** len(self.embed_pools)

    def to_dict(self):
        d = asdict(self)
        d["embed_pools"] = list(self.embed_pools)
        d["region_pools"] = list(self.region_pools)
        return d


def pools_for_count(n):
    """Pool placement used when varying the number of embedding poolings."""
    if not 0 <= n <= 6:
        raise ValueError(f"number of poolings must be in 0..6, got {n}")
    return tuple(range(1, n + 1))


@dataclass
class ParameterStore:
    """Named weight tensors; names are stable across checkpoints."""

    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        store = cls(config)
        Hd = config.hidden

        def conv(name, k, cin, cout):
            bound = 1.0 / math.sqrt(k * cin)
            store.params[f"{name}.w"] = ad.Tensor(
                rng.uniform(-bound, bound, size=(k, cin, cout)).astype(dtype), requires_grad=True, name=f"{name}.w")
            store.params[f"{name}.b"] = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.b")

        conv("embed.in", 1, config.D, Hd)
        for b in range(1, config.n_embed_blocks + 1):
            conv(f"embed.tcb{b}.dilated", config.kernel, Hd, Hd)
            conv(f"embed.tcb{b}.pointwise", 1, Hd, Hd)
        for b in range(1, config.n_region_blocks + 1):
            conv(f"region.tcb{b}.dilated", config.kernel, Hd, Hd)
            conv(f"region.tcb{b}.pointwise", 1, Hd, Hd)
        conv("region.class", 1, Hd, config.C)
        conv("region.length1", 1, Hd, Hd // 2)
        conv("region.length2", 1, Hd // 2, 1)
        conv("frame.class", 1, Hd, config.C)
        return store

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def length_head_names(self):
        return self.names("region.length")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self):
        other = ParameterStore(self.config)
        for name, p in self.params.items():
            other.params[name] = ad.Tensor(p.data.copy(), requires_grad=True, name=name)
        return other

    def astype(self, dtype):
        cfg = ModelConfig(**{**self.config.to_dict(), "dtype": np.dtype(dtype).name})
        other = ParameterStore(cfg)
        for name, p in self.params.items():
            other.params[name] = ad.Tensor(p.data.astype(dtype), requires_grad=True, name=name)
        return other


class Dropout:
    """Counter-based dropout stream; the Philox state goes into checkpoints."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.Philox(key=self.seed))

    def state(self):
        st = self.rng.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer": [int(c) for c in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
        }

    def set_state(self, state):
        self.seed = int(state["seed"])
        bg = np.random.Philox(key=self.seed)
        st = bg.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = int(state["buffer_pos"])
        bg.state = st
        self.rng = np.random.Generator(bg)


def _conv(x, params, name, dilation=1):
    return ad.conv1d(x, params[f"{name}.w"], params[f"{name}.b"], dilation)


def tcb(x, params, name, dilation, p, rng, training):
    h = ad.relu(_conv(x, params, f"{name}.dilated", dilation))
    h = _conv(h, params, f"{name}.pointwise")
    return ad.dropout(ad.add(x, h), p, rng, training)


def embed(X, params, training=False, rng=None):
    """Map features (T, D) to the hidden sequence Z (T', hidden)."""
    cfg = params.config
    X = ad.tensor(X)
    T = X.shape[0]
    m = cfg.downsample
    if X.ndim != 2 or X.shape[1] != cfg.D:
        raise ValueError(f"expected features of shape (T, {cfg.D}), got {X.shape}")
    if T < m:
        raise ValueError(f"sequence of {T} frames is too short, need at least {m}")
    z = _conv(X, params, "embed.in")
    for b, dil in enumerate(cfg.embed_dilations, start=1):
        z = tcb(z, params, f"embed.tcb{b}", dil, cfg.dropout, rng, training)
        if b in cfg.embed_pools:
            z = ad.maxpool1d(z)
    return z


def region_forward(Z, params, training=False, rng=None):
    """Return region class probabilities A (K, C) and raw lengths L (K,)."""
    cfg = params.config
    need = 2 ** len(cfg.region_pools)
    if Z.shape[0] < need:
        raise ValueError(f"hidden sequence of {Z.shape[0]} steps is too short, need at least {need}")
    z = Z
    for b, dil in enumerate(cfg.region_dilations, start=1):
        z = tcb(z, params, f"region.tcb{b}", dil, cfg.dropout, rng, training)
        if b in cfg.region_pools:
            z = ad.maxpool1d(z)
    A = ad.softmax(_conv(z, params, "region.class"), axis=1)
    h = ad.relu(_conv(z, params, "region.length1"))
    L = ad.reshape(_conv(h, params, "region.length2"), (-1,))
    return A, L


def frame_branch(Z, params, T):
    """Frame-wise class probabilities S (T, C): 1x1 conv, softmax, then linear resize."""
    s = ad.softmax(_conv(Z, params, "frame.class"), axis=1)
    return ad.resize_linear(s, T)


def pad_features(X, multiple):
    """Right-pad by edge replication to a multiple of ``multiple`` frames."""
    X = np.asarray(X)
    T = X.shape[0]
    T_pad = max(multiple, -(-T // multiple) * multiple)
    if T_pad == T:
        return X
    return np.concatenate([X, np.repeat(X[-1:], T_pad - T, axis=0)], axis=0)


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params, extra=None):
    """Write an .npz container: one little-endian array per parameter plus JSON metadata."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": params.config.to_dict(),
        "names": list(params.params),
        "extra": extra or {},
    }
    arrays = {f"param/{n}": p.data.astype(p.data.dtype.newbyteorder("<")) for n, p in params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Return (ParameterStore, extra metadata)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint (format={meta.get('format')!r})")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = ModelConfig(**meta["model"])
    store = ParameterStore(config)
    reference = ParameterStore.init(config)
    for name in meta["names"]:
        if name not in reference.params:
            raise CheckpointError(f"{path}: unexpected parameter {name}")
        if name not in arrays:
            raise CheckpointError(f"{path}: no values stored for parameter {name}")
        arr = arrays[name]
        if arr.shape != reference[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {reference[name].shape}")
        store.params[name] = ad.Tensor(arr.astype(config.dtype), requires_grad=True, name=name)
    missing = set(reference.params) - set(store.params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return store, meta["extra"]
