"""Flat ``key = value`` run configuration files.

Blank lines and lines starting with ``#`` are ignored. Every key must be one
of ``KEYS``; values are parsed with the type of the key's default. Dotted
keys configure the ``synth`` and ``gradcheck`` subcommands.
"""

import math
from pathlib import Path

from .data import SynthConfig
from .losses import LossWeights
from .network import ModelConfig, pools_for_count
from .training import RunConfig


class ConfigError(ValueError):
    """The configuration file is malformed or holds an unknown key or bad value."""


# key -> (default, help)
KEYS = {
    "corpus": ("", "corpus root directory"),
    "out": ("", "output directory for logs and checkpoints"),
    "seed": (0, "seed for initialization, dropout and video order"),
    "epochs": (50, "passes over the training videos"),
    "lr": (0.01, "SGD learning rate"),
    "weight_decay": (0.005, "decoupled weight decay"),
    "momentum": (0.0, "heavy-ball momentum"),
    "lr_schedule": ("constant", "constant or cosine"),
    "grad_clip": (0.0, "largest joint gradient L2 norm per step (0: no clipping)"),
    "eval_every": (0, "checkpoint every N epochs (0: only at the end)"),
    "length_mode": ("straight_through", "straight_through or smooth"),
    "classes": (0, "number of classes incl. background (0: infer from the corpus)"),
    "hidden": (128, "channels per temporal convolution block"),
    "n_pools": (3, "max-pool layers in the embedding network, 0..6"),
    "dropout": (0.25, "dropout probability after every block"),
    "J": (100, "source copies per region in the upsampler"),
    "delta": (1.0, "hinge margin of the length regularizer"),
    "dtype": ("float32", "float32 or float64"),
    "lambda_set": (1.0, "weight of the set loss"),
    "lambda_region": (1.0, "weight of the region loss"),
    "lambda_inverse_sparsity": (1.0, "weight of the inverse sparsity regularizer"),
    "lambda_consistency": (1.0, "weight of the temporal consistency loss"),
    "lambda_sct": (1.0, "weight of the self-supervised SCT loss"),
    "lambda_length": (1.0, "weight of the length regularizer"),
    "lambda_jsd": (0.0, "weight of the frame-wise JSD between region and frame branch"),
    "synth.C": (5, "classes incl. background"),
    "synth.D": (16, "feature dimension"),
    "synth.T": (256, "frames per video"),
    "synth.segments_min": (1, "fewest action segments per video"),
    "synth.segments_max": (3, "most action segments per video"),
    "synth.min_length": (8, "shortest segment in frames"),
    "synth.noise": (1.0, "feature noise standard deviation"),
    "synth.smoothing": (5, "moving-average width applied to features"),
    "synth.train": (40, "training videos"),
    "synth.test": (10, "test videos"),
    "synth.seed": (0, "generator seed"),
    "gradcheck.T": (64, "frames of the random instance"),
    "gradcheck.D": (6, "feature dimension"),
    "gradcheck.C": (5, "classes"),
    "gradcheck.M": (3, "action set size"),
    "gradcheck.h": (1e-4, "central difference step"),
    "gradcheck.threshold": (1e-3, "largest accepted relative error"),
    "gradcheck.entries": (16, "random entries checked per tensor"),
    "gradcheck.hidden": (16, "channels of the checked model"),
}


def _coerce(key, text):
    default = KEYS[key][0]
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            v = float(text)
            if not math.isfinite(v):
                raise ValueError
            return v
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {text!r}") from None
    return text


def parse_config(text, source="<config>"):
    """Parse config text into a dict holding every key (defaults filled in)."""
    values = {k: v[0] for k, v in KEYS.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _coerce(key, value)
    return values


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    values = parse_config(text, str(path))
    base = path.parent
    for key in ("corpus", "out"):
        if values[key] and not Path(values[key]).is_absolute():
            values[key] = str(base / values[key])
    return values


def loss_weights(values):
    return LossWeights(set=values["lambda_set"], region=values["lambda_region"],
                       inverse_sparsity=values["lambda_inverse_sparsity"],
                       consistency=values["lambda_consistency"], sct=values["lambda_sct"],
                       length=values["lambda_length"], jsd=values["lambda_jsd"])


def model_config(values, D, C, hidden=None):
    return ModelConfig(D=D, C=C, hidden=hidden or values["hidden"],
                       embed_pools=pools_for_count(values["n_pools"]), dropout=values["dropout"],
                       J=values["J"], delta=values["delta"], dtype=values["dtype"])


def run_config(values, D, C):
    """RunConfig from parsed values; raises ConfigError on invalid combinations."""
    try:
        return RunConfig(model=model_config(values, D, C), weights=loss_weights(values), lr=values["lr"],
                         weight_decay=values["weight_decay"], momentum=values["momentum"],
                         lr_schedule=values["lr_schedule"], grad_clip=values["grad_clip"],
                         epochs=values["epochs"], seed=values["seed"],
                         eval_every=values["eval_every"], length_mode=values["length_mode"],
                         corpus=values["corpus"], out=values["out"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def synth_config(values):
    try:
        return SynthConfig(C=values["synth.C"], D=values["synth.D"], T=values["synth.T"],
                           segments=(values["synth.segments_min"], values["synth.segments_max"]),
                           min_length=values["synth.min_length"], noise=values["synth.noise"],
                           smoothing=values["synth.smoothing"], seed=values["synth.seed"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def describe():
    """One line per key: name, default, help."""
    return "\n".join(f"{k} = {v[0]!r:<20} # {v[1]}" for k, v in KEYS.items())
