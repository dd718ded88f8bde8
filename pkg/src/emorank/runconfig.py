"""Unified run configuration shared by every command.

One JSON document covers feature extraction, the extractor architecture,
training, codebook construction, synthetic data, and the gradient check.
Unknown keys are rejected (typos must not silently fall back to defaults),
every value has a documented default, and the fully resolved document has a
stable hash that output artifacts record as provenance.

Seed precedence: command-line flag > config file > EMORANK_SEED env > 0.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

from .features import FeatureConfig
from .extractor import ExtractorConfig
from .losses import LossWeights
from .synthcorpus import SynthSpec
from .training import TrainConfig

SEED_ENV_VAR = "EMORANK_SEED"


class ConfigError(ValueError):
    """Unknown key, wrong structure, or an invalid value in a config file."""


# the schema: section -> key -> default; None means "no value, optional"
DEFAULTS: dict = {
    "seed": None,
    "features": {
        "sample_rate_hz": 16000,
        "window_ms": 50.0,
        "overlap_ratio": 0.5,
        "n_mels": 80,
        "fmin_hz": 0.0,
        "fmax_hz": None,  # defaults to half the sample rate
    },
    "extractor": {
        "input_dim": 82,
        "hidden_dim": 256,
        "n_fft_blocks": 2,
        "n_heads": 2,
        "conv_kernel": 9,
        "conv_filter_dim": 1024,
        "dropout": 0.1,
        "projector_hidden": 128,
    },
    "train": {
        "iterations": 20000,
        "learning_rate": 1e-6,
        "batch_pairs": 8,
        "checkpoint_every": 0,
        "pair_policy": "same_speaker",
        "alpha": 0.1,
        "beta": 1.0,
    },
    "codebook": {
        "n_bins": 3,
        "policy": "quantile",
        "level_source": "pooled",
    },
    "synth": {
        "n_speakers": 2,
        "n_emotions": 3,
        "utterances_per_cell": 30,
        "frame_length_range": [40, 80],
        "base_pattern_seed": 1234,
        "intensity_range": [0.0, 1.0],
        "noise_sigma": 0.05,
    },
    "gradcheck": {
        "time_frames": 6,
        "input_dim": 8,
        "hidden_dim": 16,
        "n_heads": 2,
        "conv_kernel": 3,
        "conv_filter_dim": 16,
        "projector_hidden": 8,
        "n_emotion_classes": 3,
        "tolerance": 1e-3,
    },
}


def _merge(defaults, supplied, path: str):
    if not isinstance(supplied, dict):
        raise ConfigError(f"config section '{path or '<root>'}' must be an object, "
                          f"got {type(supplied).__name__}")
    unknown = sorted(set(supplied) - set(defaults))
    if unknown:
        known = ", ".join(sorted(defaults))
        where = f" in section '{path}'" if path else ""
        raise ConfigError(f"unknown config key(s) {unknown}{where}; known: {known}")
    out = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            out[key] = _merge(default, supplied.get(key, {}),
                              f"{path}.{key}" if path else key)
        else:
            out[key] = supplied.get(key, copy.deepcopy(default))
    return out


class RunConfig:
    def __init__(self, document: dict | None = None):
        self.doc = _merge(DEFAULTS, document or {}, "")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                document = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls(document)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        return cls.from_file(path) if path else cls()

    def config_hash(self) -> str:
        canonical = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def resolve_seed(self, flag_seed=None) -> int:
        if flag_seed is not None:
            return int(flag_seed)
        if self.doc["seed"] is not None:
            return int(self.doc["seed"])
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
        return 0

    # ---- section materializers -------------------------------------------

    def feature_config(self) -> FeatureConfig:
        f = self.doc["features"]
        return FeatureConfig(sample_rate_hz=f["sample_rate_hz"],
                             window_ms=f["window_ms"],
                             overlap_ratio=f["overlap_ratio"],
                             n_mels=f["n_mels"],
                             fmin_hz=f["fmin_hz"],
                             fmax_hz=f["fmax_hz"])

    def extractor_config(self, n_emotion_classes: int = 2) -> ExtractorConfig:
        e = self.doc["extractor"]
        return ExtractorConfig(input_dim=e["input_dim"],
                               hidden_dim=e["hidden_dim"],
                               n_fft_blocks=e["n_fft_blocks"],
                               n_heads=e["n_heads"],
                               conv_kernel=e["conv_kernel"],
                               conv_filter_dim=e["conv_filter_dim"],
                               dropout=e["dropout"],
                               n_emotion_classes=n_emotion_classes,
                               projector_hidden=e["projector_hidden"])

    def train_config(self, seed: int) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(iterations=t["iterations"],
                           learning_rate=t["learning_rate"],
                           batch_pairs=t["batch_pairs"],
                           seed=seed,
                           checkpoint_every=t["checkpoint_every"],
                           loss_weights=LossWeights(alpha=t["alpha"], beta=t["beta"]),
                           pair_policy=t["pair_policy"])

    def synth_spec(self) -> SynthSpec:
        s = self.doc["synth"]
        return SynthSpec(n_speakers=s["n_speakers"],
                         n_emotions=s["n_emotions"],
                         utterances_per_cell=s["utterances_per_cell"],
                         frame_length_range=tuple(s["frame_length_range"]),
                         base_pattern_seed=s["base_pattern_seed"],
                         intensity_range=tuple(s["intensity_range"]),
                         noise_sigma=s["noise_sigma"])


def describe_defaults() -> str:
    """Human-readable config reference for --help output."""
    lines = ["config file keys and defaults (JSON):"]

    def walk(section, prefix):
        for key, value in section.items():
            if isinstance(value, dict):
                walk(value, f"{prefix}{key}.")
            else:
                lines.append(f"  {prefix}{key} = {json.dumps(value)}")

    walk(DEFAULTS, "")
    lines.append(f"seed precedence: --seed flag > config 'seed' > "
                 f"{SEED_ENV_VAR} env var > 0")
    return "\n".join(lines)
