"""Run configuration: a YAML file with ``data``, ``model``, ``sampler``, ``train``
and ``eval`` sections. Unknown sections or keys are errors."""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path
from typing import Any

import yaml

from .errors import InvalidInputError
from .model import PRESETS, ConvLayer, ModelSpec
from .recomposer import SamplerConfig
from .training import TrainConfig

# key -> (default, help)
SCHEMA: dict[str, dict[str, tuple[Any, str]]] = {
    "data": {
        "base_images": ("mnist", "'mnist' (bundled digits via mlxtend) or a directory of 8-bit PNGs"),
        "base_count": (1000, "number of MNIST base digits to draw sequences from"),
        "base_offset": (0, "index of the first MNIST digit used"),
        "canvas": (64, "square canvas size the base images are centered on"),
        "num_frames": (20, "frames per synthetic sequence"),
        "max_translation": (10.0, "translation drawn uniformly from [-x, x] pixels per axis"),
        "rotate": (True, "draw a rotation uniformly from [0, 360) degrees"),
        "count": (100, "number of sequences to generate"),
        "seed": (0, "seed for dataset generation"),
        "cut_threshold": (None, "mean-abs frame difference marking a cut; null disables cut filtering"),
    },
    "model": {
        "preset": ("se2mnist-64", f"architecture preset: {', '.join(PRESETS)}"),
        "input_mode": ("pair", "'pair' (consecutive frame pairs) or 'single' (ablation)"),
        "conv_layers": (None, "optional list of [out_channels, kernel, dilation, stride] overriding the preset"),
        "recurrent_hidden": (None, "LSTM hidden units (preset value, 256, when null)"),
        "head_dim": (None, "embedding dimension, the linear head width (preset value, 256, when null)"),
        "input_size": (None, "optional [height, width] overriding the preset"),
    },
    "sampler": {
        "min_len": (3, "shortest recomposed member"),
        "max_len": (5, "longest recomposed member"),
        "configs_enabled": (["SameStartSameSub", "SameStartAdjacent", "DiffStartAdjacent"],
                            "window layouts sampled uniformly"),
        "negatives_per_tuple": (6, "6 (first-vs-second members) or 12 (all cross-type pairs)"),
        "seed": (0, "extra seed mixed into the tuple sampler"),
        "max_span": (None, "largest window extent in frames; default 2 * (max_len - 1)"),
        "max_step": (None, "largest jump between consecutive frames of a member; null = unbounded"),
    },
    "train": {
        "margin": (0.5, "hinge margin m"),
        "distance": ("cosine", "'cosine' or 'euclidean'"),
        "lr": (1e-2, "initial Adam learning rate"),
        "decay_epochs": (30, "multiply lr by decay_factor every this many epochs"),
        "decay_factor": (0.1, "step-decay factor"),
        "batch_sequences": (50, "source sequences per minibatch (6 members each)"),
        "epochs": (30, "training epochs"),
        "seed": (0, "seed for initialization, data split and data order"),
        "val_fraction": (0.1, "fraction of sequences held out for the validation gap"),
        "val_tuples": (200, "tuples sampled from the held-out fold each epoch"),
        "bn_batches": (8, "batches used to re-estimate BatchNorm statistics after each epoch (0 = off)"),
    },
    "eval": {
        "n_tuples": (1000, "tuples for the group-property error"),
        "skip": (1, "frame spacing for nearest-neighbor probes"),
        "probes_per_sequence": (10, "nearest-neighbor probes per test sequence"),
        "out_per_sequence": (20, "out-of-sequence candidates drawn per other sequence"),
        "seed": (1, "seed for evaluation sampling"),
        "max_sequences": (None, "use at most this many test sequences"),
        "positions": (None, "frame positions embedded by 'embed' (default: all frames)"),
    },
}


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for sec, values in (override or {}).items():
        if sec not in SCHEMA:
            raise InvalidInputError(f"{where}: unknown section '{sec}' (known: {', '.join(SCHEMA)})")
        if not isinstance(values, dict):
            raise InvalidInputError(f"{where}: section '{sec}' must be a mapping")
        for k, v in values.items():
            if k not in SCHEMA[sec]:
                raise InvalidInputError(f"{where}: unknown key '{sec}.{k}'")
            out[sec][k] = v
    return out


def load_config(path: str | Path | None) -> dict:
    cfg = defaults()
    if path is None:
        return cfg
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError as exc:
        raise InvalidInputError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidInputError(f"{path}: top level must be a mapping")
    return merge(cfg, raw, str(path))


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    if m["preset"] not in PRESETS:
        raise InvalidInputError(f"unknown model preset '{m['preset']}'")
    base = PRESETS[m["preset"]](m["input_mode"])
    layers = tuple(ConvLayer(*l) for l in m["conv_layers"]) if m["conv_layers"] else base.conv_layers
    size = tuple(m["input_size"]) if m["input_size"] else base.input_size
    hidden = m["recurrent_hidden"] or base.recurrent_hidden
    head = m["head_dim"] or base.head_dim
    return ModelSpec(m["input_mode"], layers, hidden, head, size)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def sampler_config(cfg: dict) -> SamplerConfig:
    s = dict(cfg["sampler"])
    s["configs_enabled"] = tuple(s["configs_enabled"])
    return SamplerConfig(**s)


def describe_keys() -> str:
    lines = ["configuration keys (section.key = default: meaning):"]
    for sec, keys in SCHEMA.items():
        for k, (default, text) in keys.items():
            lines.append(f"  {sec}.{k} = {default!r}: {text}")
    return "\n".join(lines)
