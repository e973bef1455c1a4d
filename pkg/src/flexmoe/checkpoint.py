"""Portable checkpoints: a versioned JSON header plus little-endian float64 arrays in one ``.npz``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import FlexMoE, ModelConfig
from .training import make_state

FORMAT = "flexmoe-checkpoint"
VERSION = 1


def _le(a):
    return np.ascontiguousarray(a, dtype="<f8")


def save_checkpoint(path, model, state=None, extra=None) -> Path:
    """Write parameters and, when ``state`` is given, optimizer moments, RNG and counters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    shapes = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = _le(p.data)
        shapes[name] = list(p.data.shape)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "byte_order": "little",
        "model_config": model.config.to_dict(),
        "shapes": shapes,
        "extra": extra or {},
    }
    if state is not None:
        opt = state.optimizer
        for name in opt.params:
            arrays[f"adam_m/{name}"] = _le(opt.m[name])
            arrays[f"adam_v/{name}"] = _le(opt.v[name])
        header.update(
            step=state.step,
            epoch=state.epoch,
            adam_steps=opt.steps,
            adam={"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
            rng_state=state.rng.bit_generator.state,
            running=state.running,
        )
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path):
    """Return ``(header, arrays)``; arrays keys keep their ``param/``, ``adam_m/`` prefixes."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if "header" not in arrays:
        raise CheckpointError(f"{path}: missing header")
    header = json.loads(arrays.pop("header").tobytes().decode("utf-8"))
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return header, arrays


def load_model(path):
    """Rebuild the model recorded in a checkpoint."""
    header, arrays = read_checkpoint(path)
    cfg = dict(header["model_config"])
    cfg["modality_names"] = tuple(cfg["modality_names"])
    cfg["input_dims"] = tuple(cfg["input_dims"])
    model = FlexMoE(ModelConfig(**cfg))
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, header, arrays


def restore_state(header, arrays, model, config):
    """Recreate a :class:`~flexmoe.training.TrainState` so training can resume bit-identically."""
    if "step" not in header:
        raise CheckpointError("checkpoint has no optimizer state")
    state = make_state(model, config)
    opt = state.optimizer
    for name in opt.params:
        opt.m[name][...] = arrays[f"adam_m/{name}"]
        opt.v[name][...] = arrays[f"adam_v/{name}"]
        opt.steps[name] = int(header["adam_steps"][name])
    state.rng.bit_generator.state = header["rng_state"]
    state.step = int(header["step"])
    state.epoch = int(header["epoch"])
    state.running = {k: float(v) for k, v in header["running"].items()}
    return state
