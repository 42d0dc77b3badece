"""Experiment configuration: one YAML document drives every subcommand.

Unknown keys are rejected (listing the offending paths), every value is
type-checked against the schema default, and the fully-resolved document is
snapshotted into each run directory so any run can be reproduced from its
own output.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

# schema: section -> key -> default (None means "optional, no default type check")
SCHEMA: dict[str, dict] = {
    "seed": 0,
    "dataset": {
        "path": None,
        "synth": {
            "n_subjects": 24,
            "n_tasks": 4,
            "n_rois": 12,
            "volume_shape": [16, 16, 16],
            "t_frames": 64,
            "class_fraction": 0.5,
            "signal_strength": 1.0,
            "voxel_noise": 0.3,
        },
    },
    "graph": {
        "ridge": 1e-3,
        "edge_fraction": 0.05,
    },
    "augment": {
        "p_node_mask": 0.5,
        "p_edge_drop": 0.5,
        "p_roi_mask": 0.1,
        "image_aug": False,
        "per_dimension_node_mask": False,
    },
    "model": {
        "embed_dim": 64,
        "gat_width": 32,
        "cnn_channels": [8, 16, 32, 64],
        "bn_eps": 1e-3,
        "dtype": "float32",
        "no_projection_mlp": False,
        "no_task_invariance": False,
        "no_gnn": False,
        "no_cnn": False,
        "with_image_aug": False,
    },
    "train": {
        "epochs": 30,
        "batch_size": 128,
        "learning_rate": 1e-5,
        "weight_decay": 1e-3,
        "lr_decay_gamma": 0.5,
        "lr_decay_every": 20,
    },
    "downstream": {
        "mode": "probe",
        "phenotype": "group",
        "k_folds": 5,
        "stratify": None,
        "probe_lr": 1e-3,
        "probe_epochs": 100,
        "finetune_lr": 1e-4,
        "finetune_epochs": 10,
        "supervised_lr": 1e-3,
        "supervised_epochs": 30,
        "batch_size": 128,
        "weight_decay": 1e-3,
    },
    "analysis": {
        "phenotypes": ["group", "score"],
        "explain_iterations": 100,
        "explain_step_size": 0.01,
        "explain_sparsity_weight": 0.05,
        "explain_entropy_weight": 0.1,
        "explain_mask_init": 0.9,
        "explain_instances_per_fold": 0,  # 0 = all held-out instances
    },
}


class ConfigError(ValueError):
    pass


def _merge(schema, supplied, path: str, errors: list[str]):
    if not isinstance(schema, dict):
        return _coerce(schema, supplied, path, errors)
    if supplied is None:
        supplied = {}
    if not isinstance(supplied, dict):
        errors.append(f"{path or 'config'}: expected a mapping")
        return {k: _merge(v, None, f"{path}{k}.", errors) if isinstance(v, dict) else v
                for k, v in schema.items()}
    unknown = sorted(set(supplied) - set(schema))
    if unknown:
        errors.append(f"{path or ''}unknown keys: {', '.join(path + k for k in unknown)}")
    out = {}
    for key, default in schema.items():
        if isinstance(default, dict):
            out[key] = _merge(default, supplied.get(key), f"{path}{key}.", errors)
        elif key in supplied:
            out[key] = _coerce(default, supplied[key], f"{path}{key}", errors)
        else:
            out[key] = default
    return out


def _coerce(default, value, path: str, errors: list[str]):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {value!r}")
            return list(default)
        return list(value)
    return value


def resolve_config(supplied: dict | None, seed_override: int | None = None) -> dict:
    """Merge a supplied document over the schema; raise listing every offending key."""
    errors: list[str] = []
    resolved = _merge(SCHEMA, supplied or {}, "", errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    return resolved


def load_config(path: str | Path, seed_override: int | None = None) -> dict:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    return resolve_config(raw, seed_override)


def config_json(resolved: dict) -> str:
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(config_json(resolved).encode()).hexdigest()


# -- typed views over the resolved document ----------------------------------

def synth_config(resolved: dict):
    from .synth import SynthConfig

    s = resolved["dataset"]["synth"]
    g = resolved["graph"]
    return SynthConfig(
        n_subjects=s["n_subjects"], n_tasks=s["n_tasks"], n_rois=s["n_rois"],
        volume_shape=tuple(s["volume_shape"]), t_frames=s["t_frames"],
        class_fraction=s["class_fraction"], signal_strength=s["signal_strength"],
        voxel_noise=s["voxel_noise"], ridge=g["ridge"], edge_fraction=g["edge_fraction"],
    ).validate()


def encoder_config(resolved: dict, n_rois: int, image_shape: tuple[int, int, int]):
    from .model import EncoderConfig

    m = resolved["model"]
    return EncoderConfig(
        n_rois=n_rois, image_shape=tuple(image_shape),
        embed_dim=m["embed_dim"], gat_width=m["gat_width"],
        cnn_channels=tuple(m["cnn_channels"]), bn_eps=m["bn_eps"], dtype=m["dtype"],
        use_projection=not m["no_projection_mlp"],
        use_gnn=not m["no_gnn"], use_cnn=not m["no_cnn"],
    ).validate()


def augment_config(resolved: dict):
    from .augment import AugmentConfig

    a = resolved["augment"]
    return AugmentConfig(
        p_node_mask=a["p_node_mask"], p_edge_drop=a["p_edge_drop"],
        p_roi_mask=a["p_roi_mask"],
        image_aug_enabled=a["image_aug"] or resolved["model"]["with_image_aug"],
        per_dimension_node_mask=a["per_dimension_node_mask"],
    ).validate()


def train_config(resolved: dict):
    from .selfsup import TrainConfig

    t = resolved["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"],
        learning_rate=t["learning_rate"], weight_decay=t["weight_decay"],
        lr_decay_gamma=t["lr_decay_gamma"], lr_decay_every=t["lr_decay_every"],
        task_invariance=not resolved["model"]["no_task_invariance"],
        seed=resolved["seed"],
    ).validate()


def downstream_config(resolved: dict):
    from .downstream import DownstreamConfig

    d = resolved["downstream"]
    return DownstreamConfig(
        probe_epochs=d["probe_epochs"], probe_lr=d["probe_lr"],
        finetune_epochs=d["finetune_epochs"], finetune_lr=d["finetune_lr"],
        supervised_epochs=d["supervised_epochs"], supervised_lr=d["supervised_lr"],
        batch_size=d["batch_size"], weight_decay=d["weight_decay"],
        seed=resolved["seed"],
    )


def explain_config(resolved: dict):
    from .analysis import ExplainConfig

    a = resolved["analysis"]
    return ExplainConfig(
        iterations=a["explain_iterations"], step_size=a["explain_step_size"],
        sparsity_weight=a["explain_sparsity_weight"],
        entropy_weight=a["explain_entropy_weight"],
        mask_init=a["explain_mask_init"],
    ).validate()
