"""Dataset, checkpoint and config file formats.

Datasets are line-delimited JSON records; checkpoints are a single JSON
document whose float arrays round-trip bit-exactly (Python serializes
float64 via repr, the shortest form that parses back to the same double).
Configs are TOML with [model], [train] and [synth] sections; unknown keys
are errors.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import ParamStore
from .model import InteractionRecord, ItemParams, ModelConfig, Trajectory
from .synth import SynthConfig, SynthDataset
from .training import TrainConfig, TrainedModel

__all__ = [
    "DataError",
    "CHECKPOINT_VERSION",
    "load_records",
    "save_records",
    "dataset_from_files",
    "save_checkpoint",
    "load_checkpoint",
    "load_config",
    "model_config_from_dict",
    "train_config_from_dict",
    "synth_config_from_dict",
    "write_trajectory_csv",
    "write_grid_csv",
    "save_item_sidecar",
    "load_item_sidecar",
    "save_ability_sidecar",
    "load_ability_sidecar",
]

CHECKPOINT_VERSION = 1


class DataError(ValueError):
    """Malformed input data or config."""


# ---------------------------------------------------------------------------
# dataset records (line-delimited JSON)
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = {"learner", "item", "correct", "step"}
_ALLOWED_KEYS = _REQUIRED_KEYS | {"kc"}


def load_records(path, *, first_attempt_only: bool = False,
                 min_interactions: int | None = None) -> list[InteractionRecord]:
    """Read a dataset file, validating each line and the per-learner step order.

    Optional ingestion filters: keep only each learner's first attempt per
    item, and drop learners with fewer than ``min_interactions`` records
    (both off by default; synthetic data never needs them).
    """
    records: list[InteractionRecord] = []
    seen_steps: dict[tuple[str, int], int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: record must be a JSON object")
            missing = _REQUIRED_KEYS - obj.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            extra = obj.keys() - _ALLOWED_KEYS
            if extra:
                raise DataError(f"{path}:{lineno}: unknown keys {sorted(extra)}")
            if obj["correct"] not in (0, 1):
                raise DataError(f"{path}:{lineno}: correct must be 0 or 1, "
                                f"got {obj['correct']!r}")
            if not isinstance(obj["step"], int) or obj["step"] < 0:
                raise DataError(f"{path}:{lineno}: step must be a nonnegative "
                                f"integer, got {obj['step']!r}")
            key = (str(obj["learner"]), obj["step"])
            if key in seen_steps:
                raise DataError(f"{path}:{lineno}: duplicate step {obj['step']} "
                                f"for learner {obj['learner']!r} "
                                f"(first seen on line {seen_steps[key]})")
            seen_steps[key] = lineno
            kcs = None
            if "kc" in obj:
                kc_val = obj["kc"]
                if not isinstance(kc_val, list) or not all(isinstance(k, str) for k in kc_val):
                    raise DataError(f"{path}:{lineno}: kc must be a list of strings")
                kcs = tuple(kc_val)
            records.append(InteractionRecord(
                learner_id=str(obj["learner"]), item_id=str(obj["item"]),
                correct=int(obj["correct"]), step=obj["step"], kcs=kcs))
    if first_attempt_only:
        records = _first_attempts(records)
    if min_interactions is not None:
        counts: dict[str, int] = {}
        for r in records:
            counts[r.learner_id] = counts.get(r.learner_id, 0) + 1
        records = [r for r in records if counts[r.learner_id] >= min_interactions]
    return records


def _first_attempts(records: list[InteractionRecord]) -> list[InteractionRecord]:
    first: dict[tuple[str, str], InteractionRecord] = {}
    for r in sorted(records, key=lambda r: (r.learner_id, r.step)):
        first.setdefault((r.learner_id, r.item_id), r)
    kept = set(map(id, first.values()))
    return [r for r in records if id(r) in kept]


def save_records(records: Iterable[InteractionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"learner": r.learner_id, "item": r.item_id,
                   "correct": r.correct, "step": r.step}
            if r.kcs is not None:
                obj["kc"] = list(r.kcs)
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# ground-truth sidecars
# ---------------------------------------------------------------------------

def save_item_sidecar(items: dict[str, ItemParams], path) -> None:
    obj = {q: {"a": p.a, "d": p.d} for q, p in sorted(items.items())}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_item_sidecar(path) -> dict[str, ItemParams]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {q: ItemParams(item_id=q, a=float(v["a"]), d=float(v["d"]))
            for q, v in obj.items()}


def save_ability_sidecar(abilities: dict[str, Trajectory], path) -> None:
    obj = {lid: list(traj.theta) for lid, traj in sorted(abilities.items())}
    Path(path).write_text(json.dumps(obj) + "\n", encoding="utf-8")


def load_ability_sidecar(path) -> dict[str, Trajectory]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {lid: Trajectory(learner_id=lid, theta=np.array(v))
            for lid, v in obj.items()}


def dataset_from_files(records_path, items_path=None, abilities_path=None,
                       **load_kwargs) -> SynthDataset:
    """Assemble a SynthDataset-shaped bundle from a dataset file and sidecars."""
    records = load_records(records_path, **load_kwargs)
    items = load_item_sidecar(items_path) if items_path else {}
    abilities = load_ability_sidecar(abilities_path) if abilities_path else {}
    return SynthDataset(records=records, true_items=items, true_abilities=abilities)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path, *, include_train_state: bool = True) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "model": {"sigma_theta": model.model.sigma_theta,
                  "sigma_a": model.model.sigma_a,
                  "sigma_d": model.model.sigma_d},
        "items": list(model.item_ids),
        "params": {name: arr.tolist() for name, arr in model.params.items()},
    }
    if include_train_state and model.train_state is not None:
        doc["train_state"] = model.train_state
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> TrainedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid checkpoint JSON: {e}") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version!r}")
    try:
        cfg = ModelConfig(**doc["model"])
        params = ParamStore({name: np.array(arr, dtype=np.float64)
                             for name, arr in doc["params"].items()})
        model = TrainedModel(params=params, variant=doc["variant"],
                             item_ids=tuple(doc["items"]), model=cfg,
                             train_state=doc.get("train_state"))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint: {e}") from None
    if model.variant not in ("vtirt", "dir_loc", "vibo_poe"):
        raise DataError(f"{path}: unknown variant {model.variant!r}")
    return model


# ---------------------------------------------------------------------------
# TOML configs
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"sigma_theta", "sigma_a", "sigma_d"}
_SYNTH_KEYS = {"n_learners", "n_items", "seed"}
_TRAIN_KEYS = {"variant", "batch_size", "epochs", "seed", "val_fraction",
               "learning_rate", "beta1", "beta2", "eps", "n_samples", "patience"}


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise DataError(f"{path}: invalid TOML: {e}") from None
    unknown = doc.keys() - {"model", "train", "synth"}
    if unknown:
        raise DataError(f"{path}: unknown config sections {sorted(unknown)}")
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS),
                             ("synth", _SYNTH_KEYS)):
        extra = doc.get(section, {}).keys() - allowed
        if extra:
            raise DataError(f"{path}: unknown keys in [{section}]: {sorted(extra)}")
    return doc


def model_config_from_dict(doc: dict) -> ModelConfig:
    try:
        return ModelConfig(**doc.get("model", {}))
    except (TypeError, ValueError) as e:
        raise DataError(f"bad [model] section: {e}") from None


def synth_config_from_dict(doc: dict) -> SynthConfig:
    section = doc.get("synth")
    if section is None:
        raise DataError("config has no [synth] section")
    try:
        return SynthConfig(model=model_config_from_dict(doc), **section)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad [synth] section: {e}") from None


def train_config_from_dict(doc: dict) -> TrainConfig:
    section = dict(doc.get("train", {}))
    try:
        return TrainConfig(model=model_config_from_dict(doc), **section)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad [train] section: {e}") from None


# ---------------------------------------------------------------------------
# CSV exports (round-trip-safe decimal floats via repr)
# ---------------------------------------------------------------------------

def write_trajectory_csv(rows: Iterable[tuple[str, int, float, float]], path) -> None:
    """Rows of (learner, step, mean, variance)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["learner", "step", "mean", "variance"])
        for learner, step, mean, variance in rows:
            writer.writerow([learner, step, repr(float(mean)), repr(float(variance))])


def write_grid_csv(blocks: Sequence[tuple[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
                   path) -> None:
    """Potential-surface export; one block per response value.

    Each block is (correct, a_values, d_values, mu, logvar) with mu/logvar
    shaped (len(a_values), len(d_values)).
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["correct", "a", "d", "mu", "logvar"])
        for correct, a_values, d_values, mu, logvar in blocks:
            for i, a in enumerate(a_values):
                for j, d in enumerate(d_values):
                    writer.writerow([correct, repr(float(a)), repr(float(d)),
                                     repr(float(mu[i, j])), repr(float(logvar[i, j]))])
