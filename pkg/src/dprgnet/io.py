"""Binary dataset containers and checkpoints.

File layout (all integers little-endian)::

    magic (8 bytes) | version (uint32) | header length (uint64) | header (UTF-8 JSON)
    | payload (float64, little-endian) | SHA-256 of everything before it (32 bytes)

The header lists every array's name, shape and offset into the payload.
Writes go to a temporary file in the target directory and are renamed into
place, so readers never see a partial file.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, IntegrityError, UnsupportedVersionError
from .types import CHANNELS, StanceSample, SubjectMeta

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"DPRGDATA"
CHECKPOINT_MAGIC = b"DPRGCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32
_DTYPE = np.dtype("<f8")


def _atomic_write(path, blob):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def encode(magic, header, arrays, version=FORMAT_VERSION):
    """Serialise ``header`` (JSON-able dict) and ``arrays`` (name -> ndarray) to bytes."""
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE)
        index.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.size
    header = dict(header, arrays=index, payload_values=offset)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(magic, version, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob, magic, supported=(FORMAT_VERSION,)):
    """Inverse of :func:`encode`; returns ``(header, arrays)``."""
    if len(blob) < _PREFIX.size + _DIGEST:
        raise IntegrityError(f"file is truncated: {len(blob)} bytes is shorter than the fixed envelope")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checksum mismatch: file is corrupted or truncated")
    got_magic, version, head_len = _PREFIX.unpack_from(body)
    if got_magic != magic:
        raise FormatError(f"wrong file type: magic {got_magic!r}, expected {magic!r}")
    if version not in supported:
        raise UnsupportedVersionError(
            f"file format version {version} is not supported by this reader (version {FORMAT_VERSION})"
        )
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"header is unreadable: {exc}") from exc
    payload = np.frombuffer(body, dtype=_DTYPE, offset=start + head_len)
    if payload.size != header.get("payload_values"):
        raise IntegrityError(f"payload holds {payload.size} values, header declares {header.get('payload_values')}")
    arrays = {}
    for item in header.pop("arrays"):
        count = int(np.prod(item["shape"], dtype=np.int64))
        arrays[item["name"]] = payload[item["offset"]:item["offset"] + count].reshape(item["shape"]).astype(np.float64)
    return header, arrays


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- datasets ----------------------------------------------------------------


@dataclass
class DatasetContainer:
    grid: tuple
    stance_len: int
    subjects: list
    samples: list
    channels: tuple = CHANNELS
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, samples, subjects, grid, stance_len, extra=None):
        container = cls(tuple(grid), int(stance_len), list(subjects), list(samples), CHANNELS, dict(extra or {}))
        container.validate()
        return container

    def validate(self):
        known = {s.id for s in self.subjects}
        for i, smp in enumerate(self.samples):
            if smp.pressure.shape != (self.stance_len,) + tuple(self.grid):
                raise ContractError(
                    f"sample {i} has shape {smp.pressure.shape}, header says {(self.stance_len,) + tuple(self.grid)}"
                )
            if smp.subject_id not in known:
                raise ContractError(f"sample {i} refers to unknown subject {smp.subject_id!r}")

    def subject(self, sid):
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def summary(self):
        lines = [
            f"samples: {len(self.samples)}",
            f"grid: {self.grid[0]} x {self.grid[1]}",
            f"stance length: {self.stance_len}",
            f"channels: {', '.join(self.channels)}",
            f"subjects: {len(self.subjects)}",
        ]
        for s in self.subjects:
            n = sum(1 for smp in self.samples if smp.subject_id == s.id)
            lines.append(f"  {s.id}: height {s.height_mm:.1f} mm, weight {s.weight_kg:.2f} kg, {n} samples")
        if self.extra:
            lines.append("extra: " + json.dumps(self.extra, sort_keys=True))
        return "\n".join(lines) + "\n"


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def dataset_to_bytes(container, version=FORMAT_VERSION):
    header = {
        "kind": "dataset",
        "grid": list(container.grid),
        "stance_len": container.stance_len,
        "channels": list(container.channels),
        "subjects": [
            {"id": s.id, "height_mm": s.height_mm, "weight_kg": s.weight_kg, "age_years": s.age_years}
            for s in container.subjects
        ],
        "samples": [
            {"subject_id": s.subject_id, "speed_mps": s.speed_mps, "meta": _json_safe(s.meta)}
            for s in container.samples
        ],
        "extra": _json_safe(container.extra),
    }
    m = len(container.samples)
    shape = (m, container.stance_len) + tuple(container.grid)
    pressure = np.stack([s.pressure for s in container.samples]) if m else np.zeros(shape)
    targets = np.stack([s.targets for s in container.samples]) if m else np.zeros((0, container.stance_len, 6))
    return encode(DATASET_MAGIC, header, {"pressure": pressure, "targets": targets}, version)


def save_dataset(container, path, sidecar=True):
    """Write ``container`` atomically, plus a ``.txt`` summary next to it."""
    container.validate()
    _atomic_write(path, dataset_to_bytes(container))
    if sidecar:
        atomic_write_text(os.fspath(path) + ".txt", container.summary())


def load_dataset(path):
    header, arrays = decode(_read(path), DATASET_MAGIC)
    subjects = [SubjectMeta(s["id"], s["height_mm"], s["weight_kg"], s["age_years"]) for s in header["subjects"]]
    samples = [
        StanceSample(arrays["pressure"][i], arrays["targets"][i], rec["speed_mps"], rec["subject_id"], rec["meta"])
        for i, rec in enumerate(header["samples"])
    ]
    return DatasetContainer(tuple(header["grid"]), header["stance_len"], subjects, samples,
                            tuple(header["channels"]), header.get("extra", {}))


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Model config, weights, priors and (optionally) resumable training state."""

    model_config: dict
    params: dict
    partition: np.ndarray = None
    prior_P: np.ndarray = None
    scaler_mean: np.ndarray = None
    scaler_std: np.ndarray = None
    train_config: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    seed: int = 0


def _split_state(prefix, mapping):
    return {f"{prefix}{k}": v for k, v in mapping.items()}


def checkpoint_to_bytes(ckpt, version=FORMAT_VERSION):
    arrays = _split_state("param/", ckpt.params)
    for name in ("partition", "prior_P", "scaler_mean", "scaler_std"):
        value = getattr(ckpt, name)
        if value is not None:
            arrays[name] = value
    arrays.update(_split_state("extra/", ckpt.arrays))
    header = {
        "kind": "checkpoint",
        "model_config": _json_safe(ckpt.model_config),
        "train_config": _json_safe(ckpt.train_config),
        "training": _json_safe(ckpt.training),
        "seed": ckpt.seed,
    }
    return encode(CHECKPOINT_MAGIC, header, arrays, version)


def save_checkpoint(ckpt, path):
    _atomic_write(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    header, arrays = decode(_read(path), CHECKPOINT_MAGIC)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    partition = arrays.get("partition")
    if partition is not None:
        partition = partition.astype(np.int64)
    return Checkpoint(header["model_config"], params, partition, arrays.get("prior_P"), arrays.get("scaler_mean"),
                      arrays.get("scaler_std"), header.get("train_config", {}), header.get("training", {}),
                      extra, header.get("seed", 0))


# -- training state <-> checkpoint -------------------------------------------


def checkpoint_from_training(model_config, train_config, result, priors=None):
    """Bundle a :class:`TrainResult` (weights plus resumable state) into a :class:`Checkpoint`."""
    state = result.state
    extra = {}
    for k, v in state.adam.m.items():
        extra[f"adam_m/{k}"] = v
    for k, v in state.adam.v.items():
        extra[f"adam_v/{k}"] = v
    for k, v in state.best_params.items():
        extra[f"best/{k}"] = v
    training = {
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "best_loss": state.best_loss,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "history": state.history,
    }
    partition = priors.partition.labels if priors is not None else None
    prior_P = priors.prior.P if priors is not None else None
    return Checkpoint(model_config.to_dict(), result.params.state(), partition, prior_P, state.scaler.mean,
                      state.scaler.std, train_config.to_dict(), training, extra, train_config.seed)


def restore_training(ckpt):
    """``(ModelConfig, TrainConfig, ParameterStore, TrainState, PriorArtifacts or None)`` from a checkpoint."""
    from .model import ModelConfig, ParameterStore
    from .priors import PartitionMap, PriorArtifacts, TemporalPrior
    from .training import AdamState, TargetScaler, TrainConfig, TrainState

    mc = ModelConfig.from_dict(ckpt.model_config)
    tc = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else None
    params = ParameterStore.from_state(ckpt.params)
    t = ckpt.training
    adam = AdamState(int(t.get("adam_step", 0)),
                     {k[len("adam_m/"):]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("adam_m/")},
                     {k[len("adam_v/"):]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("adam_v/")})
    best = {k[len("best/"):]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("best/")}
    scaler = TargetScaler(ckpt.scaler_mean, ckpt.scaler_std)
    state = None
    if t:
        best_loss = t.get("best_loss")
        state = TrainState(int(t["epoch"]), adam, float("inf") if best_loss is None else float(best_loss),
                           int(t["best_epoch"]), int(t["bad_epochs"]), best or dict(ckpt.params),
                           list(t.get("history", [])), scaler)
    priors = None
    if ckpt.partition is not None and ckpt.prior_P is not None:
        priors = PriorArtifacts(PartitionMap(ckpt.partition), TemporalPrior(ckpt.prior_P), None, float("nan"))
    return mc, tc, params, state, priors


# -- raw text ingestion ------------------------------------------------------


def read_pressure_text(path, grid, delimiter=","):
    """Delimited text with one frame per row and ``H * W`` columns (row-major)."""
    data = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    h, w = grid
    if data.shape[1] != h * w:
        raise ContractError(f"{path}: expected {h * w} columns for a {h}x{w} grid, got {data.shape[1]}")
    return data.reshape(-1, h, w)


def read_force_text(path, delimiter=","):
    """Delimited text with six columns: forces (N) then moments (N m)."""
    data = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    if data.shape[1] != 6:
        raise ContractError(f"{path}: expected 6 columns (3 forces, 3 moments), got {data.shape[1]}")
    return data


def read_subject(path):
    """Subject metadata from a JSON object with id, height_mm, weight_kg and optional age_years."""
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    try:
        return SubjectMeta(str(rec["id"]), float(rec["height_mm"]), float(rec["weight_kg"]),
                           float(rec.get("age_years", 30.0)))
    except KeyError as exc:
        raise ContractError(f"{path}: subject record lacks {exc}") from None
