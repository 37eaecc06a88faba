"""On-disk formats.

T4D tensor file (little endian)::

    offset 0   magic   b"T4D1"
    offset 4   version u16   (1)
    offset 6   dtype   u8    (0 = float32)
    offset 7   ndim    u8    (1..6)
    offset 8   dims    ndim x u32
    then       payload row-major float32, 4 * prod(dims) bytes

A dataset is a directory with ``manifest.json`` and one T4D file per sample.
A checkpoint is a directory with ``checkpoint.json`` and one T4D file per
parameter, in ``Model.collect_parameters`` order.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .models import Model, ModelConfig
from .pipeline import Dataset, Sample, SplitPlan
from .train import OptimizerState

MAGIC = b"T4D1"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}
_HEADER = struct.Struct("<4sHBB")

DATASET_FORMAT = "conv4dnet-dataset"
CHECKPOINT_FORMAT = "conv4dnet-checkpoint"


def encode_t4d(tensor) -> bytes:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if not 1 <= arr.ndim <= 6:
        raise ConfigError(f"T4D stores 1..6 dimensional tensors, got {arr.ndim}")
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return _HEADER.pack(MAGIC, VERSION, 0, arr.ndim) + dims + arr.tobytes()


def decode_t4d(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ParseError(f"file is {len(buf)} bytes, shorter than the {_HEADER.size}-byte header",
                         len(buf))
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if dtype not in DTYPE_CODES:
        raise ParseError(f"unsupported dtype code {dtype}", 6)
    if not 1 <= ndim <= 6:
        raise ParseError(f"ndim {ndim} outside 1..6", 7)
    dims_end = _HEADER.size + 4 * ndim
    if len(buf) < dims_end:
        raise ParseError("truncated dimension table", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEADER.size)
    if any(d == 0 for d in dims):
        raise ParseError(f"zero extent in dims {dims}", _HEADER.size)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - dims_end
    if actual < expected:
        raise ParseError(f"truncated payload: {actual} bytes, expected {expected}", len(buf))
    if actual > expected:
        raise ParseError(f"{actual - expected} trailing bytes after payload", dims_end + expected)
    arr = np.frombuffer(buf, dtype=DTYPE_CODES[dtype], count=expected // 4, offset=dims_end)
    return arr.reshape(dims).astype(np.float32)


def write_t4d(path, tensor):
    Path(path).write_bytes(encode_t4d(tensor))


def read_t4d(path) -> np.ndarray:
    return decode_t4d(Path(path).read_bytes())


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_series_csv(path, header, columns):
    """Comma-separated columns with a one-line header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def write_rows_csv(path, rows):
    if not rows:
        Path(path).write_text("")
        return
    header = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)


# -- datasets ----------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir):
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset.samples):
        rel = f"samples/{i:05d}_{s.session_id}.t4d"
        write_t4d(out / rel, s.volume)
        entries.append({"path": rel, "label": int(s.label), "subject_id": s.subject_id,
                        "session_id": s.session_id})
    manifest = {"format": DATASET_FORMAT, "version": 1, "class_names": list(dataset.class_names),
                "geometry": list(dataset.geometry), "provenance": dataset.provenance,
                "samples": entries}
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ConfigError(f"{path} is not a {DATASET_FORMAT} manifest")
    names = tuple(manifest["class_names"])
    geometry = tuple(manifest["geometry"])
    samples = []
    for entry in manifest["samples"]:
        file = root / entry["path"]
        if not file.exists():
            raise FileNotFoundError(f"manifest references missing file {file}")
        vol = read_t4d(file)
        if vol.shape != (1,) + geometry:
            raise ConfigError(f"{file} has shape {vol.shape}, manifest geometry is {geometry}")
        if not 0 <= entry["label"] < len(names):
            raise ConfigError(f"{file}: label {entry['label']} outside {len(names)} classes")
        samples.append(Sample(vol, int(entry["label"]), entry["subject_id"], entry["session_id"]))
    return Dataset(samples, names, manifest.get("provenance", []))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(out_dir, model: Model, class_names, optimizer: OptimizerState | None = None,
                    log_summary=None, split: SplitPlan | None = None, extra=None):
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, value) in enumerate(model.collect_parameters()):
        rel = f"params/{i:04d}.t4d"
        write_t4d(out / rel, value)
        entries.append({"name": name, "file": rel, "shape": list(value.shape)})
    meta = {"format": CHECKPOINT_FORMAT, "version": 1, "model_kind": model.kind,
            "config": model.config.to_dict(), "class_names": list(class_names),
            "parameters": entries, "train_log_summary": log_summary or {}}
    if optimizer is not None:
        (out / "optimizer").mkdir(exist_ok=True)
        moments = []
        for i, name in enumerate(optimizer.m):
            write_t4d(out / f"optimizer/m_{i:04d}.t4d", optimizer.m[name])
            write_t4d(out / f"optimizer/v_{i:04d}.t4d", optimizer.v[name])
            moments.append(name)
        meta["optimizer"] = {**optimizer.hyperparameters(), "t": optimizer.t, "moments": moments}
    if split is not None:
        meta["split"] = split
    if extra:
        meta.update(extra)
    write_json(out / "checkpoint.json", meta)
    return out


def load_checkpoint(in_dir):
    """Return ``(model, meta)``; ``meta`` is the parsed checkpoint.json."""
    root = Path(in_dir)
    path = root / "checkpoint.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint.json in {root}")
    meta = json.loads(path.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    model = Model(meta["model_kind"], ModelConfig.from_dict(meta["config"]))
    expected = [name for name, _ in model.collect_parameters()]
    stored = [e["name"] for e in meta["parameters"]]
    if stored != expected:
        raise ConfigError("checkpoint parameter order does not match the model definition")
    for entry in meta["parameters"]:
        value = read_t4d(root / entry["file"])
        if value.shape != model.params[entry["name"]].shape:
            raise ConfigError(f"parameter {entry['name']} has shape {value.shape}, "
                              f"model expects {model.params[entry['name']].shape}")
        model.params[entry["name"]] = value
    return model, meta


def load_optimizer(in_dir, meta) -> OptimizerState | None:
    opt = meta.get("optimizer")
    if not opt:
        return None
    root = Path(in_dir)
    state = OptimizerState(**{k: opt[k] for k in ("lr", "beta1", "beta2", "eps", "weight_decay")},
                           t=opt["t"])
    for i, name in enumerate(opt["moments"]):
        state.m[name] = read_t4d(root / f"optimizer/m_{i:04d}.t4d")
        state.v[name] = read_t4d(root / f"optimizer/v_{i:04d}.t4d")
    return state
