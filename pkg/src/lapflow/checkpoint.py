"""Checkpoint container.

Layout: magic ``LAPF``, u32 version, u64 header length, UTF-8 JSON header,
then little-endian float32 payloads concatenated in header order. The
header records tensor names/shapes/dtype plus the model and schedule
configuration and free-form metadata, so a checkpoint is self-describing
for the sampler and evaluator.
"""

import json
import struct

import numpy as np

from .model import ModelConfig
from .numerics import Tensor
from .schedule import ScheduleSpec

MAGIC = b"LAPF"
VERSION = 1


def _schedule_to_dict(spec: ScheduleSpec):
    return {"K": spec.K, "critical_times": list(spec.critical_times), "path": spec.path}


def _schedule_from_dict(d):
    return ScheduleSpec(K=d["K"], critical_times=tuple(d["critical_times"]), path=d["path"])


def save(path, params, cfg: ModelConfig, spec: ScheduleSpec, ema=None, meta=None):
    """Write parameters (and optionally their EMA shadow) to one file."""
    groups = [("model", params)] + ([("ema", ema)] if ema is not None else [])
    entries = []
    payloads = []
    for gname, group in groups:
        for name, t in group.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t,
                                       dtype="<f4")
            entries.append({"name": f"{gname}/{name}", "shape": list(arr.shape),
                            "dtype": "f32"})
            payloads.append(arr)
    header = {
        "params": entries,
        "model_config": cfg.to_dict(),
        "schedule": _schedule_to_dict(spec),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in payloads:
            f.write(arr.tobytes(order="C"))


def load(path, dtype=np.float32):
    """Read a checkpoint; returns (params, ema_or_None, cfg, spec, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        groups = {"model": {}, "ema": {}}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated payload at {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
            gname, name = entry["name"].split("/", 1)
            groups[gname][name] = Tensor(arr, requires_grad=(gname == "model"))
    cfg = ModelConfig.from_dict(header["model_config"])
    spec = _schedule_from_dict(header["schedule"])
    ema = groups["ema"] or None
    return groups["model"], ema, cfg, spec, header.get("meta", {})
