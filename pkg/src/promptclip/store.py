"""On-disk artifacts: JSON header + little-endian float32 payload.

Every binary artifact ``name.bin`` has a companion ``name.json`` header with
at least ``kind``, ``version``, ``config_digest`` and ``created_at``, so kind
and version can be read without touching the payload. Files are written to a
temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .encoders import DualEncoder, ModelConfig
from .retrieval import EmbeddingMatrix, MetricReport, reports_from_rows
from .training import TrainConfig

FORMAT_VERSION = 1
DTYPE = np.dtype("<f4")


class ArtifactError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_json(path, obj) -> None:
    atomic_write(path, dump_json(obj))


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def pair_paths(path) -> tuple:
    """(payload .bin, header .json) for either member of the pair."""
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def read_header(path) -> dict:
    _, hpath = pair_paths(path)
    if not hpath.exists():
        raise FileNotFoundError(hpath)
    with open(hpath, encoding="utf-8") as fh:
        header = json.load(fh)
    for key in ("kind", "version"):
        if key not in header:
            raise ArtifactError(f"{hpath}: header lacks {key!r}")
    if int(header["version"]) > FORMAT_VERSION:
        raise ArtifactError(
            f"{hpath}: artifact version {header['version']} is newer than supported version {FORMAT_VERSION}"
        )
    return header


def _read_payload(path, expected_bytes: int) -> bytes:
    bpath, _ = pair_paths(path)
    data = bpath.read_bytes()
    if len(data) != expected_bytes:
        raise ArtifactError(f"{bpath}: payload length mismatch (header says {expected_bytes} bytes, file has {len(data)})")
    return data


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tensors: dict  # name -> float32 ndarray, in layout order
    backend_digest: str
    created_at: str = field(default_factory=now_iso)

    @classmethod
    def from_model(cls, model: DualEncoder, train_config: TrainConfig, created_at: str | None = None) -> "Checkpoint":
        tensors = {n: t.detach().cpu().to(torch.float32).numpy().copy() for n, t in model.checkpoint_tensors().items()}
        return cls(model.config, train_config, tensors, model.backend.digest(), created_at or now_iso())

    def build_model(self) -> DualEncoder:
        model = DualEncoder(self.model_config, seed=self.train_config.seed)
        if model.backend.digest() != self.backend_digest:
            raise ArtifactError("regenerated text backend does not match the checkpoint's backend digest")
        with torch.no_grad():
            for name, param in model.checkpoint_tensors().items():
                src = torch.from_numpy(self.tensors[name].astype(np.float32))
                if tuple(src.shape) != tuple(param.shape):
                    raise ArtifactError(f"tensor {name}: shape {tuple(src.shape)} != model {tuple(param.shape)}")
                param.copy_(src)
        model.eval()
        return model

    @property
    def config_json(self) -> dict:
        return {"model": self.model_config.to_json(), "train": self.train_config.to_json()}

    def header(self) -> dict:
        layout, offset = [], 0
        for name, arr in self.tensors.items():
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.size * DTYPE.itemsize
        mc = self.model_config
        return {
            "kind": "checkpoint",
            "version": FORMAT_VERSION,
            "config_digest": config_digest(self.config_json),
            "created_at": self.created_at,
            "dtype": "float32-le",
            "widths": {"text": mc.backend.width, "embed": mc.embed_dim, "image_in": mc.image_in,
                       "image_hidden": mc.image_hidden, "head_hidden": mc.head_hidden or mc.backend.width},
            "K": int(self.tensors["prompt.vectors"].shape[0]),
            "template": {"prefix_1": mc.prefix_1, "prefix_2": mc.prefix_2, "init_phrase": mc.init_phrase},
            "backend": {**mc.to_json()["backend"], "digest": self.backend_digest},
            "seed": self.train_config.seed,
            "config": self.config_json,
            "tensors": layout,
            "payload_bytes": offset,
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    bpath, hpath = pair_paths(path)
    payload = b"".join(np.ascontiguousarray(a, dtype=DTYPE).tobytes() for a in ckpt.tensors.values())
    atomic_write(bpath, payload)
    write_json(hpath, ckpt.header())


def load_checkpoint(path) -> Checkpoint:
    header = read_header(path)
    if header["kind"] != "checkpoint":
        raise ArtifactError(f"expected a checkpoint, found kind {header['kind']!r}")
    data = _read_payload(path, int(header["payload_bytes"]))
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(data, dtype=DTYPE, count=entry["count"], offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    cfg = header["config"]
    return Checkpoint(ModelConfig.from_json(cfg["model"]), TrainConfig.from_json(cfg["train"]), tensors,
                      header["backend"]["digest"], header["created_at"])


# ---------------------------------------------------------------------------
# Embedding dumps
# ---------------------------------------------------------------------------

def save_embeddings(emb: EmbeddingMatrix, path, config_digest_: str = "", created_at: str | None = None) -> None:
    bpath, hpath = pair_paths(path)
    rows = np.ascontiguousarray(emb.rows, dtype=DTYPE)
    header = {
        "kind": "embeddings", "version": FORMAT_VERSION, "config_digest": config_digest_,
        "created_at": created_at or now_iso(), "dtype": "float32-le", "layout": "row-major",
        "N": int(rows.shape[0]), "D": int(rows.shape[1]), "ids": list(emb.ids),
    }
    atomic_write(bpath, rows.tobytes())
    write_json(hpath, header)


def load_embeddings(path) -> EmbeddingMatrix:
    header = read_header(path)
    if header["kind"] != "embeddings":
        raise ArtifactError(f"expected embeddings, found kind {header['kind']!r}")
    n, d = int(header["N"]), int(header["D"])
    if len(header["ids"]) != n:
        raise ArtifactError(f"header lists {len(header['ids'])} ids for N={n}")
    data = _read_payload(path, n * d * DTYPE.itemsize)
    rows = np.frombuffer(data, dtype=DTYPE).reshape(n, d).astype(np.float32)
    return EmbeddingMatrix(rows, header["ids"])


# ---------------------------------------------------------------------------
# Metric reports
# ---------------------------------------------------------------------------

def save_report(reports, path) -> None:
    """Flat JSON array: one object per (task, K)."""
    rows = [row for rep in reports for row in rep.rows()]
    write_json(path, rows)


def load_report(path) -> list:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise ArtifactError(f"{path}: a metric report is a JSON array")
    return reports_from_rows(rows)


def save(artifact, path) -> None:
    if isinstance(artifact, Checkpoint):
        save_checkpoint(artifact, path)
    elif isinstance(artifact, EmbeddingMatrix):
        save_embeddings(artifact, path)
    elif isinstance(artifact, (list, tuple)) and all(isinstance(r, MetricReport) for r in artifact):
        save_report(artifact, path)
    else:
        raise TypeError(f"cannot save {type(artifact).__name__}")


def load(path):
    """Load any artifact; binary kinds are recognised from their header."""
    p = Path(path)
    if p.suffix == ".json" and not pair_paths(p)[0].exists():
        return load_report(p)
    kind = read_header(p)["kind"]
    if kind == "checkpoint":
        return load_checkpoint(p)
    if kind == "embeddings":
        return load_embeddings(p)
    raise ArtifactError(f"unknown artifact kind {kind!r}")
