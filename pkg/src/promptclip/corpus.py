"""Image-caption-CUI records: ingestion, label derivation and caption statistics.

Two on-disk layouts are understood:

* ``rocov2-jsonl``: one JSON object per line with exactly the fields
  ``id, image_ref, caption, cuis, semantic_types, split``.
* ``irma-tsv``: tab separated ``id, image_ref, irma_code`` with a header row.

``image_ref`` is either a path (``.npy`` or a JSON list, resolved relative to
the dataset file) or an inline list of floats.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, Union

import numpy as np

SPLITS = ("train", "valid", "test")
ROCO_FIELDS = ("id", "image_ref", "caption", "cuis", "semantic_types", "split")
IRMA_COLUMNS = ("id", "image_ref", "irma_code")
SCHEMAS = ("rocov2-jsonl", "irma-tsv")

ImageRef = Union[str, tuple]


class DatasetError(ValueError):
    """Raised when a dataset file does not parse under its schema."""


@dataclass(frozen=True)
class PairRecord:
    id: str
    image_ref: ImageRef
    caption: str
    cuis: frozenset = frozenset()
    semantic_types: Mapping[str, str] = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "cuis", frozenset(self.cuis))
        if not isinstance(self.image_ref, str):
            object.__setattr__(self, "image_ref", tuple(float(x) for x in self.image_ref))
        stray = set(self.semantic_types) - self.cuis
        if stray:
            raise DatasetError(f"record {self.id}: semantic_types keys not in cuis: {sorted(stray)}")
        if self.split not in SPLITS:
            raise DatasetError(f"record {self.id}: unknown split {self.split!r}")

    def to_json(self) -> dict:
        ref = self.image_ref if isinstance(self.image_ref, str) else list(self.image_ref)
        return {
            "id": self.id,
            "image_ref": ref,
            "caption": self.caption,
            "cuis": sorted(self.cuis),
            "semantic_types": dict(sorted(self.semantic_types.items())),
            "split": self.split,
        }


@dataclass(frozen=True)
class RetrievalLabel:
    record_id: str
    modality: int | None = None
    organ: int | None = None


@dataclass(frozen=True)
class CategoryMap:
    semantic_type: str
    cui_to_class: Mapping[str, int]
    class_names: Sequence[str]

    def __post_init__(self):
        n = len(self.class_names)
        bad = {c: k for c, k in self.cui_to_class.items() if not 0 <= k < n}
        if bad:
            raise ValueError(f"class ids out of range for {n} classes: {bad}")

    @classmethod
    def from_json(cls, path) -> "CategoryMap":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            semantic_type=raw["semantic_type"],
            cui_to_class={k: int(v) for k, v in raw["cui_to_class"].items()},
            class_names=list(raw["class_names"]),
        )

    def to_json(self) -> dict:
        return {
            "semantic_type": self.semantic_type,
            "class_names": list(self.class_names),
            "cui_to_class": dict(sorted(self.cui_to_class.items())),
        }


def default_category_map(axis: str) -> CategoryMap:
    """Load the bundled (editable) ``modality`` or ``organ`` table."""
    if axis not in ("modality", "organ"):
        raise ValueError(f"unknown axis {axis!r}")
    return CategoryMap.from_json(Path(__file__).parent / "data" / f"{axis}_map.json")


# ---------------------------------------------------------------------------
# IRMA codes
# ---------------------------------------------------------------------------

# TTTT-DDD-AAA-BBB: technical (imaging modality), direction, anatomy, biosystem.
IRMA_AXES = {"modality": (0, 4), "direction": (4, 7), "anatomy": (7, 10), "biosystem": (10, 13)}
_IRMA_CHARS = re.compile(r"^[0-9a-zA-Z]{13}$")


def parse_irma_code(code: str) -> str:
    """Return the 13 code characters of ``code`` with separators removed."""
    raw = code.strip()
    parts = raw.split("-")
    if len(parts) > 1 and [len(p) for p in parts] != [4, 3, 3, 3]:
        raise DatasetError(f"malformed IRMA code {code!r}: expected TTTT-DDD-AAA-BBB")
    flat = "".join(parts)
    if not _IRMA_CHARS.match(flat):
        raise DatasetError(f"malformed IRMA code {code!r}: need 13 alphanumeric characters")
    return flat


@dataclass(frozen=True)
class IrmaRecord:
    id: str
    image_ref: ImageRef
    irma_code: str

    def __post_init__(self):
        parse_irma_code(self.irma_code)
        if not isinstance(self.image_ref, str):
            object.__setattr__(self, "image_ref", tuple(float(x) for x in self.image_ref))

    def axis(self, name: str) -> str:
        lo, hi = IRMA_AXES[name]
        return parse_irma_code(self.irma_code)[lo:hi]


def irma_relevance(query: IrmaRecord, candidate: IrmaRecord, axis: str = "anatomy", depth: int | None = None) -> bool:
    """True when both codes agree on ``axis``.

    ``depth`` compares only the leading characters of the axis, which walks up
    the IRMA hierarchy (coarser anatomy groups).
    """
    if axis not in IRMA_AXES:
        raise ValueError(f"unknown IRMA axis {axis!r}")
    a, b = query.axis(axis), candidate.axis(axis)
    if depth is not None:
        a, b = a[:depth], b[:depth]
    return a == b


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _split_from_path(path: Path) -> str | None:
    tokens = re.split(r"[^a-z]+", path.stem.lower())
    for split in SPLITS:
        if split in tokens:
            return split
    if "val" in tokens or "validation" in tokens:
        return "valid"
    return None


def _parse_roco_line(obj, lineno: int, default_split: str | None) -> PairRecord:
    if not isinstance(obj, dict):
        raise DatasetError(f"expected a JSON object at line {lineno}")
    for name in ROCO_FIELDS:
        if name == "split" and default_split is not None:
            continue
        if name not in obj:
            raise DatasetError(f"missing field {name} at line {lineno}")
    extra = set(obj) - set(ROCO_FIELDS)
    if extra:
        raise DatasetError(f"unexpected fields {sorted(extra)} at line {lineno}")
    try:
        return PairRecord(
            id=str(obj["id"]),
            image_ref=obj["image_ref"],
            caption=obj["caption"],
            cuis=frozenset(obj["cuis"]),
            semantic_types=dict(obj["semantic_types"]),
            split=obj.get("split") or default_split,
        )
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{exc} at line {lineno}") from exc


def load_dataset(path, schema: str = "rocov2-jsonl") -> list:
    """Read records in file order.

    Raises :class:`DatasetError` naming the offending line for malformed
    input, and naming the id for duplicates.
    """
    path = Path(path)
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    if not path.exists():
        raise FileNotFoundError(path)

    records: list = []
    seen: set[str] = set()
    default_split = _split_from_path(path)
    with open(path, encoding="utf-8") as fh:
        if schema == "rocov2-jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"invalid JSON at line {lineno}: {exc.msg}") from exc
                rec = _parse_roco_line(obj, lineno, default_split)
                if rec.id in seen:
                    raise DatasetError(f"duplicate id {rec.id!r} at line {lineno}")
                seen.add(rec.id)
                records.append(rec)
        else:
            header = fh.readline().rstrip("\n").split("\t")
            if tuple(header) != IRMA_COLUMNS:
                raise DatasetError(f"bad header at line 1: expected columns {IRMA_COLUMNS}")
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                cols = line.rstrip("\n").split("\t")
                if len(cols) != 3:
                    raise DatasetError(f"expected 3 columns at line {lineno}, got {len(cols)}")
                rid, ref, code = cols
                ref_val = json.loads(ref) if ref.lstrip().startswith("[") else ref
                try:
                    rec = IrmaRecord(rid, ref_val, code)
                except DatasetError as exc:
                    raise DatasetError(f"{exc} at line {lineno}") from exc
                if rid in seen:
                    raise DatasetError(f"duplicate id {rid!r} at line {lineno}")
                seen.add(rid)
                records.append(rec)
    return records


def write_dataset(records: Sequence, path) -> None:
    """Write records in the schema matching their type (inverse of :func:`load_dataset`)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if records and isinstance(records[0], IrmaRecord):
            fh.write("\t".join(IRMA_COLUMNS) + "\n")
            for r in records:
                ref = r.image_ref if isinstance(r.image_ref, str) else json.dumps(list(r.image_ref))
                fh.write(f"{r.id}\t{ref}\t{r.irma_code}\n")
        else:
            for r in records:
                fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def load_image_features(ref: ImageRef, base_dir=None) -> np.ndarray:
    """Resolve an ``image_ref`` to a 1-D float vector."""
    if not isinstance(ref, str):
        return np.asarray(ref, dtype=np.float64)
    p = Path(ref)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    if p.suffix == ".npy":
        return np.asarray(np.load(p), dtype=np.float64).ravel()
    if p.suffix == ".json":
        with open(p, encoding="utf-8") as fh:
            return np.asarray(json.load(fh), dtype=np.float64).ravel()
    raise DatasetError(f"unsupported image_ref {ref!r}; toy mode reads .npy or .json feature vectors")


# ---------------------------------------------------------------------------
# Retrieval labels
# ---------------------------------------------------------------------------

@dataclass
class LabelReport:
    labels: list
    ambiguous: Counter = field(default_factory=Counter)
    unlabeled: Counter = field(default_factory=Counter)


def _axis_class(record: PairRecord, cmap: CategoryMap) -> tuple[int | None, bool]:
    classes = {
        cmap.cui_to_class[c]
        for c in record.cuis
        if c in cmap.cui_to_class and record.semantic_types.get(c, cmap.semantic_type) == cmap.semantic_type
    }
    if len(classes) == 1:
        return classes.pop(), False
    return None, len(classes) > 1


def derive_retrieval_labels(records: Iterable[PairRecord], modality_map: CategoryMap,
                            organ_map: CategoryMap) -> LabelReport:
    """Assign at most one modality and one organ class to each record.

    A record whose CUIs hit more than one class on an axis gets no label on
    that axis and is counted under ``ambiguous[axis]``.
    """
    if modality_map.semantic_type != "T060":
        raise ValueError(f"modality map must use semantic type T060, got {modality_map.semantic_type}")
    if organ_map.semantic_type != "T023":
        raise ValueError(f"organ map must use semantic type T023, got {organ_map.semantic_type}")
    report = LabelReport(labels=[])
    for rec in records:
        mod, mod_amb = _axis_class(rec, modality_map)
        org, org_amb = _axis_class(rec, organ_map)
        report.ambiguous["modality"] += mod_amb
        report.ambiguous["organ"] += org_amb
        report.unlabeled["modality"] += mod is None and not mod_amb
        report.unlabeled["organ"] += org is None and not org_amb
        report.labels.append(RetrievalLabel(rec.id, mod, org))
    return report


# ---------------------------------------------------------------------------
# Caption statistics
# ---------------------------------------------------------------------------

class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list: ...


class WhitespaceTokenizer:
    def tokenize(self, text: str) -> list:
        return text.split()


@dataclass
class CaptionLengthStats:
    n: int
    mean: float
    lengths: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    exceedance: dict

    def rows(self):
        """(limit, n_over, fraction) rows for delimited output."""
        for limit, frac in self.exceedance.items():
            yield limit, int(np.sum(self.lengths > limit)), frac


def caption_length_stats(records: Sequence[PairRecord], tokenizer: Tokenizer | None = None,
                         limits: Sequence[int] = (77, 512), bin_width: int = 8) -> CaptionLengthStats:
    """Mean token length, histogram and fraction of captions longer than each limit."""
    if not records:
        raise ValueError("caption_length_stats needs at least one record")
    tokenizer = tokenizer or WhitespaceTokenizer()
    lengths = np.array([len(tokenizer.tokenize(r.caption)) for r in records], dtype=np.int64)
    top = int(lengths.max()) + bin_width
    edges = np.arange(0, top - top % bin_width + bin_width, bin_width)
    counts, edges = np.histogram(lengths, bins=edges)
    exceed = {int(L): float(np.mean(lengths > L)) for L in limits}
    return CaptionLengthStats(len(lengths), float(lengths.mean()), lengths, edges, counts, exceed)
