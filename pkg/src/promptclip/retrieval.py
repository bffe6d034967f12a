"""Zero-shot image-to-image retrieval: exact cosine index, CUI@K and Precision@K."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import IrmaRecord, PairRecord, RetrievalLabel, irma_relevance, load_image_features

DEFAULT_KS = (5, 10, 50)
TASK_NAMES = ("cui_ndcg", "modality", "organ", "modality_and_organ", "irma_organ")


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    ids: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        self.ids = [str(i) for i in self.ids]
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for rows of shape {self.rows.shape}")
        if len(set(self.ids)) != len(self.ids):
            dup = [i for i, c in Counter(self.ids).items() if c > 1]
            raise ValueError(f"duplicate ids: {dup[:5]}")
        if len(self.rows):
            dev = np.abs(np.linalg.norm(self.rows.astype(np.float64), axis=1) - 1.0).max()
            if dev > 1e-6:
                raise ValueError(f"embedding rows are not unit norm (max deviation {dev:.3g})")

    @property
    def shape(self):
        return self.rows.shape

    @classmethod
    def from_raw(cls, raw, ids) -> "EmbeddingMatrix":
        """Normalize arbitrary rows first."""
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True), ids)


class ExactIndex:
    """Brute-force cosine top-K; ties keep row order."""

    def __init__(self, embeddings: EmbeddingMatrix):
        self.embeddings = embeddings
        self._rows = np.asarray(embeddings.rows, dtype=np.float64)
        self.ids = list(embeddings.ids)
        self.pos = {rid: i for i, rid in enumerate(self.ids)}
        if len(self.pos) != len(self.ids):
            raise ValueError("duplicate ids in index")

    def __len__(self):
        return len(self.ids)

    def ranked(self, query: np.ndarray, candidates: np.ndarray | None = None) -> tuple:
        """(row indices, scores) over ``candidates`` (bool mask), best first."""
        scores = self._rows @ np.asarray(query, dtype=np.float64)
        idx = np.arange(len(self.ids)) if candidates is None else np.flatnonzero(candidates)
        order = idx[np.argsort(-scores[idx], kind="stable")]
        return order, scores[order]

    def search(self, query, k: int, candidates: np.ndarray | None = None) -> list:
        order, scores = self.ranked(query, candidates)
        return [(self.ids[i], float(s)) for i, s in zip(order[:k], scores[:k])]

    def search_by_id(self, rid: str, k: int, candidates: np.ndarray | None = None) -> list:
        """Top-``k`` neighbours of a stored row, never including the row itself."""
        mask = np.ones(len(self.ids), bool) if candidates is None else np.array(candidates, bool)
        mask[self.pos[rid]] = False
        return self.search(self._rows[self.pos[rid]], k, mask)


def build_index(embeddings: EmbeddingMatrix) -> ExactIndex:
    return ExactIndex(embeddings)


def cui_iou(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def dcg(relevances: Sequence[float], k: int) -> float:
    return sum(r / math.log2(rank + 1) for rank, r in enumerate(relevances[:k], start=1))


def ndcg_at_k(retrieved_relevances: Sequence[float], ideal_relevances: Sequence[float], k: int) -> float:
    """DCG@k / IDCG@k with gain = relevance and discount 1/log2(rank + 1); 0 when IDCG is 0."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    ideal = dcg(list(ideal_relevances), k)
    if ideal == 0:
        return 0.0
    return dcg(list(retrieved_relevances), k) / ideal


@dataclass
class RetrievalTask:
    name: str
    relevance: Callable[[str, str], float]
    eligible: Callable[[str], bool]
    graded: bool = False
    exclusion_reason: str = "missing label"


@dataclass
class MetricReport:
    task: str
    values: dict  # K -> mean metric
    n_queries: int
    n_flagged: dict = field(default_factory=dict)  # K -> queries scored on fewer than K candidates
    excluded: dict = field(default_factory=dict)  # reason -> count

    def rows(self) -> list:
        return [
            {"task": self.task, "k": int(k), "value": float(v), "n_queries": self.n_queries,
             "n_flagged": int(self.n_flagged.get(k, 0))}
            for k, v in sorted(self.values.items())
        ]


def _ks(K) -> list:
    return [int(K)] if isinstance(K, (int, np.integer)) else [int(k) for k in K]


def cui_task(records: Iterable[PairRecord]) -> RetrievalTask:
    cuis = {r.id: r.cuis for r in records}
    return RetrievalTask(
        "cui_ndcg",
        relevance=lambda q, c: cui_iou(cuis[q], cuis.get(c, ())),
        eligible=lambda rid: bool(cuis.get(rid)),
        graded=True,
        exclusion_reason="empty CUI set",
    )


def label_task(name: str, labels: Iterable[RetrievalLabel]) -> RetrievalTask:
    by_id = {lab.record_id: lab for lab in labels}
    axes = {"modality": ("modality",), "organ": ("organ",), "modality_and_organ": ("modality", "organ")}[name]

    def key(rid):
        lab = by_id.get(rid)
        if lab is None:
            return None
        vals = tuple(getattr(lab, a) for a in axes)
        return None if any(v is None for v in vals) else vals

    return RetrievalTask(
        name,
        relevance=lambda q, c: float(key(q) == key(c)),
        eligible=lambda rid: key(rid) is not None,
    )


def irma_task(records: Iterable[IrmaRecord], axis: str = "anatomy", depth: int | None = None) -> RetrievalTask:
    by_id = {r.id: r for r in records}
    return RetrievalTask(
        "irma_organ",
        relevance=lambda q, c: float(irma_relevance(by_id[q], by_id[c], axis, depth)),
        eligible=lambda rid: rid in by_id,
        exclusion_reason="no IRMA code",
    )


def ideal_ranking(query: PairRecord, candidates: Iterable[PairRecord]) -> list:
    """Ground-truth order of candidate ids: IoU descending, ties by id."""
    scored = [(-cui_iou(query.cuis, c.cuis), c.id) for c in candidates if c.id != query.id]
    return [cid for _, cid in sorted(scored)]


def cui_at_k(index: ExactIndex, records: Iterable[PairRecord], K=DEFAULT_KS) -> MetricReport:
    """Mean NDCG@K with CUI-set IoU as graded gain.

    Every other indexed image is a candidate; the ideal ranking is all
    candidates sorted by IoU (ties by id).
    """
    return evaluate_task(index, cui_task(records), K)


def precision_at_k(index: ExactIndex, task: RetrievalTask, K=DEFAULT_KS) -> MetricReport:
    """Mean fraction of the top-K (restricted to eligible candidates) relevant to the query."""
    return evaluate_task(index, task, K)


def evaluate_task(index: ExactIndex, task: RetrievalTask, K=DEFAULT_KS) -> MetricReport:
    ks = _ks(K)
    eligible = np.array([task.eligible(rid) for rid in index.ids], dtype=bool)
    # graded tasks rank against every other image; categorical tasks only against labelled ones
    pool = np.ones(len(index), bool) if task.graded else eligible
    sums = {k: 0.0 for k in ks}
    flagged = {k: 0 for k in ks}
    excluded: Counter = Counter()
    excluded[task.exclusion_reason] = int((~eligible).sum())
    n = 0
    for qi in np.flatnonzero(eligible):
        q = index.ids[qi]
        mask = pool.copy()
        mask[qi] = False
        if not mask.any():
            excluded["no candidates"] += 1
            continue
        order, _ = index.ranked(index._rows[qi], mask)
        rel = [task.relevance(q, index.ids[c]) for c in order]
        if task.graded:
            ideal = sorted(rel, reverse=True)
        for k in ks:
            if task.graded:
                sums[k] += ndcg_at_k(rel, ideal, k)
            else:
                top = rel[:k]
                sums[k] += sum(top) / len(top)
            flagged[k] += len(order) < k
        n += 1
    if n == 0:
        raise ValueError(f"task {task.name}: no query has a non-empty candidate pool")
    excluded = {r: c for r, c in excluded.items() if c}
    return MetricReport(task.name, {k: sums[k] / n for k in ks}, n, flagged, excluded)


def make_tasks(names: Sequence[str], records: Sequence | None = None,
               labels: Sequence[RetrievalLabel] | None = None, irma_depth: int | None = None) -> list:
    tasks = []
    for name in names:
        if name not in TASK_NAMES:
            raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
        if name == "cui_ndcg":
            tasks.append(cui_task([r for r in records or () if isinstance(r, PairRecord)]))
        elif name == "irma_organ":
            tasks.append(irma_task([r for r in records or () if isinstance(r, IrmaRecord)], depth=irma_depth))
        else:
            if labels is None:
                raise ValueError(f"task {name} needs retrieval labels (category maps)")
            tasks.append(label_task(name, labels))
    return tasks


def evaluate_embeddings(embeddings: EmbeddingMatrix, tasks: Sequence[RetrievalTask], Ks=DEFAULT_KS) -> list:
    index = build_index(embeddings)
    return [evaluate_task(index, t, Ks) for t in tasks]


def embed_records(model, records: Sequence, base_dir=None) -> EmbeddingMatrix:
    """Image embeddings of ``records`` under ``model`` (evaluation mode)."""
    model.eval()
    feats = np.stack([load_image_features(r.image_ref, base_dir) for r in records])
    return EmbeddingMatrix(model.embed_images(feats), [r.id for r in records])


def run_eval(model, records: Sequence, tasks: Sequence[str], Ks=DEFAULT_KS,
             labels: Sequence[RetrievalLabel] | None = None, base_dir=None, irma_depth: int | None = None) -> list:
    """Embed every record image once, build one index, score each task."""
    if not tasks:
        return []
    task_objs = make_tasks(tasks, records, labels, irma_depth)
    return evaluate_embeddings(embed_records(model, records, base_dir), task_objs, Ks)


def format_table(reports: Sequence[MetricReport]) -> str:
    ks = sorted({k for r in reports for k in r.values})
    head = f"{'task':<20}" + "".join(f"{'@' + str(k):>9}" for k in ks) + f"{'queries':>9}"
    lines = [head, "-" * len(head)]
    for r in reports:
        cells = "".join(f"{100 * r.values[k]:9.2f}" if k in r.values else f"{'-':>9}" for k in ks)
        lines.append(f"{r.task:<20}{cells}{r.n_queries:9d}")
    return "\n".join(lines)


def reports_from_rows(rows: Sequence[Mapping]) -> list:
    """Inverse of :meth:`MetricReport.rows` over a flat report array."""
    out: dict = {}
    for row in rows:
        rep = out.setdefault(row["task"], MetricReport(row["task"], {}, int(row["n_queries"])))
        rep.values[int(row["k"])] = float(row["value"])
        rep.n_flagged[int(row["k"])] = int(row["n_flagged"])
    return list(out.values())
