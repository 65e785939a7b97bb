"""Retrieval and classification metrics over precomputed embeddings.

All rankings are by dot product, descending, with ties broken toward the
lower index. Average precision is non-interpolated over the full ranking.
"""
from __future__ import annotations

import json
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .shardio import DimMismatch, read_embeddings

GroundTruth = Mapping[int, Sequence[int]]


class EvalError(ValueError):
    pass


class EmptyIndex(EvalError):
    pass


class DegenerateMean(EvalError):
    pass


class SingletonClass(EvalError):
    def __init__(self, label: int):
        super().__init__(f"label {label} has a single member, leave-one-out needs at least 2")
        self.label = label


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise EvalError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def _check_ks(ks: Sequence[int], limit: int) -> list[int]:
    ks = [int(k) for k in ks]
    if not ks:
        raise EvalError("need at least one k")
    if any(k < 1 for k in ks) or ks != sorted(ks):
        raise EvalError(f"ks must be positive and ascending, got {ks}")
    if ks[-1] > limit:
        raise EvalError(f"k={ks[-1]} exceeds the {limit} rankable items")
    return ks


def _ranks_of(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of column ``targets[i]`` in row ``i`` of ``scores``.

    Counts the items strictly above the target plus equal-scored items with
    a lower index, which matches a stable descending sort without sorting.
    """
    rows = np.arange(scores.shape[0])
    t = scores[rows, targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    above = scores > t
    tied_before = (scores == t) & (cols < targets[:, None])
    return (above | tied_before).sum(axis=1)


def _best_rank(scores: np.ndarray, relevant: Sequence[int]) -> int:
    rel = np.asarray(sorted(set(relevant)), dtype=np.int64)
    row = np.broadcast_to(scores, (len(rel), scores.shape[0]))
    return int(_ranks_of(row, rel).min())


def recall_at_k(q, x, gt: GroundTruth, ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """Fraction of queries with at least one relevant item in the top ``k``.

    ``gt`` maps each query row of ``q`` to the relevant row indices of ``x``.
    """
    q = _as_matrix(q, "queries")
    x = _as_matrix(x, "index")
    if x.shape[0] == 0:
        raise EmptyIndex("index set is empty")
    if q.shape[1] != x.shape[1]:
        raise DimMismatch(f"query dim {q.shape[1]} != index dim {x.shape[1]}")
    ks = _check_ks(ks, x.shape[0])
    queries = sorted(gt)
    if not queries:
        raise EvalError("ground truth has no queries")
    for qi in queries:
        if not 0 <= qi < q.shape[0]:
            raise EvalError(f"query {qi} out of range")
        rel = gt[qi]
        if not rel:
            raise EvalError(f"query {qi} has no relevant items")
        if any(not 0 <= r < x.shape[0] for r in rel):
            raise EvalError(f"query {qi} has out-of-range relevant items")
    scores = q[queries] @ x.T
    best = np.array([_best_rank(scores[n], gt[qi]) for n, qi in enumerate(queries)])
    return {k: float(np.count_nonzero(best < k)) / len(queries) for k in ks}


def build_class_embedding(template_embs) -> np.ndarray:
    """Average the template embeddings of one class and L2-normalize."""
    t = _as_matrix(template_embs, "template_embs")
    if t.shape[0] < 1:
        raise EvalError("need at least one template embedding")
    mean = t.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise DegenerateMean(f"template mean has norm {norm:.3g}")
    return mean / norm


def zeroshot_classify(img_embs, class_embs, labels, ks: Sequence[int] = (1, 5)) -> dict[int, float]:
    img = _as_matrix(img_embs, "img_embs")
    cls = _as_matrix(class_embs, "class_embs")
    if img.shape[1] != cls.shape[1]:
        raise DimMismatch(f"image dim {img.shape[1]} != class dim {cls.shape[1]}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (img.shape[0],):
        raise EvalError("need exactly one label per image")
    if labels.size and (labels.min() < 0 or labels.max() >= cls.shape[0]):
        raise EvalError("labels must lie in [0, C)")
    if img.shape[0] == 0:
        raise EmptyIndex("no images to classify")
    ks = _check_ks(ks, cls.shape[0])
    ranks = _ranks_of(img @ cls.T, labels)
    return {k: float(np.count_nonzero(ranks < k)) / img.shape[0] for k in ks}


def average_precision(hit_positions: np.ndarray) -> float:
    """Non-interpolated AP from the 1-based ranks of all relevant items."""
    hits = np.sort(np.asarray(hit_positions, dtype=np.int64))
    precisions = np.arange(1, hits.size + 1) / hits
    return math.fsum(precisions.tolist()) / hits.size


def map_leave_one_out(embs, labels) -> float:
    """Mean AP where each item queries all the others (itself excluded)."""
    e = _as_matrix(embs, "embs")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (e.shape[0],):
        raise EvalError("need exactly one label per embedding")
    uniq, counts = np.unique(labels, return_counts=True)
    for lab, c in zip(uniq, counts):
        if c < 2:
            raise SingletonClass(int(lab))
    n = e.shape[0]
    scores = e @ e.T
    aps = []
    for i in range(n):
        others = np.delete(np.arange(n), i)
        order = others[np.argsort(-scores[i, others], kind="stable")]
        hits = np.flatnonzero(labels[order] == labels[i]) + 1
        aps.append(average_precision(hits))
    return math.fsum(aps) / n


# --- report -----------------------------------------------------------------


@dataclass
class EvalReport:
    recall: dict[str, dict[int, float]] = field(default_factory=dict)
    topk_acc: dict[int, float] = field(default_factory=dict)
    map_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "recall": {d: {str(k): v for k, v in r.items()} for d, r in self.recall.items()},
            "topk": {str(k): v for k, v in self.topk_acc.items()},
            "map": self.map_score,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            recall={d: {int(k): float(v) for k, v in r.items()} for d, r in obj.get("recall", {}).items()},
            topk_acc={int(k): float(v) for k, v in obj.get("topk", {}).items()},
            map_score=obj.get("map"),
        )

    def table(self) -> str:
        lines = []
        for direction, rec in sorted(self.recall.items()):
            cells = "  ".join(f"R@{k}={100 * v:6.2f}" for k, v in sorted(rec.items()))
            lines.append(f"{direction.upper():<5}{cells}")
        if self.topk_acc:
            cells = "  ".join(f"top{k}={100 * v:6.2f}" for k, v in sorted(self.topk_acc.items()))
            lines.append(f"{'ZS':<5}{cells}")
        if self.map_score is not None:
            lines.append(f"{'mAP':<5}{100 * self.map_score:6.2f}")
        return "\n".join(lines)


def read_ground_truth(path: str | os.PathLike) -> dict[int, list[int]]:
    gt: dict[int, list[int]] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            q, rel = int(obj["query"]), [int(r) for r in obj["relevant"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise EvalError(f"{path}:{line_no}: bad ground-truth line") from exc
        gt.setdefault(q, []).extend(rel)
    return gt


def read_labels(path: str | os.PathLike) -> np.ndarray:
    pairs = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            pairs[int(obj["index"])] = int(obj["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise EvalError(f"{path}:{line_no}: bad label line") from exc
    if sorted(pairs) != list(range(len(pairs))):
        raise EvalError(f"{path}: label indices must cover 0..n-1")
    return np.array([pairs[i] for i in range(len(pairs))], dtype=np.int64)


def invert_ground_truth(gt: GroundTruth) -> dict[int, list[int]]:
    inv: dict[int, list[int]] = {}
    for q, rel in gt.items():
        for r in rel:
            inv.setdefault(int(r), []).append(int(q))
    return {k: sorted(v) for k, v in sorted(inv.items())}


def eval_report(
    images: str | os.PathLike,
    texts: str | os.PathLike | None = None,
    gt_path: str | os.PathLike | None = None,
    ks: Sequence[int] = (1, 5, 10),
    classes: str | os.PathLike | None = None,
    class_labels: str | os.PathLike | None = None,
    topk: Sequence[int] = (1, 5),
    map_labels: str | os.PathLike | None = None,
) -> EvalReport:
    """Build a report from embedding files.

    Retrieval runs when ``texts`` is given (identity pairing if ``gt_path``
    is omitted); zero-shot when ``classes`` and ``class_labels`` are given;
    leave-one-out mAP over the image embeddings when ``map_labels`` is given.
    """
    img = read_embeddings(images)
    report = EvalReport()

    def same_dim(other, other_path):
        if other.dim != img.dim:
            raise DimMismatch(f"{images} has dim {img.dim} but {other_path} has dim {other.dim}")

    if texts is not None:
        txt = read_embeddings(texts)
        same_dim(txt, texts)
        if gt_path is None:
            if img.count != txt.count:
                raise EvalError("identity pairing needs equal image and text counts")
            gt = {i: [i] for i in range(img.count)}
        else:
            gt = read_ground_truth(gt_path)
        report.recall["i2t"] = recall_at_k(img.data, txt.data, gt, ks)
        report.recall["t2i"] = recall_at_k(txt.data, img.data, invert_ground_truth(gt), ks)
    if classes is not None:
        if class_labels is None:
            raise EvalError("zero-shot evaluation needs a labels file")
        cls = read_embeddings(classes)
        same_dim(cls, classes)
        report.topk_acc = zeroshot_classify(img.data, cls.data, read_labels(class_labels), topk)
    if map_labels is not None:
        report.map_score = map_leave_one_out(img.data, read_labels(map_labels))
    return report
