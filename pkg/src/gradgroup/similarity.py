"""Pairwise task similarity from gradient traces or precomputed distances.

A gradient trace is the epoch-mean gradient of one task for one layer of a
jointly trained model. For every epoch present for all tasks we take the
cosine between each pair of tasks' traces, then average those cosines over
epochs. The result is a labeled, exactly symmetric matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from gradgroup.errors import (
    AsymmetricInput,
    DegenerateVector,
    DimensionMismatch,
    MissingTrace,
    NegativeDistance,
    TraceError,
    UnknownLabel,
)

NORM_EPS = 1e-12

KINDS = ("gradient-cosine", "negated-distance", "raw")


def cosine(u, v) -> float:
    """Cosine of the angle between ``u`` and ``v``, clamped to [-1, 1].

    Dot products and norms are accumulated with ``math.fsum`` so the result
    does not depend on summation order.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionMismatch(f"vector lengths differ: {u.size} vs {v.size}")
    if u.size == 0:
        raise DimensionMismatch("vectors must have at least one component")
    uu, vv = math.fsum(u * u), math.fsum(v * v)
    nu, nv = math.sqrt(uu), math.sqrt(vv)
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateVector(f"vector norm below {NORM_EPS:g} (|u|={nu:g}, |v|={nv:g})")
    # one rounding in the denominator where the product stays finite
    denom = math.sqrt(uu * vv)
    if not math.isfinite(denom) or denom == 0.0:
        denom = nu * nv
    c = math.fsum(u * v) / denom
    return min(1.0, max(-1.0, c))


@dataclass(frozen=True)
class GradientTrace:
    task: str
    epoch: int
    layer: str
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.task, str) or not self.task:
            raise TraceError("trace task label must be a non-empty string")
        if isinstance(self.epoch, bool) or not isinstance(self.epoch, (int, np.integer)) or self.epoch < 0:
            raise TraceError(f"epoch must be a non-negative integer, got {self.epoch!r}")
        vec = np.asarray(self.vector, dtype=np.float64).ravel()
        if vec.size == 0:
            raise DimensionMismatch("trace vector is empty")
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "epoch", int(self.epoch))

    @property
    def dim(self) -> int:
        return self.vector.size

    def to_record(self) -> dict:
        return {"task": self.task, "epoch": self.epoch, "layer": self.layer,
                "vector": self.vector.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "GradientTrace":
        missing = {"task", "epoch", "layer", "vector"} - set(rec)
        if missing:
            raise TraceError(f"trace record missing keys: {sorted(missing)}")
        return cls(rec["task"], rec["epoch"], rec["layer"], rec["vector"])


def validate_traces(traces: Iterable[GradientTrace]) -> list[GradientTrace]:
    """Check uniqueness of (task, epoch, layer) and per-layer dimensions."""
    traces = list(traces)
    seen = set()
    dims: dict[str, int] = {}
    for t in traces:
        key = (t.task, t.epoch, t.layer)
        if key in seen:
            raise TraceError(f"duplicate trace record for task={t.task!r} epoch={t.epoch} layer={t.layer!r}")
        seen.add(key)
        d = dims.setdefault(t.layer, t.dim)
        if d != t.dim:
            raise DimensionMismatch(f"layer {t.layer!r} has vectors of length {d} and {t.dim}")
    return traces


def write_traces(path, traces: Iterable[GradientTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_record(), allow_nan=False))
            fh.write("\n")


def read_traces(path) -> list[GradientTrace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise TraceError(f"{path}:{lineno}: expected a JSON object")
            out.append(GradientTrace.from_record(rec))
    return validate_traces(out)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Labeled symmetric N x N matrix of pairwise scores."""

    labels: tuple
    values: np.ndarray = field(repr=False)
    kind: str = "raw"

    def __post_init__(self):
        labels = tuple(self.labels)
        if any(not isinstance(l, str) or not l for l in labels):
            raise TraceError("labels must be non-empty strings")
        if len(set(labels)) != len(labels):
            raise TraceError("duplicate labels in similarity matrix")
        values = np.array(self.values, dtype=np.float64)
        n = len(labels)
        if values.shape != (n, n):
            raise DimensionMismatch(f"expected a {n}x{n} matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise TraceError("similarity matrix has non-finite entries")
        if not np.array_equal(values, values.T):
            raise AsymmetricInput("similarity matrix is not symmetric")
        if self.kind not in KINDS:
            raise TraceError(f"unknown matrix kind {self.kind!r}; expected one of {KINDS}")
        values.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabel(f"unknown task label {label!r}") from None

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.index(a), self.index(b)])

    def reorder(self, labels: Sequence[str]) -> "SimilarityMatrix":
        """Return the same matrix with rows/columns in the order of ``labels``."""
        if sorted(labels) != sorted(self.labels):
            raise UnknownLabel("reorder needs exactly the matrix's label set")
        idx = [self.index(l) for l in labels]
        return SimilarityMatrix(tuple(labels), self.values[np.ix_(idx, idx)], self.kind)

    def scaled(self, factor: float) -> "SimilarityMatrix":
        return SimilarityMatrix(self.labels, self.values * factor, "raw")

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "kind": self.kind, "values": self.values.tolist()}

    @classmethod
    def from_json(cls, obj) -> "SimilarityMatrix":
        if not isinstance(obj, dict):
            raise TraceError("similarity file must hold a JSON object")
        missing = {"labels", "values"} - set(obj)
        if missing:
            raise TraceError(f"similarity file missing keys: {sorted(missing)}")
        return cls(tuple(obj["labels"]), obj["values"], obj.get("kind", "raw"))


def write_matrix(path, matrix: SimilarityMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(matrix.to_json(), fh, allow_nan=False)
        fh.write("\n")


def read_matrix(path) -> SimilarityMatrix:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise TraceError(f"{path}: invalid JSON ({e.msg})") from None
    return SimilarityMatrix.from_json(obj)


def _pairwise(vectors: Sequence[np.ndarray]) -> np.ndarray:
    # i<j computed once and mirrored; each entry independent of the others
    n = len(vectors)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cosine(vectors[i], vectors[j])
    return out


def common_epochs(traces: Iterable[GradientTrace], layer: str, tasks: Sequence[str]):
    """Epochs recorded for every task at ``layer``, plus what gets dropped.

    Returns ``(common, dropped)`` where ``dropped`` maps task -> sorted epochs
    that exist for that task but not for all tasks.
    """
    per_task: dict[str, set] = {t: set() for t in tasks}
    for tr in traces:
        if tr.layer == layer and tr.task in per_task:
            per_task[tr.task].add(tr.epoch)
    empty = [t for t, eps in per_task.items() if not eps]
    if empty:
        raise MissingTrace(f"no traces at layer {layer!r} for task(s): {', '.join(empty)}")
    common = set.intersection(*per_task.values()) if per_task else set()
    dropped = {t: sorted(eps - common) for t, eps in per_task.items() if eps - common}
    return sorted(common), dropped


def epoch_similarity_average(traces: Iterable[GradientTrace], layer: str,
                             tasks: Sequence[str] | None = None) -> SimilarityMatrix:
    """Mean over common epochs of the per-epoch gradient cosine matrix.

    ``tasks`` fixes the row order; by default tasks appear in first-seen
    order. Epochs missing for any task are dropped (see ``common_epochs``);
    an empty intersection raises ``MissingTrace``.
    """
    traces = validate_traces(traces)
    if tasks is None:
        tasks = list(dict.fromkeys(t.task for t in traces if t.layer == layer))
        if not tasks:
            raise MissingTrace(f"no traces at layer {layer!r}")
    tasks = list(tasks)
    if len(set(tasks)) != len(tasks):
        raise TraceError("duplicate task labels")
    epochs, _ = common_epochs(traces, layer, tasks)
    if not epochs:
        raise MissingTrace(f"tasks share no common epoch at layer {layer!r}")

    lookup = {(t.task, t.epoch): t.vector for t in traces if t.layer == layer}
    n = len(tasks)
    per_epoch = []
    for e in epochs:
        vecs = [lookup[(task, e)] for task in tasks]
        for task, v in zip(tasks, vecs):
            if math.sqrt(math.fsum(v * v)) <= NORM_EPS:
                raise DegenerateVector(f"gradient of task {task!r} vanishes at epoch {e}",
                                       task=task, epoch=e)
        per_epoch.append(_pairwise(vecs))

    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = math.fsum(m[i, j] for m in per_epoch) / len(per_epoch)
    return SimilarityMatrix(tuple(tasks), values, "gradient-cosine")


def similarity_from_distance(labels: Sequence[str], distances) -> SimilarityMatrix:
    """Similarity as negated distance, so the nearest task scores highest."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionMismatch(f"distance matrix must be square, got shape {d.shape}")
    if not np.array_equal(d, d.T):
        raise AsymmetricInput("distance matrix is not symmetric")
    if np.any(d < 0):
        raise NegativeDistance("distance matrix has negative entries")
    if np.any(np.diag(d) != 0):
        raise AsymmetricInput("distance matrix must have a zero diagonal")
    return SimilarityMatrix(tuple(labels), -d + 0.0, "negated-distance")
