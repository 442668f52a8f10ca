"""Outlier-aware model merging and the average / task-arithmetic baselines.

For every parameter group k (one named tensor) and fine-tuned model i the
task vector is ``dW_i = W'_i - W``. Outlier-aware merging takes the
smallest per-model std ``sigma_k = min_i std(dW_i)``. Elements inside the
closed band ``[c - t*sigma_k, c + t*sigma_k]`` are scaled by 1/n. Elements
outside the band are kept whole. The processed vectors are summed and
added to the base.

Models are accumulated in a canonical order (sorted by name) so the merged
bytes do not depend on the order the models were given in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from .errors import MissingTensor, NonFloatTensor, ShapeMismatch
from .moments import Center, central_moments
from .tensor_io import (
    ModelIndex,
    RawTensor,
    SafetensorsWriter,
    TensorRecord,
    encode,
    is_float_dtype,
)


class MergeMode(str, Enum):
    OUTLIER_AWARE = "outlier"
    AVERAGE = "average"
    SUM = "sum"


class NonFloatPolicy(str, Enum):
    COPY_BASE = "copy_base"
    FAIL = "fail"


@dataclass(frozen=True)
class MergeOptions:
    t: float = 2.0
    mode: MergeMode = MergeMode.OUTLIER_AWARE
    center: Center = Center.ZERO
    non_float_policy: NonFloatPolicy = NonFloatPolicy.COPY_BASE

    def __post_init__(self):
        if not (math.isfinite(self.t) and self.t >= 0):
            raise ValueError("t must be finite and >= 0")
        object.__setattr__(self, "mode", MergeMode(self.mode))
        object.__setattr__(self, "center", Center(self.center))
        object.__setattr__(self, "non_float_policy", NonFloatPolicy(self.non_float_policy))


@dataclass(frozen=True)
class GroupSigmas:
    per_model: tuple[float, ...]

    @property
    def group(self) -> float:
        return min(self.per_model)


@dataclass
class TaskVectorSet:
    """Task vectors of ``n`` fine-tuned models against a shared base.

    ``models`` and ``names`` are stored in canonical (name-sorted) order.
    With ``cache=False`` deltas are recomputed per group on demand, so only
    one group's tensors are resident at a time.
    """

    base: ModelIndex
    models: list[ModelIndex]
    names: list[str]
    groups: list[str]
    group_sigmas: dict[str, GroupSigmas]
    passthrough: list[str] = field(default_factory=list)
    _cache: dict[str, tuple[TensorRecord, list[np.ndarray]]] | None = None

    @property
    def n(self) -> int:
        return len(self.models)

    def group_data(self, name: str) -> tuple[TensorRecord, list[np.ndarray]]:
        if self._cache is not None and name in self._cache:
            return self._cache[name]
        return _load_group(self.base, self.models, name)

    @property
    def deltas(self) -> dict[str, list[np.ndarray]]:
        return {k: self.group_data(k)[1] for k in self.groups}


def _load_group(base: ModelIndex, models, name):
    b = base.load(name)
    deltas = []
    for i, m in enumerate(models):
        if name not in m:
            raise MissingTensor(name, i)
        meta = m.metas[name]
        if meta.shape != b.shape:
            raise ShapeMismatch(f"tensor {name!r}: base shape {b.shape}, model #{i} shape {meta.shape}")
        if not is_float_dtype(meta.dtype):
            raise ShapeMismatch(f"tensor {name!r}: base is {b.source_dtype}, model #{i} is {meta.dtype}")
        deltas.append(m.load(name).values - b.values)
    return b, deltas


def _std(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    return math.sqrt(central_moments(x.ravel())[1])


def task_vectors(
    base: ModelIndex,
    models: list[ModelIndex],
    names: list[str] | None = None,
    cache: bool = True,
) -> TaskVectorSet:
    if not models:
        raise ValueError("need at least one fine-tuned model")
    if names is None:
        names = [m.source or f"model{i}" for i, m in enumerate(models)]
    if len(names) != len(models):
        raise ValueError("names and models differ in length")
    order = sorted(range(len(models)), key=lambda i: names[i])
    models = [models[i] for i in order]
    names = [names[i] for i in order]

    groups, passthrough = [], []
    sigmas: dict[str, GroupSigmas] = {}
    store = {} if cache else None
    for name, meta in base.metas.items():
        if not is_float_dtype(meta.dtype):
            passthrough.append(name)
            continue
        b, deltas = _load_group(base, models, name)
        sigmas[name] = GroupSigmas(tuple(_std(d) for d in deltas))
        groups.append(name)
        if store is not None:
            store[name] = (b, deltas)
    return TaskVectorSet(base, models, names, groups, sigmas, passthrough, store)


@dataclass
class GroupReport:
    name: str
    sigmas: tuple[float, ...]
    sigma_group: float
    threshold: float | None
    outlier_counts: tuple[int, ...]
    in_range_fractions: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sigmas": list(self.sigmas),
            "sigma_group": self.sigma_group,
            "threshold": self.threshold,
            "outlier_counts": list(self.outlier_counts),
            "in_range_fractions": list(self.in_range_fractions),
        }


def _merge_group(tv: TaskVectorSet, name: str, opts: MergeOptions) -> tuple[np.ndarray, GroupReport, str]:
    b, deltas = tv.group_data(name)
    n = tv.n
    sig = tv.group_sigmas[name]
    acc = np.zeros(b.shape, dtype=np.float64)
    outliers, fracs = [], []
    threshold = None
    if opts.mode is MergeMode.OUTLIER_AWARE:
        threshold = opts.t * sig.group
        for d in deltas:
            c = central_moments(d.ravel())[0] if opts.center is Center.SAMPLE_MEAN and d.size else 0.0
            inside = np.abs(d - c) <= threshold
            acc = acc + np.where(inside, d / n, d)
            k = int(inside.sum())
            outliers.append(d.size - k)
            fracs.append(k / d.size if d.size else 1.0)
    else:
        for d in deltas:
            acc = acc + d
        if opts.mode is MergeMode.AVERAGE:
            acc = acc / n
    report = GroupReport(name, sig.per_model, sig.group, threshold, tuple(outliers), tuple(fracs))
    return b.values + acc, report, b.source_dtype


def iter_merged(tv: TaskVectorSet, opts: MergeOptions) -> Iterator[tuple[TensorRecord | RawTensor, GroupReport | None]]:
    """Yield merged tensors in base header order, one group at a time."""
    passthrough = set(tv.passthrough)
    for name, meta in tv.base.metas.items():
        if name in passthrough:
            if opts.non_float_policy is NonFloatPolicy.FAIL:
                raise NonFloatTensor(f"tensor {name!r} has non-float dtype {meta.dtype}")
            yield RawTensor(name, meta.dtype, meta.shape, tv.base.raw_bytes(name)), None
            continue
        values, report, dtype = _merge_group(tv, name, opts)
        yield TensorRecord(name, meta.shape, values, dtype), report


def merge(tv: TaskVectorSet, opts: MergeOptions) -> dict[str, TensorRecord | RawTensor]:
    return {rec.name: rec for rec, _ in iter_merged(tv, opts)}


def merge_outlier_aware(tv: TaskVectorSet, opts: MergeOptions | None = None):
    opts = opts or MergeOptions()
    if opts.mode is not MergeMode.OUTLIER_AWARE:
        raise ValueError("merge_outlier_aware needs mode OUTLIER_AWARE")
    return merge(tv, opts)


def merge_average(tv: TaskVectorSet, opts: MergeOptions | None = None):
    base = opts or MergeOptions()
    return merge(tv, MergeOptions(base.t, MergeMode.AVERAGE, base.center, base.non_float_policy))


def merge_sum(tv: TaskVectorSet, opts: MergeOptions | None = None):
    base = opts or MergeOptions()
    return merge(tv, MergeOptions(base.t, MergeMode.SUM, base.center, base.non_float_policy))


def merge_to_file(
    tv: TaskVectorSet,
    opts: MergeOptions,
    dest,
    force_dtype: str | None = None,
    metadata=None,
) -> list[GroupReport]:
    """Stream the merged model to ``dest``; returns per-group reports.

    Float tensors keep the base dtype unless ``force_dtype`` is given.
    """
    if tv.passthrough and opts.non_float_policy is NonFloatPolicy.FAIL:
        raise NonFloatTensor(f"tensor {tv.passthrough[0]!r} has a non-float dtype")
    plan = []
    for name, meta in tv.base.metas.items():
        dtype = meta.dtype
        if force_dtype and is_float_dtype(meta.dtype):
            dtype = force_dtype
        plan.append((name, dtype, meta.shape))
    reports = []
    with SafetensorsWriter(dest, plan, metadata) as writer:
        for (rec, report), (_, dtype, _) in zip(iter_merged(tv, opts), plan):
            if isinstance(rec, RawTensor):
                writer.write(rec.name, rec.data)
            else:
                writer.write(rec.name, encode(rec.values, dtype))
                reports.append(report)
    return reports
