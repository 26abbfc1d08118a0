"""Labelled sample sets, the session stream and split files.

A :class:`SessionStream` is the ordered list of ``(train, test)`` sets seen by
an incremental learner. Session 0 holds the base classes with their full
training pool; every later session holds exactly ``way`` classes with
``shot`` training samples each. Class sets of different sessions are disjoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import yaml

from .errors import (
    DuplicateClass,
    IndexOutOfRange,
    InsufficientClasses,
    InsufficientSamples,
)

SPLIT_FORMAT = "fscil-split/1"


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Inputs of a fixed shape with integer class labels.

    ``class_ids`` is an ordered registry of the classes the set covers; it may
    list classes without samples but never omits a label that occurs.
    ``sample_ids`` identifies each sample within its source dataset.
    """

    inputs: torch.Tensor
    labels: torch.Tensor
    class_ids: tuple[int, ...]
    sample_ids: torch.Tensor | None = None

    def __post_init__(self):
        labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if self.sample_ids is None:
            object.__setattr__(self, "sample_ids", torch.arange(len(labels)))
        else:
            object.__setattr__(
                self, "sample_ids", torch.as_tensor(self.sample_ids, dtype=torch.long).reshape(-1)
            )
        if self.inputs.shape[0] != labels.shape[0] or self.sample_ids.shape[0] != labels.shape[0]:
            raise ValueError(
                f"inputs ({self.inputs.shape[0]}), labels ({labels.shape[0]}) and "
                f"sample_ids ({self.sample_ids.shape[0]}) disagree in length"
            )
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DuplicateClass(f"duplicate class ids in registry {self.class_ids}")
        if len(labels):
            stray = set(torch.unique(labels).tolist()) - set(self.class_ids)
            if stray:
                raise ValueError(f"labels {sorted(stray)} are missing from class_ids")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @cached_property
    def class_index(self) -> dict[int, np.ndarray]:
        """Positions of each class's samples, in dataset order."""
        labels = self.labels.numpy()
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        out = {c: np.empty(0, dtype=np.int64) for c in self.class_ids}
        if len(labels):
            uniq, starts = np.unique(sorted_labels, return_index=True)
            ends = list(starts[1:]) + [len(labels)]
            for c, a, b in zip(uniq.tolist(), starts, ends):
                out[c] = order[a:b]
        return out

    def class_counts(self) -> dict[int, int]:
        return {c: len(idx) for c, idx in self.class_index.items()}

    def subset(self, index, class_ids: Sequence[int] | None = None) -> "LabeledSet":
        index = torch.as_tensor(np.asarray(index, dtype=np.int64))
        labels = self.labels[index]
        if class_ids is None:
            present = set(labels.tolist())
            class_ids = [c for c in self.class_ids if c in present]
        return LabeledSet(self.inputs[index], labels, tuple(class_ids), self.sample_ids[index])

    def of_classes(self, class_ids: Sequence[int]) -> "LabeledSet":
        index = np.concatenate(
            [self.class_index.get(int(c), np.empty(0, dtype=np.int64)) for c in class_ids]
            or [np.empty(0, dtype=np.int64)]
        )
        return self.subset(np.sort(index), class_ids)

    def relabel(self, mapping: dict[int, int]) -> "LabeledSet":
        labels = torch.tensor([mapping[int(c)] for c in self.labels.tolist()], dtype=torch.long)
        return LabeledSet(
            self.inputs, labels, tuple(mapping[c] for c in self.class_ids), self.sample_ids
        )

    @staticmethod
    def concat(parts: Iterable["LabeledSet"]) -> "LabeledSet":
        """Stack sets in order; the registry is the ordered union of theirs."""
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        registry: list[int] = []
        seen: set[int] = set()
        for p in parts:
            for c in p.class_ids:
                if c not in seen:
                    seen.add(c)
                    registry.append(c)
        return LabeledSet(
            torch.cat([p.inputs for p in parts]),
            torch.cat([p.labels for p in parts]),
            tuple(registry),
            torch.cat([p.sample_ids for p in parts]),
        )


@dataclass(frozen=True)
class SplitConfig:
    base_classes: int
    incremental_sessions: int
    way: int
    shot: int
    seed: int = 0
    # fraction of each class held out for testing when the source has no test split
    test_fraction: float = 0.5

    def __post_init__(self):
        for name in ("base_classes", "incremental_sessions", "way", "shot"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.incremental_sessions > 0 and (self.way < 1 or self.shot < 1):
            raise ValueError("incremental sessions need way >= 1 and shot >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.incremental_sessions * self.way


@dataclass(frozen=True, eq=False)
class SessionStream:
    sessions: tuple[tuple[LabeledSet, LabeledSet], ...]
    base_class_count: int
    way: int
    shot: int
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(tuple(s) for s in self.sessions))
        if self.check:
            check_stream(self)

    def __len__(self):
        return len(self.sessions)

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def train(self, i: int) -> LabeledSet:
        return self.sessions[i][0]

    def test(self, i: int) -> LabeledSet:
        return self.sessions[i][1]

    def class_ids(self, i: int) -> tuple[int, ...]:
        return self.sessions[i][0].class_ids

    @property
    def base_class_ids(self) -> tuple[int, ...]:
        return self.class_ids(0)

    def seen_class_ids(self, i: int) -> tuple[int, ...]:
        return tuple(c for k in range(i + 1) for c in self.class_ids(k))


def check_stream(stream: SessionStream) -> None:
    """Raise ``ValueError`` if any stream invariant is violated."""
    seen: dict[int, int] = {}
    for i, (train, test) in enumerate(stream.sessions):
        if set(train.class_ids) != set(test.class_ids):
            raise ValueError(f"session {i}: train and test cover different classes")
        for c in train.class_ids:
            if c in seen:
                raise ValueError(f"class {c} appears in sessions {seen[c]} and {i}")
            seen[c] = i
        counts = train.class_counts()
        if i == 0:
            if len(train.class_ids) != stream.base_class_count:
                raise ValueError("session 0 class count differs from base_class_count")
            short = [c for c, n in counts.items() if n < max(stream.shot, 1)]
            if short:
                raise ValueError(f"base classes {short} have fewer than shot samples")
        else:
            if len(train.class_ids) != stream.way:
                raise ValueError(f"session {i} has {len(train.class_ids)} classes, expected {stream.way}")
            bad = {c: n for c, n in counts.items() if n != stream.shot}
            if bad:
                raise ValueError(f"session {i} classes with wrong shot count: {bad}")


def _class_rng(seed: int, class_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(class_id)])


def _train_test_pools(
    source: LabeledSet, test_source: LabeledSet | None, c: int, cfg: SplitConfig
) -> tuple[np.ndarray, np.ndarray]:
    rng = _class_rng(cfg.seed, c)
    pool = source.class_index[c]
    if test_source is not None:
        return rng.permutation(pool), test_source.class_index.get(c, np.empty(0, dtype=np.int64))
    pool = rng.permutation(pool)
    n_test = max(1, int(round(cfg.test_fraction * len(pool))))
    if len(pool) - n_test < 1:
        raise InsufficientSamples(f"class {c} has {len(pool)} samples, too few to split")
    return pool[n_test:], np.sort(pool[:n_test])


def build_session_stream(
    source: LabeledSet, cfg: SplitConfig, test_source: LabeledSet | None = None
) -> SessionStream:
    """Split ``source`` into a base session followed by ``way``-way ``shot``-shot sessions.

    The class list is shuffled with ``cfg.seed``; the first ``base_classes``
    form session 0 and consecutive ``way``-sized blocks form the rest. When
    ``test_source`` is given it supplies the test samples and ``source`` is
    used only for training; otherwise each class is partitioned with
    ``cfg.test_fraction`` held out.
    """
    if len(source.class_ids) < cfg.total_classes:
        raise InsufficientClasses(
            f"source has {len(source.class_ids)} classes, config needs {cfg.total_classes}"
        )
    order = np.random.default_rng(cfg.seed).permutation(np.asarray(source.class_ids, dtype=np.int64))
    blocks = [order[: cfg.base_classes].tolist()]
    for k in range(cfg.incremental_sessions):
        start = cfg.base_classes + k * cfg.way
        blocks.append(order[start : start + cfg.way].tolist())
    plan = []
    for i, classes in enumerate(blocks):
        train_idx, test_idx = [], []
        for c in classes:
            train_pool, test_pool = _train_test_pools(source, test_source, c, cfg)
            if i == 0:
                chosen = np.sort(train_pool)
                need = max(cfg.shot, 1)
            else:
                chosen = train_pool[: cfg.shot]
                need = cfg.shot
            if len(chosen) < need:
                raise InsufficientSamples(
                    f"class {c} has {len(train_pool)} train samples, session {i} needs {need}"
                )
            if len(test_pool) == 0:
                raise InsufficientSamples(f"class {c} has no test samples")
            train_idx.append(chosen)
            test_idx.append(test_pool)
        plan.append((classes, train_idx, test_idx))
    return _assemble(source, test_source, plan, cfg)


def _assemble(source, test_source, plan, cfg) -> SessionStream:
    test_from = test_source if test_source is not None else source
    sessions = []
    for classes, train_idx, test_idx in plan:
        tr = np.concatenate(train_idx) if train_idx else np.empty(0, dtype=np.int64)
        te = np.concatenate(test_idx) if test_idx else np.empty(0, dtype=np.int64)
        sessions.append((source.subset(tr, classes), test_from.subset(te, classes)))
    return SessionStream(tuple(sessions), cfg.base_classes, cfg.way, cfg.shot)


def cumulative_test_set(stream: SessionStream, session_id: int) -> LabeledSet:
    """Union of the test sets of sessions ``0..session_id``."""
    if not 0 <= session_id < stream.num_sessions:
        raise IndexOutOfRange(f"session {session_id} outside [0, {stream.num_sessions})")
    return LabeledSet.concat(stream.test(i) for i in range(session_id + 1))


def cumulative_train_set(stream: SessionStream, session_id: int) -> LabeledSet:
    if not 0 <= session_id < stream.num_sessions:
        raise IndexOutOfRange(f"session {session_id} outside [0, {stream.num_sessions})")
    return LabeledSet.concat(stream.train(i) for i in range(session_id + 1))


def _expected_chi(k: int) -> float:
    return math.sqrt(2.0) * math.exp(math.lgamma((k + 1) / 2) - math.lgamma(k / 2))


def synth_blob_source(
    classes: int,
    per_class: int,
    dim: int = 64,
    separation: float = 10.0,
    seed: int = 0,
    noise: float = 1.0,
    dtype: torch.dtype = torch.float32,
) -> LabeledSet:
    """Isotropic Gaussian clusters shaped as single-channel square images.

    When ``classes <= dim`` the class means are scaled orthonormal vectors, so
    every pair of means is exactly ``separation`` apart; otherwise they are
    Gaussian with a scale chosen so the expected pairwise distance equals
    ``separation``. ``dim`` must be a perfect square; samples have shape
    ``(1, sqrt(dim), sqrt(dim))``.
    """
    if classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes and 2 samples per class")
    if separation <= 0:
        raise ValueError("separation must be positive")
    side = math.isqrt(dim)
    if side * side != dim:
        raise ValueError(f"dim={dim} is not a perfect square")
    rng = np.random.default_rng(seed)
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        means = q.T * (separation / math.sqrt(2.0))
    else:
        sigma = separation / (math.sqrt(2.0) * _expected_chi(dim))
        means = rng.standard_normal((classes, dim)) * sigma
    x = means[:, None, :] + noise * rng.standard_normal((classes, per_class, dim))
    inputs = torch.from_numpy(x.reshape(classes * per_class, 1, side, side)).to(dtype)
    labels = torch.arange(classes).repeat_interleave(per_class)
    return LabeledSet(inputs, labels, tuple(range(classes)))


# ---------------------------------------------------------------- split files


def stream_to_split(stream: SessionStream) -> dict:
    sessions = []
    for train, test in stream.sessions:
        sessions.append(
            {
                "classes": list(train.class_ids),
                "train_samples": train.sample_ids.tolist(),
                "test_samples": test.sample_ids.tolist(),
            }
        )
    return {
        "format": SPLIT_FORMAT,
        "base_class_count": stream.base_class_count,
        "way": stream.way,
        "shot": stream.shot,
        "sessions": sessions,
    }


def save_split_file(stream: SessionStream, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        yaml.safe_dump(stream_to_split(stream), fh, sort_keys=False, default_flow_style=None)
    return path


def load_split_file(path) -> dict:
    with Path(path).open() as fh:
        split = yaml.safe_load(fh)
    if not isinstance(split, dict) or "sessions" not in split:
        raise ValueError(f"{path}: not a split file")
    if split.get("format", SPLIT_FORMAT) != SPLIT_FORMAT:
        raise ValueError(f"{path}: unsupported split format {split.get('format')!r}")
    return split


def stream_from_split(
    source: LabeledSet,
    split: dict,
    test_source: LabeledSet | None = None,
    seed: int = 0,
    test_fraction: float = 0.5,
) -> SessionStream:
    """Build a stream from explicit per-session class lists.

    ``train_samples`` / ``test_samples`` (source sample ids) are honoured when
    present. Missing sample lists fall back to the seeded per-class rule of
    :func:`build_session_stream`.
    """
    sessions = split["sessions"]
    way = int(split.get("way", len(sessions[1]["classes"]) if len(sessions) > 1 else 0))
    shot = split.get("shot")
    if shot is None:
        if len(sessions) > 1 and "train_samples" in sessions[1]:
            shot = len(sessions[1]["train_samples"]) // max(way, 1)
        else:
            raise ValueError("split file must state 'shot' when sample lists are absent")
    shot = int(shot)
    cfg = SplitConfig(
        base_classes=len(sessions[0]["classes"]),
        incremental_sessions=len(sessions) - 1,
        way=way,
        shot=shot,
        seed=seed,
        test_fraction=test_fraction,
    )
    test_from = test_source if test_source is not None else source
    pos_train = {int(s): i for i, s in enumerate(source.sample_ids.tolist())}
    pos_test = {int(s): i for i, s in enumerate(test_from.sample_ids.tolist())}
    plan = []
    for i, entry in enumerate(sessions):
        classes = [int(c) for c in entry["classes"]]
        missing = [c for c in classes if c not in source.class_index]
        if missing:
            raise InsufficientClasses(f"split session {i} names unknown classes {missing}")
        if "train_samples" in entry:
            tr = [np.array([pos_train[int(s)] for s in entry["train_samples"]], dtype=np.int64)]
            te = [np.array([pos_test[int(s)] for s in entry["test_samples"]], dtype=np.int64)]
        else:
            tr, te = [], []
            for c in classes:
                train_pool, test_pool = _train_test_pools(source, test_source, c, cfg)
                tr.append(np.sort(train_pool) if i == 0 else train_pool[:shot])
                te.append(test_pool)
        plan.append((classes, tr, te))
    return _assemble(source, test_source, plan, cfg)
