"""Prototype classifiers and the two relation metrics.

Score matrices are plain ``(num_samples, num_classes)`` tensors. Cosine
scores lie in ``[-1, 1]``; squared-Euclidean scores are ``-||a - b||^2 / d``
and therefore never positive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import (
    DuplicateClass,
    EmptyInput,
    LabelOutOfRegistry,
    RegistryMismatch,
    ShapeMismatch,
    UnknownClass,
    ZeroNormVector,
)

METRICS = ("cosine", "sq_euclid")


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Classifier weights, one row per class, aligned with ``registry``."""

    rows: torch.Tensor
    registry: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "registry", tuple(int(c) for c in self.registry))
        if self.rows.dim() != 2:
            raise ShapeMismatch(f"weight rows must be 2-D, got shape {tuple(self.rows.shape)}")
        if self.rows.shape[0] != len(self.registry):
            raise ShapeMismatch(
                f"{self.rows.shape[0]} rows but {len(self.registry)} registry entries"
            )
        if len(set(self.registry)) != len(self.registry):
            raise DuplicateClass(f"duplicate class ids in registry {self.registry}")
        if not torch.isfinite(self.rows.detach()).all():
            raise ValueError("weight rows contain non-finite values")

    @classmethod
    def empty(cls, dim: int, dtype=torch.float32) -> "WeightMatrix":
        return cls(torch.zeros(0, dim, dtype=dtype), ())

    def __len__(self):
        return len(self.registry)

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def index(self, class_id: int) -> int:
        try:
            return self.registry.index(int(class_id))
        except ValueError:
            raise UnknownClass(class_id) from None

    def concat(self, other: "WeightMatrix") -> "WeightMatrix":
        clash = set(self.registry) & set(other.registry)
        if clash:
            raise DuplicateClass(f"classes {sorted(clash)} already registered")
        if len(self) and len(other) and self.dim != other.dim:
            raise ShapeMismatch(f"cannot stack dims {self.dim} and {other.dim}")
        if not len(other):
            return self
        if not len(self):
            return WeightMatrix(other.rows, other.registry)
        return WeightMatrix(torch.cat([self.rows, other.rows]), self.registry + other.registry)

    def drop(self, class_ids: Sequence[int]) -> "WeightMatrix":
        drop = {int(c) for c in class_ids}
        unknown = drop - set(self.registry)
        if unknown:
            raise UnknownClass(sorted(unknown))
        keep = [i for i, c in enumerate(self.registry) if c not in drop]
        return WeightMatrix(self.rows[keep], tuple(self.registry[i] for i in keep))

    def detach(self) -> "WeightMatrix":
        return WeightMatrix(self.rows.detach(), self.registry)


def labels_to_indices(labels, registry: Sequence[int]) -> torch.Tensor:
    """Map class ids to positions in ``registry``."""
    pos = {int(c): i for i, c in enumerate(registry)}
    out = []
    for c in torch.as_tensor(labels).reshape(-1).tolist():
        if c not in pos:
            raise LabelOutOfRegistry(f"class {c} is not in the registry")
        out.append(pos[c])
    return torch.tensor(out, dtype=torch.long)


def prototype(embeddings: torch.Tensor, labels, order: Sequence[int] | None = None) -> WeightMatrix:
    """Per-class mean embeddings.

    Rows follow first appearance in ``labels`` unless ``order`` is given, in
    which case every class in ``order`` must have at least one embedding.
    Differentiable with respect to ``embeddings``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if embeddings.dim() != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ShapeMismatch(
            f"embeddings {tuple(embeddings.shape)} do not match {labels.shape[0]} labels"
        )
    if labels.numel() == 0:
        raise EmptyInput("prototype of an empty set")
    if order is None:
        order = list(dict.fromkeys(labels.tolist()))
    else:
        order = [int(c) for c in order]
    idx = labels_to_indices(labels, order)
    k = len(order)
    counts = torch.bincount(idx, minlength=k)
    if (counts == 0).any():
        missing = [order[i] for i in torch.nonzero(counts == 0).reshape(-1).tolist()]
        raise EmptyInput(f"classes {missing} have no embeddings")
    sums = embeddings.new_zeros(k, embeddings.shape[1]).index_add(0, idx, embeddings)
    return WeightMatrix(sums / counts.to(embeddings.dtype)[:, None], tuple(order))


def _rows(w) -> torch.Tensor:
    return w.rows if isinstance(w, WeightMatrix) else w


def cosine_scores(emb: torch.Tensor, w) -> torch.Tensor:
    """Cosine similarity of every embedding with every weight row.

    Raises :class:`ZeroNormVector` for zero-length inputs instead of clamping.
    """
    rows = _rows(w)
    if emb.dim() != 2 or rows.dim() != 2 or emb.shape[1] != rows.shape[1]:
        raise ShapeMismatch(f"cannot compare {tuple(emb.shape)} with {tuple(rows.shape)}")
    en = emb.norm(dim=1, keepdim=True)
    wn = rows.norm(dim=1, keepdim=True)
    if (en == 0).any():
        raise ZeroNormVector("zero-norm embedding")
    if (wn == 0).any():
        raise ZeroNormVector("zero-norm weight row")
    return ((emb / en) @ (rows / wn).T).clamp(-1.0, 1.0)


def sqeuclid_scores(emb: torch.Tensor, w, chunk: int = 4096) -> torch.Tensor:
    """``-||emb_i - row_j||^2 / d``; exactly zero when the vectors coincide."""
    rows = _rows(w)
    if emb.dim() != 2 or rows.dim() != 2 or emb.shape[1] != rows.shape[1]:
        raise ShapeMismatch(f"cannot compare {tuple(emb.shape)} with {tuple(rows.shape)}")
    d = emb.shape[1]
    # explicit differences; the expanded a^2 + b^2 - 2ab form is not exact at zero
    step = max(1, chunk // max(1, rows.shape[0]))
    parts = [
        -((emb[i : i + step, None, :] - rows[None, :, :]) ** 2).sum(-1) / d
        for i in range(0, emb.shape[0], step)
    ]
    if not parts:
        return emb.new_zeros(0, rows.shape[0])
    return torch.cat(parts)


def metric_scores(emb: torch.Tensor, w, metric: str) -> torch.Tensor:
    if metric == "cosine":
        return cosine_scores(emb, w)
    if metric == "sq_euclid":
        return sqeuclid_scores(emb, w)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def scaled_log_softmax(scores: torch.Tensor, s: float) -> torch.Tensor:
    if s <= 0:
        raise ValueError("scale factor must be positive")
    z = s * scores
    z = z - z.max(dim=1, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=1, keepdim=True))


def scaled_softmax(scores: torch.Tensor, s: float) -> torch.Tensor:
    """Row-wise softmax of ``s * scores``, stabilised by subtracting the row max."""
    if s <= 0:
        raise ValueError("scale factor must be positive")
    z = s * scores
    z = z - z.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def cross_entropy(probs: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-probability of the target column of each row."""
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if probs.dim() != 2 or probs.shape[0] != targets.shape[0]:
        raise ShapeMismatch(f"{tuple(probs.shape)} probabilities for {targets.shape[0]} targets")
    if targets.numel() and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise LabelOutOfRegistry(f"target index outside [0, {probs.shape[1]})")
    p = probs.gather(1, targets[:, None]).squeeze(1)
    tiny = torch.finfo(probs.dtype).tiny
    return -torch.log(p.clamp_min(tiny)).mean()


def check_same_registry(a: WeightMatrix, b: WeightMatrix) -> None:
    if a.registry != b.registry:
        raise RegistryMismatch("classifier registries differ in classes or order")
