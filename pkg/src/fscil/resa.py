"""Pseudo incremental tasks built from base-session data.

A task pairs an episode (support ``S`` and query ``Q`` over a few base classes
treated as new) with a synthesized copy of it (``S^a``, ``Q^a``) whose classes
get fresh labels, and with the classifier rows of the remaining base classes
for both models.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import LabeledSet
from .encoders import Encoder, encode
from .errors import EmptyTrainSet, InsufficientClasses, InsufficientSamples, NonSquareInput
from .metrics import WeightMatrix, check_same_registry, prototype

ROTATION_ANGLES = (90, 180, 270)


@dataclass
class ResaConfig:
    way: int = 5
    shot: int = 20
    query_per_class: int = 15
    rotations_per_task: int = 1
    augmentation: str = "rotate"

    def __post_init__(self):
        if self.way < 1 or self.shot < 1 or self.query_per_class < 1:
            raise ValueError("way, shot and query_per_class must be positive")
        if self.rotations_per_task not in (1, 2, 3):
            raise ValueError("rotations_per_task must be 1, 2 or 3")
        if self.augmentation not in AUGMENTATION_POLICIES:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")


@dataclass(frozen=True, eq=False)
class Episode:
    support: LabeledSet
    query: LabeledSet
    pseudo_new: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PseudoIncrementalTask:
    episode: Episode
    aug_support: LabeledSet
    aug_query: LabeledSet
    w1_po: WeightMatrix
    w2_po: WeightMatrix
    # rotation angle per block of synthesized classes; empty for mix policies
    angles: tuple[int, ...] = ()
    policy: str = "rotate"
    synth_map: dict = field(default_factory=dict)

    @property
    def rotation_angle(self) -> int | None:
        return self.angles[0] if len(self.angles) == 1 else None

    @property
    def synthesized(self) -> tuple[int, ...]:
        return self.aug_support.class_ids

    def manifest(self) -> dict:
        """Plain-data description for reproducibility audits."""
        return {
            "pseudo_new": list(self.episode.pseudo_new),
            "synthesized": list(self.synthesized),
            "policy": self.policy,
            "angles": list(self.angles),
            "support_samples": self.episode.support.sample_ids.tolist(),
            "query_samples": self.episode.query.sample_ids.tolist(),
            "pseudo_old": list(self.w1_po.registry),
        }


def compute_model_weights(enc: Encoder, base_train: LabeledSet) -> WeightMatrix:
    """Per-class mean embeddings of the base training set."""
    if len(base_train) == 0:
        raise EmptyTrainSet("weight computing needs base training data")
    return prototype(encode(enc, base_train.inputs), base_train.labels, order=base_train.class_ids)


def sample_episode(
    base_train: LabeledSet, way: int, shot: int, query_per_class: int, rng: np.random.Generator
) -> Episode:
    """Draw ``way`` classes uniformly, then ``shot + query_per_class`` distinct
    samples of each, split into support and query."""
    classes = base_train.class_ids
    if way > len(classes):
        raise InsufficientClasses(f"episode needs {way} classes, base has {len(classes)}")
    need = shot + query_per_class
    index = base_train.class_index
    short = [c for c in classes if len(index[c]) < need]
    if short:
        raise InsufficientSamples(f"classes {short[:5]} have fewer than {need} samples")
    chosen = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    s_idx, q_idx = [], []
    for c in chosen:
        pick = rng.choice(index[c], size=need, replace=False)
        s_idx.append(pick[:shot])
        q_idx.append(pick[shot:])
    return Episode(
        base_train.subset(np.concatenate(s_idx), chosen),
        base_train.subset(np.concatenate(q_idx), chosen),
        tuple(chosen),
    )


def select_pseudo_old_weights(w1: WeightMatrix, w2: WeightMatrix, pseudo_new) -> tuple[WeightMatrix, WeightMatrix]:
    check_same_registry(w1, w2)
    return w1.drop(pseudo_new), w2.drop(pseudo_new)


def _rotate(x: torch.Tensor, angle: int) -> torch.Tensor:
    if angle not in ROTATION_ANGLES:
        raise ValueError(f"rotation angle must be one of {ROTATION_ANGLES}")
    if x.dim() < 3 or x.shape[-1] != x.shape[-2]:
        raise NonSquareInput(f"cannot rotate inputs of shape {tuple(x.shape[1:])}")
    return torch.rot90(x, k=angle // 90, dims=(-2, -1))


def _synth_set(src: LabeledSet, inputs: torch.Tensor, mapping: dict[int, int], order) -> LabeledSet:
    labels = torch.tensor([mapping[c] for c in src.labels.tolist()], dtype=torch.long)
    return LabeledSet(inputs, labels, tuple(mapping[c] for c in order), src.sample_ids)


def augment_rotate(ep: Episode, angle: int, label_offset: int, rng=None) -> tuple[LabeledSet, LabeledSet]:
    """Rotate every support and query sample by ``angle`` degrees.

    The i-th pseudo-new class becomes class ``label_offset + i``.
    """
    mapping = {c: label_offset + i for i, c in enumerate(ep.pseudo_new)}
    return (
        _synth_set(ep.support, _rotate(ep.support.inputs, angle), mapping, ep.pseudo_new),
        _synth_set(ep.query, _rotate(ep.query.inputs, angle), mapping, ep.pseudo_new),
    )


def _partner_samples(part: LabeledSet, pseudo_new, rng: np.random.Generator) -> np.ndarray:
    """For each sample, a random sample of the next class in ``pseudo_new``."""
    nxt = {c: pseudo_new[(i + 1) % len(pseudo_new)] for i, c in enumerate(pseudo_new)}
    index = part.class_index
    return np.array([rng.choice(index[nxt[c]]) for c in part.labels.tolist()], dtype=np.int64)


def augment_mixup(ep: Episode, label_offset: int, rng: np.random.Generator, lam: float | None = None):
    """Blend each sample with one of the next pseudo-new class; one new class per pair."""
    if len(ep.pseudo_new) < 2:
        raise InsufficientClasses("mixup synthesis needs at least two episode classes")
    if lam is None:
        lam = float(rng.uniform(0.4, 0.6))
    mapping = {c: label_offset + i for i, c in enumerate(ep.pseudo_new)}
    out = []
    for part in (ep.support, ep.query):
        other = part.inputs[torch.from_numpy(_partner_samples(part, ep.pseudo_new, rng))]
        out.append(_synth_set(part, lam * part.inputs + (1 - lam) * other, mapping, ep.pseudo_new))
    return out[0], out[1], lam


def augment_cutmix(ep: Episode, label_offset: int, rng: np.random.Generator, frac: float | None = None):
    """Paste a square patch from a sample of the next pseudo-new class.

    The patch position is shared by the whole task so each synthesized class
    is a consistent composite.
    """
    if len(ep.pseudo_new) < 2:
        raise InsufficientClasses("cutmix synthesis needs at least two episode classes")
    x = ep.support.inputs
    if x.dim() < 3:
        raise NonSquareInput("cutmix needs spatial inputs")
    h, w = x.shape[-2:]
    if frac is None:
        frac = float(rng.uniform(0.3, 0.6))
    ph, pw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    mapping = {c: label_offset + i for i, c in enumerate(ep.pseudo_new)}
    out = []
    for part in (ep.support, ep.query):
        other = part.inputs[torch.from_numpy(_partner_samples(part, ep.pseudo_new, rng))]
        mixed = part.inputs.clone()
        mixed[..., top : top + ph, left : left + pw] = other[..., top : top + ph, left : left + pw]
        out.append(_synth_set(part, mixed, mapping, ep.pseudo_new))
    return out[0], out[1], (top, left, ph, pw)


AUGMENTATION_POLICIES = ("rotate", "mixup", "cutmix")


def build_pseudo_task(
    base_train: LabeledSet,
    w1: WeightMatrix,
    w2: WeightMatrix,
    way: int,
    shot: int,
    query_per_class: int,
    rng: np.random.Generator,
    policy: str = "rotate",
    rotations_per_task: int = 1,
    label_offset: int | None = None,
) -> PseudoIncrementalTask:
    """Sample an episode, synthesize its augmented twin and pick pseudo-old rows."""
    check_same_registry(w1, w2)
    if label_offset is None:
        label_offset = max(base_train.class_ids + w1.registry) + 1
    ep = sample_episode(base_train, way, shot, query_per_class, rng)
    w1_po, w2_po = select_pseudo_old_weights(w1, w2, ep.pseudo_new)
    angles: tuple[int, ...] = ()
    if policy == "rotate":
        angles = tuple(int(a) for a in rng.choice(ROTATION_ANGLES, size=rotations_per_task, replace=False))
        parts = [augment_rotate(ep, a, label_offset + k * way) for k, a in enumerate(angles)]
        s_a = LabeledSet.concat(p[0] for p in parts)
        q_a = LabeledSet.concat(p[1] for p in parts)
    elif policy == "mixup":
        s_a, q_a, _ = augment_mixup(ep, label_offset, rng)
    elif policy == "cutmix":
        s_a, q_a, _ = augment_cutmix(ep, label_offset, rng)
    else:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    synth_map = {c: label_offset + i for i, c in enumerate(ep.pseudo_new)}
    return PseudoIncrementalTask(ep, s_a, q_a, w1_po, w2_po, angles, policy, synth_map)
