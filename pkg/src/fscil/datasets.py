"""Source-dataset adapters.

Every adapter returns ``(train_pool, test_pool)`` as :class:`LabeledSet`.
``test_pool`` is ``None`` for the synthetic source, whose classes are split
by :func:`build_session_stream` itself. Expected directory layouts:

cifar100
    ``<root>/cifar-100-python/{train,test}`` (the official pickles).
miniimagenet
    ``<root>/images/<file>`` plus ``<root>/split/{train,test}.csv`` with a
    ``filename,label`` header.
cub200
    ``<root>/CUB_200_2011/`` with ``images.txt``, ``image_class_labels.txt``,
    ``train_test_split.txt`` and ``images/``.
"""
from __future__ import annotations

import csv
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import LabeledSet, synth_blob_source

MEAN_STD = {
    "cifar100": ((0.507, 0.487, 0.441), (0.267, 0.256, 0.276)),
    "miniimagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "cub200": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}
DEFAULT_IMAGE_SIZE = {"cifar100": 32, "miniimagenet": 84, "cub200": 224}


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    root: str | None = None
    image_size: int | None = None
    split_file: str | None = None
    # synthetic source
    classes: int = 20
    per_class: int = 60
    dim: int = 64
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in ADAPTERS:
            raise ValueError(f"unknown dataset {self.name!r}; choose from {sorted(ADAPTERS)}")
        if self.name != "synthetic" and not self.root:
            raise ValueError(f"dataset {self.name!r} needs a root directory")


def _normalize(x: torch.Tensor, name: str) -> torch.Tensor:
    mean, std = MEAN_STD[name]
    return (x - torch.tensor(mean)[:, None, None]) / torch.tensor(std)[:, None, None]


def _load_images(paths, size: int, name: str) -> torch.Tensor:
    from PIL import Image

    out = torch.empty(len(paths), 3, size, size)
    for i, p in enumerate(paths):
        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32)
        out[i] = torch.from_numpy(arr / 255.0).permute(2, 0, 1)
    return _normalize(out, name)


def load_synthetic(cfg: DatasetConfig):
    return synth_blob_source(cfg.classes, cfg.per_class, cfg.dim, cfg.separation, cfg.seed, cfg.noise), None


def load_cifar100(cfg: DatasetConfig):
    base = Path(cfg.root) / "cifar-100-python"
    parts = []
    offset = 0
    for split in ("train", "test"):
        with (base / split).open("rb") as fh:
            blob = pickle.load(fh, encoding="bytes")
        data = np.asarray(blob[b"data"], dtype=np.float32).reshape(-1, 3, 32, 32) / 255.0
        x = _normalize(torch.from_numpy(data), "cifar100")
        size = cfg.image_size or 32
        if size != 32:
            x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        labels = torch.tensor(blob[b"fine_labels"], dtype=torch.long)
        ids = torch.arange(offset, offset + len(labels))
        offset += len(labels)
        parts.append(LabeledSet(x, labels, tuple(range(100)), ids))
    return parts[0], parts[1]


def load_miniimagenet(cfg: DatasetConfig):
    root = Path(cfg.root)
    size = cfg.image_size or DEFAULT_IMAGE_SIZE["miniimagenet"]
    rows = {}
    for split in ("train", "test"):
        with (root / "split" / f"{split}.csv").open() as fh:
            rows[split] = [(r["filename"], r["label"]) for r in csv.DictReader(fh)]
    wnids = sorted({lab for r in rows.values() for _, lab in r})
    cls = {w: i for i, w in enumerate(wnids)}
    parts = []
    offset = 0
    for split in ("train", "test"):
        files = [root / "images" / f for f, _ in rows[split]]
        labels = torch.tensor([cls[lab] for _, lab in rows[split]], dtype=torch.long)
        ids = torch.arange(offset, offset + len(labels))
        offset += len(labels)
        parts.append(LabeledSet(_load_images(files, size, "miniimagenet"), labels, tuple(range(len(wnids))), ids))
    return parts[0], parts[1]


def load_cub200(cfg: DatasetConfig):
    root = Path(cfg.root) / "CUB_200_2011"
    size = cfg.image_size or DEFAULT_IMAGE_SIZE["cub200"]

    def table(name):
        with (root / name).open() as fh:
            return dict(line.split(maxsplit=1) for line in fh.read().splitlines() if line.strip())

    images = table("images.txt")
    labels = {k: int(v) - 1 for k, v in table("image_class_labels.txt").items()}
    is_train = {k: v.strip() == "1" for k, v in table("train_test_split.txt").items()}
    classes = tuple(sorted(set(labels.values())))
    parts = []
    for want in (True, False):
        keys = sorted((k for k in images if is_train[k] == want), key=int)
        files = [root / "images" / images[k].strip() for k in keys]
        parts.append(
            LabeledSet(
                _load_images(files, size, "cub200"),
                torch.tensor([labels[k] for k in keys], dtype=torch.long),
                classes,
                torch.tensor([int(k) for k in keys], dtype=torch.long),
            )
        )
    return parts[0], parts[1]


ADAPTERS = {
    "synthetic": load_synthetic,
    "cifar100": load_cifar100,
    "miniimagenet": load_miniimagenet,
    "cub200": load_cub200,
}


def load_source(cfg: DatasetConfig):
    return ADAPTERS[cfg.name](cfg)
