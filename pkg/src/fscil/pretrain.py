"""Base-session training with a scaled cosine classifier."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF

from .data import LabeledSet
from .encoders import Encoder, encode
from .errors import EmptyTrainSet, NonFiniteLoss
from .metrics import WeightMatrix, labels_to_indices, metric_scores, prototype

log = logging.getLogger(__name__)

AUGMENTATIONS = ("resized-crop", "horizontal-flip", "color-jitter")


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 40
    scale_s: float = 16.0
    augment: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.augment = list(self.augment)
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("batch_size", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.scale_s <= 0:
            raise ValueError("learning_rate and scale_s must be positive")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("weight_decay and momentum must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        unknown = set(self.augment) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")


# ---------------------------------------------------------------- augmentation


def _uniform(g, lo, hi):
    return lo + (hi - lo) * torch.rand((), generator=g).item()


def augment_batch(x: torch.Tensor, policy, g: torch.Generator) -> torch.Tensor:
    """Apply the listed augmentations independently to each image of ``x``."""
    if not policy or x.dim() != 4:
        return x
    out = []
    h, w = x.shape[-2:]
    for img in x:
        if "resized-crop" in policy:
            area = h * w * _uniform(g, 0.6, 1.0)
            ratio = math.exp(_uniform(g, math.log(3 / 4), math.log(4 / 3)))
            ch = min(h, max(1, int(round(math.sqrt(area / ratio)))))
            cw = min(w, max(1, int(round(math.sqrt(area * ratio)))))
            top = int(torch.randint(0, h - ch + 1, (), generator=g))
            left = int(torch.randint(0, w - cw + 1, (), generator=g))
            img = TF.resized_crop(img, top, left, ch, cw, [h, w], antialias=False)
        if "horizontal-flip" in policy and torch.rand((), generator=g).item() < 0.5:
            img = img.flip(-1)
        if "color-jitter" in policy:
            # brightness/contrast as affine maps so non-image inputs stay valid
            b = _uniform(g, 0.6, 1.4)
            c = _uniform(g, 0.6, 1.4)
            mean = img.mean()
            img = (img - mean) * c + mean * b
            if img.shape[0] == 3:
                img = TF.adjust_saturation(img.clamp(0, 1), _uniform(g, 0.6, 1.4))
        out.append(img)
    return torch.stack(out)


# ---------------------------------------------------------------------- losses


def classification_logits(emb, weights: torch.Tensor, s: float, metric: str = "cosine"):
    return s * metric_scores(emb, weights, metric)


def pretrain_loss(enc: Encoder, weights: torch.Tensor, x, targets, s: float, metric: str = "cosine"):
    """Cross-entropy of ``softmax(s * metric(f(x), W))`` against target indices."""
    return F.cross_entropy(classification_logits(enc(x), weights, s, metric), targets)


def make_sgd(params, lr, momentum, weight_decay):
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def pretrain_base(
    train: LabeledSet,
    enc: Encoder,
    cfg: PretrainConfig,
    metric: str = "cosine",
    history: list | None = None,
) -> tuple[Encoder, WeightMatrix]:
    """Train ``enc`` and a free classifier matrix end-to-end on ``train``.

    The encoder is updated in place and returned together with the learned
    weights (one row per class of ``train``, in registry order). One row per
    epoch is appended to ``history`` when given.
    """
    if len(train) == 0:
        raise EmptyTrainSet("pretraining needs a non-empty training set")
    dtype = next(enc.parameters()).dtype
    g = torch.Generator().manual_seed(cfg.seed)
    registry = train.class_ids
    w = torch.nn.Parameter(torch.randn(len(registry), enc.embed_dim, generator=g, dtype=dtype) * 0.1)
    targets = labels_to_indices(train.labels, registry)
    inputs = train.inputs.to(dtype)
    opt = make_sgd(list(enc.parameters()) + [w], cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay_factor)
    n = len(train)
    enc.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        total, correct, seen = 0.0, 0, 0
        lr = opt.param_groups[0]["lr"]
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            x = augment_batch(inputs[idx], cfg.augment, g)
            logits = classification_logits(enc(x), w, cfg.scale_s, metric)
            loss = F.cross_entropy(logits, targets[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss("pretrain", f"{epoch}:{step}", loss.item(), f"lr={lr}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == targets[idx]).sum())
            seen += len(idx)
        sched.step()
        row = {"epoch": epoch, "loss": total / max(seen, 1), "lr": lr, "accuracy": correct / max(seen, 1)}
        log.debug("pretrain epoch %(epoch)d loss %(loss).4f acc %(accuracy).3f", row)
        if history is not None:
            history.append(row)
    enc.eval()
    return enc, WeightMatrix(w.detach().clone(), registry)


def reinit_classifier_with_prototypes(enc: Encoder, train: LabeledSet) -> WeightMatrix:
    """Replace learned classifier weights by clean per-class mean embeddings."""
    if len(train) == 0:
        raise EmptyTrainSet("prototypes need a non-empty training set")
    return prototype(encode(enc, train.inputs), train.labels, order=train.class_ids)


def train_accuracy(enc: Encoder, weights: WeightMatrix, data: LabeledSet, metric: str = "cosine") -> float:
    scores = metric_scores(encode(enc, data.inputs), weights, metric)
    targets = labels_to_indices(data.labels, weights.registry)
    return float((scores.argmax(1) == targets).double().mean())
