"""Feature encoders and their checkpoint format.

Three architectures are available:

``tiny-mlp``
    flatten -> [Linear -> activation] * len(hidden) -> Linear(embed_dim).
    With ``hidden=()`` it is a single affine map.
``small-cnn``
    [Conv3x3 -> BatchNorm -> ReLU -> MaxPool2] per width, global average
    pooling, Linear(embed_dim).
``resnet18-like``
    torchvision ResNet-18 with a 3x3 stride-1 stem, no stem max-pool and the
    classification head removed; ``embed_dim`` is fixed at 512.

Checkpoints are single ``torch.save`` files holding a dict with the keys
``format``, ``arch``, ``embed_dim``, ``in_shape``, ``arch_kwargs`` and
``params`` (the encoder ``state_dict``), plus optional ``classifier_rows``,
``classifier_registry``, ``metric`` and ``meta``.
"""
from __future__ import annotations

import copy
import io
from pathlib import Path

import torch
from torch import nn

from .errors import ShapeMismatch
from .metrics import WeightMatrix

CHECKPOINT_FORMAT = "fscil-encoder/1"
ARCHITECTURES = ("tiny-mlp", "small-cnn", "resnet18-like")
DEFAULT_EMBED_DIM = {"tiny-mlp": 64, "small-cnn": 64, "resnet18-like": 512}

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU}


class Encoder(nn.Module):
    arch: str

    def __init__(self, in_shape, embed_dim, **arch_kwargs):
        super().__init__()
        self.in_shape = tuple(int(v) for v in in_shape)
        self.embed_dim = int(embed_dim)
        self.arch_kwargs = arch_kwargs

    def check_input(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeMismatch(f"{self.arch} expects inputs of shape {self.in_shape}, got {tuple(x.shape[1:])}")


class TinyMLP(Encoder):
    arch = "tiny-mlp"

    def __init__(self, in_shape, embed_dim=64, hidden=(64,), activation="relu"):
        super().__init__(in_shape, embed_dim, hidden=tuple(hidden), activation=activation)
        width = 1
        for v in self.in_shape:
            width *= v
        layers = []
        for h in hidden:
            layers += [nn.Linear(width, h), _ACTIVATIONS[activation]()]
            width = h
        layers.append(nn.Linear(width, embed_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.flatten(1))


class SmallCNN(Encoder):
    arch = "small-cnn"

    def __init__(self, in_shape, embed_dim=64, widths=(16, 32)):
        super().__init__(in_shape, embed_dim, widths=tuple(widths))
        blocks = []
        c = self.in_shape[0]
        for w in widths:
            blocks += [
                nn.Conv2d(c, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(),
                nn.MaxPool2d(2, ceil_mode=True),
            ]
            c = w
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(c, embed_dim)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class ResNet18Like(Encoder):
    arch = "resnet18-like"

    def __init__(self, in_shape, embed_dim=512):
        if embed_dim != 512:
            raise ValueError("resnet18-like has a fixed embed_dim of 512")
        super().__init__(in_shape, embed_dim)
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.conv1 = nn.Conv2d(self.in_shape[0], 64, 3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(x)


_REGISTRY = {cls.arch: cls for cls in (TinyMLP, SmallCNN, ResNet18Like)}


def build_encoder(arch: str, in_shape, embed_dim: int | None = None, seed: int | None = None, dtype=torch.float32, **arch_kwargs) -> Encoder:
    if arch not in _REGISTRY:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    if embed_dim is None:
        embed_dim = DEFAULT_EMBED_DIM[arch]
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            enc = _REGISTRY[arch](in_shape, embed_dim=embed_dim, **arch_kwargs)
    else:
        enc = _REGISTRY[arch](in_shape, embed_dim=embed_dim, **arch_kwargs)
    return enc.to(dtype)


def clone_encoder(enc: Encoder) -> Encoder:
    return copy.deepcopy(enc)


def encode(enc: Encoder, inputs: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    """Embeddings of ``inputs`` in inference mode, without gradients."""
    enc.check_input(inputs)
    dtype = next(enc.parameters()).dtype
    if inputs.shape[0] == 0:
        return torch.zeros(0, enc.embed_dim, dtype=dtype)
    was_training = enc.training
    enc.eval()
    try:
        with torch.no_grad():
            out = torch.cat(
                [enc(inputs[i : i + batch_size].to(dtype)) for i in range(0, inputs.shape[0], batch_size)]
            )
    finally:
        enc.train(was_training)
    if not torch.isfinite(out).all():
        raise FloatingPointError("encoder produced non-finite embeddings")
    return out


# ----------------------------------------------------------------- checkpoints


def checkpoint_dict(enc: Encoder, classifier: WeightMatrix | None = None, metric: str | None = None, meta: dict | None = None) -> dict:
    state = {
        "format": CHECKPOINT_FORMAT,
        "arch": enc.arch,
        "embed_dim": enc.embed_dim,
        "in_shape": list(enc.in_shape),
        "arch_kwargs": {k: list(v) if isinstance(v, tuple) else v for k, v in enc.arch_kwargs.items()},
        "params": {k: v.detach().clone() for k, v in enc.state_dict().items()},
    }
    if classifier is not None:
        state["classifier_rows"] = classifier.rows.detach().clone()
        state["classifier_registry"] = list(classifier.registry)
    if metric is not None:
        state["metric"] = metric
    if meta:
        state["meta"] = dict(meta)
    return state


def serialize(enc: Encoder, classifier: WeightMatrix | None = None, metric: str | None = None, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    torch.save(checkpoint_dict(enc, classifier, metric, meta), buf)
    return buf.getvalue()


def save_checkpoint(path, enc: Encoder, classifier: WeightMatrix | None = None, metric: str | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(serialize(enc, classifier, metric, meta))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(encoder, classifier or None, metric or None, meta)``."""
    state = torch.load(Path(path), map_location="cpu", weights_only=True)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {state.get('format')!r}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in state["arch_kwargs"].items()}
    params = state["params"]
    dtype = next(iter(params.values())).dtype if params else torch.float32
    enc = build_encoder(state["arch"], state["in_shape"], state["embed_dim"], dtype=dtype, **kwargs)
    enc.load_state_dict(params)
    classifier = None
    if "classifier_rows" in state:
        classifier = WeightMatrix(state["classifier_rows"], tuple(state["classifier_registry"]))
    return enc, classifier, state.get("metric"), state.get("meta", {})
