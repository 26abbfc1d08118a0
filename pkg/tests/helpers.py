import torch

from fscil.data import LabeledSet


def label_source(n_classes, per_class, shape=(1, 2, 2), seed=0, dtype=torch.float32):
    """Cheap labelled source with tiny inputs, for protocol tests."""
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(n_classes).repeat_interleave(per_class)
    x = torch.randn(len(labels), *shape, generator=g, dtype=dtype)
    return LabeledSet(x, labels, tuple(range(n_classes)))


def identity_mlp(in_shape, dtype=torch.float64):
    """Single linear layer initialised to the identity map."""
    from fscil.encoders import build_encoder

    d = 1
    for v in in_shape:
        d *= v
    enc = build_encoder("tiny-mlp", in_shape, embed_dim=d, hidden=(), dtype=dtype)
    with torch.no_grad():
        lin = enc.net[0]
        lin.weight.copy_(torch.eye(d, dtype=dtype))
        lin.bias.zero_()
    return enc


def max_rel_grad_error(loss_fn, params, eps=1e-3, floor=1e-7):
    """Largest elementwise relative gap between autograd and a five-point
    central difference of ``loss_fn()`` over every entry of ``params``.

    ``floor`` bounds the denominator so entries whose true gradient is zero
    (e.g. directions the loss is invariant to) are compared absolutely.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            vals = []
            with torch.no_grad():
                for k in (2, 1, -1, -2):
                    flat[i] = old + k * eps
                    vals.append(loss_fn().item())
                flat[i] = old
            fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
            a = analytic[i].item()
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


def param_count(module):
    return sum(p.numel() for p in module.parameters())
