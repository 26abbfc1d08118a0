"""Episodic training of the complementary (squared-Euclidean) model.

Each pseudo incremental task gives two objectives for the complementary
encoder ``f2`` while the base encoder ``f1`` stays frozen:

* global: classify ``Q`` among pseudo-old and pseudo-new classes with the
  combined relation ``s * (r1 / d + r2)``;
* local: classify ``Q`` and ``Q^a`` among pseudo-new and synthesized classes
  with ``s * r_local``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledSet
from .encoders import Encoder
from .errors import NonFiniteLoss, RegistryMismatch
from .inference import ModelState
from .metrics import (
    WeightMatrix,
    cosine_scores,
    cross_entropy,
    labels_to_indices,
    prototype,
    scaled_log_softmax,
    sqeuclid_scores,
)
from .pretrain import make_sgd
from .resa import PseudoIncrementalTask, ResaConfig, build_pseudo_task, compute_model_weights

log = logging.getLogger(__name__)

R1_SCALES = ("1/d", "1")


@dataclass
class ComplementaryConfig:
    epochs: int = 80
    tasks_per_epoch: int = 200
    learning_rate: float = 0.03
    weight_decay: float = 1e-4
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    scale_s: float = 16.0
    lambda1: float = 1.5
    lambda2: float = 2.0
    seed: int = 0
    init: str = "warm"
    global_r1_scale: str = "1/d"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ValueError("lambda1 and lambda2 must be non-negative and not both zero")
        if self.epochs < 0 or self.tasks_per_epoch < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs must be >= 0; tasks_per_epoch and lr_decay_every >= 1")
        if self.learning_rate <= 0 or self.scale_s <= 0:
            raise ValueError("learning_rate and scale_s must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.init not in ("warm", "random"):
            raise ValueError("init must be 'warm' or 'random'")
        if self.global_r1_scale not in R1_SCALES:
            raise ValueError(f"global_r1_scale must be one of {R1_SCALES}")


@dataclass
class TaskForwardTrace:
    w1_pn: WeightMatrix | None = None
    w2_pn: WeightMatrix | None = None
    w1_pg: WeightMatrix | None = None
    w2_pg: WeightMatrix | None = None
    w2_sa: WeightMatrix | None = None
    w2_l: WeightMatrix | None = None
    r1: torch.Tensor | None = None
    r2: torch.Tensor | None = None
    r_local: torch.Tensor | None = None
    p_global: torch.Tensor | None = None
    p_local: torch.Tensor | None = None
    logp_global: torch.Tensor | None = None
    logp_local: torch.Tensor | None = None
    y_global: torch.Tensor | None = None
    y_local: torch.Tensor | None = None
    l_global: torch.Tensor | None = None
    l_local: torch.Tensor | None = None
    l_total: torch.Tensor | None = None


@dataclass
class TaskEmbeddings:
    f1_s: torch.Tensor
    f1_q: torch.Tensor
    f2_s: torch.Tensor
    f2_q: torch.Tensor
    f2_sa: torch.Tensor
    f2_qa: torch.Tensor


def embed_task(task: PseudoIncrementalTask, base_enc: Encoder, comp_enc: Encoder) -> TaskEmbeddings:
    """Encode every part of ``task``; ``f2`` in one pass so batch statistics are shared.

    ``f1`` embeddings carry no gradient.
    """
    ep = task.episode
    dtype = next(comp_enc.parameters()).dtype
    with torch.no_grad():
        f1 = base_enc(torch.cat([ep.support.inputs, ep.query.inputs]).to(next(base_enc.parameters()).dtype))
    parts = [ep.support.inputs, ep.query.inputs, task.aug_support.inputs, task.aug_query.inputs]
    f2 = comp_enc(torch.cat(parts).to(dtype))
    sizes = [len(p) for p in parts]
    f2_s, f2_q, f2_sa, f2_qa = torch.split(f2, sizes)
    ns = len(ep.support)
    return TaskEmbeddings(f1[:ns], f1[ns:], f2_s, f2_q, f2_sa, f2_qa)


def global_forward(
    task: PseudoIncrementalTask,
    base: ModelState | Encoder,
    comp: ModelState | Encoder,
    s: float,
    r1_scale: str = "1/d",
    emb: TaskEmbeddings | None = None,
    trace: TaskForwardTrace | None = None,
):
    """Probabilities of each query over pseudo-old then pseudo-new classes."""
    if emb is None:
        emb = embed_task(task, _enc(base), _enc(comp))
    trace = trace or TaskForwardTrace()
    ep = task.episode
    trace.w1_pn = prototype(emb.f1_s, ep.support.labels, order=ep.pseudo_new)
    trace.w2_pn = prototype(emb.f2_s, ep.support.labels, order=ep.pseudo_new)
    trace.w1_pg = task.w1_po.concat(trace.w1_pn)
    trace.w2_pg = task.w2_po.concat(trace.w2_pn)
    if trace.w1_pg.registry != trace.w2_pg.registry:
        raise RegistryMismatch("pseudo global classifiers of the two models are misaligned")
    trace.r1 = cosine_scores(emb.f1_q, trace.w1_pg)
    trace.r2 = sqeuclid_scores(emb.f2_q, trace.w2_pg)
    d = emb.f1_q.shape[1]
    combined = (trace.r1 / d if r1_scale == "1/d" else trace.r1) + trace.r2
    trace.logp_global = scaled_log_softmax(combined, s)
    trace.p_global = trace.logp_global.exp()
    trace.y_global = labels_to_indices(ep.query.labels, trace.w1_pg.registry)
    return trace.p_global, trace


def local_forward(
    task: PseudoIncrementalTask,
    comp: ModelState | Encoder,
    s: float,
    emb: TaskEmbeddings | None = None,
    trace: TaskForwardTrace | None = None,
    base: ModelState | Encoder | None = None,
):
    """Probabilities of ``Q`` then ``Q^a`` over pseudo-new then synthesized classes."""
    if emb is None:
        comp_enc = _enc(comp)
        emb = embed_task(task, _enc(base) if base is not None else comp_enc, comp_enc)
    trace = trace or TaskForwardTrace()
    ep = task.episode
    if trace.w2_pn is None:
        trace.w2_pn = prototype(emb.f2_s, ep.support.labels, order=ep.pseudo_new)
    trace.w2_sa = prototype(emb.f2_sa, task.aug_support.labels, order=task.aug_support.class_ids)
    trace.w2_l = trace.w2_pn.concat(trace.w2_sa)
    queries = torch.cat([emb.f2_q, emb.f2_qa])
    trace.r_local = sqeuclid_scores(queries, trace.w2_l)
    trace.logp_local = scaled_log_softmax(trace.r_local, s)
    trace.p_local = trace.logp_local.exp()
    trace.y_local = labels_to_indices(torch.cat([ep.query.labels, task.aug_query.labels]), trace.w2_l.registry)
    return trace.p_local, trace


def global_loss(p_global: torch.Tensor, y_global) -> torch.Tensor:
    return cross_entropy(p_global, y_global)


def local_loss(p_local: torch.Tensor, y_local) -> torch.Tensor:
    return cross_entropy(p_local, y_local)


def total_loss(l_global, l_local, lambda1: float, lambda2: float):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda1 * l_global + lambda2 * l_local


def task_loss(
    task: PseudoIncrementalTask,
    base_enc: Encoder,
    comp_enc: Encoder,
    cfg: ComplementaryConfig,
) -> TaskForwardTrace:
    """Forward one task and fill in all three losses (from log-probabilities)."""
    emb = embed_task(task, base_enc, comp_enc)
    _, trace = global_forward(task, base_enc, comp_enc, cfg.scale_s, cfg.global_r1_scale, emb=emb)
    local_forward(task, comp_enc, cfg.scale_s, emb=emb, trace=trace)
    trace.l_global = F.nll_loss(trace.logp_global, trace.y_global)
    trace.l_local = F.nll_loss(trace.logp_local, trace.y_local)
    trace.l_total = total_loss(trace.l_global, trace.l_local, cfg.lambda1, cfg.lambda2)
    return trace


def _enc(m) -> Encoder:
    return m.encoder if isinstance(m, ModelState) else m


def init_complementary(base_enc: Encoder, cfg: ComplementaryConfig, build=None) -> Encoder:
    """Warm start copies the base encoder; random start calls ``build(seed)``."""
    if cfg.init == "warm":
        return copy.deepcopy(base_enc)
    if build is None:
        raise ValueError("random initialisation needs an encoder factory")
    return build(cfg.seed)


def train_complementary(
    base: ModelState,
    comp: ModelState,
    base_train: LabeledSet,
    cfg: ComplementaryConfig,
    resa: ResaConfig | None = None,
    history: list | None = None,
) -> ModelState:
    """Optimise ``comp.encoder`` on freshly sampled pseudo incremental tasks.

    Only the complementary encoder's parameters are handed to the optimiser;
    the base model is read under ``no_grad``. Base prototypes for the
    pseudo-old rows are recomputed for both models at the start of every
    epoch. One row per task is appended to ``history`` when given.
    """
    resa = resa or ResaConfig()
    if cfg.epochs == 0:
        return comp
    base_enc, comp_enc = base.encoder, comp.encoder
    base_params = {id(p) for p in base_enc.parameters()} | {id(base.classifier.rows)}
    params = list(comp_enc.parameters())
    if any(id(p) in base_params for p in params):
        raise ValueError("complementary encoder shares parameters with the base model")
    rng = np.random.default_rng(cfg.seed)
    opt = make_sgd(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay_factor)
    base_enc.eval()
    w1 = base.classifier if base.classifier.registry == base_train.class_ids else compute_model_weights(base_enc, base_train)
    step = 0
    for epoch in range(cfg.epochs):
        w2 = compute_model_weights(comp_enc, base_train)
        comp_enc.train()
        for t in range(cfg.tasks_per_epoch):
            task = build_pseudo_task(
                base_train, w1, w2, resa.way, resa.shot, resa.query_per_class, rng,
                policy=resa.augmentation, rotations_per_task=resa.rotations_per_task,
            )
            trace = task_loss(task, base_enc, comp_enc, cfg)
            if not torch.isfinite(trace.l_total):
                raise NonFiniteLoss("transfer", step, trace.l_total.item())
            opt.zero_grad()
            trace.l_total.backward()
            opt.step()
            if history is not None:
                history.append(
                    {
                        "task": step,
                        "epoch": epoch,
                        "l_global": trace.l_global.item(),
                        "l_local": trace.l_local.item(),
                        "l_total": trace.l_total.item(),
                        "angle": task.rotation_angle if task.rotation_angle is not None else "",
                        "classes": " ".join(str(c) for c in task.episode.pseudo_new),
                    }
                )
            step += 1
        sched.step()
    comp_enc.eval()
    return comp
