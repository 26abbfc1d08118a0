"""Classifier expansion, dual-metric prediction and session-wise evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from .data import LabeledSet, SessionStream, cumulative_test_set, cumulative_train_set
from .encoders import Encoder, build_encoder, encode
from .errors import ClassifierNotExpanded, DuplicateClass, EmptyReports, RegistryMismatch
from .metrics import (
    WeightMatrix,
    check_same_registry,
    cosine_scores,
    metric_scores,
    prototype,
    sqeuclid_scores,
)
from .pretrain import PretrainConfig, pretrain_base

MODES = ("ensemble", "base", "comp")
RULES = ("sum", "train-weighted")


@dataclass(frozen=True, eq=False)
class ModelState:
    encoder: Encoder
    classifier: WeightMatrix
    metric: str = "cosine"

    def scores(self, inputs: torch.Tensor) -> torch.Tensor:
        return metric_scores(encode(self.encoder, inputs), self.classifier, self.metric)


def empty_model(encoder: Encoder, metric: str) -> ModelState:
    dtype = next(encoder.parameters()).dtype
    return ModelState(encoder, WeightMatrix.empty(encoder.embed_dim, dtype), metric)


def expand_classifier(model: ModelState, new_train: LabeledSet) -> ModelState:
    """Append prototypes of ``new_train``'s classes after the existing rows."""
    clash = set(new_train.class_ids) & set(model.classifier.registry)
    if clash:
        raise DuplicateClass(f"classes {sorted(clash)} are already in the classifier")
    new = prototype(encode(model.encoder, new_train.inputs), new_train.labels, order=new_train.class_ids)
    return replace(model, classifier=model.classifier.concat(new))


def ensemble_scores(inputs, base: ModelState, comp: ModelState, rule: str = "sum") -> torch.Tensor:
    """Cosine relation of the base model plus squared-Euclidean relation of the
    complementary model. ``rule="train-weighted"`` divides the cosine term by
    the embedding width, as in the training-time global objective."""
    check_same_registry(base.classifier, comp.classifier)
    f1 = encode(base.encoder, inputs)
    f2 = encode(comp.encoder, inputs)
    r1 = cosine_scores(f1, base.classifier)
    r2 = sqeuclid_scores(f2, comp.classifier)
    if rule == "sum":
        return r1 + r2
    if rule == "train-weighted":
        return r1 / f1.shape[1] + r2
    raise ValueError(f"unknown inference rule {rule!r}")


def ensemble_predict(inputs, base: ModelState, comp: ModelState, rule: str = "sum"):
    """Predicted class ids and the summed score matrix.

    Ties go to the lowest registry index.
    """
    scores = ensemble_scores(inputs, base, comp, rule)
    registry = torch.tensor(base.classifier.registry, dtype=torch.long)
    return registry[scores.argmax(dim=1)], scores


def predict(inputs, base: ModelState, comp: ModelState | None = None, mode: str = "ensemble", rule: str = "sum"):
    if mode == "ensemble":
        if comp is None:
            raise ValueError("ensemble prediction needs a complementary model")
        return ensemble_predict(inputs, base, comp, rule)
    model = base if mode == "base" else comp
    if model is None or mode not in MODES:
        raise ValueError(f"cannot predict in mode {mode!r}")
    scores = model.scores(inputs)
    registry = torch.tensor(model.classifier.registry, dtype=torch.long)
    return registry[scores.argmax(dim=1)], scores


@dataclass
class SessionReport:
    session_id: int
    top1: float
    top1_base: float
    top1_new: float | None
    correct: int
    total: int
    # class id -> (correct, total)
    per_class: dict[int, tuple[int, int]] = field(default_factory=dict)


def report_from_predictions(session_id, labels, preds, base_classes) -> SessionReport:
    labels = torch.as_tensor(labels).reshape(-1)
    preds = torch.as_tensor(preds).reshape(-1)
    hit = labels == preds
    base_set = frozenset(int(c) for c in base_classes)
    per_class: dict[int, tuple[int, int]] = {}
    for c in dict.fromkeys(labels.tolist()):
        m = labels == c
        per_class[int(c)] = (int(hit[m].sum()), int(m.sum()))
    is_base = torch.tensor([int(c) in base_set for c in labels.tolist()], dtype=torch.bool)
    n_base = int(is_base.sum())
    n_new = len(labels) - n_base
    return SessionReport(
        session_id=session_id,
        top1=int(hit.sum()) / len(labels) if len(labels) else 0.0,
        top1_base=int(hit[is_base].sum()) / n_base if n_base else 0.0,
        top1_new=int(hit[~is_base].sum()) / n_new if n_new else None,
        correct=int(hit.sum()),
        total=len(labels),
        per_class=per_class,
    )


def evaluate_session(
    stream: SessionStream,
    session_id: int,
    base: ModelState,
    comp: ModelState | None = None,
    mode: str = "ensemble",
    rule: str = "sum",
) -> SessionReport:
    """Top-1 accuracy on the cumulative test set of ``session_id``."""
    test = cumulative_test_set(stream, session_id)
    for model in (base, comp) if mode == "ensemble" else ((base,) if mode == "base" else (comp,)):
        missing = set(test.class_ids) - set(model.classifier.registry)
        if missing:
            raise ClassifierNotExpanded(
                f"session {session_id} classes {sorted(missing)[:5]} lack classifier rows"
            )
    preds, _ = predict(test.inputs, base, comp, mode, rule)
    return report_from_predictions(session_id, test.labels, preds, stream.base_class_ids)


def run_incremental(
    stream: SessionStream,
    base: ModelState,
    comp: ModelState | None = None,
    modes=MODES,
    rule: str = "sum",
    on_session=None,
) -> dict[str, list[SessionReport]]:
    """Expand both classifiers session by session and evaluate each mode.

    ``base`` and ``comp`` must already hold the session-0 classifiers. Modes
    needing ``comp`` are skipped when it is absent. ``on_session(i, base,
    comp)`` is called after each expansion.
    """
    modes = [m for m in modes if comp is not None or m == "base"]
    reports: dict[str, list[SessionReport]] = {m: [] for m in modes}
    for i in range(stream.num_sessions):
        if i > 0:
            base = expand_classifier(base, stream.train(i))
            if comp is not None:
                comp = expand_classifier(comp, stream.train(i))
        if on_session is not None:
            on_session(i, base, comp)
        for m in modes:
            reports[m].append(evaluate_session(stream, i, base, comp, m, rule))
    return reports


@dataclass
class EvalSummary:
    reports: list[SessionReport]
    avg: float
    diff: float | None
    upper_bound_last: float | None

    @property
    def accuracies(self) -> list[float]:
        return [r.top1 for r in self.reports]

    @property
    def last(self) -> float:
        return self.reports[-1].top1


def summarize(reports, upper_bound_last: float | None = None) -> EvalSummary:
    """Mean accuracy over sessions and the last-session gap to an upper bound."""
    reports = list(reports)
    if not reports:
        raise EmptyReports("no session reports to summarize")
    ids = [r.session_id for r in reports]
    if ids != list(range(ids[0], ids[0] + len(ids))):
        raise ValueError(f"reports are not consecutive sessions: {ids}")
    avg = sum(r.top1 for r in reports) / len(reports)
    diff = None if upper_bound_last is None else reports[-1].top1 - upper_bound_last
    return EvalSummary(reports, avg, diff, upper_bound_last)


def run_joint_cnn_upper_bound(
    stream: SessionStream,
    cfg: PretrainConfig,
    arch: str = "tiny-mlp",
    embed_dim: int | None = None,
    arch_kwargs: dict | None = None,
    dtype=torch.float32,
) -> list[float]:
    """Retrain from scratch on all training data seen so far, per session."""
    accs = []
    for i in range(stream.num_sessions):
        train = cumulative_train_set(stream, i)
        enc = build_encoder(arch, train.input_shape, embed_dim, seed=cfg.seed, dtype=dtype, **(arch_kwargs or {}))
        enc, w = pretrain_base(train, enc, cfg)
        model = ModelState(enc, w, "cosine")
        test = cumulative_test_set(stream, i)
        preds, _ = predict(test.inputs, model, mode="base")
        accs.append(float((preds == test.labels).double().mean()))
    return accs


def check_models_aligned(base: ModelState, comp: ModelState) -> None:
    if base.classifier.registry != comp.classifier.registry:
        raise RegistryMismatch("base and complementary classifiers are not aligned")
