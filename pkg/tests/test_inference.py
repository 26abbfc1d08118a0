import numpy as np
import pytest
import torch

from fscil.data import SplitConfig, build_session_stream, synth_blob_source
from fscil.encoders import build_encoder, encode, serialize
from fscil.errors import ClassifierNotExpanded, DuplicateClass, EmptyReports, RegistryMismatch
from fscil.inference import (
    ModelState,
    SessionReport,
    empty_model,
    ensemble_predict,
    ensemble_scores,
    evaluate_session,
    expand_classifier,
    predict,
    report_from_predictions,
    run_incremental,
    summarize,
)
from fscil.metrics import WeightMatrix, prototype
from fscil.resa import compute_model_weights

import oracles
from helpers import identity_mlp, label_source
from published_rows import cases, upper_bound_last

D = torch.float64


def _reports(accs):
    return [SessionReport(i, a, a, None, 0, 0) for i, a in enumerate(accs)]


def _model(data, seed, metric, dim=8):
    enc = build_encoder("tiny-mlp", data.input_shape, embed_dim=dim, hidden=(8,), seed=seed, dtype=D)
    return ModelState(enc, compute_model_weights(enc, data), metric)


@pytest.fixture(scope="module")
def stream60():
    src = label_source(100, 12, shape=(1, 2, 2), dtype=D)
    return build_session_stream(src, SplitConfig(60, 8, 5, 5, seed=0))


# ------------------------------------------------------------ expansion


def test_first_expansion_equals_prototypes(stream60):
    enc = build_encoder("tiny-mlp", (1, 2, 2), seed=0, dtype=D)
    m = expand_classifier(empty_model(enc, "cosine"), stream60.train(0))
    ref = prototype(encode(enc, stream60.train(0).inputs), stream60.train(0).labels, order=stream60.class_ids(0))
    assert m.classifier.registry == ref.registry and torch.equal(m.classifier.rows, ref.rows)


def test_expansion_preserves_rows(stream60):
    base = _model(stream60.train(0), 0, "cosine")
    rows0 = base.classifier.rows.clone()
    sizes = []
    m = base
    for i in range(1, 9):
        prev = m.classifier.rows.clone()
        m = expand_classifier(m, stream60.train(i))
        assert torch.equal(m.classifier.rows[: len(prev)], prev)
        assert m.classifier.registry[-5:] == stream60.class_ids(i)
        sizes.append(len(m.classifier))
    assert sizes[0] == 65 and sizes[-1] == 100
    assert sizes == list(range(65, 101, 5))
    assert torch.equal(m.classifier.rows[:60], rows0)
    # the encoder is never touched
    assert serialize(m.encoder) == serialize(base.encoder)


def test_expansion_rejects_known_classes(stream60):
    base = _model(stream60.train(0), 0, "cosine")
    with pytest.raises(DuplicateClass):
        expand_classifier(base, stream60.train(0))


# ------------------------------------------------------------ ensemble


def test_ensemble_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k, d, n = rng.integers(2, 8), rng.integers(2, 6), rng.integers(1, 6)
        data = label_source(int(k), 3, shape=(1, int(d), 1), seed=int(rng.integers(1000)), dtype=D)
        base = _model(data, int(rng.integers(100)), "cosine", dim=4)
        comp = _model(data, int(rng.integers(100)), "sq_euclid", dim=5)
        x = torch.from_numpy(rng.normal(size=(int(n), 1, int(d), 1)))
        pred, _ = ensemble_predict(x, base, comp)
        ref = oracles.ensemble_labels(
            encode(base.encoder, x).numpy(), base.classifier.rows.numpy(),
            encode(comp.encoder, x).numpy(), comp.classifier.rows.numpy(), list(base.classifier.registry),
        )
        assert pred.tolist() == ref


def test_constant_complementary_scores_defer_to_base():
    data = label_source(5, 4, shape=(1, 2, 2), dtype=D)
    base = _model(data, 0, "cosine")
    enc = build_encoder("tiny-mlp", (1, 2, 2), embed_dim=3, hidden=(), dtype=D)
    with torch.no_grad():
        enc.net[0].weight.zero_()
        enc.net[0].bias.fill_(1.0)
    comp = ModelState(enc, WeightMatrix(torch.zeros(5, 3, dtype=D), data.class_ids), "sq_euclid")
    x = torch.randn(30, 1, 2, 2, dtype=D)
    assert torch.equal(ensemble_predict(x, base, comp)[0], predict(x, base, mode="base")[0])


def test_agreeing_metrics_decide():
    data = label_source(6, 4, shape=(1, 2, 2), dtype=D)
    base, comp = _model(data, 0, "cosine"), _model(data, 1, "sq_euclid")
    x = torch.randn(200, 1, 2, 2, dtype=D)
    pb, _ = predict(x, base, mode="base")
    pc, _ = predict(x, base, comp, mode="comp")
    pe, _ = ensemble_predict(x, base, comp)
    agree = pb == pc
    assert agree.any()
    assert torch.equal(pe[agree], pb[agree])


def test_ties_go_to_lowest_index():
    enc = identity_mlp((1, 2, 1))
    rows = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=D)
    base = ModelState(enc, WeightMatrix(rows, (7, 3, 5)), "cosine")
    comp = ModelState(enc, WeightMatrix(rows.clone(), (7, 3, 5)), "sq_euclid")
    x = torch.tensor([[[[1.0], [0.0]]]], dtype=D)
    assert ensemble_predict(x, base, comp)[0].tolist() == [7]


def test_per_sample_constants_do_not_change_predictions():
    data = label_source(6, 4, shape=(1, 2, 2), dtype=D)
    base, comp = _model(data, 0, "cosine"), _model(data, 1, "sq_euclid")
    x = torch.randn(40, 1, 2, 2, dtype=D)
    s = ensemble_scores(x, base, comp)
    shifted = s + torch.randn(40, 1, dtype=D) * 100
    assert torch.equal(s.argmax(1), shifted.argmax(1))


def test_registry_mismatch_rejected():
    data = label_source(3, 4, shape=(1, 2, 2), dtype=D)
    base, comp = _model(data, 0, "cosine"), _model(data, 1, "sq_euclid")
    w = comp.classifier
    comp = ModelState(comp.encoder, WeightMatrix(w.rows.flip(0), tuple(reversed(w.registry))), "sq_euclid")
    with pytest.raises(RegistryMismatch):
        ensemble_predict(torch.randn(2, 1, 2, 2, dtype=D), base, comp)


def test_train_weighted_rule():
    data = label_source(4, 4, shape=(1, 2, 2), dtype=D)
    base, comp = _model(data, 0, "cosine"), _model(data, 1, "sq_euclid")
    x = torch.randn(5, 1, 2, 2, dtype=D)
    r1, r2 = base.scores(x), comp.scores(x)
    assert torch.allclose(ensemble_scores(x, base, comp, "train-weighted"), r1 / 8 + r2)
    assert torch.allclose(ensemble_scores(x, base, comp, "sum"), r1 + r2)
    with pytest.raises(ValueError):
        ensemble_scores(x, base, comp, "max")


# ------------------------------------------------------------ evaluation


def test_perfect_models_on_separable_blobs():
    src = synth_blob_source(8, 20, dim=16, separation=20.0, seed=0, noise=0.3, dtype=D)
    stream = build_session_stream(src, SplitConfig(4, 2, 2, 5))
    tr, te = stream.train(0), stream.test(0)
    assert oracles.nearest_mean_accuracy(tr.inputs.numpy(), tr.labels.tolist(), te.inputs.numpy(), te.labels.tolist()) == 1
    enc = identity_mlp((1, 4, 4))
    base = ModelState(enc, compute_model_weights(enc, stream.train(0)), "cosine")
    comp = ModelState(enc, compute_model_weights(enc, stream.train(0)), "sq_euclid")
    reps = run_incremental(stream, base, comp)
    assert all(r.top1 == 1.0 for m in reps.values() for r in m)


def test_fixed_class_predictor_scores_one_over_k():
    labels = torch.arange(4).repeat_interleave(5)
    rep = report_from_predictions(0, labels, torch.zeros(20, dtype=torch.long), range(4))
    assert rep.top1 == 0.25 and rep.correct == 5 and rep.total == 20


def test_session_zero_has_no_new_classes(stream60):
    base, comp = _model(stream60.train(0), 0, "cosine"), _model(stream60.train(0), 1, "sq_euclid")
    rep = evaluate_session(stream60, 0, base, comp)
    assert rep.top1_new is None and rep.top1 == rep.top1_base
    assert rep.top1 == rep.correct / rep.total
    assert sum(t for _, t in rep.per_class.values()) == rep.total


def test_base_new_breakdown(stream60):
    base = _model(stream60.train(0), 0, "cosine")
    rep = run_incremental(stream60, base, modes=("base",))["base"][3]
    n_base = sum(t for c, (_, t) in rep.per_class.items() if c in stream60.base_class_ids)
    hits_base = sum(h for c, (h, _) in rep.per_class.items() if c in stream60.base_class_ids)
    assert rep.top1_base == hits_base / n_base
    assert rep.top1_new == (rep.correct - hits_base) / (rep.total - n_base)


def test_unexpanded_classifier_rejected(stream60):
    base, comp = _model(stream60.train(0), 0, "cosine"), _model(stream60.train(0), 1, "sq_euclid")
    with pytest.raises(ClassifierNotExpanded):
        evaluate_session(stream60, 1, base, comp)


def test_evaluation_is_repeatable(stream60):
    base, comp = _model(stream60.train(0), 0, "cosine"), _model(stream60.train(0), 1, "sq_euclid")
    a = run_incremental(stream60, base, comp)
    b = run_incremental(stream60, base, comp)
    assert {m: [r.top1 for r in v] for m, v in a.items()} == {m: [r.top1 for r in v] for m, v in b.items()}


def test_run_incremental_calls_back(stream60):
    base = _model(stream60.train(0), 0, "cosine")
    seen = []
    run_incremental(stream60, base, modes=("base",), on_session=lambda i, b, c: seen.append((i, len(b.classifier))))
    assert seen == [(i, 60 + 5 * i) for i in range(9)]


# ------------------------------------------------------------ summaries


@pytest.mark.parametrize("bench,method,sessions,avg,diff", list(cases()))
def test_published_rows_summarize(bench, method, sessions, avg, diff):
    s = summarize(_reports([v / 100 for v in sessions]), upper_bound_last(bench) / 100)
    assert abs(100 * s.avg - avg) <= 0.005
    assert abs(100 * s.diff - diff) <= 0.005


def test_single_report_summary():
    s = summarize(_reports([0.4]), 0.3)
    assert s.avg == 0.4 and s.diff + s.upper_bound_last == pytest.approx(0.4)
    assert summarize(_reports([0.4])).diff is None


def test_summary_errors():
    with pytest.raises(EmptyReports):
        summarize([])
    with pytest.raises(ValueError):
        summarize([SessionReport(0, 1, 1, None, 1, 1), SessionReport(2, 1, 1, None, 1, 1)])


# ------------------------------------------------------------ upper bound


@pytest.mark.slow
def test_joint_training_dominates_incremental_learners():
    from fscil.ablation import run_ablation
    from fscil.harness import build_stream, load_config
    from fscil.inference import run_joint_cnn_upper_bound

    for seed in range(5):
        cfg = load_config("synthetic", [f"seed={seed}", "dataset.separation=12"])
        learners = run_ablation(cfg)
        ub = run_joint_cnn_upper_bound(build_stream(cfg), cfg.pretrain, cfg.model.arch, cfg.model.embed_dim, cfg.model.arch_kwargs())
        for name, s in learners.items():
            assert all(u >= a for u, a in zip(ub, s.accuracies)), (seed, name)
