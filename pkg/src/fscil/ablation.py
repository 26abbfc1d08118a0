"""Component ablation: base only, complementary only, and their ensemble,
with the complementary model trained on pseudo incremental tasks or
conventionally. The base model is trained once and shared."""
from __future__ import annotations

from dataclasses import replace

from .complementary import init_complementary, train_complementary
from .harness import ExperimentConfig, build_stream
from .inference import EvalSummary, ModelState, empty_model, run_incremental, summarize
from .pretrain import pretrain_base, reinit_classifier_with_prototypes
from .resa import compute_model_weights


def run_ablation(cfg: ExperimentConfig, transfer_modes=("resa", "conventional")) -> dict[str, EvalSummary]:
    """Summaries keyed ``"<mode>/<transfer>"``, e.g. ``"ensemble/resa"``,
    plus ``"base"`` for the base model alone."""
    stream = build_stream(cfg)
    train0 = stream.train(0)
    enc = cfg.model.build(train0.input_shape, cfg.seed)
    enc, _ = pretrain_base(train0, enc, cfg.pretrain)
    base = ModelState(enc, reinit_classifier_with_prototypes(enc, train0), "cosine")
    out: dict[str, EvalSummary] = {}
    for transfer in transfer_modes:
        if transfer == "resa":
            comp_enc = init_complementary(enc, cfg.transfer, build=lambda s: cfg.model.build(train0.input_shape, s + 1))
            comp_enc = train_complementary(
                base, empty_model(comp_enc, "sq_euclid"), train0, cfg.transfer, cfg.resa
            ).encoder
        elif transfer == "conventional":
            comp_enc = cfg.model.build(train0.input_shape, cfg.seed + 1)
            comp_enc, _ = pretrain_base(train0, comp_enc, replace(cfg.pretrain, seed=cfg.seed + 1), metric="sq_euclid")
        else:
            raise ValueError(f"unknown transfer mode {transfer!r}")
        comp = ModelState(comp_enc, compute_model_weights(comp_enc, train0), "sq_euclid")
        reports = run_incremental(stream, base, comp, ("ensemble", "base", "comp"), cfg.eval.rule)
        out[f"ensemble/{transfer}"] = summarize(reports["ensemble"])
        out[f"comp/{transfer}"] = summarize(reports["comp"])
        out["base"] = summarize(reports["base"])
    return out
