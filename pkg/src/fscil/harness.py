"""Experiment configuration, staged runs, sweeps and result tables.

A run directory holds::

    config.yaml        resolved configuration
    manifest.json      fingerprint, versions, per-stage status and artifacts
    split.yaml         the session stream actually used
    base.pt            base encoder + prototype classifier
    comp.pt            complementary encoder + prototype classifier
    pretrain_log.csv   epoch, loss, lr, accuracy
    transfer_log.csv   one row per pseudo incremental task
    sessions.csv       per mode and session: top1, top1_base, top1_new
    results.csv/.txt   one row per method, per-session columns, Avg., Diff.
    summary.json       EvalSummary values per mode
    figures/*.png

Stages run in order (``pretrain``, ``transfer``, ``eval``). A finished stage
is skipped on resume, and every stage reseeds from the config, so an
interrupted run finishes with the same numbers as an uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import platform
import shutil
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .complementary import ComplementaryConfig, init_complementary, train_complementary
from .data import (
    SessionStream,
    SplitConfig,
    build_session_stream,
    load_split_file,
    save_split_file,
    stream_from_split,
)
from .datasets import DatasetConfig, load_source
from .encoders import build_encoder, load_checkpoint, save_checkpoint
from .errors import InconsistentSessionCounts, InvalidAxis, StageFailed
from .inference import (
    MODES,
    RULES,
    EvalSummary,
    ModelState,
    SessionReport,
    empty_model,
    run_incremental,
    run_joint_cnn_upper_bound,
    summarize,
)
from .pretrain import PretrainConfig, pretrain_base, reinit_classifier_with_prototypes
from .resa import ResaConfig, compute_model_weights

log = logging.getLogger(__name__)

STAGES = ("pretrain", "transfer", "eval")
TRANSFER_MODES = ("resa", "conventional", "none")
CONFIG_DIR = Path(__file__).parent / "configs"

AXIS_ALIASES = {
    "way": "resa.way",
    "shot": "resa.shot",
    "query": "resa.query_per_class",
    "augmentation": "resa.augmentation",
    "lambda1": "transfer.lambda1",
    "lambda2": "transfer.lambda2",
    "incremental_shot": "split.shot",
    "seed": "seed",
}


@dataclass
class ModelConfig:
    arch: str = "tiny-mlp"
    embed_dim: int | None = None
    hidden: list[int] = field(default_factory=lambda: [64])
    activation: str = "relu"
    widths: list[int] = field(default_factory=lambda: [16, 32])
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def arch_kwargs(self) -> dict:
        if self.arch == "tiny-mlp":
            return {"hidden": tuple(self.hidden), "activation": self.activation}
        if self.arch == "small-cnn":
            return {"widths": tuple(self.widths)}
        return {}

    def build(self, in_shape, seed):
        return build_encoder(self.arch, in_shape, self.embed_dim, seed=seed, dtype=self.torch_dtype, **self.arch_kwargs())


@dataclass
class EvalConfig:
    rule: str = "sum"
    modes: list[str] = field(default_factory=lambda: list(MODES))
    joint_cnn: bool = False
    upper_bound_last: float | None = None
    figures: bool = True

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}")
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ValueError(f"unknown eval modes {sorted(bad)}")


def _default_split():
    return SplitConfig(base_classes=12, incremental_sessions=4, way=2, shot=5)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=_default_split)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transfer_mode: str = "resa"
    transfer: ComplementaryConfig = field(default_factory=ComplementaryConfig)
    resa: ResaConfig = field(default_factory=ResaConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if self.transfer_mode not in TRANSFER_MODES:
            raise ValueError(f"transfer_mode must be one of {TRANSFER_MODES}")
        # the top-level seed drives every stage
        s = int(self.seed)
        self.dataset.seed = s
        self.split = replace(self.split, seed=s)
        self.pretrain.seed = s
        self.transfer.seed = s

    # -------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        return _build(cls, data or {})

    def fingerprint(self) -> str:
        # name and output_dir are labels; they do not change any result
        d = self.to_dict()
        d.pop("output_dir", None)
        d.pop("name", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)
        return path


_NESTED = {
    "dataset": DatasetConfig,
    "split": SplitConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "transfer": ComplementaryConfig,
    "resa": ResaConfig,
    "eval": EvalConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _wants_float(hint) -> bool:
    return hint is float or float in typing.get_args(hint)


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__} expects a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if cls is SplitConfig:
        data = {**dataclasses.asdict(_default_split()), **data}
    kwargs = {}
    for name, value in data.items():
        if cls is ExperimentConfig and name in _NESTED:
            value = _build(_NESTED[name], value or {})
        elif _wants_float(hints[name]) and not isinstance(value, bool):
            # YAML 1.1 reads "1e6" as a string
            if isinstance(value, (int, str)):
                try:
                    value = float(value)
                except ValueError:
                    raise ValueError(f"{cls.__name__}.{name} expects a number, got {value!r}") from None
        kwargs[name] = value
    return cls(**kwargs)


def set_path(d: dict, path: str, value) -> None:
    """Set a dotted key in a nested config dict; the key must already exist."""
    keys = path.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise InvalidAxis(path)
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise InvalidAxis(path)
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def resolve_config_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = CONFIG_DIR / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no config file or bundled preset named {name_or_path!r}")


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file, then ``key=value`` overrides."""
    data = ExperimentConfig().to_dict()
    if path is not None:
        with resolve_config_path(path).open() as fh:
            file_data = yaml.safe_load(fh) or {}
        _merge(data, file_data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_path(data, AXIS_ALIASES.get(key, key), value)
    return ExperimentConfig.from_dict(data)


def _merge(into: dict, new: dict) -> None:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(into.get(k), dict):
            _merge(into[k], v)
        else:
            into[k] = v


# ---------------------------------------------------------------- manifest


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def substrate_info() -> dict:
    return {
        "fscil": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "threads": torch.get_num_threads(),
    }


@dataclass
class RunManifest:
    run_dir: str
    fingerprint: str
    substrate: dict = field(default_factory=substrate_info)
    created: str = field(default_factory=_now)
    updated: str = field(default_factory=_now)
    stages: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    failure: dict | None = None

    @property
    def path(self) -> Path:
        return Path(self.run_dir) / "manifest.json"

    def save(self) -> None:
        self.updated = _now()
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        tmp.replace(self.path)

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        data = json.loads((Path(run_dir) / "manifest.json").read_text())
        return cls(**data)

    def artifact(self, name) -> Path:
        return Path(self.run_dir) / name

    def is_done(self, stage: str) -> bool:
        info = self.stages.get(stage)
        if not info or info.get("status") != "done":
            return False
        return all(self.artifact(a).exists() for a in info.get("artifacts", []))

    def start(self, stage: str) -> None:
        self.stages[stage] = {"status": "running", "started": _now()}
        self.failure = None
        self.save()

    def finish(self, stage: str, artifacts) -> None:
        info = self.stages[stage]
        info.update(status="done", finished=_now(), artifacts=list(artifacts))
        self.save()

    def fail(self, stage: str, exc: BaseException) -> None:
        self.stages[stage].update(status="failed", finished=_now())
        self.failure = {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
        self.save()

    @property
    def complete(self) -> bool:
        return all(self.is_done(s) for s in STAGES)


def open_run_dir(cfg: ExperimentConfig, out, overwrite=False, resume=False) -> RunManifest:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if resume and (out / "manifest.json").exists():
            manifest = RunManifest.load(out)
            if manifest.fingerprint != cfg.fingerprint():
                raise ValueError(f"{out} was created with a different configuration")
            manifest.run_dir = str(out)
            return manifest
        if not overwrite:
            raise FileExistsError(f"{out} already exists; pass overwrite=True or resume=True")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    manifest = RunManifest(str(out), cfg.fingerprint())
    manifest.save()
    return manifest


# ---------------------------------------------------------------- stages


class RunContext:
    def __init__(self, cfg: ExperimentConfig, manifest: RunManifest):
        self.cfg = cfg
        self.manifest = manifest
        self.dir = Path(manifest.run_dir)
        self._stream = None

    @property
    def stream(self) -> SessionStream:
        if self._stream is None:
            self._stream = build_stream(self.cfg)
        return self._stream

    def write_rows(self, name, rows) -> str:
        write_csv(self.dir / name, rows)
        return name


def build_stream(cfg: ExperimentConfig) -> SessionStream:
    source, test_source = load_source(cfg.dataset)
    if cfg.dataset.split_file:
        split = load_split_file(cfg.dataset.split_file)
        return stream_from_split(source, split, test_source, seed=cfg.seed, test_fraction=cfg.split.test_fraction)
    return build_session_stream(source, cfg.split, test_source)


def write_csv(path, rows) -> Path:
    path = Path(path)
    rows = list(rows)
    with path.open("w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


def stage_pretrain(ctx: RunContext) -> list[str]:
    cfg = ctx.cfg
    train0 = ctx.stream.train(0)
    save_split_file(ctx.stream, ctx.dir / "split.yaml")
    enc = cfg.model.build(train0.input_shape, cfg.seed)
    history: list = []
    enc, _ = pretrain_base(train0, enc, cfg.pretrain, history=history)
    w1 = reinit_classifier_with_prototypes(enc, train0)
    save_checkpoint(ctx.dir / "base.pt", enc, w1, "cosine", {"fingerprint": cfg.fingerprint()})
    ctx.manifest.checkpoints["base"] = "base.pt"
    return ["split.yaml", "base.pt", ctx.write_rows("pretrain_log.csv", history)]


def load_model(path) -> ModelState:
    enc, classifier, metric, _ = load_checkpoint(path)
    return ModelState(enc, classifier, metric)


def stage_transfer(ctx: RunContext) -> list[str]:
    cfg = ctx.cfg
    if cfg.transfer_mode == "none":
        return []
    train0 = ctx.stream.train(0)
    base = load_model(ctx.dir / "base.pt")
    history: list = []
    if cfg.transfer_mode == "resa":
        comp_enc = init_complementary(base.encoder, cfg.transfer, build=lambda s: cfg.model.build(train0.input_shape, s + 1))
        comp = train_complementary(base, empty_model(comp_enc, "sq_euclid"), train0, cfg.transfer, cfg.resa, history=history)
        comp_enc = comp.encoder
    else:
        # conventional: trained from scratch with the base recipe and a squared-Euclidean head
        comp_enc = cfg.model.build(train0.input_shape, cfg.seed + 1)
        pre = replace(cfg.pretrain, seed=cfg.seed + 1)
        comp_enc, _ = pretrain_base(train0, comp_enc, pre, metric="sq_euclid", history=history)
    w2 = compute_model_weights(comp_enc, train0)
    save_checkpoint(ctx.dir / "comp.pt", comp_enc, w2, "sq_euclid", {"fingerprint": cfg.fingerprint()})
    ctx.manifest.checkpoints["comp"] = "comp.pt"
    return ["comp.pt", ctx.write_rows("transfer_log.csv", history)]


def reports_from_accuracies(accs) -> list[SessionReport]:
    return [SessionReport(i, a, float("nan"), None, 0, 0) for i, a in enumerate(accs)]


def stage_eval(ctx: RunContext) -> list[str]:
    cfg = ctx.cfg
    stream = ctx.stream
    base = load_model(ctx.dir / "base.pt")
    comp = load_model(ctx.dir / "comp.pt") if cfg.transfer_mode != "none" else None
    reports = run_incremental(stream, base, comp, cfg.eval.modes, cfg.eval.rule)
    ub = cfg.eval.upper_bound_last
    rows: list[tuple[str, EvalSummary]] = []
    if cfg.eval.joint_cnn:
        joint = run_joint_cnn_upper_bound(
            stream, cfg.pretrain, cfg.model.arch, cfg.model.embed_dim, cfg.model.arch_kwargs(), cfg.model.torch_dtype
        )
        ub = joint[-1]
        rows.append(("joint-cnn", summarize(reports_from_accuracies(joint), ub)))
    summaries = {m: summarize(r, ub) for m, r in reports.items()}
    rows += [(m, s) for m, s in summaries.items()]
    return write_results(ctx.dir, rows, figures=cfg.eval.figures, title=cfg.name)


def write_results(run_dir, rows, figures=True, title="") -> list[str]:
    run_dir = Path(run_dir)
    session_rows = []
    for name, s in rows:
        for r in s.reports:
            session_rows.append(
                {"method": name, "session": r.session_id, "top1": r.top1, "top1_base": r.top1_base,
                 "top1_new": "" if r.top1_new is None else r.top1_new}
            )
        session_rows.append({"method": name, "session": "avg", "top1": s.avg, "top1_base": "", "top1_new": ""})
        session_rows.append(
            {"method": name, "session": "diff", "top1": "" if s.diff is None else s.diff, "top1_base": "", "top1_new": ""}
        )
    write_csv(run_dir / "sessions.csv", session_rows)
    emit_results_table(rows, run_dir / "results.csv", "csv")
    emit_results_table(rows, run_dir / "results.txt", "text")
    (run_dir / "summary.json").write_text(json.dumps({name: summary_to_dict(s) for name, s in rows}, indent=2))
    out = ["sessions.csv", "results.csv", "results.txt", "summary.json"]
    if figures:
        from .plotting import plot_base_new, plot_session_accuracy

        plot_session_accuracy({n: s.accuracies for n, s in rows}, run_dir / "figures" / "accuracy.png", title)
        out.append("figures/accuracy.png")
        main = dict(rows).get("ensemble") or rows[-1][1]
        if all(r.total for r in main.reports):
            plot_base_new(main.reports, run_dir / "figures" / "base_new.png", title)
            out.append("figures/base_new.png")
    return out


def summary_to_dict(s: EvalSummary) -> dict:
    return {
        "accuracies": s.accuracies,
        "top1_base": [r.top1_base for r in s.reports],
        "top1_new": [r.top1_new for r in s.reports],
        "avg": s.avg,
        "diff": s.diff,
        "upper_bound_last": s.upper_bound_last,
    }


def summary_from_dict(d: dict) -> EvalSummary:
    reports = [
        SessionReport(i, a, b, n, 0, 0)
        for i, (a, b, n) in enumerate(zip(d["accuracies"], d["top1_base"], d["top1_new"]))
    ]
    return EvalSummary(reports, d["avg"], d["diff"], d["upper_bound_last"])


def load_summaries(run_dir) -> dict[str, EvalSummary]:
    data = json.loads((Path(run_dir) / "summary.json").read_text())
    return {k: summary_from_dict(v) for k, v in data.items()}


STAGE_FUNCS = {"pretrain": stage_pretrain, "transfer": stage_transfer, "eval": stage_eval}


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, overwrite=False, resume=False, stop_after=None) -> RunManifest:
    """Run (or resume) pretrain -> transfer -> eval in ``out_dir``."""
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"stop_after must be one of {STAGES}")
    out = out_dir or cfg.output_dir or Path("runs") / cfg.name
    manifest = open_run_dir(cfg, out, overwrite=overwrite, resume=resume)
    ctx = RunContext(cfg, manifest)
    for stage in STAGES:
        if manifest.is_done(stage):
            log.info("stage %s already complete, skipping", stage)
        else:
            log.info("stage %s", stage)
            manifest.start(stage)
            try:
                artifacts = STAGE_FUNCS[stage](ctx)
            except Exception as exc:
                manifest.fail(stage, exc)
                raise StageFailed(stage, exc) from exc
            if stage == "eval":
                manifest.results = {a: a for a in artifacts}
            manifest.finish(stage, artifacts)
        if stage == stop_after:
            break
    return manifest


# ---------------------------------------------------------------- baselines


def run_baseline(cfg: ExperimentConfig, kind: str, out_dir, overwrite=False) -> RunManifest:
    """``ncm``: prototypes + cosine metric only. ``joint-cnn``: retrain per session."""
    if kind == "ncm":
        data = cfg.to_dict()
        data["transfer_mode"] = "none"
        data["eval"]["modes"] = ["base"]
        return run_experiment(ExperimentConfig.from_dict(data), out_dir, overwrite=overwrite)
    if kind != "joint-cnn":
        raise ValueError(f"unknown baseline {kind!r}")
    manifest = open_run_dir(cfg, out_dir, overwrite=overwrite)
    manifest.start("joint-cnn")
    try:
        stream = build_stream(cfg)
        accs = run_joint_cnn_upper_bound(
            stream, cfg.pretrain, cfg.model.arch, cfg.model.embed_dim, cfg.model.arch_kwargs(), cfg.model.torch_dtype
        )
        artifacts = write_results(out_dir, [("joint-cnn", summarize(reports_from_accuracies(accs), accs[-1]))],
                                  figures=cfg.eval.figures, title=cfg.name)
    except Exception as exc:
        manifest.fail("joint-cnn", exc)
        raise StageFailed("joint-cnn", exc) from exc
    manifest.results = {a: a for a in artifacts}
    manifest.finish("joint-cnn", artifacts)
    return manifest


# ---------------------------------------------------------------- sweeps


def sweep_child_config(base_cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    data = base_cfg.to_dict()
    set_path(data, AXIS_ALIASES.get(axis, axis), value)
    data["name"] = f"{base_cfg.name}-{axis}={value}"
    return ExperimentConfig.from_dict(data)


def _run_child(args):
    cfg, out, kwargs = args
    return run_experiment(cfg, out, **kwargs)


def run_sweep(base_cfg: ExperimentConfig, axis: str, values, out_dir, jobs: int = 1, method: str = "ensemble", **run_kwargs) -> list[RunManifest]:
    """One child run per value under ``out_dir/<axis>=<value>``, then a collated table."""
    values = list(values)
    children = [sweep_child_config(base_cfg, axis, v) for v in values]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs_args = [(c, out_dir / f"{axis}={v}", run_kwargs) for c, v in zip(children, values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            manifests = list(pool.map(_run_child, jobs_args))
    else:
        manifests = [_run_child(a) for a in jobs_args]
    rows = []
    for v, m in zip(values, manifests):
        summaries = load_summaries(m.run_dir)
        rows.append((f"{axis}={v}", summaries.get(method) or next(iter(summaries.values()))))
    emit_results_table(rows, out_dir / "sweep.csv", "csv")
    emit_results_table(rows, out_dir / "sweep.txt", "text")
    if base_cfg.eval.figures:
        from .plotting import plot_sweep

        plot_sweep(axis, values, [s.avg for _, s in rows], [s.last for _, s in rows], out_dir / "sweep.png")
    return manifests


# ---------------------------------------------------------------- tables


def _pct(x) -> str:
    return "" if x is None else f"{100 * x:.2f}"


def _signed_pct(x) -> str:
    return "" if x is None else f"{100 * x:+.2f}"


def table_cells(rows) -> tuple[list[str], list[list[str]]]:
    rows = list(rows)
    counts = {len(s.reports) for _, s in rows}
    if len(counts) > 1:
        raise InconsistentSessionCounts(f"summaries have session counts {sorted(counts)}")
    n = counts.pop() if counts else 0
    header = ["method"] + [str(i) for i in range(n)] + ["Avg.", "Diff."]
    body = [[name] + [_pct(r.top1) for r in s.reports] + [_pct(s.avg), _signed_pct(s.diff)] for name, s in rows]
    return header, body


def emit_results_table(rows, path, fmt: str = "csv") -> Path:
    """Write ``(method, EvalSummary)`` rows as CSV or an aligned text table.

    Cells are the summaries' own fields rendered as percentages with two
    decimals; both formats carry the same strings.
    """
    header, body = table_cells(rows)
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(body)
    elif fmt in ("text", "aligned-text"):
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        sep = "-+-".join("-" * w for w in widths)

        def line(cells):
            return " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

        path.write_text("\n".join([line(header), sep] + [line(r) for r in body]) + "\n")
    else:
        raise ValueError(f"unknown table format {fmt!r}")
    return path
