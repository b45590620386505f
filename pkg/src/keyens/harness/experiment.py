"""End-to-end experiment: baseline, simple ensemble and random ensemble under attack."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from ..attacks import worst_case_eval
from ..ensemble import RandomEnsemble, build_ensemble, load_ensemble, save_ensemble
from ..model import SubModel, load_model, save_model, train_submodel
from ..pipelines import EnsemblePipeline, ModelPipeline, Pipeline
from ..rngcore import RngStream
from .config import ExperimentConfig, save_config
from .data import Dataset, evaluate_clean, gen_synthetic, load_cifar10_files

log = logging.getLogger(__name__)

ROW_ORDER = ("baseline", "simple_ensemble", "random_ensemble")


@dataclass
class ReportRow:
    model: str
    clean: float
    attacks: dict[str, float]
    combined: float
    threat_model: dict
    clean_correct: list[bool] = field(repr=False, default_factory=list)
    robust: dict[str, list[bool]] = field(repr=False, default_factory=dict)
    combined_robust: list[bool] = field(repr=False, default_factory=list)

    def record(self) -> dict:
        return {"type": "row", "model": self.model, "clean": self.clean, "attacks": self.attacks,
                "combined": self.combined, "threat_model": self.threat_model,
                "bitmaps": {"clean": _bits(self.clean_correct),
                            **{k: _bits(v) for k, v in self.robust.items()},
                            "combined": _bits(self.combined_robust)}}


@dataclass
class EvalReport:
    rows: list[ReportRow]
    meta: dict
    failure: Optional[str] = None

    def check(self) -> None:
        for row in self.rows:
            values = [row.clean, row.combined, *row.attacks.values()]
            assert all(0.0 <= v <= 100.0 for v in values), row.model
            assert all(row.combined <= v for v in row.attacks.values()), row.model

    def to_jsonl(self) -> str:
        lines = [{"type": "meta", **self.meta}] + [r.record() for r in self.rows]
        if self.failure is not None:
            lines.append({"type": "failure", "error": self.failure})
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in lines)

    def attack_names(self) -> list[str]:
        return list(self.meta.get("attacks", []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "clean", *self.attack_names(), "combined"])
        for r in self.rows:
            writer.writerow([r.model, f"{r.clean:.2f}", *(f"{r.attacks[a]:.2f}" for a in self.attack_names()),
                             f"{r.combined:.2f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        heads = ["Model", "Clean(%)", *(f"{a}(%)" for a in self.attack_names()), "AA(%)"]
        body = [[r.model, f"{r.clean:.2f}", *(f"{r.attacks[a]:.2f}" for a in self.attack_names()),
                 f"{r.combined:.2f}"] for r in self.rows]
        widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(heads)]
        fmt = lambda cells: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(heads), "-+-".join("-" * w for w in widths)] + [fmt(b) for b in body]
        eps = self.meta.get("epsilon")
        lines.append(f"l-inf eps={eps:.6f}  N={self.meta.get('n')}  S={self.meta.get('s')}  "
                     f"num_eval={self.meta.get('num_eval')}  keys_known={self.meta.get('keys_known')}")
        if self.failure:
            lines.append(f"FAILED: {self.failure}")
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        return {"table": self.to_table, "csv": self.to_csv, "jsonl": self.to_jsonl}[fmt]()


def _bits(mask) -> str:
    return "".join("1" if b else "0" for b in mask)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "cifar10":
        train = load_cifar10_files(d.train_files, "train")
        test = load_cifar10_files(d.test_files, "test")
    else:
        kw = dict(separation=d.separation, noise=d.noise, support=d.support)
        train = gen_synthetic(d.num_classes, d.height, d.width, d.channels, d.train_per_class, cfg.seed, "train", **kw)
        test = gen_synthetic(d.num_classes, d.height, d.width, d.channels, d.test_per_class, cfg.seed, "test", **kw)
    return train, test


def train_models(cfg: ExperimentConfig, train: Dataset, progress=None) -> tuple[SubModel, RandomEnsemble]:
    root = RngStream(cfg.seed)
    cb = None
    if progress is not None:
        cb = lambda rec: progress({"model": "baseline", **rec})
    baseline = train_submodel(train, None, cfg.train_config(root.derive("baseline").next_u64()), cb)
    e = cfg.ensemble
    cb = None
    if progress is not None:
        cb = lambda rec: progress({"model": "ensemble", **rec})
    ensemble = build_ensemble(train, e.n, e.s, e.key_seeds, cfg.train_config(root.derive("ensemble").next_u64()),
                              e.block_size, cb)
    return baseline, ensemble


def save_models(baseline: SubModel, ensemble: RandomEnsemble, directory) -> Path:
    """Checkpoints plus a manifest; the baseline is recorded under an extra key."""
    directory = Path(directory)
    manifest = save_ensemble(ensemble, directory)
    save_model(baseline, directory / "baseline.ksmd")
    doc = json.loads(manifest.read_text())
    doc["baseline"] = "baseline.ksmd"
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest


def load_models(manifest) -> tuple[Optional[SubModel], RandomEnsemble]:
    manifest = Path(manifest)
    ensemble = load_ensemble(manifest)
    doc = json.loads(manifest.read_text())
    baseline = load_model(manifest.parent / doc["baseline"]) if doc.get("baseline") else None
    return baseline, ensemble


def build_pipelines(cfg: ExperimentConfig, baseline: Optional[SubModel], ensemble: RandomEnsemble) -> list[Pipeline]:
    a = cfg.attack
    rows: list[Pipeline] = []
    if baseline is not None:
        rows.append(ModelPipeline(baseline, name="baseline"))
    rows.append(EnsemblePipeline(ensemble, False, a.keys_known, "full", name="simple_ensemble"))
    rows.append(EnsemblePipeline(ensemble, True, a.keys_known, a.gradient_mode, name="random_ensemble"))
    return rows


def evaluate_pipelines(cfg: ExperimentConfig, pipelines: list[Pipeline], test: Dataset,
                       attacks: Optional[list[str]] = None, trace_dir=None) -> EvalReport:
    attacks = list(attacks or cfg.attack.names)
    num_eval = min(cfg.eval.num_eval, len(test))
    evalset = test.subset(num_eval)
    acfg = cfg.attack_config(trace=trace_dir is not None)
    root = RngStream(cfg.seed).derive("evaluation")
    first_ensemble = next((p for p in pipelines if isinstance(p, EnsemblePipeline)), None)
    meta = {"package": "keyens", "version": __version__, "config_digest": cfg.digest(),
            "attacks": attacks, "epsilon": acfg.epsilon, "num_eval": num_eval,
            "keys_known": cfg.attack.keys_known, "gradient_mode": cfg.attack.gradient_mode,
            "query_budget": acfg.query_budget, "iterations": acfg.iterations,
            "n": first_ensemble.ensemble.n if first_ensemble else None,
            "s": first_ensemble.ensemble.selection_size if first_ensemble else None}
    report = EvalReport([], meta)
    try:
        for p in pipelines:
            t0 = time.perf_counter()
            pred = p.predict(evalset.images, root.derive(f"clean/{p.name}"))
            correct = pred == evalset.labels
            clean = evaluate_clean(p, evalset, root.derive(f"clean/{p.name}"))
            res = worst_case_eval(p, evalset.images, evalset.labels, attacks, acfg, root.derive(f"attack/{p.name}"))
            report.rows.append(ReportRow(
                p.name, clean, res.per_attack, res.combined, p.describe(), correct.tolist(),
                {k: v.tolist() for k, v in res.robust.items()}, res.combined_robust.tolist()))
            if trace_dir is not None:
                _write_traces(Path(trace_dir), p.name, res.outcomes)
            log.info("%s evaluated in %.1fs", p.name, time.perf_counter() - t0)
    except Exception as exc:
        report.failure = f"{type(exc).__name__}: {exc}"
        raise ExperimentFailed(report) from exc
    report.check()
    return report


class ExperimentFailed(RuntimeError):
    def __init__(self, report: EvalReport):
        super().__init__(report.failure)
        self.report = report


def _write_traces(directory: Path, row: str, outcomes) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, out in outcomes.items():
        if out.trace and isinstance(out.trace[0], dict):
            with open(directory / f"{row}.{name}.jsonl", "w") as fh:
                for rec in out.trace:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_report(report: EvalReport, cfg: ExperimentConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.jsonl").write_text(report.to_jsonl())
    (out_dir / "summary.csv").write_text(report.to_csv())
    save_config(cfg, out_dir / "config.yaml")


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> EvalReport:
    """Train (baseline + N sub-models), attack all three rows, and return the report.

    With ``out_dir`` the report, a CSV summary and a copy of the config are
    written there, including on failure (the report then ends with a failure
    record).
    """
    train, test = load_datasets(cfg)
    baseline, ensemble = train_models(cfg, train, progress)
    pipelines = build_pipelines(cfg, baseline, ensemble)
    trace_dir = Path(out_dir) / "traces" if (out_dir is not None and cfg.output.trace) else None
    try:
        report = evaluate_pipelines(cfg, pipelines, test, trace_dir=trace_dir)
    except ExperimentFailed as exc:
        if out_dir is not None:
            write_report(exc.report, cfg, out_dir)
        raise
    if out_dir is not None:
        write_report(report, cfg, out_dir)
    return report
