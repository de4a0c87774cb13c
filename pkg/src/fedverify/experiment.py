"""Run every configured method on shared data per seed and write the results."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, fed, metrics, nn
from .config import ExperimentConfig, serialize_config
from .metrics import RoundRecord

log = logging.getLogger(__name__)

ROUNDS_HEADER = ["method", "seed", "round", "accuracy", "loss", "eer", "far", "frr", "threshold", "skipped"]
SUMMARY_HEADER = ["method", "metric", "mean", "std", "n_seeds"]
SUMMARY_METRICS = ("accuracy", "loss", "eer", "far", "frr")

# row labels used in the comparison table of the original experiments
DISPLAY_NAMES = {
    "attention": "Attention-based",
    "fedavg": "FedAvg",
    "local_only": "Local-only",
    "centralized": "Centralized",
    "attention_dp": "Attention + DP",
}


@dataclass
class ResultsBundle:
    config: ExperimentConfig
    records: dict[tuple[str, int], list[RoundRecord]] = field(default_factory=dict)
    roc: dict[tuple[str, int], list[tuple[float, float]]] = field(default_factory=dict)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)
    version: str = __version__

    def methods(self) -> list[str]:
        return [m for m in self.config.experiment.methods if any(k[0] == m for k in self.records)]

    def seeds(self, method: str) -> list[int]:
        return sorted(s for m, s in self.records if m == method)

    def rounds_rows(self) -> list[list[str]]:
        rows = []
        for method, seed in sorted(self.records):
            for rec in self.records[(method, seed)]:
                rows.append(
                    [method, str(seed), str(rec.round)]
                    + [_fmt(v) for v in (rec.accuracy, rec.mean_loss, rec.eer, rec.far, rec.frr, rec.threshold)]
                    + [str(int(rec.skipped))]
                )
        return rows

    def summary(self) -> list[tuple[str, str, float, float, int]]:
        """Mean/std across seeds of the final-round values as written to rounds.csv."""
        return summarize_rows(self.rounds_rows())


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def summarize_rows(rows) -> list[tuple[str, str, float, float, int]]:
    """Summary from rounds.csv rows, so the file can be re-derived from its sibling."""
    finals: dict[tuple[str, str], list[str]] = {}
    for row in rows:
        key = (row[0], row[1])
        if key not in finals or int(row[2]) > int(finals[key][2]):
            finals[key] = row
    out = []
    for method in sorted({m for m, _ in finals}):
        final_rows = [r for (m, _), r in sorted(finals.items()) if m == method]
        for col, metric in enumerate(SUMMARY_METRICS, start=3):
            values = [float(r[col]) for r in final_rows]
            std = statistics.stdev(values) if len(values) > 1 else 0.0
            out.append((method, metric, statistics.fmean(values), std, len(values)))
    return out


def build_model(cfg: ExperimentConfig) -> nn.SiameseModel:
    return nn.SiameseModel(
        input_size=cfg.dataset.image_size,
        layers=nn.table1_stack(cfg.model.dropout),
        head=cfg.model.head,
        margin=cfg.model.margin,
        num_classes=cfg.model.num_classes,
    )


def load_subjects(cfg: ExperimentConfig, seed: int) -> list[data.Subject]:
    ds = cfg.dataset
    if ds.source == "corpus":
        return data.ingest_corpus(ds.corpus_path, ds.image_size)
    return data.synth_generate(
        ds.num_subjects, ds.impressions_per_subject, ds.image_size, ds.noise_level, seed
    )


def run_method(method, cfg: ExperimentConfig, seed, clients, eval_pairs, model, init) -> fed.RunResult:
    fcfg = cfg.fed_config(method, seed)
    if method == "local_only":
        return fed.run_local_only(fcfg, clients, eval_pairs, model, init)
    if method == "centralized":
        return fed.run_centralized(fcfg, data.pool_subjects(clients), eval_pairs, model, init)
    return fed.run_federated(fcfg, clients, eval_pairs, model, init)


def run_experiment(cfg: ExperimentConfig) -> ResultsBundle:
    """Per seed: one dataset, split, partition and initial model shared by every method."""
    bundle = ResultsBundle(cfg)
    model = build_model(cfg)
    for seed in cfg.experiment.seeds:
        subjects = load_subjects(cfg, seed)
        split = data.split_eval(subjects, cfg.dataset.holdout_fraction, seed)
        part = data.partition(split.train, cfg.fed.num_clients, cfg.partition.to_scheme(), seed)
        clients = part.client_data(split.train)
        init = model.init_params(np.random.default_rng(seed))
        for method in cfg.experiment.methods:
            log.info("seed %d: running %s", seed, method)
            try:
                result = run_method(method, cfg, seed, clients, split.eval_pairs, model, init)
            except Exception as exc:  # one broken method must not sink the others
                log.error("seed %d: %s failed: %s", seed, method, exc)
                bundle.failures[(method, seed)] = f"{type(exc).__name__}: {exc}"
                continue
            bundle.records[(method, seed)] = result.records
            if result.final_scores:
                bundle.roc[(method, seed)] = metrics.roc_curve(result.final_scores)
            if result.records:
                last = result.records[-1]
                log.info("seed %d: %s final accuracy %.4f eer %.4f", seed, method, last.accuracy, last.eer)
    return bundle


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def emit_csv(bundle: ResultsBundle, output_dir) -> list[Path]:
    """Write rounds.csv, summary.csv and results.json; returns the paths."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    rounds = out / "rounds.csv"
    summary = out / "summary.csv"
    result_json = out / "results.json"
    summary_rows = [
        [m, metric, _fmt(mean), _fmt(std), str(n)] for m, metric, mean, std, n in bundle.summary()
    ]
    rounds.write_text(_csv_text(ROUNDS_HEADER, bundle.rounds_rows()))
    summary.write_text(_csv_text(SUMMARY_HEADER, summary_rows))
    payload = {
        "version": bundle.version,
        "config": serialize_config(bundle.config),
        "threshold_policy": bundle.config.fed.threshold_policy,
        "summary": [
            {"method": m, "label": DISPLAY_NAMES[m], "metric": k, "mean": mean, "std": std, "n_seeds": n}
            for m, k, mean, std, n in bundle.summary()
        ],
        "failures": {f"{m}/{s}": msg for (m, s), msg in sorted(bundle.failures.items())},
    }
    result_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return [rounds, summary, result_json]
