import csv
import json
import statistics
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from fedverify import cli, config, experiment, fed, report
from fedverify.config import ConfigError, parse_config, parse_config_text, serialize_config
from fedverify.experiment import ResultsBundle

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """
[dataset]
num_subjects = 8
impressions_per_subject = 4
image_size = 12
holdout_fraction = 0.5

[model]
margin = 10.0

[fed]
num_clients = 2
clients_per_round = 2
rounds = {rounds}
local_epochs = 1
batch_size = 8

[experiment]
methods = {methods}
seeds = {seeds}
output_dir = {out}
"""


def tiny_cfg(tmp_path, methods="fedavg", seeds="0", rounds=1):
    return parse_config_text(TINY.format(methods=methods, seeds=seeds, rounds=rounds, out=tmp_path / "out"))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_empty_file_gives_table2(self):
        cfg = parse_config_text("")
        assert cfg.fed.to_fed_config() == fed.FedConfig()
        assert cfg.experiment.methods == config.METHODS

    def test_empty_fed_section_gives_table2(self):
        cfg = parse_config_text("[fed]\n")
        assert cfg.fed.to_fed_config(seed=3) == fed.FedConfig(seed=3)

    def test_clients_per_round_above_k_rejected(self):
        with pytest.raises(ConfigError, match="clients_per_round"):
            parse_config_text("[fed]\nnum_clients = 20\nclients_per_round = 25\n")

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="'rouns'"):
            parse_config_text("[fed]\nrouns = 3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text("[optimizer]\nlr = 1\n")

    def test_type_error_names_key_and_form(self):
        with pytest.raises(ConfigError, match=r"rounds = 'ten': expected an integer"):
            parse_config_text("[fed]\nrounds = ten\n")

    def test_unknown_method(self):
        with pytest.raises(ConfigError, match="unknown methods"):
            parse_config_text("[experiment]\nmethods = attention, fedprox\n")

    def test_too_many_clients_for_subjects(self):
        with pytest.raises(ConfigError, match="num_subjects"):
            parse_config_text("[dataset]\nnum_subjects = 10\n[fed]\nnum_clients = 6\nclients_per_round = 2\n")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.ini"):
            parse_config(tmp_path / "nope.ini")

    @pytest.mark.parametrize("name", ["table2.ini", "desk.ini", "smoke.ini"])
    def test_shipped_configs_round_trip(self, name):
        cfg = parse_config(CONFIGS / name)
        assert parse_config_text(serialize_config(cfg)) == cfg

    def test_round_trip_awkward_floats(self):
        cfg = parse_config_text("[fed]\nlearning_rate = 0.1\n[dp]\nnoise_sigma = 0.30000000000000004\n")
        assert parse_config_text(serialize_config(cfg)) == cfg

    def test_method_configs(self):
        cfg = parse_config_text("[dp]\nnoise_sigma = 0.05\n")
        assert cfg.fed_config("fedavg", 1).aggregator == "fedavg"
        assert cfg.fed_config("attention", 1).dp is None
        assert cfg.fed_config("attention_dp", 1).dp == fed.DpConfig(1.0, 0.05)
        assert cfg.fed_config("attention_dp", 1).aggregator == "attention"


class TestExperiment:
    def test_smoke_single_round(self, tmp_path):
        bundle = experiment.run_experiment(tiny_cfg(tmp_path))
        assert list(bundle.records) == [("fedavg", 0)]
        assert len(bundle.records[("fedavg", 0)]) == 1
        assert not bundle.failures

    def test_methods_share_init_and_eval(self, tmp_path, monkeypatch):
        seen = {}

        def spy(method, cfg, seed, clients, eval_pairs, model, init):
            seen[method] = (init.values.copy(), [id(p) for p in eval_pairs], clients)
            return fed.RunResult([], [init])

        monkeypatch.setattr(experiment, "run_method", spy)
        experiment.run_experiment(tiny_cfg(tmp_path, methods="attention, fedavg, local_only"))
        (i1, e1, c1), (i2, e2, c2), (i3, e3, c3) = seen.values()
        assert np.array_equal(i1, i2) and np.array_equal(i1, i3)
        assert e1 == e2 == e3
        assert c1 is c2 is c3

    def test_failure_is_recorded_and_others_run(self, tmp_path, monkeypatch):
        real = experiment.run_method

        def flaky(method, *args):
            if method == "attention":
                raise RuntimeError("boom")
            return real(method, *args)

        monkeypatch.setattr(experiment, "run_method", flaky)
        bundle = experiment.run_experiment(tiny_cfg(tmp_path, methods="attention, fedavg"))
        assert bundle.failures == {("attention", 0): "RuntimeError: boom"}
        assert ("fedavg", 0) in bundle.records


@pytest.fixture(scope="module")
def three_seed_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    cfg = parse_config_text(TINY.format(methods="fedavg", seeds="0, 1, 2", rounds=10, out=out))
    bundle = experiment.run_experiment(cfg)
    experiment.emit_csv(bundle, out)
    return bundle, out


class TestCsv:
    def test_row_counts_and_header(self, three_seed_bundle):
        _, out = three_seed_bundle
        rows = read_rows(out / "rounds.csv")
        assert rows[0] == "method,seed,round,accuracy,loss,eer,far,frr,threshold,skipped".split(",")
        assert len(rows) == 31
        assert [(r[1], r[2]) for r in rows[1:]] == [(str(s), str(t)) for s in range(3) for t in range(1, 11)]
        assert all(len(r[3].split(".")[1]) == 6 for r in rows[1:])
        assert read_rows(out / "summary.csv")[0] == "method,metric,mean,std,n_seeds".split(",")

    def test_summary_is_hand_average(self, three_seed_bundle):
        _, out = three_seed_bundle
        finals = [float(r[3]) for r in read_rows(out / "rounds.csv")[1:] if r[2] == "10"]
        summary = {r[1]: r for r in read_rows(out / "summary.csv")[1:]}
        assert float(summary["accuracy"][2]) == pytest.approx(sum(finals) / 3, abs=5e-7)
        assert summary["accuracy"][2] == f"{statistics.fmean(finals):.6f}"
        assert summary["accuracy"][3] == f"{statistics.stdev(finals):.6f}"
        assert summary["accuracy"][4] == "3"

    def test_summary_recomputable_from_rounds(self, three_seed_bundle):
        _, out = three_seed_bundle
        recomputed = experiment.summarize_rows(read_rows(out / "rounds.csv")[1:])
        written = read_rows(out / "summary.csv")[1:]
        assert [[m, k, f"{a:.6f}", f"{s:.6f}", str(n)] for m, k, a, s, n in recomputed] == written

    def test_results_json(self, three_seed_bundle):
        bundle, out = three_seed_bundle
        payload = json.loads((out / "results.json").read_text())
        assert payload["version"] == bundle.version
        assert payload["threshold_policy"] == "eer_threshold"
        assert parse_config_text(payload["config"]) == bundle.config

    def test_unwritable_directory(self, three_seed_bundle, tmp_path):
        bundle, _ = three_seed_bundle
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match=str(blocker)):
            experiment.emit_csv(bundle, blocker / "sub")

    def test_five_methods_use_table3_names(self, tmp_path):
        bundle = experiment.run_experiment(tiny_cfg(tmp_path, methods=", ".join(config.METHODS)))
        experiment.emit_csv(bundle, tmp_path)
        payload = json.loads((tmp_path / "results.json").read_text())
        labels = [s["label"] for s in payload["summary"] if s["metric"] == "accuracy"]
        assert sorted(labels) == sorted(["Attention-based", "FedAvg", "Local-only", "Centralized", "Attention + DP"])


def _svg_root(path):
    return ET.parse(path).getroot()


def _legend_entries(fig):
    legends = [ax.get_legend() for ax in fig.axes if ax.get_legend() is not None]
    assert len(legends) == 1
    return [t.get_text() for t in legends[0].get_texts()]


class TestPlots:
    def test_four_wellformed_svgs(self, three_seed_bundle, tmp_path):
        bundle, _ = three_seed_bundle
        paths = report.emit_plots(bundle, tmp_path)
        assert sorted(p.name for p in paths) == sorted(report.FIGURES.values())
        for p in paths:
            root = _svg_root(p)
            assert root.tag.endswith("svg")
            assert "Round" in p.read_text() or "False accept rate" in p.read_text()

    def test_single_method_legends(self, three_seed_bundle):
        bundle, _ = three_seed_bundle
        for plot in report.PLOTTERS.values():
            fig = plot(bundle)
            assert _legend_entries(fig) == ["FedAvg"]

    def test_accuracy_axis_holds_all_values(self, three_seed_bundle):
        bundle, _ = three_seed_bundle
        fig = report.plot_accuracy_comparison(bundle)
        lo, hi = fig.axes[0].get_ylim()
        values = [r.accuracy for recs in bundle.records.values() for r in recs]
        assert lo <= min(values) and max(values) <= hi

    def test_empty_bundle_writes_nothing(self, tmp_path, caplog):
        empty = ResultsBundle(parse_config_text(""))
        assert report.emit_plots(empty, tmp_path / "plots") == []
        assert not (tmp_path / "plots").exists()
        assert "no round records" in caplog.text

    def test_svgs_are_reproducible(self, three_seed_bundle, tmp_path):
        bundle, _ = three_seed_bundle
        a = [p.read_bytes() for p in report.emit_plots(bundle, tmp_path / "a")]
        b = [p.read_bytes() for p in report.emit_plots(bundle, tmp_path / "b")]
        assert a == b

    def test_roc_grid_is_step_envelope(self):
        curve = [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
        grid = report.roc_on_grid(curve)
        assert grid[0] == 0.5 and grid[report.FAR_GRID.searchsorted(0.5)] == 1.0


def _write_cfg(tmp_path, **kw):
    path = tmp_path / "exp.ini"
    path.write_text(TINY.format(**{"methods": "fedavg, attention", "seeds": "0", "rounds": 2, "out": tmp_path / "o"} | kw))
    return path


class TestCli:
    def test_run_writes_everything(self, tmp_path, capsys):
        assert cli.main(["run", str(_write_cfg(tmp_path))]) == 0
        names = {p.name for p in (tmp_path / "o").iterdir()}
        assert names == {"rounds.csv", "summary.csv", "results.json"} | set(report.FIGURES.values())
        assert "accuracy" in capsys.readouterr().out

    def test_run_twice_is_byte_identical(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "a"), "--quiet"]) == 0
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "b"), "--quiet"]) == 0
        for name in ["rounds.csv", "summary.csv", "results.json", *report.FIGURES.values()]:
            a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
            if name == "results.json":  # output_dir is echoed in the config
                a, b = a.replace(b"/a", b""), b.replace(b"/b", b"")
            assert a == b, name

    def test_seed_flag_overrides(self, tmp_path):
        cli.main(["run", str(_write_cfg(tmp_path, seeds="0, 1")), "--seed", "7", "--quiet"])
        seeds = {r[1] for r in read_rows(tmp_path / "o" / "rounds.csv")[1:]}
        assert seeds == {"7"}

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "missing.ini")]) == 1
        assert "missing.ini" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[fed]\nnum_clients = 20\nclients_per_round = 25\n")
        assert cli.main(["run", str(path)]) == 1
        assert "clients_per_round" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_gradcheck_prints_layers(self, capsys):
        assert cli.main(["gradcheck", "--seeds", "1", "--input-size", "12"]) == 0
        out = capsys.readouterr().out
        for block in ("conv2d1.W", "conv2d2.b", "dense1.W"):
            assert block in out
        assert "PASS" in out

    def test_synth_then_ingest(self, tmp_path):
        out = tmp_path / "corpus"
        assert cli.main(["synth", str(out), "--num-subjects", "3", "--impressions", "2", "--image-size", "16"]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["1_1.pgm", "1_2.pgm", "2_1.pgm", "2_2.pgm", "3_1.pgm", "3_2.pgm"]

    def test_corpus_config_runs(self, tmp_path):
        cli.main(["synth", str(tmp_path / "c"), "--num-subjects", "8", "--impressions", "4", "--image-size", "20", "--quiet"])
        text = TINY.format(methods="fedavg", seeds="0", rounds=1, out=tmp_path / "o").replace(
            "[dataset]\n", f"[dataset]\nsource = corpus\ncorpus_path = {tmp_path / 'c'}\n"
        )
        (tmp_path / "c.ini").write_text(text)
        assert cli.main(["run", str(tmp_path / "c.ini"), "--quiet"]) == 0

    def test_metrics_oracle_command(self, capsys):
        assert cli.main(["metrics-oracle", "--trials", "10"]) == 0
        assert "0 mismatches PASS" in capsys.readouterr().out
