import json
import logging
from dataclasses import replace

import numpy as np
import pytest

from lscd_tta import cli
from lscd_tta.adaptation import TTAConfig, run_episode
from lscd_tta.benchgen import SyntheticTaskSpec, TrainConfig, dump_feature_csv, gen_task
from lscd_tta.harness import (
    ABLATION_ROWS,
    REPORT_COLUMNS,
    ConfigError,
    ExperimentConfig,
    MetricsRecord,
    build_config,
    emit_ablation,
    emit_report,
    emit_sensitivity,
    load_config,
    parse_config_text,
    prepare_seed,
    read_report_csv,
    run_ablation,
    run_experiment,
    run_sensitivity,
)
from lscd_tta.network import load_network

TINY_TASK = SyntheticTaskSpec(num_classes=3, feature_dim=6, samples_per_class_source=40,
                              target_stream_length=160, rotation_angle=0.3, mean_translation=1.5,
                              scale_range=(0.9, 1.1), noise_sigma=0.6, imbalance_exponent=1.0)

TINY = ExperimentConfig(task=TINY_TASK, arch_hidden=(8,), train=TrainConfig(epochs=3),
                        tta=TTAConfig(learning_rate=0.01), seeds=(1, 2), record_timing=False)

CONFIG_TEXT = """
# tiny run
num_classes = 3
feature_dim = 6
samples_per_class_source = 40
target_stream_length = 160
rotation_angle = 0.3
mean_translation = 1.5
scale_min = 0.9
scale_max = 1.1
noise_sigma = 0.6
imbalance_exponent = 1.0
hidden = 8
train_epochs = 3
learning_rate = 0.01   # trailing comment
seeds = 1, 2
record_timing = false
"""


class TestConfigFile:
    def test_round_trip_to_dataclass(self):
        assert build_config(parse_config_text(CONFIG_TEXT)) == TINY

    def test_load_with_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(CONFIG_TEXT)
        cfg = load_config(p, seeds=(5,), out=None)
        assert cfg.seeds == (5,) and cfg.out == "report.csv"

    def test_all_scalar_keys(self):
        cfg = build_config(parse_config_text("""
            alpha = 0.5
            beta = 2
            tau = 1
            epsilon = 0.02
            momentum = 0.8
            batch_size = 16
            steps_per_batch = 2
            prob_floor = 1e-6
            detach_pseudo_labels = yes
            eps_bn = 1e-3
            stats_momentum = 0.2
            methods = none, entropy, lscd
            sweep_tau = 0.5, 1.5
            format = json
            out = r.json
            train_lr = 0.1
            train_momentum = 0.5
            train_batch_size = 32
        """))
        assert cfg.tta.weights.alpha == 0.5 and cfg.tta.weights.epsilon == 0.02
        assert cfg.tta.detach_pseudo_labels and cfg.tta.steps_per_batch == 2
        assert cfg.methods == ("none", "entropy", "lscd")
        assert cfg.sweep == (("tau", (0.5, 1.5)),)
        assert cfg.train.lr == 0.1 and cfg.train.batch_size == 32

    @pytest.mark.parametrize("text,match", [
        ("bogus = 1", "unknown config keys"),
        ("seeds = 1\nseeds = 2", "duplicate key"),
        ("just words", "expected 'key = value'"),
        ("alpha = abc", "could not convert"),
        ("methods = tent", "unknown methods"),
        ("record_timing = maybe", "not a boolean"),
        ("source_csv = a.csv", "together"),
        ("format = xml", "csv or json"),
        ("num_classes = 1", "num_classes"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            build_config(parse_config_text(text))

    def test_hash_tracks_semantic_fields_only(self):
        h = TINY.config_hash()
        assert len(h) == 16
        assert replace(TINY, out="elsewhere.csv", format="json", record_timing=True).config_hash() == h
        assert replace(TINY, seeds=(1, 3)).config_hash() != h
        assert replace(TINY, tta=replace(TINY.tta, learning_rate=0.02)).config_hash() != h
        assert replace(TINY, task=replace(TINY_TASK, noise_sigma=0.61)).config_hash() != h


@pytest.fixture(scope="module")
def tiny_result():
    return run_experiment(TINY)


class TestExperiment:
    def test_rows(self, tiny_result):
        rows = tiny_result.rows()
        assert [(r.method, r.seed) for r in rows] == [
            ("lscd", 1), ("lscd", 2), ("lscd", None), ("none", 1), ("none", 2), ("none", None)
        ]
        agg = rows[2]
        accs = [rows[0].online_accuracy, rows[1].online_accuracy]
        assert agg.acc_mean == pytest.approx(np.mean(accs))
        assert agg.acc_std == pytest.approx(np.std(accs, ddof=1))
        assert all(r.batches == 5 for r in rows if not r.is_aggregate)
        assert agg.batches == 10

    def test_matches_direct_episode(self, tiny_result):
        data = prepare_seed(TINY, 2)
        direct = run_episode(data.net, data.stream, replace(TINY.tta, loss="lscd")).accuracy
        rec = next(r for r in tiny_result.records if r.method == "lscd" and r.seed == 2)
        assert rec.online_accuracy == direct

    def test_byte_identical_reports(self, tiny_result, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_report(tiny_result.rows(), a, config_hash=tiny_result.config_hash)
        again = run_experiment(TINY)
        emit_report(again.rows(), b, config_hash=again.config_hash)
        strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("# timestamp=")]
        assert strip(a) == strip(b)
        assert len(a.read_text().splitlines()) == len(strip(a)) + 1

    def test_csv_layout(self, tiny_result, tmp_path):
        p = emit_report(tiny_result.rows(), tmp_path / "r.csv", config_hash=tiny_result.config_hash)
        lines = p.read_text().splitlines()
        assert lines[0].startswith(f"# config_hash={tiny_result.config_hash}")
        assert "n-1" in lines[0]
        assert lines[1].startswith("# timestamp=")
        assert lines[2] == ",".join(REPORT_COLUMNS)
        rows = read_report_csv(p)
        assert rows[0]["acc_mean"] == "" and rows[2]["online_accuracy"] == ""
        assert all(r["ms_per_item"] == "" for r in rows)

    def test_json_matches_csv(self, tiny_result, tmp_path):
        c = read_report_csv(emit_report(tiny_result.rows(), tmp_path / "r.csv"))
        doc = json.loads(emit_report(tiny_result.rows(), tmp_path / "r.json", "json").read_text())
        assert doc["columns"] == list(REPORT_COLUMNS)
        assert set(doc["header"]) == {"config_hash", "note", "timestamp"}
        for crow, jrow in zip(c, doc["records"]):
            for col in ("online_accuracy", "acc_mean", "acc_std"):
                assert (crow[col] == "") == (jrow[col] is None)
                if jrow[col] is not None:
                    assert float(crow[col]) == jrow[col]

    def test_timing_recorded_when_enabled(self):
        res = run_experiment(replace(TINY, seeds=(1,), methods=("none",), record_timing=True))
        assert res.records[0].ms_per_item > 0

    def test_empty_report_is_header_only(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            p = emit_report([], tmp_path / "e.csv")
        assert p.read_text().splitlines()[2:] == [",".join(REPORT_COLUMNS)]
        assert "no records" in caplog.text

    def test_single_record_has_no_std(self, tmp_path):
        res = run_experiment(replace(TINY, seeds=(1,), methods=("none",)))
        agg = res.rows()[-1]
        assert agg.acc_std is None and agg.acc_mean == res.records[0].online_accuracy
        rows = read_report_csv(emit_report(res.rows(), tmp_path / "r.csv"))
        assert rows[-1]["acc_std"] == ""

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="cannot write report"):
            emit_report([MetricsRecord("none", 0, 1, 0.5)], blocker / "r.csv")

    def test_failing_seed_is_recorded_and_others_run(self, tmp_path, monkeypatch):
        import lscd_tta.harness as harness

        original = harness.prepare_seed

        def flaky(config, seed):
            if seed == 2:
                raise FloatingPointError("source training diverged")
            return original(config, seed)

        monkeypatch.setattr(harness, "prepare_seed", flaky)
        res = run_experiment(TINY)
        assert [f[0] for f in res.failures] == [2]
        assert "diverged" in res.failures[0][1]
        assert {r.seed for r in res.records} == {1}

    def test_csv_inputs(self, tmp_path):
        source, stream = gen_task(replace(TINY_TASK, seed=1))
        dump_feature_csv(source, tmp_path / "s.csv")
        dump_feature_csv(stream.to_labeled(), tmp_path / "t.csv")
        cfg = replace(TINY, source_csv=str(tmp_path / "s.csv"), target_csv=str(tmp_path / "t.csv"),
                      seeds=(1,))
        via_csv = run_experiment(cfg)
        direct = run_experiment(replace(TINY, seeds=(1,)))
        assert [r.online_accuracy for r in via_csv.records] == [r.online_accuracy for r in direct.records]


@pytest.fixture(scope="module")
def table():
    return run_ablation(TINY)


class TestAblation:
    def test_rows_and_flags(self, table):
        assert [r["method"] for r in table.rows] == list(ABLATION_ROWS) == ["Baseline", *"ABCDEFG"]
        flags = {r["method"]: (r["wcse"], r["bcse"], r["lsd"]) for r in table.rows}
        assert flags["Baseline"] == (False, False, False)
        assert flags["A"] == (True, False, False) and flags["C"] == (False, False, True)
        assert flags["E"] == (True, False, True) and flags["G"] == (True, True, True)
        assert all(r["average"] is not None for r in table.rows)

    def test_g_matches_lscd_experiment(self, table, tiny_result):
        assert table.average("G") == tiny_result.accuracy("lscd")
        assert table.average("Baseline") == tiny_result.accuracy("none")

    def test_emit(self, table, tmp_path):
        lines = emit_ablation(table, tmp_path / "a.csv").read_text().splitlines()
        assert lines[1] == "method,wcse,bcse,lsd,seed_1,seed_2,average"
        assert lines[2].startswith("Baseline,0,0,0,")
        doc = json.loads(emit_ablation(table, tmp_path / "a.json", "json").read_text())
        assert len(doc["rows"]) == 8


class TestSensitivity:
    def test_counts_and_best(self, tmp_path):
        points = run_sensitivity(TINY, {"tau": (0.5, 1.5, 3.0)})
        per_seed = [p for p in points if p.seed is not None]
        agg = [p for p in points if p.seed is None]
        assert len(per_seed) == 3 * len(TINY.seeds) and len(agg) == 3
        assert sum(p.best for p in agg) == 1
        assert max(agg, key=lambda p: p.accuracy).best
        lines = emit_sensitivity(points, tmp_path / "s.csv").read_text().splitlines()
        assert lines[1] == "sweep,alpha,beta,tau,epsilon,seed,accuracy,best"
        assert len(lines) == 2 + 9

    def test_default_point_matches_experiment(self, tiny_result):
        points = run_sensitivity(TINY, {"alpha": (0.25,)})
        agg = [p for p in points if p.seed is None]
        assert agg[0].accuracy == tiny_result.accuracy("lscd")

    def test_multiple_sweeps_hold_others_fixed(self):
        points = run_sensitivity(replace(TINY, seeds=(1,)), {"alpha": (0.0, 0.5), "epsilon": (0.05,)})
        eps_pts = [p for p in points if p.sweep == "epsilon"]
        assert all(p.weights.alpha == 0.25 and p.weights.epsilon == 0.05 for p in eps_pts)
        assert sum(p.best for p in points) == 2

    @pytest.mark.parametrize("grid,match", [({}, "empty"), ({"lr": (1,)}, "cannot sweep")])
    def test_bad_grid(self, grid, match):
        with pytest.raises(ConfigError, match=match):
            run_sensitivity(TINY, grid)


class TestCLI:
    @pytest.fixture
    def cfg_file(self, tmp_path):
        p = tmp_path / "tiny.cfg"
        p.write_text(CONFIG_TEXT + "sweep_tau = 0.5, 1.5\n")
        return p

    def test_gen_data_and_train_source(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli.main(["gen-data", "--config", str(cfg_file), "--seed", "1", "--out", str(out)]) == 0
        assert (out / "source_seed1.csv").exists() and (out / "target_seed1.csv").exists()
        assert cli.main(["train-source", "--config", str(cfg_file), "--seed", "1", "--out", str(out)]) == 0
        net = load_network(out / "source_seed1.lscdnet")
        assert net.arch.input_dim == 6 and net.arch.hidden == (8,)
        assert "validation accuracy" in capsys.readouterr().out

    def test_adapt_from_checkpoint_matches_training(self, cfg_file, tmp_path):
        out = tmp_path / "data"
        cli.main(["train-source", "--config", str(cfg_file), "--out", str(out)])
        with_ckpt = cfg_file.read_text() + f"source_checkpoint = {out}/source_seed{{seed}}.lscdnet\n"
        ckpt_cfg = tmp_path / "ckpt.cfg"
        ckpt_cfg.write_text(with_ckpt)
        assert cli.main(["adapt", "--config", str(ckpt_cfg), "--out", str(tmp_path / "a.csv")]) == 0
        assert cli.main(["adapt", "--config", str(cfg_file), "--out", str(tmp_path / "b.csv")]) == 0
        a = read_report_csv(tmp_path / "a.csv")
        b = read_report_csv(tmp_path / "b.csv")
        assert [r["online_accuracy"] for r in a] == [r["online_accuracy"] for r in b]

    def test_ablate_and_sweep(self, cfg_file, tmp_path, capsys):
        assert cli.main(["ablate", "--config", str(cfg_file), "--seed", "1",
                         "--out", str(tmp_path / "ab.csv")]) == 0
        assert cli.main(["sweep", "--config", str(cfg_file), "--seed", "1",
                         "--out", str(tmp_path / "sw.csv")]) == 0
        text = capsys.readouterr().out
        assert "Baseline" in text and "<- best" in text

    def test_bad_config_exits_2(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("nonsense = 1\n")
        assert cli.main(["adapt", "--config", str(p)]) == 2
        assert "unknown config keys" in capsys.readouterr().err
        assert cli.main(["adapt", "--config", str(tmp_path / "missing.cfg")]) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            cli.main(["frobnicate"])


def test_shipped_config_pins_acceptance_task():
    from pathlib import Path

    from lscd_tta.benchgen import ACCEPTANCE_SEEDS, ACCEPTANCE_TASK

    cfg = load_config(Path(__file__).parents[1] / "configs" / "acceptance.cfg")
    assert replace(cfg.task, seed=ACCEPTANCE_TASK.seed) == ACCEPTANCE_TASK
    assert cfg.seeds == ACCEPTANCE_SEEDS
    assert cfg.tta == TTAConfig()
