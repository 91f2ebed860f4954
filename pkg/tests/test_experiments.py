import csv
import dataclasses
import json

import pytest

from spem import experiments as ex
from spem.backbone import build, param_count
from spem.cli import main
from spem.errors import ConfigError
from spem.experiments import (ExperimentSpec, MetricsRow, format_spec, gradcheck_cmd, gradcheck_passed,
                              lambda_sweep, parse_spec_text, read_metrics, reweight_ablation, run_experiment,
                              run_suite, sidecar_path, summarize_effectiveness)

TINY = dict(scale="smoke", dataset="synthetic", depth_n=1, epochs=1, train_subset=20, test_subset=10,
            batch_size=10, lr=0.05)


def tiny(name="tiny", **kw):
    return ExperimentSpec(name=name, **{**TINY, **kw})


def csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSpec:
    def test_scale_presets(self):
        desk = ExperimentSpec(name="d").resolved()
        assert (desk.depth_n, desk.epochs, desk.train_subset, desk.test_subset) == (2, 20, 5000, 1000)
        paper = ExperimentSpec(name="p", scale="paper", dataset="cifar100").resolved()
        assert (paper.depth_n, paper.epochs, paper.train_subset, paper.num_classes) == (18, 164, None, 100)
        assert paper.network_config().depth == 164
        override = ExperimentSpec(name="o", epochs=3).resolved()
        assert override.epochs == 3 and override.depth_n == 2

    @pytest.mark.parametrize("kw", [dict(scale="huge"), dict(dataset="mnist"), dict(seeds=[]),
                                    dict(pooling="fixed:3"), dict(reweight="z"), dict(attention="cbam"),
                                    dict(eta=-1.0), dict(name="")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentSpec(**{"name": "x", **kw}).resolved()

    def test_parse_spec_text(self):
        text = """
        # shared settings
        dataset = synthetic
        depth-n = 1
        --epochs = 2

        name = base
        attention = none
        seeds = 0, 1

        name = spem
        pooling = fixed:0.3
        reweight = c
        seed = 4
        eta = 0.2
        """
        a, b = parse_spec_text(text)
        assert (a.name, a.attention, a.seeds, a.depth_n, a.epochs) == ("base", "none", [0, 1], 1, 2)
        assert (b.name, b.pooling, b.reweight, b.seeds, b.eta, b.dataset) == ("spem", "fixed:0.3", "c", [4], 0.2,
                                                                             "synthetic")

    @pytest.mark.parametrize("text", ["name = a\nname = a\n", "name = a\ncolor = red\n", "name = a\nepochs\n"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_spec_text(text)

    def test_format_round_trip(self):
        spec = tiny(seeds=[3, 5], reweight="e", pooling="fixed:0.7")
        assert parse_spec_text(format_spec(spec)) == [spec]

    def test_cifar_needs_data_dir(self):
        with pytest.raises(ConfigError):
            ex.load_data(ExperimentSpec(name="c").resolved(), None)


class TestRunSuite:
    def test_empty_suite_writes_header(self, tmp_path):
        out = tmp_path / "m.csv"
        assert run_suite([], out) == []
        assert csv_rows(out) == [list(MetricsRow.COLUMNS)]

    def test_two_seeds(self, tmp_path):
        out = tmp_path / "m.csv"
        rows = run_suite([tiny(seeds=[0, 1])], out, history_dir=tmp_path)
        assert [r.seed for r in rows] == [0, 1]
        assert read_metrics(out) == rows
        spec = tiny().resolved()
        counts = param_count(build(spec.network_config()))
        assert all((r.params_total, r.params_attention) == (counts.total, counts.attention) for r in rows)
        assert all(r.best_top1 >= r.final_top1 and r.scale == "smoke" for r in rows)
        assert all(len(r.final_lambdas) == 3 for r in rows)
        side = json.loads(sidecar_path(out).read_text())
        assert side["specs"]["tiny"]["seeds"] == [0, 1] and side["specs"]["tiny"]["scale"] == "smoke"
        assert set(side["histories"]) == {"tiny/0", "tiny/1"}
        assert (tmp_path / "tiny-seed1.csv").read_text().startswith("epoch,train_loss,test_top1,lambda_0")

    def test_rerun_is_idempotent_and_resumes(self, tmp_path, monkeypatch):
        out = tmp_path / "m.csv"
        specs = [tiny("a", seeds=[0, 1]), tiny("b", attention="none")]
        run_suite(specs, out)
        first = out.read_bytes()
        calls = []
        real = ex.run_experiment
        monkeypatch.setattr(ex, "run_experiment", lambda s, seed, d=None: calls.append((s.name, seed)) or real(s, seed, d))
        run_suite(specs, out)
        assert out.read_bytes() == first and calls == []
        lines = first.decode().splitlines()
        out.write_text("\n".join(lines[:-1]) + "\n")  # drop the last completed run
        rows = run_suite(specs, out)
        assert calls == [("b", 0)]
        assert [r.key() for r in rows] == [("a", 0), ("a", 1), ("b", 0)]

    def test_unwritable_output_fails_before_training(self, tmp_path, monkeypatch):
        monkeypatch.setattr(ex, "run_experiment", lambda *a, **k: pytest.fail("trained anyway"))
        with pytest.raises(OSError):
            run_suite([tiny()], tmp_path / "missing" / "m.csv")

    def test_duplicate_names(self, tmp_path):
        with pytest.raises(ConfigError):
            run_suite([tiny("x"), tiny("x", seeds=[2])], tmp_path / "m.csv")

    def test_same_seed_same_row(self):
        (r1, h1), (r2, h2) = run_experiment(tiny(), 3), run_experiment(tiny(), 3)
        assert dataclasses.replace(r1, wall_time=0) == dataclasses.replace(r2, wall_time=0)
        assert h1 == h2

    def test_pooling_mini_suite(self, tmp_path):
        base = tiny("t3", depth_n=2)
        suite = lambda_sweep(base, [0.1, 0.3, 0.5, 0.7, 0.9])
        rows = run_suite(suite, tmp_path / "m.csv")
        assert len(rows) == 6
        assert [r.final_lambdas[0] for r in rows] == [0.1, 0.3, 0.5, 0.7, 0.9, rows[-1].final_lambdas[0]]
        assert len(rows[-1].final_lambdas) == 6


class TestGenerators:
    def test_sweep_counts(self):
        base = tiny()
        assert [s.pooling for s in lambda_sweep(base, [0.5])] == ["fixed:0.5", "adaptive"]
        assert [s.pooling for s in lambda_sweep(base, [])] == ["adaptive"]
        grid = lambda_sweep(base, [0.1, 0.3, 0.5, 0.7, 0.9])
        assert len(grid) == 6 and len({s.name for s in grid}) == 6
        with pytest.raises(ConfigError):
            lambda_sweep(base, [1.5])

    def test_reweight_ablation(self):
        suite = reweight_ablation(tiny(depth_n=2))
        assert len(suite) == 9
        assert {s.reweight for s in suite} == {"ours", "a", "b", "c", "d", "e", "f", "g", "none"}
        configs = [s.resolved().network_config() for s in suite]
        assert all((c.blocks_per_stage, c.stage_widths, c.num_classes) == (2, (16, 32, 64), 10) for c in configs)
        att = {s.reweight: param_count(build(c)).attention for s, c in zip(suite, configs)}
        assert att["a"] - att["ours"] == sum(2 * 2 * 4 * w for w in (16, 32, 64))
        with pytest.raises(ConfigError):
            reweight_ablation(tiny(attention="se"))

    def test_effectiveness_summary(self):
        def row(name, acc):
            return MetricsRow(name, 0, "desk", 1, 0, acc, acc, [], 0.0)

        rows = [row("desk-baseline", 0.60), row("desk-adaptive", 0.598), row("desk-fixed0.1", 0.55),
                row("desk-fixed0.5", 0.58), row("desk-fixed0.9", 0.61)]
        s = summarize_effectiveness(rows)
        assert s["adaptive_vs_baseline_ok"] and s["adaptive_vs_fixed_ok"] and s["worst_fixed"] == 0.55
        assert not summarize_effectiveness(rows[:1] + [row("desk-adaptive", 0.5)] + rows[2:])["adaptive_vs_fixed_ok"]
        names = [s.name for s in ex.effectiveness_suite()]
        assert names == ["desk-baseline", "desk-fixed0.1", "desk-fixed0.5", "desk-fixed0.9", "desk-adaptive"]

    def test_gradcheck(self):
        assert gradcheck_passed(gradcheck_cmd("pooling"))
        assert gradcheck_passed(gradcheck_cmd("reweight:b"))
        with pytest.raises(ConfigError):
            gradcheck_cmd("reweight:z")


SMOKE_FLAGS = ["--dataset", "synthetic", "--scale", "smoke", "--depth-n", "1", "--epochs", "1",
               "--train-subset", "20", "--test-subset", "10", "--batch-size", "10"]


class TestCli:
    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "reweight:b"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_gradcheck_unknown_selector(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "bogus"])
        assert exc.value.code == 2

    def test_audit_params(self, capsys):
        assert main(["audit-params", "--depth-n", "18", "--attention", "spem"]) == 0
        out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
        assert out["depth"] == "164" and out["attention"] == "32364"

    def test_train_and_eval(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--seed", "0", "--seed", "1"] + SMOKE_FLAGS) == 0
        assert (tmp_path / "train-seed1.csv").exists()
        assert main(["eval", str(tmp_path / "train-seed0.ckpt"), "--dataset", "synthetic",
                     "--test-subset", "10"]) == 0
        acc = float(capsys.readouterr().out.strip().splitlines()[-1].split("\t")[1])
        assert 0.0 <= acc <= 1.0

    def test_suite_file(self, tmp_path):
        spec_file = tmp_path / "suite.txt"
        spec_file.write_text("dataset = synthetic\ndepth-n = 1\nepochs = 1\ntrain-subset = 20\n"
                             "test-subset = 10\nbatch-size = 10\nname = one\nname = two\nattention = se\n")
        assert main(["suite", str(spec_file), "--out", str(tmp_path / "o")]) == 0
        assert [r.name for r in read_metrics(tmp_path / "o" / "metrics.csv")] == ["one", "two"]

    def test_sweep_adaptive_only(self, tmp_path):
        assert main(["sweep-lambda", "--lambdas", "", "--out", str(tmp_path)] + SMOKE_FLAGS) == 0
        assert [r.name for r in read_metrics(tmp_path / "metrics.csv")] == ["sweep-adaptive"]

    def test_ablate_reweight(self, tmp_path):
        assert main(["ablate-reweight", "--out", str(tmp_path)] + SMOKE_FLAGS) == 0
        assert len(read_metrics(tmp_path / "metrics.csv")) == 9

    def test_missing_data_dir_is_usage_error(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--dataset", "cifar10", "--epochs", "1"]) == 2
        assert "data-dir" in capsys.readouterr().err
        assert main(["train", "--out", str(tmp_path), "--data-dir", str(tmp_path / "none")]) == 2
