import json
import subprocess
import sys

import numpy as np
import pytest

from modedec.cli import main
from modedec.model import Model, ModelConfig, load_model, save_model
from modedec.signal import (Signal, TimeGrid, read_components_csv, read_signal_csv,
                            write_signal_csv)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def d1_small(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d1"
    assert run("gen-data", "--dataset", "d1", "--families", "A", "--n", 64, "--limit", 10,
               "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, d1_small):
    out = tmp_path_factory.mktemp("run") / "train"
    assert run("train", "--data", d1_small, "--out-dir", out, "--S", 1, "--K", 8,
               "--epochs", 2, "--batch-size", 4, "--quiet") == 0
    return out


@pytest.fixture
def small_model(tmp_path):
    path = tmp_path / "model.json"
    save_model(path, Model(ModelConfig(M=2, S=1, K=8, d_att=4), seed=0))
    return path


class TestGenData:
    def test_d1_layout(self, tmp_path):
        out = tmp_path / "d1"
        assert run("gen-data", "--dataset", "d1", "--n", 32, "--out", out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["count"] == 760
        assert len(list((out / "features").glob("*.csv"))) == 760
        assert len(list((out / "labels").glob("*.csv"))) == 760
        assert manifest["grid"] == {"t_start": 0.0, "t_end": 6.0, "n": 32}
        assert len(manifest["split"]["train"]) == 608
        assert (out / "config.ini").is_file()

    def test_x1(self, tmp_path):
        out = tmp_path / "x1"
        assert run("gen-data", "--dataset", "x1", "--out", out) == 0
        t, comps, res = read_components_csv(out / "labels" / "000000.csv")
        assert comps.shape == (2, 2400) and res is None
        assert read_signal_csv(out / "features" / "000000.csv").values[0] == 2.0

    def test_reproducible_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--dataset", "d2", "--families", "A", "--n", 32,
                       "--seed", 3, "--out", tmp_path / name) == 0
        for sub in ("features/000007.csv", "labels/000007.csv", "manifest.json", "config.ini"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    def test_overwrite_needs_force(self, tmp_path, capsys):
        out = tmp_path / "x"
        assert run("gen-data", "--dataset", "x1", "--out", out) == 0
        assert run("gen-data", "--dataset", "x1", "--out", out) == 2
        assert "--force" in capsys.readouterr().err
        assert run("gen-data", "--dataset", "x1", "--out", out, "--force") == 0

    def test_real_series(self, tmp_path):
        series = tmp_path / "s.csv"
        rows = "\n".join(f"2000-01-{i % 28 + 1:02d},{np.sin(i / 10):.6f}" for i in range(900))
        series.write_text("date,value\n" + rows + "\n")
        assert run("gen-data", "--dataset", "real", "--series", series, "--out", tmp_path / "r") == 0
        assert len(list((tmp_path / "r" / "features").glob("*.csv"))) == 2

    def test_unknown_dataset_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("gen-data", "--dataset", "d9", "--out", tmp_path / "z")
        assert exc.value.code == 2


class TestTrain:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} == {"model.json", "history.csv", "config.ini"}
        lines = (trained / "history.csv").read_text().splitlines()
        assert len(lines) == 3
        model, extra = load_model(trained / "model.json", return_extra=True)
        assert model.config.K == 8 and "training_state" in extra

    def test_unknown_variant(self, d1_small, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("train", "--data", d1_small, "--out-dir", tmp_path / "t", "--variant", "nope")
        assert exc.value.code == 2

    def test_component_mismatch_is_data_error(self, d1_small, tmp_path):
        assert run("train", "--data", d1_small, "--out-dir", tmp_path / "t", "--M", 3,
                   "--K", 8, "--epochs", 1) == 3
        assert not (tmp_path / "t").exists()

    def test_resume_continues_numbering(self, d1_small, trained, tmp_path):
        out = tmp_path / "resumed"
        assert run("train", "--data", d1_small, "--out-dir", out, "--resume",
                   trained / "model.json", "--epochs", 2, "--quiet") == 0
        epochs = [int(l.split(",")[0]) for l in (out / "history.csv").read_text().splitlines()[1:]]
        assert epochs == [0, 1, 2, 3]

    def test_config_file(self, d1_small, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nS = 1\nK = 8\nvariant = ircnn\n[train]\nepochs = 1\n")
        out = tmp_path / "t"
        assert run("train", "--data", d1_small, "--out-dir", out, "--config", cfg,
                   "--quiet") == 0
        model = load_model(out / "model.json")
        assert not model.config.use_multiscale_attention
        assert "variant = ircnn" in (out / "config.ini").read_text()

    def test_bad_config_key(self, d1_small, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nwidth = 3\n")
        assert run("train", "--data", d1_small, "--out-dir", tmp_path / "t", "--config", cfg) == 3


class TestDecompose:
    def test_single_file(self, small_model, tmp_path, capsys):
        x = np.random.default_rng(0).standard_normal(50)
        src = tmp_path / "x.csv"
        write_signal_csv(src, Signal(TimeGrid(0, 1, 50), x))
        assert run("decompose", "--model", small_model, "--input", src,
                   "--out", tmp_path / "o.csv") == 0
        assert "reconstruction max error" in capsys.readouterr().err
        header = (tmp_path / "o.csv").read_text().splitlines()[0]
        assert header == "t,imf1,imf2,residue"
        _, comps, res = read_components_csv(tmp_path / "o.csv")
        np.testing.assert_allclose(comps.sum(axis=0) + res, x, atol=1e-12)

    def test_zero_block_model_returns_input(self, tmp_path):
        model = Model(ModelConfig(M=1, S=2, K=8, d_att=4, use_tvd=False), seed=0)
        for b in model.stages[0]:
            b.w2.value[...] = 0.0
        save_model(tmp_path / "m.json", model)
        x = np.random.default_rng(1).standard_normal(20)
        write_signal_csv(tmp_path / "x.csv", Signal(TimeGrid(0, 1, 20), x))
        assert run("decompose", "--model", tmp_path / "m.json", "--input", tmp_path / "x.csv",
                   "--out", tmp_path / "o.csv") == 0
        _, comps, res = read_components_csv(tmp_path / "o.csv")
        np.testing.assert_array_equal(comps[0], x)
        np.testing.assert_array_equal(res, 0.0)

    def test_batch_directory(self, small_model, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MODEDEC_THREADS", "2")
        src = tmp_path / "in"
        src.mkdir()
        rng = np.random.default_rng(2)
        for i in range(5):
            write_signal_csv(src / f"s{i}.csv", Signal(TimeGrid(0, 1, 32), rng.standard_normal(32)))
        out = tmp_path / "out"
        assert run("decompose", "--model", small_model, "--input", src, "--out", out) == 0
        lines = (out / "latency.csv").read_text().splitlines()
        assert lines[0] == "signal,seconds,reconstruction_max_error" and len(lines) == 6
        summary = json.loads((out / "latency_summary.json").read_text())
        assert summary["count"] == 5
        assert "median=" in capsys.readouterr().out

    def test_short_input(self, small_model, tmp_path):
        write_signal_csv(tmp_path / "x.csv", Signal(TimeGrid(0, 1, 4), np.ones(4)))
        assert run("decompose", "--model", small_model, "--input", tmp_path / "x.csv",
                   "--out", tmp_path / "o.csv") == 3

    def test_corrupt_model(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        write_signal_csv(tmp_path / "x.csv", Signal(TimeGrid(0, 1, 40), np.ones(40)))
        assert run("decompose", "--model", tmp_path / "m.json", "--input", tmp_path / "x.csv",
                   "--out", tmp_path / "o.csv") == 3

    def test_bad_thread_env(self, small_model, tmp_path, monkeypatch):
        monkeypatch.setenv("MODEDEC_THREADS", "zero")
        (tmp_path / "in").mkdir()
        write_signal_csv(tmp_path / "in" / "a.csv", Signal(TimeGrid(0, 1, 40), np.ones(40)))
        assert run("decompose", "--model", small_model, "--input", tmp_path / "in",
                   "--out", tmp_path / "o") == 2


class TestEval:
    def test_report_and_plots(self, trained, d1_small, tmp_path, capsys):
        out = tmp_path / "ev"
        assert run("eval", "--model", trained / "model.json", "--data", d1_small,
                   "--out-dir", out, "--plot") == 0
        rows = (out / "report.csv").read_text().splitlines()
        assert rows[0] == "scope,mae,rmse,mape,tv"
        assert any(r.startswith("aggregate:component_mean") for r in rows)
        assert any(r.startswith("aggregate:component_pooled") for r in rows)
        svgs = list((out / "plots").glob("*.svg"))
        assert len(svgs) == 2  # validation split of 10 examples
        assert svgs[0].read_text().lstrip().startswith("<?xml")
        assert "label_tv" in capsys.readouterr().out

    def test_true_label_tv_for_x1(self, tmp_path, capsys):
        assert run("gen-data", "--dataset", "x1", "--out", tmp_path / "x1") == 0
        save_model(tmp_path / "m.json", Model(ModelConfig(), seed=0))
        assert run("eval", "--model", tmp_path / "m.json", "--data", tmp_path / "x1",
                   "--out-dir", tmp_path / "ev") == 0
        label_tv = [l for l in capsys.readouterr().out.splitlines() if l.startswith("label_tv")][0]
        tvs = [float(v) for v in label_tv.split()[1:]]
        assert tvs[0] == pytest.approx(76.6830, rel=1e-3)
        assert tvs[1] == pytest.approx(59.9961, rel=1e-3)

    def test_perfect_model_zero_errors(self, tmp_path):
        # M=1 labels equal to the features and an identity model.
        from modedec.cli import write_data_dir
        from modedec.datagen import Dataset, LabeledExample

        g = TimeGrid(0, 1, 30)
        rng = np.random.default_rng(0)
        exs = [LabeledExample(Signal(g, x), x[None]) for x in rng.standard_normal((3, 30))]
        d = tmp_path / "d"
        d.mkdir()
        write_data_dir(d, Dataset(exs), {"dataset": "custom"})
        model = Model(ModelConfig(M=1, S=1, K=8, d_att=4, use_tvd=False), seed=0)
        model.stages[0][0].w2.value[...] = 0.0
        save_model(tmp_path / "m.json", model)
        assert run("eval", "--model", tmp_path / "m.json", "--data", d,
                   "--out-dir", tmp_path / "ev") == 0
        for row in (tmp_path / "ev" / "report.csv").read_text().splitlines()[1:]:
            assert [float(v) for v in row.split(",")[1:4]] == [0.0, 0.0, 0.0]

    def test_missing_labels(self, trained, tmp_path):
        d = tmp_path / "d"
        (d / "features").mkdir(parents=True)
        write_signal_csv(d / "features" / "a.csv", Signal(TimeGrid(0, 1, 64), np.ones(64)))
        assert run("eval", "--model", trained / "model.json", "--data", d,
                   "--out-dir", tmp_path / "ev") == 3


class TestTvd:
    def write(self, tmp_path, values):
        p = tmp_path / "in.csv"
        write_signal_csv(p, Signal(TimeGrid(0, 1, len(values)), np.asarray(values, float)))
        return p

    def test_lambda_zero(self, tmp_path):
        vals = np.random.default_rng(0).standard_normal(16)
        assert run("tvd", "--input", self.write(tmp_path, vals), "--lam", 0,
                   "--out", tmp_path / "o.csv") == 0
        np.testing.assert_array_equal(read_signal_csv(tmp_path / "o.csv").values, vals)

    def test_constant(self, tmp_path):
        assert run("tvd", "--input", self.write(tmp_path, np.full(10, 1.5)),
                   "--out", tmp_path / "o.csv") == 0
        np.testing.assert_array_equal(read_signal_csv(tmp_path / "o.csv").values, 1.5)

    def test_noisy_step_trace(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        vals = np.r_[np.zeros(30), np.ones(30)] + 0.1 * rng.standard_normal(60)
        assert run("tvd", "--input", self.write(tmp_path, vals), "--lam", 0.3, "--nit", 15,
                   "--out", tmp_path / "o.csv") == 0
        lines = capsys.readouterr().out.splitlines()
        before = float(lines[0].split(":")[1])
        after = float(lines[-1].split(":")[1])
        trace = [float(l.split(":")[1]) for l in lines[1:-1]]
        assert len(trace) == 15 and after < before
        assert all(b <= a + 1e-10 for a, b in zip([before] + trace, trace))

    def test_too_short(self, tmp_path):
        assert run("tvd", "--input", self.write(tmp_path, [1.0, 2.0]),
                   "--out", tmp_path / "o.csv") == 3


class TestGridAndBench:
    def test_grid(self, d1_small, tmp_path):
        out = tmp_path / "g"
        assert run("grid", "--data", d1_small, "--out-dir", out, "--S-values", "1,2",
                   "--K-values", "8", "--epochs", 1, "--batch-size", 8) == 0
        doc = json.loads((out / "grid.json").read_text())
        assert len(doc["cells"]) == 2
        maes = [c["mae"] for c in doc["cells"]]
        assert doc["col_means"]["8"]["mae"] == pytest.approx(np.mean(maes), rel=1e-15)

    def test_bench(self, tmp_path, capsys):
        out = tmp_path / "b"
        assert run("bench", "--n-signals", 6, "--length", 64, "--K", 8, "--S", 1,
                   "--out-dir", out) == 0
        summary = json.loads((out / "latency_summary.json").read_text())
        assert summary["count"] == 6 and summary["length"] == 64
        assert len((out / "latency.csv").read_text().splitlines()) == 7


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "modedec.cli", "--help"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "decompose", "eval", "tvd", "grid", "bench"):
        assert cmd in res.stdout
