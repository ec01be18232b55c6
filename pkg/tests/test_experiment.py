import math

import numpy as np
import pytest

from bnnlab.errors import ContractViolation, FormatError
from bnnlab.experiment import cli
from bnnlab.experiment.ablation import ABLATION_HEADER, best_by_normalizer, run_ablation
from bnnlab.experiment.config import parse_kv, train_config
from bnnlab.experiment.csvio import emit_csv, read_csv, to_csv
from bnnlab.experiment.data import Dataset, synth_dataset
from bnnlab.experiment.train import train

TINY = {"widths": "16,32,32,32,3", "batch_size": "32", "epochs": "3", "milestones": "1,2",
        "fp_init": "fan_in_uniform", "lr": "0.005"}


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(300, 16, 3, seed=0, separation=4.0, n_test=150)


def cfg(**over):
    kv = dict(TINY)
    kv.update({k: str(v) for k, v in over.items()})
    return train_config(kv)


class TestConfig:
    def test_parse_kv(self):
        kv = parse_kv("# comment\nwidths = 1,2,3\n\nlr=0.1  # trailing\n")
        assert kv == {"widths": "1,2,3", "lr": "0.1"}

    def test_parse_error(self):
        with pytest.raises(FormatError):
            parse_kv("no equals sign")

    def test_milestones_below_epochs(self):
        with pytest.raises(ContractViolation):
            cfg(epochs=2, milestones="1,2")

    def test_bad_bool(self):
        with pytest.raises(FormatError):
            cfg(latent_clip="maybe")


class TestTrain:
    def test_record_shape(self, tiny_data):
        rec = train(cfg(), tiny_data)
        assert rec.status == "ok"
        assert [e.epoch for e in rec.epochs] == [0, 1, 2, 3]
        assert [e.lr for e in rec.epochs[1:]] == pytest.approx([5e-3, 5e-4, 5e-5])
        assert all(0.0 <= e.test_accuracy <= 1.0 for e in rec.epochs)
        assert len(rec.grad_var) == 4
        assert rec.best_accuracy > rec.epochs[0].test_accuracy

    def test_deterministic(self, tiny_data):
        a, b = train(cfg(), tiny_data), train(cfg(), tiny_data)
        assert a.rows() == b.rows() and a.grad_var == b.grad_var

    def test_seed_matters(self, tiny_data):
        assert train(cfg(seed=1), tiny_data).rows() != train(cfg(seed=2), tiny_data).rows()

    def test_telemetry_off(self, tiny_data):
        rec = train(cfg(telemetry="false"), tiny_data)
        assert rec.grad_var is None
        assert not any(k.startswith("grad_var") for k in rec.rows()[0])

    def test_untrained_is_chance(self):
        # averaged over initializations an untrained classifier is right 1/classes of the time
        data = synth_dataset(200, 16, 4, seed=3, n_test=2000)
        accs = [train(cfg(widths="16,32,32,32,4", epochs=0, milestones="", seed=s, telemetry="false"), data)
                .final_accuracy for s in range(20)]
        assert np.mean(accs) == pytest.approx(0.25, abs=0.07)

    def test_divergence_is_recorded(self, tiny_data):
        bad = Dataset(tiny_data.x_train.copy(), tiny_data.y_train, tiny_data.x_test, tiny_data.y_test, 3)
        bad.x_train[5, 3] = np.nan
        rec = train(cfg(), bad)
        assert rec.status == "diverged"
        assert all(r["status"] == "diverged" for r in rec.rows())


@pytest.fixture(scope="module")
def data():
    return synth_dataset(1500, 784, 3, seed=0, separation=3.0, n_test=600)


@pytest.mark.slow
class TestDeskScaleRegression:
    """Desk-scale bars for 784-256-256-10 on three synthetic classes."""

    def run(self, data, normalizer):
        kv = {"widths": "784,256,256,10", "normalizer": normalizer, "fp_init": "fan_in_uniform", "epochs": "30"}
        return train(train_config(kv), data)

    def test_center_scale_learns(self, data):
        assert self.run(data, "center_scale_fan_in").best_accuracy >= 0.90

    def test_identity_fails(self, data):
        rec = self.run(data, "identity")
        nan_loss = any(math.isnan(e.train_loss) for e in rec.epochs)
        assert rec.best_accuracy <= 0.55 or nan_loss, rec.best_accuracy


class TestCsv:
    records = [{"a": 1, "b": 0.1}, {"a": 2, "b": "x, \"y\"\nz"}]

    def test_line_count(self, tmp_path):
        p = emit_csv(self.records[:1] * 2, tmp_path / "o.csv", ("a", "b"))
        assert p.read_bytes().count(b"\r\n") == 3

    def test_round_trip(self, tmp_path):
        p = emit_csv(self.records, tmp_path / "o.csv", ("a", "b"))
        back = read_csv(p)
        assert back == [{"a": "1", "b": "0.1"}, {"a": "2", "b": "x, \"y\"\nz"}]

    def test_quoting(self):
        text = to_csv(self.records[1:], ("a", "b"))
        assert '"x, ""y""\nz"' in text

    def test_float_repr_and_extra_columns(self):
        text = to_csv([{"a": 1 / 3, "c": True}], ("a",))
        assert text.splitlines() == ["a,c", "0.3333333333333333,true"]

    def test_empty(self):
        assert to_csv([], ("x", "y")) == "x,y\r\n"

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_csv([], tmp_path / "missing" / "o.csv")


class TestAblation:
    def test_empty_suite(self, tiny_data, tmp_path):
        rows = run_ablation({}, tiny_data)
        assert rows == []
        assert to_csv(rows, ABLATION_HEADER).strip() == ",".join(ABLATION_HEADER)

    def test_grid_and_failed_cell(self, tiny_data):
        suite = dict(TINY, normalizers="full_bn,not_a_normalizer", variances="0.01", seeds="0,1", epochs="2",
                     milestones="1")
        rows = run_ablation(suite, tiny_data, workers=1)
        assert [r["normalizer"] for r in rows] == ["full_bn", "not_a_normalizer"]
        good, bad = rows
        assert good["status"] == "ok" and good["seeds"] == "0;1"
        assert good["best_accuracy"] == max(float(v) for v in good["seed_best_accuracies"].split(";"))
        assert "grad_var_l1" in good
        assert bad["status"].startswith("error") and bad["best_accuracy"] == ""
        assert best_by_normalizer(rows) == {"full_bn": good["best_accuracy"]}

    def test_workers_do_not_change_rows(self, tiny_data):
        suite = dict(TINY, normalizers="full_bn,identity", variances="0.01", seeds="0", epochs="2", milestones="1")
        assert run_ablation(suite, tiny_data, workers=1) == run_ablation(suite, tiny_data, workers=2)


class TestCli:
    def write(self, path, kv):
        path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
        return str(path)

    def test_verify(self, capsys):
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") >= 6 and "FAIL" not in out

    def test_analyze(self, tmp_path):
        spec = self.write(tmp_path / "a.cfg", {"widths": "8,8,8", "normalizer": "full_bn"})
        out = tmp_path / "a.csv"
        assert cli.main(["analyze", "--spec", spec, "--trials", "30", "--batch", "16", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 2 and rows[0]["matched_model"] == "bn-leading"

    def test_train_and_ablate(self, tmp_path):
        data = self.write(tmp_path / "d.cfg", {"n_train": 200, "n_test": 100, "dim": 16, "classes": 3})
        conf = self.write(tmp_path / "t.cfg", TINY)
        out = tmp_path / "t.csv"
        assert cli.main(["train", "--config", conf, "--data", data, "--out", str(out)]) == 0
        assert len(read_csv(out)) == 4
        suite = dict(TINY, normalizers="center_only", variances="0.1", seeds="0")
        suite.update({"data.n_train": 200, "data.n_test": 100, "data.dim": 16, "data.classes": 3})
        out2 = tmp_path / "s.csv"
        assert cli.main(["ablate", "--suite", self.write(tmp_path / "s.cfg", suite), "--out", str(out2)]) == 0
        assert read_csv(out2)[0]["normalizer"] == "center_only"

    def test_stdout(self, tmp_path, capsys):
        spec = self.write(tmp_path / "a.cfg", {"widths": "4,4,4"})
        cli.main(["analyze", "--spec", spec, "--trials", "30", "--batch", "8"])
        assert capsys.readouterr().out.startswith(",".join(("layer", "width")))
