import csv
import json
import logging
import statistics

import numpy as np
import pytest

from ldfr.cli import (
    EXIT_CONVERGENCE,
    EXIT_IO,
    EXIT_OK,
    EXIT_SCHEMA,
    EXIT_USAGE,
    RunConfig,
    main,
    read_config_file,
)
from ldfr.errors import ConfigurationError, SchemaError
from ldfr.ingest import read_dataset, write_long_csv
from ldfr.simulation import ScenarioConfig, generate_scenario, read_results_csv

FAST = ["mean_knots=12", "cov_knots=12", "n_knots=8"]


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    return path


def toy_predictors(path, subjects=("a", "b"), times=("0.1", "0.5"), grid=5, drop=()):
    rows = []
    for subj in subjects:
        for t in times:
            for j, s in enumerate(np.linspace(0, 1, grid)):
                if (subj, t, j) in drop:
                    continue
                rows.append([subj, t, s, float(t) + s])
    return write_rows(path, ["subject_id", "t", "s", "w"], rows)


@pytest.fixture(scope="module")
def scenario_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    data = generate_scenario(ScenarioConfig(n_subjects=30, delta=1), 6)
    write_long_csv(root / "pred.csv", data.dataset, header="toy", responses_path=root / "resp.csv")
    return root, data


@pytest.fixture(scope="module")
def fitted(scenario_files):
    root, _ = scenario_files
    out = root / "fit"
    code = main(["fit", f"predictors={root / 'pred.csv'}", f"responses={root / 'resp.csv'}",
                 "--out", str(out), "--seed", "3", *FAST])
    assert code == EXIT_OK
    return out


class TestIngest:
    def test_two_subject_toy(self, tmp_path):
        pred = toy_predictors(tmp_path / "p.csv")
        resp = write_rows(tmp_path / "r.csv", ["subject_id", "t", "y"],
                          [["a", "0.1", 1.0], ["a", "0.5", 2.0], ["b", "0.1", 3.0]])
        ds, report, _ = read_dataset(pred, resp)
        assert ds.n_subjects == 2 and ds.n_visits == 4
        assert report.curves_without_response == 1
        np.testing.assert_allclose(ds.s, np.linspace(0, 1, 5))

    def test_duplicate_row(self, tmp_path):
        path = toy_predictors(tmp_path / "p.csv")
        with open(path, "a") as fh:
            fh.write("b,0.5,0.25,9\n")
        with pytest.raises(SchemaError, match="subject_id=b, t=0.5, s=0.25"):
            read_dataset(path)

    def test_missing_points_interpolated(self, tmp_path, caplog):
        path = toy_predictors(tmp_path / "p.csv", grid=11, drop={("a", "0.5", 4)})
        with caplog.at_level(logging.INFO, logger="ldfr.ingest"):
            ds, report, _ = read_dataset(path)
        assert report.imputed == [("a", "0.5", 1)]
        assert "interpolated" in caplog.text
        assert ds.w[1, 4] == pytest.approx(0.5 + 0.4)

    def test_inconsistent_grid(self, tmp_path):
        drop = {("b", "0.1", j) for j in range(3)}
        path = toy_predictors(tmp_path / "p.csv", grid=10, drop=drop)
        with pytest.raises(SchemaError):
            read_dataset(path)

    def test_orphan_response(self, tmp_path):
        pred = toy_predictors(tmp_path / "p.csv")
        resp = write_rows(tmp_path / "r.csv", ["subject_id", "t", "y"], [["c", "0.1", 1.0]])
        with pytest.raises(SchemaError):
            read_dataset(pred, resp)

    def test_missing_column(self, tmp_path):
        path = write_rows(tmp_path / "p.csv", ["subject_id", "t", "w"], [["a", "0.1", 1]])
        with pytest.raises(SchemaError):
            read_dataset(path)

    def test_round_trip(self, scenario_files):
        root, data = scenario_files
        ds, _, _ = read_dataset(root / "pred.csv", root / "resp.csv")
        orig = data.dataset
        # labels are read back as text, so rows are matched by (label, t)
        index = {(str(orig.subject_labels[orig.subject[n]]), orig.t[n]): n
                 for n in range(orig.n_visits)}
        order = [index[(str(ds.subject_labels[ds.subject[n]]), ds.t[n])]
                 for n in range(ds.n_visits)]
        np.testing.assert_array_equal(ds.w, orig.w[order])
        np.testing.assert_array_equal(ds.y, orig.y[order])


class TestConfig:
    def test_file_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# scenario\nn_subjects = 40  # small\ndesign = moderate\n")
        assert read_config_file(path) == {"n_subjects": "40", "design": "moderate"}

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            RunConfig("simulate", {"n_subject": "4"})

    def test_bad_number(self):
        with pytest.raises(ConfigurationError):
            RunConfig("simulate", {"replicates": "many"}).number("replicates", kind=int)


class TestSimulate:
    def run(self, out, *extra):
        return main(["simulate", "n_subjects=30", "--replicates", "5", "--seed", "11",
                     "--out", str(out), *FAST, *extra])

    def test_deterministic(self, tmp_path):
        assert self.run(tmp_path / "a", "--threads", "1") == EXIT_OK
        assert self.run(tmp_path / "b", "--threads", "2") == EXIT_OK
        ra, ha = read_results_csv(tmp_path / "a" / "results.csv")
        rb, _ = read_results_csv(tmp_path / "b" / "results.csv")
        assert len(ra) == 5
        assert [r.in_pe for r in ra] == [r.in_pe for r in rb]
        assert [r.seed for r in ra] == [r.seed for r in rb]
        assert ha[0]["seed"] == 11 and ha[0]["config"]["n_subjects"] == "30"

    def test_summary_recomputed(self, tmp_path):
        assert self.run(tmp_path) == EXIT_OK
        with open(tmp_path / "results.csv") as fh:
            rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
        text = (tmp_path / "summary.txt").read_text()
        for metric in ("in_pe", "out_pe"):
            vals = [float(r[metric]) for r in rows]
            q1, _, q3 = statistics.quantiles(vals, n=4, method="inclusive")
            line = next(ln for ln in text.splitlines() if ln.strip().startswith(metric))
            assert line.split()[1] == f"{statistics.median(vals):.2f}"
            assert line.split()[2] == f"({q3 - q1:.2f})"

    def test_delta_blocks(self, tmp_path):
        code = main(["simulate", "n_subjects=25", "delta=0,2,5", "--replicates", "1",
                     "--out", str(tmp_path), "--threads", "1", *FAST])
        assert code == EXIT_OK
        text = (tmp_path / "summary.txt").read_text()
        assert text.count("replicates: 1") == 3
        rows, headers = read_results_csv(tmp_path / "results.csv")
        assert len(rows) == 3 and len(headers) == 3
        assert len({h["block_seed"] for h in headers}) == 3


class TestFitPredict:
    def test_bundle_written(self, fitted):
        assert (fitted / "fit.ldfr").is_file()

    def test_predict_and_report(self, fitted, scenario_files, capsys):
        root, data = scenario_files
        code = main(["predict", f"bundle={fitted / 'fit.ldfr'}", "subjects=0,3",
                     f"predictors={root / 'pred.csv'}", "t_eval=0:1:11", "level=0.9",
                     "--out", str(fitted)])
        assert code == EXIT_OK
        with open(fitted / "predictions.csv") as fh:
            first = fh.readline()
            rows = list(csv.DictReader(fh))
        assert json.loads(first[1:])["config"]["level"] == "0.9"
        assert len(rows) == (2 + 30) * 11
        for r in rows:
            assert float(r["lower"]) <= float(r["y_hat"]) <= float(r["upper"])
        assert main(["report", f"bundle={fitted / 'fit.ldfr'}"]) == EXIT_OK
        out = capsys.readouterr().out
        assert '"L_k"' in out and '"seed": 3' in out

    def test_fpca(self, scenario_files, tmp_path):
        root, _ = scenario_files
        code = main(["fpca", f"predictors={root / 'pred.csv'}", "--out", str(tmp_path),
                     "mean_knots=12", "cov_knots=12"])
        assert code == EXIT_OK
        summary = json.loads((tmp_path / "fpca.json").read_text())
        assert summary["K"] >= 1 and len(summary["L_k"]) == summary["K"]


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        assert main(["simulate", "bogus=1", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_value(self, tmp_path):
        assert main(["simulate", "design=dense", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["explode"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        code = main(["fit", f"predictors={tmp_path / 'no.csv'}",
                     f"responses={tmp_path / 'no.csv'}", "--out", str(tmp_path)])
        assert code == EXIT_IO

    def test_truncated_bundle(self, fitted, tmp_path):
        data = (fitted / "fit.ldfr").read_bytes()
        (tmp_path / "cut.ldfr").write_bytes(data[: len(data) // 3])
        assert main(["predict", f"bundle={tmp_path / 'cut.ldfr'}", "subjects=0"]) == EXIT_IO

    def test_schema(self, tmp_path):
        pred = toy_predictors(tmp_path / "p.csv")
        with open(pred, "a") as fh:
            fh.write("a,0.1,0.0,1\n")
        resp = write_rows(tmp_path / "r.csv", ["subject_id", "t", "y"], [["a", "0.1", 1.0]])
        code = main(["fit", f"predictors={pred}", f"responses={resp}", "--out", str(tmp_path)])
        assert code == EXIT_SCHEMA

    def test_convergence_code(self, tmp_path, monkeypatch):
        from ldfr import cli
        from ldfr.errors import ConvergenceError

        def boom(cfg):
            raise ConvergenceError("no progress")

        monkeypatch.setitem(cli.HANDLERS, "report", boom)
        assert main(["report", "results=x.csv"]) == EXIT_CONVERGENCE

    def test_config_file_paths_relative(self, scenario_files, tmp_path):
        root, _ = scenario_files
        cfg = root / "fit.cfg"
        cfg.write_text("predictors = pred.csv\nresponses = resp.csv\nmean_knots = 12\n"
                       "cov_knots = 12\nn_knots = 8\n")
        assert main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
