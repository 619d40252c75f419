import json

import pytest
import yaml

from dgmdr.cli import main

TINY = {
    "name": "tiny",
    "num_classes": 3,
    "steps": 4,
    "eval_interval": 2,
    "batch_size": 6,
    "tiny_width": 4,
    "oracle_pretrain_steps": 2,
    "lr": 1e-3,
}


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code = main(["synth-data", "--out", str(root), "--num-domains", "3", "--samples-per-class", "4"])
    assert code == 0
    return root


def write_cfg(path, **extra):
    cfg = dict(TINY, **extra)
    path.write_text(yaml.safe_dump(cfg))
    return path


def error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def train(cfg, data_root, out, *extra):
    return main(["train", "--config", str(cfg), "--data-root", str(data_root), "--out", str(out),
                 "--target", "synth_1", *extra])


class TestTrain:
    def test_creates_result(self, tmp_path, data_root, capsys):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert train(cfg, data_root, tmp_path / "runs", "--seed", "0") == 0
        result = tmp_path / "runs" / "tiny" / "fold_synth_1" / "seed_0" / "result.json"
        assert result.is_file()
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["result"] == str(result)
        run = result.parent
        assert (run / "config.snapshot").is_file() and (run / "metrics.csv").is_file()
        assert (run / "checkpoints" / "best.npz").is_file()

        before = result.read_bytes()
        assert train(cfg, data_root, tmp_path / "runs", "--seed", "0", "--resume") == 0
        assert result.read_bytes() == before
        assert train(cfg, data_root, tmp_path / "runs", "--seed", "0") == 1
        assert error_record(capsys)["error"] == "run_exists"

    def test_identical_flags_identical_results(self, tmp_path, data_root):
        cfg = write_cfg(tmp_path / "c.yaml")
        for out in ("a", "b"):
            assert train(cfg, data_root, tmp_path / out, "--seed", "3") == 0
        rel = "tiny/fold_synth_1/seed_3"
        for name in ("result.json", "metrics.csv"):
            assert (tmp_path / "a" / rel / name).read_bytes() == (tmp_path / "b" / rel / name).read_bytes()

    def test_lambda_overrides(self, tmp_path, data_root):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert train(cfg, data_root, tmp_path / "r1", "--lambda", "0.1") == 0
        snap = yaml.safe_load((tmp_path / "r1" / "tiny" / "fold_synth_1" / "seed_0" / "config.snapshot").read_text())
        assert snap["lambda"] == 0.1

        assert train(cfg, data_root, tmp_path / "r0", "--lambda", "0") == 0
        lines = (tmp_path / "r0" / "tiny" / "fold_synth_1" / "seed_0" / "metrics.csv").read_text().splitlines()
        assert all(line.split(",")[2] == "0.0" for line in lines[1:])

    def test_unknown_key(self, tmp_path, data_root, capsys):
        cfg = write_cfg(tmp_path / "c.yaml", learning_rate=0.1)
        assert train(cfg, data_root, tmp_path / "runs") == 2
        record = error_record(capsys)
        assert record["fields"] == {"learning_rate": "unknown key"}
        assert not (tmp_path / "runs").exists()

    def test_invalid_values(self, tmp_path, data_root, capsys):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert train(cfg, data_root, tmp_path / "runs", "--lambda", "-1") == 2
        assert "lambda" in error_record(capsys)["fields"]
        assert train(tmp_path / "absent.yaml", data_root, tmp_path / "runs") == 2

    def test_missing_data(self, tmp_path, capsys, monkeypatch):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert train(cfg, tmp_path / "nowhere", tmp_path / "runs") == 3
        assert error_record(capsys)["error"] == "missing_data"
        monkeypatch.delenv("DGMDR_DATA_ROOT", raising=False)
        assert main(["train", "--config", str(cfg), "--target", "synth_1", "--out", str(tmp_path / "r")]) == 3

    def test_unknown_target(self, tmp_path, data_root):
        cfg = write_cfg(tmp_path / "c.yaml")
        assert main(["train", "--config", str(cfg), "--data-root", str(data_root), "--out", str(tmp_path),
                     "--target", "synth_9"]) == 3

    def test_env_data_root(self, tmp_path, data_root, monkeypatch):
        monkeypatch.setenv("DGMDR_DATA_ROOT", str(data_root))
        cfg = write_cfg(tmp_path / "c.yaml")
        assert main(["train", "--config", str(cfg), "--target", "synth_0", "--out", str(tmp_path / "r")]) == 0


class TestBenchmark:
    def test_benchmark_and_report(self, tmp_path, data_root, capsys):
        write_cfg(tmp_path / "c.yaml", algorithm="dgmdr_swad")
        matrix = tmp_path / "benchmark.json"
        matrix.write_text(json.dumps({"name": "m", "config": "c.yaml", "algorithms": ["erm", "dgmdr_swad"],
                                      "seeds": [0]}))
        args = ["--config", str(matrix), "--out", str(tmp_path / "runs")]
        assert main(["benchmark", *args, "--data-root", str(data_root)]) == 0
        bench = tmp_path / "runs" / "m"
        md = (bench / "report.md").read_text().splitlines()
        assert md[0].count("|") - 1 == 3 + 2
        assert md[2].startswith("| ERM |") and md[3].startswith("| DGM-DR + SWAD-simplified |")
        assert len((bench / "report.csv").read_text().splitlines()) == 2 * 3 + 1
        assert (bench / "benchmark.json").is_file() and (bench / "class_distribution.md").is_file()
        swad = json.loads((tmp_path / "runs" / "m-dgmdr_swad-multiclass" / "fold_synth_0" / "seed_0"
                           / "result.json").read_text())["swad"]
        assert swad["label"] == "SWAD-simplified"

        capsys.readouterr()
        assert main(["report", *args, "--format", "csv"]) == 0
        assert capsys.readouterr().out.startswith("algorithm,domain,seed,accuracy")
        assert main(["benchmark", *args, "--data-root", str(data_root), "--resume"]) == 0

    def test_report_without_results(self, tmp_path, capsys):
        write_cfg(tmp_path / "c.yaml")
        matrix = tmp_path / "benchmark.json"
        matrix.write_text(json.dumps({"name": "m", "config": "c.yaml", "algorithms": ["erm"], "seeds": [0]}))
        assert main(["report", "--config", str(matrix), "--out", str(tmp_path / "runs")]) == 3


class TestSynthData:
    def test_resume_and_errors(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["synth-data", "--out", str(out), "--num-domains", "2", "--samples-per-class", "2"]) == 0
        manifest = (out / "synth_0.csv").read_text()
        assert main(["synth-data", "--out", str(out), "--num-domains", "2", "--resume"]) == 0
        assert (out / "synth_0.csv").read_text() == manifest
        assert main(["synth-data", "--out", str(tmp_path / "e"), "--image-size", "16"]) == 2
