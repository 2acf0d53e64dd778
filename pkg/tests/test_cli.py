"""End-to-end CLI checks on a deliberately tiny configuration."""

import json

import pytest

from advfoolgen.cli import main
from advfoolgen.evaluation import FoolingReport
from advfoolgen.experiment import ExperimentDir

TINY = [
    "data.name=synthetic10",
    "data.train_subset=200",
    "data.test_subset=100",
    "classifier.epochs=3",
    "classifier.batch_size=64",
    "attack.epochs=2",
    "attack.save_every=1",
    "attack.latent_dim=16",
    "attack.base_channels=8",
    "attack.batch_size=64",
    "analysis.grid_points=128",
    "report.baselines=[fgsm]",
    "report.defenses=[retrain]",
]


def run(stage, exp_dir, extra=()):
    args = [stage, "--exp-dir", str(exp_dir)]
    for item in (*TINY, *extra):
        args += ["--set", item]
    return main(args)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    exp = tmp_path_factory.mktemp("cli_exp")
    assert run("train-classifier", exp) == 0
    assert run("train-attack", exp) == 0
    assert run("generate", exp) == 0
    assert run("baseline-attack", exp) == 0
    assert run("evaluate", exp) == 0
    assert run("analyze", exp) == 0
    return exp


class TestStageContracts:
    def test_artifacts_exist(self, pipeline_dir):
        assert (pipeline_dir / "checkpoints" / "classifier.pt").is_file()
        ckpts = list((pipeline_dir / "checkpoints").glob("advfool_epoch_*.pt"))
        assert len(ckpts) == 2
        assert (pipeline_dir / "images" / "fgsm_test.afis").is_file()
        assert (pipeline_dir / "reports" / "fooling.csv").is_file()
        assert (pipeline_dir / "reports" / "epoch_divergence.csv").is_file()

    def test_fooling_report_has_rows(self, pipeline_dir):
        report = FoolingReport.load(pipeline_dir / "reports" / "fooling.csv")
        assert len(report.rows) >= 1
        attacks = {r.attack for r in report.rows}
        assert any(a.startswith("advfool") for a in attacks)
        assert any(a.startswith("fgsm") for a in attacks)

    def test_manifest_lists_every_output(self, pipeline_dir):
        exp = ExperimentDir(pipeline_dir)
        manifest = json.loads((pipeline_dir / "manifest.json").read_text())
        listed = exp.listed_outputs()
        for stage, info in manifest["stages"].items():
            assert info["completed"], stage
        for sub in ("checkpoints", "images", "reports", "plots"):
            for path in (pipeline_dir / sub).rglob("*"):
                if path.is_file():
                    assert str(path.relative_to(pipeline_dir)) in listed, path

    def test_rerun_evaluate_byte_identical(self, pipeline_dir):
        csv_path = pipeline_dir / "reports" / "fooling.csv"
        before = csv_path.read_bytes()
        assert run("evaluate", pipeline_dir) == 0
        assert csv_path.read_bytes() == before

    def test_rerun_analyze_byte_identical(self, pipeline_dir):
        csv_path = pipeline_dir / "reports" / "epoch_divergence.csv"
        before = csv_path.read_bytes()
        assert run("analyze", pipeline_dir) == 0
        assert csv_path.read_bytes() == before


class TestErrorPaths:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_config_error_exits_2(self, tmp_path, capsys):
        code = run("train-classifier", tmp_path, extra=["attack.weights.alpha=0.9"])
        assert code == 2
        assert "kind=config" in capsys.readouterr().err

    def test_missing_artifact_exits_3(self, tmp_path, capsys):
        code = run("train-attack", tmp_path)
        assert code == 3
        err = capsys.readouterr().err
        assert "kind=missing-artifact" in err
        assert err.count("\n") == 1  # single machine-readable line

    def test_missing_dataset_exits_3(self, tmp_path, capsys):
        code = main(["train-classifier", "--exp-dir", str(tmp_path),
                     "--set", "data.name=cifar10",
                     "--set", f"data.root={tmp_path / 'no_data'}"])
        assert code == 3

    def test_evaluate_without_images_exits_3(self, tmp_path):
        assert run("train-classifier", tmp_path, extra=["classifier.epochs=1"]) == 0
        assert run("evaluate", tmp_path) == 3


class TestReportBundle:
    def test_bundle_contract(self, tmp_path_factory):
        exp = tmp_path_factory.mktemp("bundle_exp")
        assert run("report", exp, extra=["classifier.epochs=2", "attack.epochs=2"]) == 0
        csvs = sorted(p.name for p in (exp / "reports").glob("*.csv"))
        assert csvs == ["defense_fooling.csv", "epoch_divergence.csv",
                        "initial_fooling.csv"]
        grids = list((exp / "images").glob("*_grid.png")) + \
            list((exp / "images").glob("clean_grid.png"))
        assert len(grids) >= 2
        assert (exp / "plots" / "density_mean.png").is_file()

        initial = FoolingReport.load(exp / "reports" / "initial_fooling.csv")
        advfool_rows = [r for r in initial.rows if r.attack.startswith("advfool")]
        assert len(advfool_rows) == 2  # one per saved epoch checkpoint

        summary = json.loads((exp / "reports" / "summary.json").read_text())
        rng = summary["advfool_initial_fooling"]
        assert 0.0 <= rng["min"] <= rng["max"] <= 1.0
