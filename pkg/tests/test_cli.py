"""Command-line interface: verbs, flag overrides, exit codes, staged runs."""

import filecmp

import pytest

from endmix.cli import main

TINY_INI = """\
[library]
n_classes = 3
samples_per_class = 4
n_channels = 32
library_seed = 7

[mixing]
models = LMM PPNM
n_endmembers = 2
n_combos = 2
n_weights = 3

[nhmc]
k_grid = 2
n_scales = 4
em_max_iters = 60

[detector]
attenuation_grid = 0.5 1.0
max_features = 5

[baseline]
n_thresholds = 8
admm_max_iters = 300
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def report_dir(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    assert main(["report", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def run_ok(args):
    assert main(args) == 0


class TestReport:
    def test_writes_every_output_kind(self, report_dir):
        for name in (
            "library_train.csv",
            "library_test.csv",
            "mixtures_LMM.csv",
            "mixspecs_PPNM.csv",
            "ns_LMM.csv",
            "model_k2.json",
            "features_k2.csv",
            "labels_LMM_k2.csv",
            "decisions_LMM_k2.csv",
            "summary.csv",
            "per_class.csv",
            "ns_histogram.csv",
            "ns_binned_droc.csv",
        ):
            assert (report_dir / name).exists(), name

    def test_meshes_cover_chain_variants_and_baselines(self, report_dir):
        methods = {
            p.name[len("mesh_LMM_"):-len(".csv")]
            for p in report_dir.glob("mesh_LMM_*.csv")
        }
        assert {"nb", "ncfe_nb", "la_nb", "ncfe_la_nb", "sunsal", "clsunsal"} <= methods

    def test_success_message(self, tiny_config, tmp_path, capsys):
        run_ok(["simulate", "--config", str(tiny_config), "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert "endmix simulate: outputs in" in out
        assert "config " in out

    def test_rerun_is_byte_identical(self, tiny_config, report_dir, tmp_path):
        run_ok(["report", "--config", str(tiny_config), "--out", str(tmp_path)])
        names = sorted(p.name for p in report_dir.iterdir())
        assert names == sorted(p.name for p in tmp_path.iterdir())
        match, mismatch, errors = filecmp.cmpfiles(
            report_dir, tmp_path, names, shallow=False
        )
        assert not mismatch and not errors


class TestStagedVerbs:
    def test_staged_run_matches_one_shot_report(
        self, tiny_config, report_dir, tmp_path
    ):
        base = ["--config", str(tiny_config), "--out", str(tmp_path)]
        for verb in ("simulate", "train", "detect", "evaluate"):
            run_ok([verb] + base)
        names = sorted(p.name for p in report_dir.iterdir())
        assert names == sorted(p.name for p in tmp_path.iterdir())
        match, mismatch, errors = filecmp.cmpfiles(
            report_dir, tmp_path, names, shallow=False
        )
        assert not mismatch and not errors


class TestFlags:
    def test_model_restricts_run(self, tiny_config, tmp_path):
        run_ok([
            "simulate", "--config", str(tiny_config), "--out", str(tmp_path),
            "--model", "PPNM",
        ])
        assert (tmp_path / "mixtures_PPNM.csv").exists()
        assert not (tmp_path / "mixtures_LMM.csv").exists()

    def test_seed_override(self, tiny_config, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        base = ["simulate", "--config", str(tiny_config), "--model", "LMM"]
        run_ok(base + ["--out", str(a), "--seed", "1"])
        run_ok(base + ["--out", str(b), "--seed", "1"])
        run_ok(base + ["--out", str(c), "--seed", "2"])
        same = (a / "mixtures_LMM.csv").read_bytes()
        assert same == (b / "mixtures_LMM.csv").read_bytes()
        assert same != (c / "mixtures_LMM.csv").read_bytes()

    def test_k_grid_flag_trains_one_archive_per_k(self, tiny_config, tmp_path):
        run_ok([
            "train", "--config", str(tiny_config), "--out", str(tmp_path),
            "--k", "2,3",
        ])
        assert (tmp_path / "model_k2.json").exists()
        assert (tmp_path / "model_k3.json").exists()

    def test_invalid_model_choice_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--model", "BOGUS"])
        assert exc.value.code == 2


class TestExitCodes:
    def test_missing_config_is_validation_error(self, capsys):
        assert main(["simulate", "--config", "/nonexistent.ini"]) == 1
        assert "configuration error" in capsys.readouterr().err

    def test_bad_k_is_validation_error(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--k", "1"]) == 1
        assert "configuration error" in capsys.readouterr().err

    def test_detect_before_train(self, tiny_config, tmp_path, capsys):
        code = main(["detect", "--config", str(tiny_config), "--out", str(tmp_path)])
        assert code == 1
        assert "run train first" in capsys.readouterr().err

    def test_evaluate_before_detect(self, tiny_config, tmp_path, capsys):
        code = main(["evaluate", "--config", str(tiny_config), "--out", str(tmp_path)])
        assert code == 1
        assert "endmix evaluate:" in capsys.readouterr().err

    def test_unreadable_library_is_runtime_error(self, tmp_path, capsys):
        ini = tmp_path / "bad.ini"
        ini.write_text(
            f"[library]\nlibrary_source = file\nlibrary_path = {tmp_path}\n",
            encoding="utf-8",
        )
        code = main(["simulate", "--config", str(ini), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "unexpected failure" in capsys.readouterr().err
