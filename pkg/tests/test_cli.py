"""
Pruebas del CLI: parseo de flags, precedencia de configuración y códigos de salida.
"""

import argparse
import csv
import json

import pytest

from src import cli
from src.cli import (
    build_parser,
    dispatch,
    parse_bool,
    parse_depths,
    parse_int_list,
    parse_widths,
    resolve_run_config,
)
from src.config_manager import get_config
from src.errors import ConfigError, NumericalAbort


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def _argv(tmp_path, subcommand, *extra):
    return ["--log-dir", str(tmp_path / "logs"), subcommand, "--output", str(tmp_path / "out"),
            *extra]


# ============================================================================
# Parsers de valores
# ============================================================================

class TestValueParsers:

    def test_widths(self):
        assert parse_widths("10,100,inf") == (10, 100, None)
        assert parse_widths(" 3 ") == (3,)
        for bad in ("", "0", "diez", ",,"):
            with pytest.raises(argparse.ArgumentTypeError):
                parse_widths(bad)

    def test_int_list_rejects_infinity(self):
        assert parse_int_list("1,4,16") == (1, 4, 16)
        with pytest.raises(argparse.ArgumentTypeError):
            parse_int_list("1,inf")

    def test_depths(self):
        assert parse_depths("1x1,2x3") == ((1, 1), (2, 3))
        with pytest.raises(argparse.ArgumentTypeError):
            parse_depths("2-2")

    @pytest.mark.parametrize("text,expected", [
        ("true", True), ("1", True), ("sí", True), ("False", False), ("0", False), (True, True),
    ])
    def test_bool(self, text, expected):
        assert parse_bool(text) is expected

    def test_bool_invalid(self):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_bool("quizás")


# ============================================================================
# Precedencia de configuración
# ============================================================================

class TestResolveRunConfig:

    def test_flag_beats_file_beats_preset(self, tmp_path):
        flat = tmp_path / "run.cfg"
        flat.write_text("# ejecución de prueba\nlr = 5\nbatch = 7\n", encoding="utf-8")
        args = build_parser().parse_args(["train-fs", "--preset", "synthetic", "--config", str(flat),
                                          "--batch", "3"])
        run = resolve_run_config(args, get_config())

        assert run.lr == 5.0
        assert run.batch == 3
        assert run.loss_scale == pytest.approx(2.5e-05)
        assert run.d == (10, 20, 30, 50, 100, 500, None)

    def test_verification_defaults(self):
        args = build_parser().parse_args(["verify-linear"])
        run = resolve_run_config(args, get_config())
        assert run.dataset == "projection"
        assert run.d == (3,)
        assert run.depths == ((1, 1), (2, 2), (3, 3))

    def test_unknown_preset(self):
        args = build_parser().parse_args(["train-fs", "--preset", "imagenet"])
        with pytest.raises(ConfigError):
            resolve_run_config(args, get_config())

    def test_unknown_key_in_file(self, tmp_path):
        flat = tmp_path / "run.cfg"
        flat.write_text("momentum = 0.9\n", encoding="utf-8")
        args = build_parser().parse_args(["train-fs", "--config", str(flat)])
        with pytest.raises(ConfigError):
            resolve_run_config(args, get_config())

    def test_missing_file(self, tmp_path):
        args = build_parser().parse_args(["train-fs", "--config", str(tmp_path / "no.cfg")])
        with pytest.raises(FileNotFoundError):
            resolve_run_config(args, get_config())

    @pytest.mark.parametrize("flags", [["--lr", "-1"], ["--lr", "0"], ["--steps", "0"],
                                       ["--batch", "0"], ["--seed", "-2"],
                                       ["--activation", "tanh"], ["--resume", "/no/existe.fsd"]])
    def test_invalid_values(self, flags):
        args = build_parser().parse_args(["train-fs", *flags])
        with pytest.raises(ConfigError):
            resolve_run_config(args, get_config())


# ============================================================================
# Despacho y códigos de salida
# ============================================================================

class TestDispatch:

    def test_help_exits_ok(self, capsys):
        assert dispatch(["--help"]) == 0

    def test_usage_errors(self, capsys):
        assert dispatch([]) == 2
        assert dispatch(["train-fs", "--no-existe"]) == 2
        assert dispatch(["train-fs", "--d", "cero"]) == 2

    def test_config_error(self, tmp_path):
        assert dispatch(_argv(tmp_path, "train-fs", "--lr", "-1")) == 2
        assert not (tmp_path / "out" / "manifest.json").exists()

    def test_gen_data_writes_csv_and_manifest(self, tmp_path):
        code = dispatch(_argv(tmp_path, "gen-data", "--dataset", "projection", "--samples", "5",
                              "--input-dim", "3"))
        assert code == 0

        out = tmp_path / "out"
        rows = _read_rows(out / "inputs.csv")
        assert rows[0] == ["split", "x0", "x1", "x2"]
        assert len(rows) == 6

        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["estado"] == "ok"
        assert manifest["subcomando"] == "gen-data"
        assert set(manifest["archivos"]) == {"inputs.csv", "targets.csv"}
        assert manifest["config"]["samples"] == 5
        assert (tmp_path / "logs").is_dir()

    def test_numerical_abort_exit_code(self, tmp_path, monkeypatch):
        def abort(run, recorder, config):
            raise NumericalAbort("χ no finito")

        monkeypatch.setitem(cli.HANDLERS, "gen-data", abort)
        assert dispatch(_argv(tmp_path, "gen-data", "--dataset", "projection")) == 3

        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["estado"].startswith("numerical_abort")

    def test_multiple_widths_rejected_for_finite_net(self, tmp_path):
        code = dispatch(_argv(tmp_path, "train-finite", "--d", "2,3", "--samples", "4",
                              "--test-samples", "2", "--input-dim", "2"))
        assert code == 2

    def test_train_fs_baseline(self, tmp_path):
        code = dispatch(_argv(tmp_path, "train-fs", "--dataset", "synthetic", "--d", "inf",
                              "--samples", "8", "--test-samples", "4", "--input-dim", "3",
                              "--lr", "0.05", "--batch", "4", "--steps", "4", "--eval-every", "2",
                              "--loss-scale", "1"))
        assert code == 0
        metrics = _read_rows(tmp_path / "out" / "metrics.csv")
        assert [row[0] for row in metrics[1:]] == ["0", "2", "4"]
        assert (tmp_path / "out" / "tvt.csv").exists()

    def test_verify_cov(self, tmp_path):
        code = dispatch(_argv(tmp_path, "verify-cov", "--kind", "ff", "--n", "10",
                              "--replicas", "100", "--pairs", "2"))
        assert code == 0
        rows = _read_rows(tmp_path / "out" / "deviations.csv")
        assert len(rows) == 3
        assert rows[1][0] == "ff"
