"""
Integration tests for the moelora command line.
"""

import pytest
from typer.testing import CliRunner

from moelora import __version__
from moelora.cli import app, dispatch, parse_grid, parse_overrides
from moelora.config import TrainConfig
from moelora.errors import ConfigError

SMALL = [
    "--m",
    "6",
    "--n",
    "6",
    "--num-experts",
    "3",
    "--top-k",
    "2",
    "--rank",
    "1",
    "--target-rank",
    "1",
    "--eval-tokens",
    "4",
    "--init-sigma",
    "0.1",
    "--max-steps",
    "4",
]


@pytest.fixture
def runner():
    return CliRunner()


class TestArgumentParsing:
    """Tests for override and grid parsing."""

    def test_parse_overrides(self):
        args = ["--max-steps", "20", "--mode=sqrt-detach", "--timing", "--seed", "3"]
        assert parse_overrides(args) == {
            "max_steps": "20",
            "mode": "sqrt-detach",
            "timing": "true",
            "seed": "3",
        }

    def test_parse_overrides_rejects_positional(self):
        with pytest.raises(ConfigError):
            parse_overrides(["stray"])

    def test_parse_grid(self):
        grid = parse_grid(["weight-decay=0,1e-5", "top_k=2, 10"])
        assert grid == {"weight_decay": ["0", "1e-5"], "top_k": ["2", "10"]}

    @pytest.mark.parametrize("spec", ["bogus=1,2", "rank", "rank="])
    def test_parse_grid_rejects(self, spec):
        with pytest.raises(ConfigError):
            parse_grid([spec])

    def test_dispatch_unknown_subcommand(self):
        with pytest.raises(ConfigError):
            dispatch("fit", TrainConfig())


class TestCommands:
    """Tests for the subcommands end to end."""

    def test_version(self, runner):
        result = runner.invoke(app, ["version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_unknown_subcommand(self, runner):
        result = runner.invoke(app, ["fit"])
        assert result.exit_code == 2

    def test_invalid_config_exits_2(self, runner, tmp_path):
        args = ["train", "--outdir", str(tmp_path), "--num-experts", "2"]
        args += ["--top-k", "3"]
        result = runner.invoke(app, args)
        assert result.exit_code == 2

    def test_train_writes_csv_and_config(self, runner, tmp_path):
        result = runner.invoke(app, ["train", "--outdir", str(tmp_path), *SMALL])
        assert result.exit_code == 0, result.output
        assert "RSGD_3,2,1 seed 0" in result.output
        lines = (tmp_path / "RSGD_0.csv").read_text().splitlines()
        assert len(lines) == 5
        assert (tmp_path / "RSGD_0.ckpt").exists()
        config_text = (tmp_path / "config.txt").read_text()
        assert "max_steps = 4" in config_text

    def test_train_is_deterministic(self, runner, tmp_path):
        for name in ("a", "b"):
            outdir = tmp_path / name
            args = ["train", "--no-checkpoint", "--outdir", str(outdir), *SMALL]
            result = runner.invoke(app, [*args, "--mode", "sqrt-detach"])
            assert result.exit_code == 0, result.output
        a = (tmp_path / "a" / "gRSGD_0.csv").read_bytes()
        b = (tmp_path / "b" / "gRSGD_0.csv").read_bytes()
        assert a == b

    def test_config_file(self, runner, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("precond = none\nmax_steps = 2\n")
        args = ["train", "-c", str(path), "--outdir", str(tmp_path), *SMALL[:-2]]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        assert (tmp_path / "SGD_0.csv").exists()

    def test_gradcheck(self, runner, tmp_path):
        args = ["gradcheck", "--samples", "20", "--outdir", str(tmp_path), *SMALL]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        summary = (tmp_path / "gradcheck.txt").read_text().splitlines()[0]
        assert summary == "12 checks, 0 failed"

    def test_verify_projection(self, runner, tmp_path):
        result = runner.invoke(app, ["verify-projection", "--outdir", str(tmp_path)])
        assert result.exit_code == 0, result.output
        header = (tmp_path / "verify_projection.csv").read_text().splitlines()[0]
        assert header == "config_id,identity,residual,tolerance,passed"

    @pytest.mark.parametrize(
        "args,stem",
        [
            (["verify-projection"], "verify_projection"),
            (["gradcheck", "--samples", "20", *SMALL], "gradcheck"),
        ],
    )
    def test_reports_are_deterministic(self, runner, tmp_path, args, stem):
        for name in ("a", "b"):
            outdir = tmp_path / name
            result = runner.invoke(app, [args[0], "--outdir", str(outdir), *args[1:]])
            assert result.exit_code == 0, result.output
        a = (tmp_path / "a" / f"{stem}.csv").read_bytes()
        b = (tmp_path / "b" / f"{stem}.csv").read_bytes()
        assert a == b

    def test_compare(self, runner, tmp_path):
        args = ["compare", "--seeds", "2", "--outdir", str(tmp_path), *SMALL]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        assert "improvement gRSGD over RSGD" in result.output
        lines = (tmp_path / "compare.csv").read_text().splitlines()
        assert len(lines) == 1 + 4 * 2

    def test_sweep(self, runner, tmp_path):
        args = ["sweep", "--grid", "rank=1,2", "--outdir", str(tmp_path), *SMALL]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        assert (tmp_path / "RSGD_rank-2.csv").exists()
        assert (tmp_path / "sweep_summary.csv").exists()

    def test_sweep_needs_grid(self, runner, tmp_path):
        result = runner.invoke(app, ["sweep", "--outdir", str(tmp_path), *SMALL])
        assert result.exit_code == 2
        assert not (tmp_path / "sweep_summary.csv").exists()

    def test_sweep_malformed_grid(self, runner, tmp_path):
        args = ["sweep", "--grid", "rank", "--outdir", str(tmp_path), *SMALL]
        assert runner.invoke(app, args).exit_code == 2
