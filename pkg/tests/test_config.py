import tempfile
from pathlib import Path
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from ccbif.config import RunConfig, build_config, parse_masses, read_config_file, resolve_threads


def _write(tmpdir, text):
    path = Path(tmpdir) / "run.conf"
    path.write_text(text)
    return path


class TestRunConfig:
    def test_defaults(self):
        run = RunConfig()
        assert run.family == "three-equal"
        assert run.precision == 256
        assert run.budget == 100000
        assert run.tolerance == 1e-10

    def test_precision_bounds(self):
        with pytest.raises(ValidationError):
            RunConfig(precision=32)
        with pytest.raises(ValidationError):
            RunConfig(precision=8192)

    def test_negative_mass(self):
        with pytest.raises(ValidationError, match="masses must be positive"):
            RunConfig(m=-1)

    def test_general_needs_masses(self):
        with pytest.raises(ValidationError, match="explicit masses"):
            RunConfig(family="general")

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            RunConfig(colour="red")

    def test_validation_error_is_value_error(self):
        with pytest.raises(ValueError):
            RunConfig(budget=0)

    def test_mass_params_family(self):
        masses = RunConfig(family="two-pairs", m=0.5).mass_params()
        assert [float(x) for x in masses.masses] == [1, 1, 0.5, 0.5]
        assert RunConfig().mass_params().parameter == 1

    def test_mass_params_general(self):
        run = RunConfig(family="general", masses=(1, 2, 3, 4))
        assert [float(x) for x in run.mass_params().masses] == [1, 2, 3, 4]
        assert [float(x) for x in run.mass_params(0.5).masses] == [1, 2, 3, 0.5]

    def test_header(self):
        with patch.dict("os.environ", {"CCBIF_THREADS": "3"}):
            header = RunConfig(command="count", seed=7).header()
        assert header["command"] == "count"
        assert header["seed"] == 7
        assert header["threads"] == 3


class TestThreads:
    def test_explicit(self):
        assert resolve_threads(2) == 2

    def test_environment(self):
        with patch.dict("os.environ", {"CCBIF_THREADS": "5"}):
            assert resolve_threads() == 5

    def test_bad_environment(self):
        with patch.dict("os.environ", {"CCBIF_THREADS": "many"}):
            with pytest.raises(ValueError, match="must be an integer"):
                resolve_threads()

    def test_cpu_count_fallback(self):
        with patch.dict("os.environ", {}, clear=True), patch("ccbif.config.os.cpu_count", return_value=6):
            assert resolve_threads() == 6

    def test_zero(self):
        with pytest.raises(ValueError, match="at least 1"):
            resolve_threads(0)


class TestConfigFile:
    def test_read(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, "# sweep\nfamily = two-pairs\nm-range = 0.9, 1.1  # inclusive\nbudget=500\n")
            values = read_config_file(path)
        assert values == {"family": "two-pairs", "m_range": [0.9, 1.1], "budget": "500"}

    def test_missing_file(self):
        with pytest.raises(ValueError, match="does not exist"):
            read_config_file("/nonexistent/run.conf")

    def test_malformed_line(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, "family two-pairs\n")
            with pytest.raises(ValueError, match="expected 'key = value'"):
                read_config_file(path)

    def test_command_line_wins(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = _write(tmpdir, "seed = 4\nbudget = 500\n")
            run = build_config(path, seed=9, budget=None)
        assert run.seed == 9
        assert run.budget == 500


def test_parse_masses():
    assert parse_masses([None, None, None, None]) is None
    assert parse_masses([None, 2.0, None, 0.5]) == (1.0, 2.0, 1.0, 0.5)
