try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import pytest
from config import Config, config
from models import SolverOptions


class TestConfig:
    """Test configuration defaults and profiles"""

    def test_config_initialization(self):
        """Test that configuration loads correctly"""
        test_config = Config()

        # Check required settings exist
        assert hasattr(test_config, "PIVOTAL_C")
        assert hasattr(test_config, "PIVOTAL_ALPHA0")
        assert hasattr(test_config, "PIVOTAL_DRAWS")
        assert hasattr(test_config, "ADMM_TOL")
        assert hasattr(test_config, "STUDY_REPS")
        assert hasattr(test_config, "OUTPUT_DIR")

        # Check default values
        assert test_config.PIVOTAL_C == 1.1
        assert test_config.PIVOTAL_ALPHA0 == 0.1
        assert test_config.PIVOTAL_DRAWS == 500
        assert test_config.LASSO_LAMBDA_SCALE == 1.1
        assert test_config.QUANTILE_TAU == 0.5
        assert test_config.ALPHA == 0.05
        assert test_config.STUDY_REPS == 500
        assert test_config.MAX_FAILURE_RATE == 0.02
        assert test_config.REPORT_FORMAT_VERSION == "1.0"

    def test_environment_override(self, monkeypatch):
        """Test that fields are read from the environment at class creation"""
        import importlib

        import config as config_module

        monkeypatch.setenv("PIVOTAL_DRAWS", "123")
        monkeypatch.setenv("ADMM_RESTART", "no")
        try:
            reloaded = importlib.reload(config_module)
            assert reloaded.Config().PIVOTAL_DRAWS == 123
            assert reloaded.Config().ADMM_RESTART is False
        finally:
            monkeypatch.undo()
            importlib.reload(config_module)

    def test_desk_profile_keeps_defaults(self):
        """Test that the desk profile is an unchanged copy"""
        desk = config.profile("desk")

        assert desk == config
        assert desk is not config

    def test_full_scale_profile(self):
        """Test the full-scale profile"""
        full = Config().profile("paper")

        assert full.STUDY_N == 200
        assert full.STUDY_P == 2000

    def test_unknown_profile(self):
        """Test that unknown profiles are rejected"""
        with pytest.raises(ValueError, match="Unknown profile"):
            config.profile("laptop")

    def test_threads_default_to_cores(self):
        """Test that THREADS=0 means all logical cores"""
        import os

        assert Config(THREADS=0).threads() == (os.cpu_count() or 1)
        assert Config(THREADS=3).threads() == 3

    def test_solver_options(self):
        """Test that solver options mirror the ADMM settings"""
        test_config = Config(ADMM_MAX_ITER=42, ADMM_TOL=1e-5, ADMM_RHO=2.0)
        options = test_config.solver_options()

        assert isinstance(options, SolverOptions)
        assert options.max_iter == 42
        assert options.tol == 1e-5
        assert options.admm_rho == 2.0

        lasso = test_config.lasso_options()
        assert lasso.max_iter == test_config.LASSO_MAX_ITER
        assert lasso.tol == test_config.LASSO_TOL


class TestProjectTooling:
    """Test that the slow acceptance suite stays opt-in but reachable"""

    root = Path(__file__).resolve().parents[2]

    def test_slow_tests_excluded_by_default(self):
        """Test the default marker expression and the declared slow marker"""
        settings = tomllib.loads((self.root / "pyproject.toml").read_text())
        pytest_options = settings["tool"]["pytest"]["ini_options"]

        assert "not slow" in pytest_options["addopts"]
        assert any(m.startswith("slow:") for m in pytest_options["markers"])

    def test_quality_script_can_run_slow_tests(self):
        """Test that the quality script offers the slow suite"""
        script = (self.root / "scripts" / "quality.sh").read_text()

        assert "RUN_SLOW" in script
        assert "pytest -v -m slow" in script
