import json

import cli
import pandas as pd
import pytest
from cli import EXIT_INPUT, EXIT_INVALID_STUDY, EXIT_OK, build_parser, main
from inference import InferenceEngine
from simharness import StudyConfigError
from solvers import SolverError

STUDY_FILE = "study=size\nn=40\np=12\nbeta=1,1\ntarget=7\nmethods=pgcov,ppcov\nreps=2\n"


@pytest.fixture
def run(test_config, capsys):
    """Run the CLI with the test configuration; returns (code, stdout, stderr)"""

    def _run(*argv):
        code = main([str(a) for a in argv], cfg=test_config)
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return _run


@pytest.mark.integration
class TestAreCommand:
    """Test the efficiency subcommand"""

    def test_normal(self, run):
        """Test the Normal efficiency"""
        code, out, _ = run("are", "normal")

        assert code == EXIT_OK
        assert "ARE=0.955" in out

    def test_lognormal(self, run):
        """Test that the skewed law reports a finite efficiency"""
        code, out, _ = run("are", "lognormal")

        assert code == EXIT_OK
        assert "ARE=7.35" in out
        assert "nan" not in out.lower()

    def test_all_as_json(self, run):
        """Test that all finite-variance laws are reported"""
        code, out, err = run("are", "all", "--json")

        assert code == EXIT_OK
        payload = json.loads(out)
        assert {r["distribution"] for r in payload} == {
            "normal",
            "uniform",
            "t3",
            "exp",
            "lognormal",
        }
        assert all(r["schema_version"] == "1.0" for r in payload)
        assert "infinite variance" in err

    def test_infinite_variance(self, run):
        """Test that Cauchy is refused with exit code 2"""
        code, _, err = run("are", "cauchy")

        assert code == EXIT_INPUT
        assert "ARE undefined: infinite variance" in err


@pytest.mark.integration
class TestTestCommand:
    """Test the univariate and group test subcommands"""

    def test_missing_column(self, run, heavy_tailed_csv):
        """Test that a missing target column is named"""
        code, _, err = run(
            "test", "--csv", heavy_tailed_csv, "--response", "y", "--target", "x99"
        )

        assert code == EXIT_INPUT
        assert "x99" in err

    def test_missing_response(self, run, heavy_tailed_csv):
        """Test that a missing response column is named"""
        code, _, err = run(
            "test", "--csv", heavy_tailed_csv, "--response", "price", "--target", "x1"
        )

        assert code == EXIT_INPUT
        assert "price" in err

    def test_json_result(self, run, heavy_tailed_csv):
        """Test a null target with machine-readable output"""
        code, out, _ = run(
            "test",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--target",
            "x2",
            "--seed",
            "5",
            "--json",
        )

        result = json.loads(out)
        assert code == EXIT_OK
        assert 0 < result["p_value"] < 1
        assert result["reject"] == (result["p_value"] < result["alpha"])
        assert result["targets"] == ["x2"]
        assert "theta" in result["lambdas"]

    def test_text_result_and_generated_seed(self, run, heavy_tailed_csv):
        """Test human output and that a generated seed is echoed"""
        code, out, err = run(
            "test", "--csv", heavy_tailed_csv, "--response", "y", "--target", "3"
        )

        assert code == EXIT_OK
        assert "p-value:" in out
        assert "decision:" in out
        assert "seed:" in err

    def test_pearson_warns_on_heavy_tails(self, run, heavy_tailed_csv):
        """Test that the infinite-variance diagnostic is printed"""
        code, _, err = run(
            "test",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--target",
            "x2",
            "--method",
            "pearson",
            "--seed",
            "1",
        )

        assert code == EXIT_OK
        assert "warning: ppcov" in err
        assert "heavy-tailed" in err

    def test_penalty_overrides_are_reported(self, run, heavy_tailed_csv):
        """Test that --lambda-theta is used and recorded"""
        code, out, _ = run(
            "test",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--target",
            "x2",
            "--lambda-theta",
            "0.05",
            "--lambda-x",
            "0.1",
            "--seed",
            "1",
            "--json",
        )

        result = json.loads(out)
        assert code == EXIT_OK
        assert result["lambdas"]["theta"] == 0.05
        assert result["lambdas"]["gamma"] == 0.1

    def test_group_test(self, run, heavy_tailed_csv):
        """Test the chi-square group test"""
        code, out, _ = run(
            "group-test",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--targets",
            "x1,x3",
            "--seed",
            "2",
            "--json",
        )

        result = json.loads(out)
        assert code == EXIT_OK
        assert result["df"] == 2
        assert result["targets"] == ["x1", "x3"]

    def test_help_documents_defaults(self, test_config):
        """Test that tuning defaults appear in the help text"""
        parser = build_parser(test_config)
        test_parser = parser._subparsers._group_actions[0].choices["test"]
        text = test_parser.format_help()

        assert "default: 1.1" in text
        assert "default: 0.1" in text
        assert f"default: {test_config.PIVOTAL_DRAWS}" in text


@pytest.mark.integration
class TestDataCommands:
    """Test augmentation, audit and scan"""

    def test_augment(self, run, heavy_tailed_csv, temp_dir):
        """Test that copies are written and the input is untouched"""
        before = heavy_tailed_csv.read_bytes()
        output = temp_dir / "augmented.csv"

        code, _, _ = run(
            "augment",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--copies",
            "2",
            "--seed",
            "3",
            "--output",
            output,
        )

        frame = pd.read_csv(output)
        assert code == EXIT_OK
        assert frame.shape == (200, 1 + 8 * 3)
        assert "x8_perm2" in frame.columns
        assert heavy_tailed_csv.read_bytes() == before

    def test_audit(self, run, heavy_tailed_csv):
        """Test the rejection audit table"""
        code, out, _ = run(
            "audit",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--copies",
            "1",
            "--methods",
            "pgcov",
            "--alphas",
            "0.05,0.1",
            "--seed",
            "4",
            "--json",
        )

        rows = json.loads(out)
        assert code == EXIT_OK
        assert [r["alpha"] for r in rows] == [0.05, 0.1]
        assert all(r["columns"] == 8 for r in rows)

    def test_scan(self, run, heavy_tailed_csv):
        """Test one row per predictor"""
        code, out, _ = run(
            "scan",
            "--csv",
            heavy_tailed_csv,
            "--response",
            "y",
            "--seed",
            "1",
            "--json",
        )

        rows = json.loads(out)
        assert code == EXIT_OK
        assert [r["column"] for r in rows] == [f"x{j}" for j in range(1, 9)]


@pytest.mark.integration
class TestSimulateCommands:
    """Test the study subcommands"""

    def test_size_study_writes_reports(self, run, temp_dir):
        """Test that a desk size study writes three files"""
        config_path = temp_dir / "study.cfg"
        config_path.write_text(STUDY_FILE)
        out_dir = temp_dir / "reports"

        code, out, err = run(
            "simulate-size", config_path, "--output-dir", out_dir, "--seed", "7"
        )

        assert code == EXIT_OK
        assert sorted(p.name for p in out_dir.iterdir()) == [
            "size_normal.csv",
            "size_normal.json",
            "size_normal.svg",
        ]
        assert "seed: 7" in err
        assert "pgcov" in out

    def test_profile_sets_study_scale(self, run, temp_dir):
        """Test that an explicit profile replaces the file's n and p"""
        config_path = temp_dir / "study.cfg"
        config_path.write_text(STUDY_FILE)

        code, out, _ = run(
            "simulate-size",
            config_path,
            "--output-dir",
            temp_dir / "r",
            "--profile",
            "desk",
            "--json",
        )

        assert code == EXIT_OK
        report = json.loads(out)
        assert (report["config"]["n"], report["config"]["p"]) == (40, 8)

    def test_paper_profile_overrides_file(self, run, temp_dir, monkeypatch, caplog):
        """Test that the paper profile runs at n = 200, p = 2000 and says so"""
        config_path = temp_dir / "study.cfg"
        config_path.write_text(STUDY_FILE)
        seen = []

        def capture(study, cfg):
            seen.append(study)
            raise StudyConfigError("stopped before running")

        monkeypatch.setattr(cli, "run_size_study", capture)

        code, _, _ = run(
            "simulate-size", config_path, "--output-dir", temp_dir, "--profile", "paper"
        )

        assert code == EXIT_INPUT
        assert (seen[0].n, seen[0].p) == (200, 2000)
        assert "profile paper overrides n=40, p=12" in caplog.text

    def test_same_seed_same_csv(self, run, temp_dir):
        """Test byte-identical CSV for a repeated study"""
        config_path = temp_dir / "study.cfg"
        config_path.write_text(STUDY_FILE + "seed=3\n")

        run("simulate-size", config_path, "--output-dir", temp_dir / "a")
        run("simulate-size", config_path, "--output-dir", temp_dir / "b")

        first = (temp_dir / "a" / "size_normal.csv").read_bytes()
        second = (temp_dir / "b" / "size_normal.csv").read_bytes()
        assert first == second

    def test_generated_seed_is_echoed(self, run, temp_dir):
        """Test that a study without a seed prints the one it drew"""
        config_path = temp_dir / "study.cfg"
        config_path.write_text(STUDY_FILE)

        code, _, err = run(
            "simulate-size", config_path, "--output-dir", temp_dir / "r", "--json"
        )

        assert code == EXIT_OK
        assert err.count("seed:") == 1

    def test_invalid_config(self, run, temp_dir):
        """Test that a malformed config file exits with code 2"""
        config_path = temp_dir / "study.cfg"
        config_path.write_text("reps=-3\n")

        code, _, err = run("simulate-size", config_path, "--output-dir", temp_dir)

        assert code == EXIT_INPUT
        assert "Invalid study config" in err

    def test_invalid_study_exit_code(self, run, temp_dir, monkeypatch):
        """Test that a study with too many failures exits with code 4"""

        def broken(self, fits, method, alpha=None):
            raise SolverError("simulated failure")

        monkeypatch.setattr(InferenceEngine, "evaluate", broken)
        config_path = temp_dir / "study.cfg"
        config_path.write_text(STUDY_FILE)

        code, _, err = run(
            "simulate-size", config_path, "--output-dir", temp_dir, "--seed", "1"
        )

        assert code == EXIT_INVALID_STUDY
        assert "failure rate" in err
