import numpy as np
import pytest
from datamodel import Seed
from methods import (
    WEAK_POWER_NOTE,
    GiniMethod,
    MethodRegistry,
    NuisanceFits,
    PearsonMethod,
    PearsonModifiedMethod,
    QuantileMethod,
    hill_tail_index,
)
from models import TuningOptions


@pytest.fixture
def fits(small_dataset, test_config):
    """Nuisance fits for target x1 of the small data set"""
    centered = small_dataset.centered()
    split = centered.split(0)
    return NuisanceFits(
        centered.y,
        split.xk,
        split.Z,
        test_config,
        Seed(value=1),
        p_total=small_dataset.p,
        target_names=["x1"],
    )


@pytest.mark.unit
class TestNuisanceFits:
    """Test lazily shared nuisance fits"""

    def test_fits_are_computed_once(self, fits):
        """Test that every fit is cached after first use"""
        assert fits.rank_fit is fits.rank_fit
        assert fits.ls_fit is fits.ls_fit
        assert fits.quantile_fit(0.5) is fits.quantile_fit(0.5)
        assert fits.gamma_fits is fits.gamma_fits

    def test_methods_share_fits(self, fits):
        """Test that Gini and modified Pearson use the same rank-Lasso fit"""
        gini = GiniMethod().estimate(fits)
        modified = PearsonModifiedMethod().estimate(fits)

        assert gini.fits["theta"] is modified.fits["theta"]
        assert gini.fits["gamma"] is modified.fits["gamma"]

    def test_penalty_overrides(self, small_dataset, test_config):
        """Test that explicit penalties bypass the tuning rules"""
        centered = small_dataset.centered()
        split = centered.split(0)
        tuning = TuningOptions(lambda_theta=0.07, lambda_x=0.03, lambda_q=0.02)

        fits = NuisanceFits(
            centered.y, split.xk, split.Z, test_config, Seed(value=1), tuning
        )

        assert fits.lambda_theta == 0.07
        assert fits.rank_fit.lam == 0.07
        assert fits.gamma_fits[0].lam == 0.03
        assert fits.quantile_fit(0.5).lam == 0.02

    def test_cross_validated_gamma_penalty(self, small_dataset, test_config):
        """Test the 'cv' rule for the node-wise Lasso"""
        centered = small_dataset.centered()
        split = centered.split(0)
        tuning = TuningOptions(lambda_x="cv")

        fits = NuisanceFits(
            centered.y, split.xk, split.Z, test_config, Seed(value=1), tuning
        )

        assert fits.gamma_fits[0].lam > 0
        assert fits.gamma.shape == (small_dataset.p - 1,)

    def test_group_coefficients(self, small_dataset, test_config):
        """Test one node-wise fit per target column"""
        centered = small_dataset.centered()
        split = centered.split([0, 1, 2])

        fits = NuisanceFits(centered.y, split.xk, split.Z, test_config, Seed(value=1))

        assert len(fits.gamma_fits) == 3
        assert fits.Gamma.shape == (small_dataset.p - 3, 3)


@pytest.mark.unit
class TestMethods:
    """Test the individual methods"""

    def test_descriptions(self):
        """Test that each method describes itself"""
        for method in (
            GiniMethod(),
            PearsonMethod(),
            PearsonModifiedMethod(),
            QuantileMethod(0.5),
        ):
            description = method.describe()
            assert description["name"] == method.name
            assert "description" in description
            assert description["fits"]

    def test_estimate_kinds(self, fits):
        """Test that each method produces its own estimate kind"""
        assert GiniMethod().estimate(fits).kind == "pgcov"
        assert PearsonMethod().estimate(fits).kind == "ppcov"
        assert PearsonModifiedMethod().estimate(fits).kind == "ppcov_rank"
        assert QuantileMethod(0.3).estimate(fits).tau == 0.3

    def test_quantile_weak_power_note(self, fits):
        """Test that quantile results always carry the weak-power note"""
        method = QuantileMethod()

        assert method.notes(fits, method.estimate(fits)) == [WEAK_POWER_NOTE]

    def test_quantile_tau_range(self):
        """Test that tau outside (0, 1) is rejected"""
        with pytest.raises(ValueError, match="tau"):
            QuantileMethod(1.0)

    def test_hill_tail_index(self):
        """Test the tail index on Pareto-like and Gaussian samples"""
        rng = np.random.default_rng(0)

        cauchy = hill_tail_index(rng.standard_cauchy(5000))
        normal = hill_tail_index(rng.standard_normal(5000))

        assert cauchy == pytest.approx(1.0, abs=0.25)
        assert normal > 2


@pytest.mark.unit
class TestMethodRegistry:
    """Test MethodRegistry functionality"""

    def test_registry_initialization(self):
        """Test MethodRegistry initialization"""
        registry = MethodRegistry()

        assert registry is not None
        assert registry.methods == {}

    def test_register_method(self):
        """Test registering methods"""
        registry = MethodRegistry()
        gini = GiniMethod()

        registry.register(gini)

        assert "pgcov" in registry.methods
        assert registry.get("pgcov") is gini

    def test_register_nameless_method(self):
        """Test that methods without a name are rejected"""

        class Nameless(GiniMethod):
            name = ""

        with pytest.raises(ValueError, match="must have a name"):
            MethodRegistry().register(Nameless())

    def test_describe_all(self):
        """Test listing method descriptions"""
        registry = MethodRegistry()
        registry.register(GiniMethod())
        registry.register(PearsonMethod())

        descriptions = registry.describe_all()

        assert len(descriptions) == 2
        names = [d["name"] for d in descriptions]
        assert "pgcov" in names
        assert "ppcov" in names
        assert registry.names() == ["pgcov", "ppcov"]

    def test_get_nonexistent_method(self):
        """Test looking up an unregistered method"""
        registry = MethodRegistry()
        registry.register(GiniMethod())

        with pytest.raises(ValueError, match="Method 'dbeta' not found"):
            registry.get("dbeta")
