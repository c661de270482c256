"""Generator and study-harness tests.

Correlation expectations come from the closed form rho / sqrt(rho^2 + 1),
verified within Monte Carlo tolerance; everything else is determinism,
schema stability, and the two-feature demonstration.
"""

import numpy as np
import pytest

from orthokit.errors import InvalidSpec
from orthokit.synth import (
    METHODS,
    STUDY_COLUMNS,
    SyntheticSpec,
    TrajectoryTable,
    figure1_demo,
    generate,
    simulation_study,
    stream,
)


class TestStreams:
    def test_deterministic(self):
        a = stream(42, 1, 2).standard_normal(5)
        b = stream(42, 1, 2).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_ids_give_distinct_streams(self):
        a = stream(42, 1).standard_normal(5)
        b = stream(42, 2).standard_normal(5)
        assert not np.allclose(a, b)


class TestGenerate:
    def test_rho_zero_uncorrelated(self):
        d = generate(SyntheticSpec(n=5000, p=3, q=6, rho=0.0, seed=1))
        for j in range(3):
            for k in range(6):
                assert abs(np.corrcoef(d.x[:, j], d.z[:, k])[0, 1]) <= 0.1

    def test_rho_two_analytic_correlation(self):
        # corr(rho Z + E, Z) = rho / sqrt(rho^2 + 1)
        d = generate(SyntheticSpec(n=5000, p=3, q=6, rho=2.0, seed=2))
        expected = 2.0 / np.sqrt(5.0)
        for j in range(3):
            got = np.corrcoef(d.x[:, j], d.z[:, j])[0, 1]
            assert abs(got - expected) <= 0.02

    @pytest.mark.parametrize("rho", [0.0, 1.0, 2.0])
    def test_analytic_correlation_within_mc_tolerance(self, rho):
        n = 4000
        d = generate(SyntheticSpec(n=n, p=2, q=4, rho=rho, seed=5))
        expected = rho / np.sqrt(rho**2 + 1.0)
        for j in range(2):
            got = np.corrcoef(d.x[:, j], d.z[:, j])[0, 1]
            assert abs(got - expected) <= 3.0 / np.sqrt(n)

    def test_bitwise_determinism(self):
        spec = SyntheticSpec(n=100, p=2, q=5, rho=1.0, family="poisson", seed=9)
        a = generate(spec, replicate=3)
        b = generate(spec, replicate=3)
        np.testing.assert_array_equal(a.z, b.z)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        c = generate(spec, replicate=4)
        assert not np.array_equal(a.y, c.y)

    def test_family_domains(self):
        bern = generate(SyntheticSpec(n=200, p=1, q=2, rho=1.0, seed=0))
        assert set(np.unique(bern.y)) <= {0.0, 1.0}
        pois = generate(
            SyntheticSpec(n=200, p=1, q=2, rho=1.0, family="poisson", seed=0)
        )
        assert np.all(pois.y >= 0) and np.all(pois.y == np.floor(pois.y))

    def test_explicit_true_gamma(self):
        spec = SyntheticSpec(
            n=50, p=1, q=2, rho=0.0, family="gaussian", seed=1,
            true_gamma=(1.0, -1.0),
        )
        d = generate(spec)
        np.testing.assert_array_equal(d.true_gamma, [1.0, -1.0])

    def test_invalid_specs_rejected(self):
        with pytest.raises(InvalidSpec):
            generate(SyntheticSpec(n=0, p=1, q=2, rho=0.0))
        with pytest.raises(InvalidSpec):
            generate(SyntheticSpec(n=10, p=3, q=2, rho=0.0))
        with pytest.raises(InvalidSpec):
            generate(SyntheticSpec(n=10, p=1, q=2, rho=0.0, true_gamma=(1.0,)))


class TestSimulationStudy:
    def test_row_count_formula(self):
        grid = [
            SyntheticSpec(n=120, p=2, q=4, rho=2.0, seed=3),
            SyntheticSpec(n=120, p=3, q=5, rho=0.0, seed=3),
        ]
        table = simulation_study(grid, replicates=1)
        expected = len(METHODS) * (2 + 3)
        assert len(table.rows) == expected
        assert all(not r.get("error") for r in table.rows)

    def test_schema_stable(self):
        grid = [SyntheticSpec(n=80, p=1, q=3, rho=1.0, seed=4)]
        table = simulation_study(grid, replicates=2)
        assert table.columns == STUDY_COLUMNS
        for row in table.rows:
            assert set(row) <= set(STUDY_COLUMNS)

    def test_deterministic_across_thread_counts(self):
        grid = [
            SyntheticSpec(n=150, p=2, q=4, rho=2.0, seed=6),
            SyntheticSpec(n=150, p=2, q=4, rho=0.0, seed=6),
        ]
        seq = simulation_study(grid, replicates=2, threads=1)
        par = simulation_study(grid, replicates=2, threads=4)
        assert len(seq.rows) == len(par.rows)
        for a, b in zip(seq.rows, par.rows):
            assert a == b

    def test_confounded_cell_separates_methods(self):
        grid = [SyntheticSpec(n=1000, p=3, q=8, rho=2.0, seed=8)]
        table = simulation_study(grid, replicates=3)
        summary = {s["method"]: s for s in table.summarize()}
        assert summary["uncorrected"]["fraction_significant"] >= 0.5
        assert summary["ch"]["fraction_significant"] == 0.0
        assert summary["ch"]["median_abs_estimate"] <= 1e-2
        assert summary["ch"]["median_p_value"] >= 0.9

    def test_empty_grid_rejected(self):
        with pytest.raises(InvalidSpec):
            simulation_study([], replicates=1)

    def test_infeasible_cell_recorded_not_raised(self):
        # n < q makes the unconstrained fit rank deficient; the study must
        # record error rows instead of aborting
        grid = [SyntheticSpec(n=6, p=1, q=10, rho=0.0, seed=1)]
        table = simulation_study(grid, replicates=1)
        assert len(table.rows) >= 1
        assert all(r.get("error") for r in table.rows)


class TestFigure1Demo:
    def test_final_constrained_correlation_small(self):
        table = figure1_demo(seed=0)
        assert abs(table.final("ch")["corr_with_protected"]) <= 0.01

    def test_unconstrained_correlation_large(self):
        table = figure1_demo(seed=0)
        assert abs(table.final("uncorrected")["corr_with_protected"]) >= 0.2

    def test_iteration_zero_identical_across_methods(self):
        table = figure1_demo(seed=0)
        first = {
            r["method"]: (r["loss"], r["corr_with_protected"])
            for r in table.rows
            if r["iteration"] == 0
        }
        assert len(set(first.values())) == 1

    def test_table_shape(self):
        table = figure1_demo(seed=1)
        assert isinstance(table, TrajectoryTable)
        methods = {r["method"] for r in table.rows}
        assert methods == {"uncorrected", "cl", "ch"}
        for row in table.rows:
            assert set(row) == set(table.columns)
