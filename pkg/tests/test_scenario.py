"""Scenario loading, validation, rate evaluation, pattern connectivity."""

import json

import numpy as np
import pytest

from agepatch import (
    ParseError,
    SchemaError,
    check_essential_positivity,
    dumps_scenario,
    eval_rates,
    load_scenario,
    validate_scenario,
)
from agepatch.scenario import dispersal_pattern

from conftest import constant, one_patch_doc, rate, table, window


def two_patch_doc(d12=0.1, d21=0.1, m2=1.0, diagonal_mode="mass_conserving", as_dict=False):
    doc = {
        "patches": [
            {
                "mu": rate(constant(0.5)),
                "m": rate(constant(1.0)),
                "L": rate(constant(100.0)),
                "initial": window(1.0, 0.0, 10.0),
            },
            {
                "mu": rate(constant(1.0)),
                "m": rate(constant(m2)),
                "L": rate(constant(100.0)),
                "initial": window(1.0, 0.0, 10.0),
            },
        ],
        "dispersion": {
            "offdiag": {"1->2": rate(constant(d12)), "2->1": rate(constant(d21))},
            "diagonal_mode": diagonal_mode,
        },
        "grid": {"delta": 0.05, "a_max": 40.0, "t_end": 20.0},
        "environment": "constant",
    }
    return doc if as_dict else json.dumps(doc)


class TestLoadScenario:
    def test_minimal_one_patch_constant(self):
        spec = load_scenario(one_patch_doc())
        assert spec.n_patches == 1
        assert spec.environment == "constant"
        assert spec.grid.n_age_steps == 2000

    def test_malformed_json_is_parse_error(self):
        with pytest.raises(ParseError):
            load_scenario("{not json")

    def test_missing_key_is_schema_error(self):
        doc = one_patch_doc(as_dict=True)
        del doc["patches"][0]["L"]
        with pytest.raises(SchemaError):
            load_scenario(json.dumps(doc))

    def test_extra_key_is_schema_error(self):
        doc = one_patch_doc(as_dict=True)
        doc["patches"][0]["bogus"] = 1
        with pytest.raises(SchemaError):
            load_scenario(json.dumps(doc))

    def test_table_not_covering_age_range_is_schema_error(self):
        doc = one_patch_doc(as_dict=True)
        doc["patches"][0]["mu"] = rate(table([0.0, 20.0], [0.5, 0.5]))
        with pytest.raises(SchemaError):
            load_scenario(json.dumps(doc))

    def test_non_monotone_breakpoints_is_schema_error(self):
        doc = one_patch_doc(as_dict=True)
        doc["patches"][0]["mu"] = rate(table([0.0, 30.0, 20.0, 40.0], [1, 1, 1, 1]))
        with pytest.raises(SchemaError):
            load_scenario(json.dumps(doc))

    def test_grid_must_divide_evenly(self):
        doc = one_patch_doc(as_dict=True)
        doc["grid"]["a_max"] = 40.013
        with pytest.raises(SchemaError):
            load_scenario(json.dumps(doc))

    def test_dispersion_required_for_two_patches(self):
        doc = two_patch_doc(as_dict=True)
        del doc["dispersion"]
        with pytest.raises(SchemaError):
            load_scenario(json.dumps(doc))

    def test_irregular_seeding_is_deterministic(self):
        doc = one_patch_doc(
            period=1.0,
            environment="irregular",
            m_modulation={
                "kind": "irregular",
                "lo": {"kind": "sinusoidal", "beta": 0.2, "period": 1.0, "phase": 0.0},
                "hi": {"kind": "sinusoidal", "beta": 0.2, "period": 1.0, "phase": 0.5},
                "seed": 42,
            },
            t_end=20.0,
        )
        # lo/hi cross for these phases; use proportional envelopes instead
        doc = json.loads(doc)
        doc["patches"][0]["m"]["modulation"]["lo"] = {"kind": "periodic_table", "values": [0.7, 0.8, 0.9, 0.8]}
        doc["patches"][0]["m"]["modulation"]["hi"] = {"kind": "periodic_table", "values": [1.1, 1.2, 1.3, 1.2]}
        doc = json.dumps(doc)
        spec1 = load_scenario(doc)
        spec2 = load_scenario(doc)
        assert spec1 == spec2
        samples = np.asarray(spec1.rates.m[0].modulation.samples)
        assert samples.shape == (1000,)
        # and the override changes them, reproducibly
        spec3 = load_scenario(doc, seed_override=7)
        spec4 = load_scenario(doc, seed_override=7)
        assert spec3 == spec4
        assert spec3 != spec1

    def test_round_trip_canonical_serialization(self):
        doc = two_patch_doc()
        spec = load_scenario(doc)
        again = load_scenario(dumps_scenario(spec))
        assert spec == again


class TestValidateScenario:
    def test_clean_one_patch_has_no_diagnostics(self):
        # constant m = 1 with mu = 0.5 at a_max = 40: residual e^{-20} < 1e-8
        spec = load_scenario(one_patch_doc())
        assert validate_scenario(spec) == []

    def test_truncation_residual_flagged(self):
        # mu = 0.1 leaves m(a_max) e^{-4} ~ 1.8e-2 of its peak unaccounted
        spec = load_scenario(one_patch_doc(mu=0.1))
        diags = validate_scenario(spec)
        assert any("truncation residual" in d for d in diags)

    def test_one_way_dispersal_not_essentially_positive(self):
        spec = load_scenario(two_patch_doc(d12=0.1, d21=0.0))
        diags = validate_scenario(spec)
        assert any("not essentially positive" in d for d in diags)

    def test_zero_regulation_value_flagged(self):
        doc = one_patch_doc(as_dict=True)
        doc["patches"][0]["L"] = rate(table([0.0, 20.0, 40.0], [100.0, 0.0, 100.0]))
        diags = validate_scenario(load_scenario(json.dumps(doc)))
        assert any("L must be strictly positive" in d for d in diags)

    def test_negative_birth_flagged(self):
        doc = one_patch_doc(as_dict=True)
        doc["patches"][0]["m"] = rate(table([0.0, 40.0], [1.0, -0.5]))
        diags = validate_scenario(load_scenario(json.dumps(doc)))
        assert any("m must be nonnegative" in d for d in diags)

    def test_constant_environment_rejects_modulation(self):
        doc = one_patch_doc(m_modulation={"kind": "sinusoidal", "beta": 0.5, "period": 1.0}, period=1.0, as_dict=True)
        diags = validate_scenario(load_scenario(json.dumps(doc)))
        assert any("constant environment" in d for d in diags)

    def test_periodic_environment_checks_shared_period(self):
        doc = one_patch_doc(
            environment="periodic",
            period=1.0,
            m_modulation={"kind": "sinusoidal", "beta": 0.5, "period": 0.7},
            as_dict=True,
        )
        diags = validate_scenario(load_scenario(json.dumps(doc)))
        assert any("period" in d for d in diags)

    def test_birth_window_beyond_a_max_flagged(self):
        doc = one_patch_doc(as_dict=True)
        doc["patches"][0]["m"] = rate(window(1.0, 5.0, 50.0))
        diags = validate_scenario(load_scenario(json.dumps(doc)))
        assert any("beyond a_max" in d for d in diags)


class TestEvalRates:
    def test_constant_kind(self):
        spec = load_scenario(one_patch_doc())
        sample = eval_rates(spec, 3.0, 7.0)
        assert sample.mu[0] == pytest.approx(0.5)
        assert sample.m[0] == pytest.approx(1.0)

    def test_sinusoidal_quarter_period(self):
        doc = one_patch_doc(
            environment="periodic",
            period=1.0,
            m_modulation={"kind": "sinusoidal", "beta": 0.5, "period": 1.0, "phase": 0.0},
        )
        spec = load_scenario(doc)
        sample = eval_rates(spec, 0.0, 0.25)
        assert sample.m[0] == pytest.approx(1.5, abs=1e-12)

    def test_mass_conserving_diagonal(self):
        spec = load_scenario(two_patch_doc(d12=0.2, d21=0.1))
        D = eval_rates(spec, 1.0, 1.0).D
        # key "k->j" sets D[k][j]: inflow into k from j
        assert D[0, 1] == pytest.approx(0.2)
        assert D[1, 0] == pytest.approx(0.1)
        assert D[0, 0] == pytest.approx(-0.1)
        assert D[1, 1] == pytest.approx(-0.2)
        assert np.allclose(D.sum(axis=0), 0.0)

    def test_age_out_of_range_raises(self):
        spec = load_scenario(one_patch_doc())
        with pytest.raises(ValueError):
            eval_rates(spec, 41.0, 0.0)

    def test_periodic_kinds_wrap_any_time(self):
        doc = one_patch_doc(
            environment="periodic",
            period=1.0,
            m_modulation={"kind": "sinusoidal", "beta": 0.5, "period": 1.0, "phase": 0.0},
        )
        spec = load_scenario(doc)
        assert eval_rates(spec, 0.0, 1000.25).m[0] == pytest.approx(1.5, abs=1e-9)

    def test_irregular_time_out_of_range_raises(self):
        doc = one_patch_doc(as_dict=True, t_end=20.0, period=1.0, environment="irregular")
        doc["patches"][0]["m"]["modulation"] = {
            "kind": "irregular",
            "lo": {"kind": "none"},
            "hi": {"kind": "none"},
            "seed": 3,
        }
        spec = load_scenario(json.dumps(doc))
        with pytest.raises(ValueError):
            eval_rates(spec, 1.0, 25.0)

    def test_sign_invariants_on_grid_sample(self):
        spec = load_scenario(two_patch_doc())
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = float(rng.uniform(0.0, 40.0))
            t = float(rng.uniform(0.0, 20.0))
            s = eval_rates(spec, a, t)
            assert np.all(s.mu > 0) and np.all(s.L > 0) and np.all(s.m >= 0)
            off = s.D - np.diag(np.diag(s.D))
            assert np.all(off >= 0) and np.all(np.diag(s.D) <= 0)


class TestEssentialPositivity:
    def test_cyclic_three_patch_pattern(self):
        pattern = np.zeros((3, 3), dtype=bool)
        pattern[0, 1] = pattern[1, 2] = pattern[2, 0] = True
        result = check_essential_positivity(pattern)
        assert result.essentially_positive
        assert result.witnesses[(0, 2)] == (0, 1, 2)

    def test_one_way_edge_fails(self):
        pattern = np.array([[False, True], [False, False]])
        result = check_essential_positivity(pattern)
        assert not result.essentially_positive
        assert result.witnesses[(0, 1)] == (0, 1)
        assert result.witnesses[(1, 0)] is None

    def test_single_patch_vacuous(self):
        result = check_essential_positivity(np.zeros((1, 1), dtype=bool))
        assert result.essentially_positive
        assert result.witnesses == {}

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(2, 6))
            pattern = rng.random((n, n)) < 0.4
            np.fill_diagonal(pattern, False)
            perm = rng.permutation(n)
            permuted = pattern[np.ix_(perm, perm)]
            assert (
                check_essential_positivity(pattern).essentially_positive
                == check_essential_positivity(permuted).essentially_positive
            )

    def test_pattern_from_spec(self):
        spec = load_scenario(two_patch_doc(d12=0.3, d21=0.0))
        pattern = dispersal_pattern(spec)
        assert pattern[0, 1] and not pattern[1, 0]
