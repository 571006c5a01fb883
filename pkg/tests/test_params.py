import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_nls.params import (
    OutOfBoundsWarning,
    ParamEntry,
    ParameterSpec,
    SpecError,
    denormalize,
    deviation,
    headneck_spec,
    load_spec,
    normalize,
    physical_to_deviation,
    recompose,
    spec_from_json,
    typical_normalized,
    vector_from_mapping,
)


def value(spec, name, phys):
    v = spec.typical.copy()
    v[spec.index(name)] = phys
    return normalize(spec, v)[spec.index(name)]


def test_headneck_schema():
    spec = headneck_spec()
    assert spec.size == 12
    assert len(spec.entries) == 14
    assert spec.fixed_values == {"J": 0.0148, "T_c": 0.1}
    assert "J" not in spec.names and "T_c" not in spec.names
    np.testing.assert_allclose(typical_normalized(spec), 0.5)


def test_normalize_examples():
    spec = headneck_spec()
    assert value(spec, "K_vis", 50.0) == 0.0
    assert value(spec, "K", 2.55) == pytest.approx(0.5, abs=1e-15)
    assert value(spec, "tau", 0.25) == pytest.approx(0.5, abs=1e-15)


def test_denormalize_examples():
    spec = headneck_spec()
    np.testing.assert_array_equal(denormalize(spec, np.zeros(12)), spec.lower)
    np.testing.assert_array_equal(denormalize(spec, np.ones(12)), spec.upper)
    phi = np.full(12, 0.5)
    assert denormalize(spec, phi)[spec.index("K_ccr")] == 150.5


def test_deviation_example():
    spec = headneck_spec()
    phi = np.full(12, 0.5)
    phi[0] = 0.7
    d = deviation(spec, phi)
    np.testing.assert_allclose(d, np.r_[0.2, np.zeros(11)], atol=1e-15)
    np.testing.assert_array_equal(deviation(spec, typical_normalized(spec)), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=12, max_size=12))
def test_round_trips(phi):
    spec = headneck_spec()
    phi = np.array(phi)
    np.testing.assert_allclose(normalize(spec, denormalize(spec, phi)), phi, rtol=1e-12, atol=1e-12)
    theta = denormalize(spec, phi)
    np.testing.assert_allclose(denormalize(spec, normalize(spec, theta)), theta, rtol=1e-12)
    np.testing.assert_allclose(recompose(spec, deviation(spec, phi)), phi, rtol=0, atol=1e-15)


def test_out_of_bounds_is_clamped_with_warning():
    spec = headneck_spec()
    theta = spec.typical.copy()
    theta[0] = 5000.0
    with pytest.warns(OutOfBoundsWarning, match="K_vis"):
        phi = normalize(spec, theta)
    assert phi[0] == 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        normalize(spec, spec.typical)


def test_permutation_equivariance():
    spec = headneck_spec()
    rng = np.random.default_rng(3)
    perm = rng.permutation(len(spec.entries))
    permuted = ParameterSpec(tuple(spec.entries[i] for i in perm))
    theta = denormalize(spec, rng.uniform(size=12))
    order = [spec.index(n) for n in permuted.names]
    np.testing.assert_array_equal(normalize(permuted, theta[order]), normalize(spec, theta)[order])


def test_spec_validation():
    with pytest.raises(SpecError):
        ParameterSpec((ParamEntry("a", 1.0, 1.0),))
    with pytest.raises(SpecError):
        ParameterSpec((ParamEntry("a", 0.0, 1.0, typical=2.0),))
    with pytest.raises(SpecError):
        ParameterSpec((ParamEntry("a", 0.0, 1.0), ParamEntry("a", 0.0, 2.0)))
    with pytest.raises(SpecError):
        ParameterSpec((ParamEntry("J", 0.1, 0.2, fixed=0.1),))
    with pytest.raises(SpecError):
        spec_from_json({"name": "a"})
    with pytest.raises(SpecError):
        vector_from_mapping(headneck_spec(), {"nope": 1.0})


def test_with_typical_and_json(tmp_path):
    spec = headneck_spec().with_typical({"K": 1.0})
    assert spec.typical[spec.index("K")] == 1.0
    assert physical_to_deviation(spec, spec.typical).tolist() == [0.0] * 12
    path = tmp_path / "s.json"
    path.write_text(json.dumps(spec.to_json()))
    again = load_spec(path)
    assert again.names == spec.names
    np.testing.assert_array_equal(again.typical, spec.typical)


def test_malformed_spec_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('[\n {"name": "a", "min": 0,\n')
    with pytest.raises(SpecError, match="line 3 column 1"):
        load_spec(path)
