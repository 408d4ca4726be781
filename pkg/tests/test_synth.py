import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drim.synth import (
    CohortFormatError,
    GeneratorConfig,
    export_cohort,
    generate,
    load_cohort,
    split,
    split_indices,
)


def _uncensored_concordance(risk, t):
    """Harrell concordance of a risk score against exact event times (double loop)."""
    conc = total = 0
    for i in range(len(t)):
        for j in range(len(t)):
            if t[i] < t[j]:
                total += 1
                conc += risk[i] > risk[j]
    return conc / total


def test_generate_is_deterministic():
    a, b = generate(GeneratorConfig(seed=5)), generate(GeneratorConfig(seed=5))
    for x, y in zip(a.features, b.features):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.time, b.time)
    np.testing.assert_array_equal(a.present, b.present)
    assert not np.array_equal(a.time, generate(GeneratorConfig(seed=6)).time)


def test_shapes_and_absent_rows_are_zero():
    cfg = GeneratorConfig(n_patients=200, feature_dims=[8, 5, 3], seed=1)
    b = generate(cfg)
    assert [x.shape for x in b.features] == [(200, 8), (200, 5), (200, 3)]
    assert b.present.shape == (3, 200)
    assert b.true_shared.shape == (200, cfg.shared_dim)
    for m, x in enumerate(b.features):
        assert np.all(x[~b.present[m]] == 0.0)
    assert np.all(b.time >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.lists(st.floats(0.0, 0.95), min_size=5, max_size=5), st.integers(0, 10_000))
def test_presence_invariant(M, rates, seed):
    cfg = GeneratorConfig(n_patients=80, n_modalities=M, feature_dims=[3] * M, missing_rates=rates[:M],
                          unique_effect=[1.0] * M, seed=seed)
    assert np.all(generate(cfg).present.sum(axis=0) >= 2)


def test_no_missingness_means_all_present():
    b = generate(GeneratorConfig(missing_rates=[0.0, 0.0, 0.0], n_patients=50))
    assert b.present.all()


@pytest.mark.parametrize("target", [0.1, 0.3, 0.6])
@pytest.mark.parametrize("seed", [0, 1])
def test_censoring_fraction_is_calibrated(target, seed):
    b = generate(GeneratorConfig(n_patients=600, censor_rate_target=target, seed=seed))
    assert abs((~b.event).mean() - target) <= 0.05


def test_noise_free_features_are_linear_in_the_factors():
    cfg = GeneratorConfig(n_patients=60, noise_std=0.0, unique_effect=[0.0] * 3, missing_rates=[0.0] * 3, seed=2)
    b = generate(cfg)
    for m, x in enumerate(b.features):
        factors = np.hstack([b.true_shared, b.true_unique[m]])
        coef, *_ = np.linalg.lstsq(factors, x, rcond=None)
        np.testing.assert_allclose(factors @ coef, x, atol=1e-10)
    # with no unique effect the hazard score is a linear function of z alone
    coef, *_ = np.linalg.lstsq(b.true_shared, b.true_risk, rcond=None)
    np.testing.assert_allclose(b.true_shared @ coef, b.true_risk, atol=1e-10)


def test_oracle_ranking_reaches_strong_concordance_when_only_shared_factor_matters():
    cfg = GeneratorConfig(n_patients=600, unique_effect=[0.0] * 3, censor_rate_target=0.001, seed=0)
    b = generate(cfg)
    ev = b.event  # essentially everyone; restrict to exact event times
    assert ev.mean() > 0.99
    assert _uncensored_concordance(b.true_risk[ev], b.time[ev]) >= 0.9


def test_invalid_configs_raise():
    with pytest.raises(ValueError, match="two modalities"):
        generate(GeneratorConfig(n_modalities=1, feature_dims=[4], missing_rates=[0.0], unique_effect=[1.0]))
    with pytest.raises(ValueError):
        generate(GeneratorConfig(missing_rates=[0.1, 0.2]))
    with pytest.raises(ValueError):
        generate(GeneratorConfig(missing_rates=[1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        generate(GeneratorConfig(censor_rate_target=1.0))


def test_split_sizes_and_identity():
    b = generate(GeneratorConfig(n_patients=100, seed=4))
    parts = split(b, [0.8, 0.2], 0)
    assert [p.n_patients for p in parts] == [80, 20]
    (whole,) = split_indices(b.event, [1.0], 0)
    np.testing.assert_array_equal(whole, np.arange(100))


def test_split_is_a_disjoint_partition_and_stratified():
    event = np.zeros(200, bool)
    event[::2] = True
    parts = split_indices(event, [0.6, 0.3, 0.1], 9)
    joined = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(joined, np.arange(200))
    for idx in parts:
        assert 0.4 <= event[idx].mean() <= 0.6


def test_split_rejects_empty_parts():
    with pytest.raises(ValueError, match="empty split"):
        split_indices(np.ones(5, bool), [0.95, 0.05], 0)
    with pytest.raises(ValueError):
        split_indices(np.ones(5, bool), [0.5, 0.4], 0)


def test_export_import_round_trip(tmp_path):
    b = generate(GeneratorConfig(n_patients=50, seed=8))
    export_cohort(b, tmp_path / "c", with_truth=True)
    back = load_cohort(tmp_path / "c")
    for x, y in zip(b.features, back.features):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(b.time, back.time)
    np.testing.assert_array_equal(b.event, back.event)
    np.testing.assert_array_equal(b.present, back.present)
    np.testing.assert_array_equal(b.true_shared, back.true_shared)
    np.testing.assert_array_equal(b.true_risk, back.true_risk)


def test_truth_files_only_with_flag(tmp_path):
    b = generate(GeneratorConfig(n_patients=20, seed=8))
    export_cohort(b, tmp_path / "plain")
    names = {p.name for p in (tmp_path / "plain").iterdir()}
    assert names == {"modality_0.csv", "modality_1.csv", "modality_2.csv", "presence.csv", "outcomes.csv"}
    assert load_cohort(tmp_path / "plain").true_shared is None


def test_malformed_cohort_names_file_and_row(tmp_path):
    b = generate(GeneratorConfig(n_patients=10, seed=8))
    d = export_cohort(b, tmp_path / "bad")
    lines = (d / "modality_1.csv").read_text().splitlines()
    lines[4] = "1.0,oops" + ",0.0" * (b.feature_dims[1] - 2)
    (d / "modality_1.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(CohortFormatError) as err:
        load_cohort(d)
    assert "modality_1.csv" in str(err.value) and "row 5" in str(err.value)


def test_missing_cohort_directory(tmp_path):
    with pytest.raises(CohortFormatError):
        load_cohort(tmp_path / "nope")


def test_select_modalities_keeps_order():
    b = generate(GeneratorConfig(n_patients=30, feature_dims=[3, 4, 5], seed=1))
    s = b.select_modalities([2, 0])
    assert s.feature_dims == [5, 3]
    np.testing.assert_array_equal(s.present, b.present[[2, 0]])
