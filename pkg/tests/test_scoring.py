"""Scoring-stream tests: scorers, freezing, normalization, FC head."""

import numpy as np
import pytest

from rcft_mci.autograd import Tensor, backward
from rcft_mci.errors import DataError, DimensionError, StateError
from rcft_mci.scoring import (
    CONTINUOUS_FEATURES,
    FEATURE_NAMES,
    Demographics,
    FileBackedScorer,
    Normalizer,
    ScoreTriple,
    ScoringParams,
    StubScorer,
    assert_frozen,
    raw_features,
    score_images,
    scoring_stream_batch,
    scoring_stream_forward,
)


def _images_from(rng_or_value, side=16):
    out = {}
    for i, c in enumerate(("copy", "immediate", "delayed")):
        if isinstance(rng_or_value, np.random.Generator):
            data = rng_or_value.random((1, side, side))
        else:
            data = np.full((1, side, side), float(rng_or_value))
        out[c] = Tensor(data)
    return out


class TestScoreTypes:
    def test_score_range_enforced(self):
        ScoreTriple(0.0, 18.0, 36.0)
        with pytest.raises(DataError, match="copy"):
            ScoreTriple(-0.5, 10.0, 10.0)
        with pytest.raises(DataError, match="delayed"):
            ScoreTriple(10.0, 10.0, 36.5)
        with pytest.raises(DataError):
            ScoreTriple(float("nan"), 10.0, 10.0)

    def test_demographics_validation(self):
        d = Demographics(age=71.0, sex="female", education=12.0)
        assert d.sex_indicator == 1.0
        assert Demographics(70.0, "male", 9.0).sex_indicator == 0.0
        with pytest.raises(DataError):
            Demographics(age=30.0, sex="female", education=12.0)
        with pytest.raises(DataError):
            Demographics(age=70.0, sex="f", education=12.0)
        with pytest.raises(DataError):
            Demographics(age=70.0, sex="male", education=40.0)


class TestScorers:
    def test_file_backed_returns_manifest_values_verbatim(self):
        scorer = FileBackedScorer({"s1": ScoreTriple(32.0, 15.0, 14.0)})
        triple = score_images(scorer, _images_from(0.5), subject_id="s1")
        assert triple.as_tuple() == (32.0, 15.0, 14.0)

    def test_file_backed_missing_subject_rejected(self):
        scorer = FileBackedScorer({"s1": ScoreTriple(32.0, 15.0, 14.0)})
        with pytest.raises(DataError, match="s2"):
            score_images(scorer, _images_from(0.5), subject_id="s2")
        with pytest.raises(DataError):
            score_images(scorer, _images_from(0.5))

    def test_missing_image_condition_rejected(self):
        scorer = StubScorer()
        images = _images_from(0.5)
        del images["immediate"]
        with pytest.raises(DataError, match="immediate"):
            score_images(scorer, images)

    def test_stub_blank_images_score_zero(self):
        triple = score_images(StubScorer(), _images_from(0.0))
        assert triple.as_tuple() == (0.0, 0.0, 0.0)

    def test_stub_monotone_in_ink_fraction(self):
        rng = np.random.default_rng(0)
        scorer = StubScorer()
        for _ in range(20):
            a = rng.random() * 0.4
            b = rng.random() * 0.4
            sa = score_images(scorer, _images_from(a)).copy
            sb = score_images(scorer, _images_from(b)).copy
            if a > b:
                assert sa >= sb
            elif b > a:
                assert sb >= sa

    def test_stub_saturates_at_full_scale(self):
        triple = score_images(StubScorer(full_scale_ink=0.25), _images_from(0.9))
        assert triple.as_tuple() == (36.0, 36.0, 36.0)


class TestFrozenContract:
    def test_untouched_scorer_passes(self):
        scorer = FileBackedScorer({"a": ScoreTriple(10, 11, 12),
                                   "b": ScoreTriple(20, 21, 22)})
        before = scorer.state_bytes()
        for _ in range(10):
            score_images(scorer, _images_from(0.3), subject_id="a")
        assert assert_frozen(before, scorer.state_bytes())

    def test_perturbed_scorer_fails(self):
        scorer = StubScorer(full_scale_ink=0.25)
        before = scorer.state_bytes()
        scorer.full_scale_ink = 0.30
        assert not assert_frozen(before, scorer.state_bytes())

    def test_file_backed_state_covers_scores(self):
        a = FileBackedScorer({"s": ScoreTriple(10, 11, 12)})
        b = FileBackedScorer({"s": ScoreTriple(10, 11, 13)})
        assert not assert_frozen(a.state_bytes(), b.state_bytes())


class TestNormalizer:
    def test_transform_standardizes_continuous_columns(self):
        rng = np.random.default_rng(1)
        features = rng.normal(50, 10, size=(100, 6))
        features[:, 4] = rng.integers(0, 2, 100)  # sex indicator
        norm = Normalizer().fit(features)
        z = norm.transform(features)
        cont = list(CONTINUOUS_FEATURES)
        np.testing.assert_allclose(z[:, cont].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z[:, cont].std(axis=0), 1.0, atol=1e-12)
        np.testing.assert_array_equal(z[:, 4], features[:, 4])

    def test_unfitted_transform_rejected(self):
        with pytest.raises(StateError):
            Normalizer().transform(np.zeros(6))

    def test_audit_flag_records_fitting_split(self):
        features = np.random.default_rng(2).normal(size=(10, 6))
        assert Normalizer().fit(features).fitted_on_training_split
        assert not Normalizer().fit(features, split="test").fitted_on_training_split

    def test_constant_column_does_not_divide_by_zero(self):
        features = np.ones((5, 6))
        z = Normalizer().fit(features).transform(features)
        assert np.isfinite(z).all()

    def test_state_round_trip(self):
        rng = np.random.default_rng(3)
        features = rng.normal(size=(20, 6))
        fitted = Normalizer().fit(features)
        state = fitted.state_arrays()
        restored = Normalizer().load_state(state["mean"], state["std"])
        x = rng.normal(size=6)
        np.testing.assert_array_equal(fitted.transform(x), restored.transform(x))


class TestScoringStream:
    def _fitted_normalizer(self, rng):
        features = np.column_stack([
            rng.uniform(0, 36, (50, 3)),
            rng.uniform(55, 85, 50),
            rng.integers(0, 2, 50),
            rng.uniform(6, 18, 50),
        ])
        return Normalizer().fit(features)

    def test_zero_weights_give_coin_flip(self):
        rng = np.random.default_rng(4)
        params = ScoringParams.init(rng)
        params.w.data[:] = 0.0
        out = scoring_stream_forward(
            ScoreTriple(20, 15, 14), Demographics(70, "female", 12),
            params, self._fitted_normalizer(rng))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_output_is_probability_pair(self):
        rng = np.random.default_rng(5)
        out = scoring_stream_forward(
            ScoreTriple(30, 25, 22), Demographics(65, "male", 16),
            ScoringParams.init(rng), self._fitted_normalizer(rng))
        assert out.shape == (2,)
        assert (out.data > 0).all()
        assert abs(out.data.sum() - 1.0) < 1e-9

    def test_matches_affine_softmax_oracle(self):
        rng = np.random.default_rng(6)
        params = ScoringParams.init(rng)
        norm = self._fitted_normalizer(rng)
        scores = ScoreTriple(28.0, 17.0, 15.0)
        demo = Demographics(73.0, "female", 10.0)
        z = norm.transform(raw_features(scores, demo))
        logits = params.w.data @ z + params.b.data
        e = np.exp(logits - logits.max())
        expected = e / e.sum()
        out = scoring_stream_forward(scores, demo, params, norm)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_unfitted_normalizer_is_state_error(self):
        rng = np.random.default_rng(7)
        with pytest.raises(StateError):
            scoring_stream_forward(
                ScoreTriple(20, 15, 14), Demographics(70, "female", 12),
                ScoringParams.init(rng), Normalizer())

    def test_features_receive_no_gradient(self):
        rng = np.random.default_rng(8)
        params = ScoringParams.init(rng)
        features = Tensor(rng.normal(size=(4, 6)))
        probs = scoring_stream_batch(features, params)
        backward(probs.clip(1e-7, 1 - 1e-7).log().sum() * -1.0)
        assert features.grad is None
        assert params.w.grad is not None
        assert params.b.grad is not None

    def test_feature_vector_layout(self):
        v = raw_features(ScoreTriple(1, 2, 3), Demographics(70, "female", 12))
        np.testing.assert_array_equal(v, [1, 2, 3, 70, 1, 12])
        assert len(FEATURE_NAMES) == 6

    def test_bad_feature_width_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(DimensionError):
            scoring_stream_batch(Tensor(np.zeros((2, 5))),
                                 ScoringParams.init(rng))
