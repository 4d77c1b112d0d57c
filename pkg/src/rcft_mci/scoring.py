"""Scoring stream: frozen per-image scorer, demographics, one FC layer.

The scorer assigns each drawing a score on the conventional 36-point scale.
It is a fixed component — training never updates it — matching the role of
a previously trained scoring model. Two implementations are provided:

* ``FileBackedScorer`` returns precomputed scores looked up by subject id
  (the usual path: scores ship in the cohort manifest).
* ``StubScorer`` estimates a score from the ink fraction of the
  preprocessed image; it exists so the pipeline runs on bare images.

The stream's trainable part is a single 6->2 fully connected layer over
(three z-scored scores, z-scored age, female indicator, z-scored years of
education), followed by a softmax. Normalization statistics must come from
the training split only; the normalizer records which split fitted it so
leakage is auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .autograd import Tensor, he_normal, matmul, softmax, zeros
from .backbone import CONDITIONS
from .errors import DataError, DimensionError, StateError

SCORE_MAX = 36.0

FEATURE_NAMES = ("score_copy", "score_immediate", "score_delayed",
                 "age", "sex_female", "education")
# all features except the sex indicator are z-scored
CONTINUOUS_FEATURES = (0, 1, 2, 3, 5)


@dataclass(frozen=True)
class ScoreTriple:
    copy: float
    immediate: float
    delayed: float

    def __post_init__(self) -> None:
        for condition, value in zip(CONDITIONS, self.as_tuple()):
            if not np.isfinite(value):
                raise DataError(f"{condition} score is not finite: {value!r}")
            if not 0.0 <= value <= SCORE_MAX:
                raise DataError(
                    f"{condition} score {value} outside [0, {SCORE_MAX:g}]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.copy, self.immediate, self.delayed)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


@dataclass(frozen=True)
class Demographics:
    age: float
    sex: str
    education: float

    def __post_init__(self) -> None:
        if self.sex not in ("female", "male"):
            raise DataError(f"sex must be 'female' or 'male', got {self.sex!r}")
        if not 40.0 <= self.age <= 120.0:
            raise DataError(f"age {self.age} outside [40, 120]")
        if not 0.0 <= self.education <= 30.0:
            raise DataError(f"education {self.education} outside [0, 30] years")

    @property
    def sex_indicator(self) -> float:
        return 1.0 if self.sex == "female" else 0.0


# --- scorers ---

class Scorer:
    """Fixed mapping from a subject's three drawings to a ScoreTriple."""

    def score(self, images: Mapping[str, Tensor],
              subject_id: str | None = None) -> ScoreTriple:
        raise NotImplementedError

    def state_bytes(self) -> bytes:
        """Canonical serialization of everything the scorer's output depends
        on; used to verify the scorer stayed untouched across training."""
        raise NotImplementedError


def _require_images(images: Mapping[str, Tensor]) -> None:
    for condition in CONDITIONS:
        if condition not in images:
            raise DataError(f"missing {condition} image")


class FileBackedScorer(Scorer):
    """Returns precomputed scores verbatim, looked up by subject id."""

    def __init__(self, scores_by_subject: Mapping[str, ScoreTriple]):
        self._scores = dict(scores_by_subject)

    def score(self, images: Mapping[str, Tensor],
              subject_id: str | None = None) -> ScoreTriple:
        _require_images(images)
        if subject_id is None:
            raise DataError("file-backed scorer needs a subject id to look up")
        if subject_id not in self._scores:
            raise DataError(f"no precomputed scores for subject {subject_id!r}")
        return self._scores[subject_id]

    def state_bytes(self) -> bytes:
        parts = []
        for subject_id in sorted(self._scores):
            triple = self._scores[subject_id]
            parts.append(subject_id.encode())
            parts.append(triple.as_array().tobytes())
        return b"\x00".join(parts)


class StubScorer(Scorer):
    """Heuristic scorer: score rises monotonically with ink coverage.

    A preprocessed image has ink near 1 on a 0 background, so its mean
    intensity is the ink fraction. ``full_scale_ink`` is the fraction at
    which the score saturates at 36.
    """

    def __init__(self, full_scale_ink: float = 0.25):
        if full_scale_ink <= 0:
            raise DataError(f"full_scale_ink must be positive, got {full_scale_ink}")
        self.full_scale_ink = float(full_scale_ink)

    def score(self, images: Mapping[str, Tensor],
              subject_id: str | None = None) -> ScoreTriple:
        _require_images(images)
        values = []
        for condition in CONDITIONS:
            ink = float(np.mean(images[condition].data))
            values.append(SCORE_MAX * min(1.0, max(0.0, ink / self.full_scale_ink)))
        return ScoreTriple(*values)

    def state_bytes(self) -> bytes:
        return np.float64(self.full_scale_ink).tobytes()


def score_images(scorer: Scorer, images: Mapping[str, Tensor],
                 subject_id: str | None = None) -> ScoreTriple:
    """Apply a scorer to one subject's three preprocessed drawings."""
    return scorer.score(images, subject_id=subject_id)


def assert_frozen(before: bytes, after: bytes) -> bool:
    """True iff two serialized scorer states are bitwise identical."""
    return bytes(before) == bytes(after)


# --- feature normalization ---

class Normalizer:
    """Column z-scorer for the 6-feature vector; sex indicator passes through.

    ``fit`` must be called with training-split features. The split name is
    recorded so a fit on anything else is visible afterwards via
    ``fitted_on_training_split``.
    """

    def __init__(self, continuous: tuple[int, ...] = CONTINUOUS_FEATURES):
        self.continuous = tuple(continuous)
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None
        self.fitted_split: str | None = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    @property
    def fitted_on_training_split(self) -> bool:
        return self.fitted_split == "train"

    def fit(self, features: np.ndarray, split: str = "train") -> "Normalizer":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise DataError(
                f"normalizer needs at least 2 feature rows, got shape {features.shape}")
        cols = list(self.continuous)
        self.mean = features[:, cols].mean(axis=0)
        std = features[:, cols].std(axis=0)
        # constant columns pass through unshifted in scale
        std[std == 0.0] = 1.0
        self.std = std
        self.fitted_split = split
        return self

    def transform(self, features: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError("normalizer is unfitted; fit on the training split first")
        features = np.asarray(features, dtype=np.float64)
        single = features.ndim == 1
        if single:
            features = features[None, :]
        out = features.copy()
        cols = list(self.continuous)
        out[:, cols] = (out[:, cols] - self.mean) / self.std
        return out[0] if single else out

    def state_arrays(self) -> dict[str, np.ndarray]:
        if not self.fitted:
            raise StateError("normalizer is unfitted")
        return {"mean": self.mean.copy(), "std": self.std.copy()}

    def load_state(self, mean: np.ndarray, std: np.ndarray,
                   split: str = "train") -> "Normalizer":
        self.mean = np.asarray(mean, dtype=np.float64).copy()
        self.std = np.asarray(std, dtype=np.float64).copy()
        self.fitted_split = split
        return self


def raw_features(scores: ScoreTriple, demo: Demographics) -> np.ndarray:
    """Unnormalized 6-vector in FEATURE_NAMES order."""
    return np.array([scores.copy, scores.immediate, scores.delayed,
                     demo.age, demo.sex_indicator, demo.education],
                    dtype=np.float64)


# --- the trainable FC layer ---

@dataclass
class ScoringParams:
    """Single fully connected layer mapping 6 features to 2 logits."""

    w: Tensor  # (2, 6)
    b: Tensor  # (2,)

    @classmethod
    def init(cls, rng: np.random.Generator, dtype=np.float64) -> "ScoringParams":
        return cls(
            w=he_normal(rng, (2, len(FEATURE_NAMES)),
                        fan_in=len(FEATURE_NAMES), dtype=dtype),
            b=zeros((2,), dtype=dtype, requires_grad=True),
        )

    def named_tensors(self, prefix: str = "scoring_head") -> Iterator[tuple[str, Tensor]]:
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


def scoring_stream_batch(features: Tensor, params: ScoringParams) -> Tensor:
    """Class probabilities for a batch of normalized feature rows (N x 6)."""
    if features.ndim != 2 or features.shape[1] != len(FEATURE_NAMES):
        raise DimensionError(
            f"expected N x {len(FEATURE_NAMES)} features, got shape {features.shape}")
    logits = matmul(features, params.w.transpose()) + params.b
    return softmax(logits, axis=-1)


def scoring_stream_forward(scores: ScoreTriple, demo: Demographics,
                           params: ScoringParams,
                           normalizer: Normalizer) -> Tensor:
    """[p_CN, p_MCI] for one subject's scores and demographics."""
    normalized = normalizer.transform(raw_features(scores, demo))
    features = Tensor(normalized[None, :].astype(params.w.dtype))
    return scoring_stream_batch(features, params)[0]
