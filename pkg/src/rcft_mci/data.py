"""Cohort manifests, deterministic image preprocessing, synthetic data.

The manifest is a CSV, one row per subject, carrying demographics, the
class label, optional expert and AI score triples, and relative paths to
the three drawing images. An optional leading comment line stores
provenance (generator parameters, format version) as JSON.

The synthetic generator builds a desk-scale stand-in for a clinical RCFT
cohort. Each subject gets a latent impairment level (label-shifted
normal). A fixed 18-element template figure is degraded by removing
elements — more of them for the recall conditions than for direct copying
— and the expert score is 2 points per intact element, echoing the
36-point convention. AI scores add bounded observation noise. A
configurable number of gross scoring errors (discrepancy strictly greater
than 10 points) is planted in the expert column, and a corrections file
restoring the true values for most of them is emitted alongside, so the
quality-control loop can be exercised end to end. Independently of the
score signal, drawing stroke jitter ("tremor") carries a second,
texture-only class signal that scores cannot see.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .autograd import Tensor
from .backbone import CONDITIONS
from .errors import ConfigError, DataError, FormatError
from .scoring import Demographics, ScoreTriple

MANIFEST_VERSION = "cohort-manifest v1"
MANIFEST_COLUMNS = (
    "subject_id", "age", "sex", "education", "mmse", "cdr", "label",
    "expert_copy", "expert_imm", "expert_del",
    "ai_copy", "ai_imm", "ai_del",
    "img_copy", "img_imm", "img_del",
)
_SCORE_COLS = {"expert": ("expert_copy", "expert_imm", "expert_del"),
               "ai": ("ai_copy", "ai_imm", "ai_del")}
_IMG_COLS = ("img_copy", "img_imm", "img_del")


@dataclass
class SubjectRecord:
    subject_id: str
    age: float
    sex: str
    education: float
    mmse: float | None
    cdr: float | None
    label: str
    expert_scores: ScoreTriple | None
    ai_scores: ScoreTriple | None
    image_paths: dict[str, str]

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise DataError("subject_id must be non-empty")
        if self.label not in ("CN", "MCI"):
            raise DataError(
                f"subject {self.subject_id}: label must be CN or MCI, "
                f"got {self.label!r}")
        if self.cdr is not None:
            if self.cdr not in (0.0, 0.5):
                raise DataError(
                    f"subject {self.subject_id}: cdr must be 0 or 0.5, "
                    f"got {self.cdr}")
            implied = "CN" if self.cdr == 0.0 else "MCI"
            if implied != self.label:
                raise DataError(
                    f"subject {self.subject_id}: cdr {self.cdr} implies "
                    f"{implied} but label is {self.label}")
        if self.mmse is not None and not 0.0 <= self.mmse <= 30.0:
            raise DataError(
                f"subject {self.subject_id}: mmse {self.mmse} outside [0, 30]")
        missing = [c for c in CONDITIONS if not self.image_paths.get(c)]
        if missing:
            raise DataError(
                f"subject {self.subject_id}: missing image path for "
                f"{', '.join(missing)}")
        # validates age/sex/education ranges
        self.demographics()

    def demographics(self) -> Demographics:
        return Demographics(age=self.age, sex=self.sex, education=self.education)

    @property
    def label_int(self) -> int:
        return 1 if self.label == "MCI" else 0


@dataclass
class CohortManifest:
    records: list[SubjectRecord]
    provenance: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for r in self.records:
            if r.subject_id in seen:
                raise DataError(f"duplicate subject_id {r.subject_id!r}")
            seen.add(r.subject_id)

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label_int for r in self.records], dtype=np.int64)

    def image_path(self, record: SubjectRecord, condition: str) -> str:
        return os.path.join(self.base_dir, record.image_paths[condition])


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(
            f"row {row}: column {column} has non-numeric value {text!r}")


def _parse_optional(text: str, row: int, column: str) -> float | None:
    return None if text == "" else _parse_float(text, row, column)


def _parse_triple(row_values: dict[str, str], cols: tuple[str, str, str],
                  row: int) -> ScoreTriple | None:
    texts = [row_values[c] for c in cols]
    if all(t == "" for t in texts):
        return None
    if any(t == "" for t in texts):
        raise DataError(
            f"row {row}: score triple {cols} must be all present or all empty")
    values = [_parse_float(t, row, c) for t, c in zip(texts, cols)]
    try:
        return ScoreTriple(*values)
    except DataError as exc:
        raise DataError(f"row {row}: {exc}") from exc


def load_manifest(path: str, require_images: bool = True) -> CohortManifest:
    """Read and validate a cohort manifest CSV.

    Every violation is reported with its 1-based data row number. Image
    paths are resolved relative to the manifest's directory and must exist
    unless ``require_images`` is disabled.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", newline="") as fh:
            first = fh.readline()
            provenance: dict = {}
            if first.startswith("#"):
                header_line = first[1:].strip()
                if header_line.startswith(MANIFEST_VERSION):
                    payload = header_line[len(MANIFEST_VERSION):].strip()
                    if payload:
                        provenance = json.loads(payload)
                else:
                    raise FormatError(
                        f"unrecognized manifest header comment: {header_line!r}")
            else:
                fh.seek(0)
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise FormatError("manifest has no header row")
            if tuple(reader.fieldnames) != MANIFEST_COLUMNS:
                raise FormatError(
                    f"manifest columns {reader.fieldnames} do not match the "
                    f"expected header {list(MANIFEST_COLUMNS)}")
            records = []
            for i, row in enumerate(reader, start=1):
                if None in row or any(v is None for v in row.values()):
                    raise DataError(f"row {i}: wrong number of fields")
                try:
                    record = SubjectRecord(
                        subject_id=row["subject_id"],
                        age=_parse_float(row["age"], i, "age"),
                        sex=row["sex"],
                        education=_parse_float(row["education"], i, "education"),
                        mmse=_parse_optional(row["mmse"], i, "mmse"),
                        cdr=_parse_optional(row["cdr"], i, "cdr"),
                        label=row["label"],
                        expert_scores=_parse_triple(row, _SCORE_COLS["expert"], i),
                        ai_scores=_parse_triple(row, _SCORE_COLS["ai"], i),
                        image_paths=dict(zip(CONDITIONS,
                                             (row[c] for c in _IMG_COLS))),
                    )
                except DataError as exc:
                    if str(exc).startswith("row "):
                        raise
                    raise DataError(f"row {i}: {exc}") from exc
                records.append(record)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    manifest = CohortManifest(records, provenance, base_dir)
    if require_images:
        for i, record in enumerate(manifest.records, start=1):
            for condition in CONDITIONS:
                img = manifest.image_path(record, condition)
                if not os.path.isfile(img):
                    raise DataError(
                        f"row {i}: {condition} image not found: {img}")
    return manifest


def save_manifest(manifest: CohortManifest, path: str) -> None:
    """Write a manifest CSV (with provenance comment) that loads back losslessly."""
    with open(path, "w", newline="") as fh:
        header = MANIFEST_VERSION
        if manifest.provenance:
            header += " " + json.dumps(manifest.provenance, sort_keys=True)
        fh.write(f"# {header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            expert = r.expert_scores.as_tuple() if r.expert_scores else ("",) * 3
            ai = r.ai_scores.as_tuple() if r.ai_scores else ("",) * 3
            writer.writerow([
                r.subject_id, _fmt(r.age), r.sex, _fmt(r.education),
                _fmt(r.mmse), _fmt(r.cdr), r.label,
                *("" if v == "" else _fmt(v) for v in expert),
                *("" if v == "" else _fmt(v) for v in ai),
                *(r.image_paths[c] for c in CONDITIONS),
            ])


# --- image preprocessing ---

def load_image(path: str) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc


def preprocess_image(image, target_size: int = 64) -> Tensor:
    """Normalize a raster drawing into a 1 x S x S tensor with ink near 1.

    Steps: grayscale (luma), scale to [0, 1], invert when the picture is
    brighter than mid-gray on average (dark-ink-on-paper input; an already
    ink-positive image passes through), aspect-preserving bilinear resize
    so the longer side equals ``target_size``, then symmetric zero padding
    (extra pixel to the bottom/right). Idempotent on its own output.
    """
    if target_size < 1:
        raise ConfigError(f"target_size must be positive, got {target_size}")
    if isinstance(image, Tensor):
        arr = image.data
    elif isinstance(image, Image.Image):
        arr = np.asarray(image.convert("L"), dtype=np.float64) / 255.0
    else:
        arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114])
    if arr.ndim != 2:
        raise FormatError(
            f"expected a grayscale or RGB raster image, got shape {arr.shape}")
    if arr.size == 0:
        raise FormatError("image has no pixels")
    arr = np.clip(arr, 0.0, 1.0)
    if arr.mean() > 0.5:
        arr = 1.0 - arr
    h, w = arr.shape
    if (h, w) != (target_size, target_size):
        scale = target_size / max(h, w)
        new_h = max(1, round(h * scale))
        new_w = max(1, round(w * scale))
        resized = Image.fromarray(arr.astype(np.float32), mode="F").resize(
            (new_w, new_h), Image.BILINEAR)
        arr = np.asarray(resized, dtype=np.float64)
        pad_top = (target_size - new_h) // 2
        pad_left = (target_size - new_w) // 2
        canvas = np.zeros((target_size, target_size), dtype=np.float64)
        canvas[pad_top:pad_top + new_h, pad_left:pad_left + new_w] = arr
        arr = canvas
    arr = np.clip(arr, 0.0, 1.0)
    return Tensor(arr[None, :, :])


def load_subject_images(manifest: CohortManifest, record: SubjectRecord,
                        target_size: int) -> dict[str, Tensor]:
    """The three preprocessed drawings of one subject, keyed by condition."""
    return {c: preprocess_image(load_image(manifest.image_path(record, c)),
                                target_size)
            for c in CONDITIONS}


def preprocess_cohort(manifest: CohortManifest, target_size: int,
                      dtype=np.float32) -> np.ndarray:
    """All drawings as one (n, 3, S, S) array in manifest record order."""
    out = np.empty((len(manifest), 3, target_size, target_size), dtype=dtype)
    for i, record in enumerate(manifest.records):
        for j, condition in enumerate(CONDITIONS):
            image = preprocess_image(
                load_image(manifest.image_path(record, condition)), target_size)
            out[i, j] = image.data.astype(dtype)[0]
    return out


# --- the template figure ---

# 18 elements in normalized [0,1]^2 coordinates (y grows downward). Each is
# ("lines", segments), ("poly", closed point loop) or ("dots", centers,
# radius). Worth 2 points each on the 36-point scale.
_TEMPLATE_ELEMENTS = (
    ("poly", ((0.18, 0.25), (0.68, 0.25), (0.68, 0.75), (0.18, 0.75))),
    ("lines", (((0.18, 0.50), (0.68, 0.50)),)),
    ("lines", (((0.43, 0.25), (0.43, 0.75)),)),
    ("lines", (((0.18, 0.25), (0.68, 0.75)),)),
    ("lines", (((0.18, 0.75), (0.68, 0.25)),)),
    ("lines", (((0.68, 0.25), (0.86, 0.50)), ((0.86, 0.50), (0.68, 0.75)))),
    ("lines", (((0.06, 0.42), (0.14, 0.42)), ((0.10, 0.36), (0.10, 0.48)))),
    ("lines", (((0.10, 0.58), (0.18, 0.58)), ((0.10, 0.58), (0.10, 0.66)))),
    ("poly", tuple(
        (0.305 + 0.045 * np.cos(a), 0.375 + 0.045 * np.sin(a))
        for a in np.linspace(0.0, 2.0 * np.pi, 13)[:-1])),
    ("dots", ((0.27, 0.60), (0.31, 0.645), (0.35, 0.60)), 0.009),
    ("lines", (((0.25, 0.82), (0.61, 0.82)),)),
    ("lines", (((0.43, 0.75), (0.43, 0.82)),)),
    ("poly", ((0.55, 0.62), (0.63, 0.62), (0.63, 0.70), (0.55, 0.70))),
    ("lines", (((0.55, 0.30), (0.63, 0.38)),)),
    ("lines", (((0.22, 0.17), (0.30, 0.12)), ((0.30, 0.12), (0.38, 0.17)),
               ((0.38, 0.17), (0.46, 0.12)))),
    ("lines", (((0.56, 0.16), (0.56, 0.25)),)),
    ("lines", (((0.68, 0.50), (0.78, 0.50)),)),
    ("lines", (((0.30, 0.88), (0.36, 0.94)), ((0.36, 0.94), (0.42, 0.88)))),
)

TEMPLATE_ELEMENT_COUNT = len(_TEMPLATE_ELEMENTS)
POINTS_PER_ELEMENT = 2


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the synthetic cohort generator.

    ``impairment_shift`` moves the MCI latent; ``condition_offsets`` and
    ``condition_gains`` set how many elements are lost per condition at
    latent 0 and per unit latent; ``removal_noise_sd`` blurs that count;
    ``ai_noise_sd`` is the AI scorer's observation noise (truncated so
    clean expert-AI differences stay below the 10-point flag line);
    ``gross_error_count`` expert scores are corrupted by more than 10
    points, ``corrected_count`` of which get corrections emitted.
    ``tremor_shift``/``tremor_gain`` control the texture-only stroke
    jitter signal.
    """

    image_size: int = 256
    impairment_shift: float = 1.6
    condition_offsets: tuple[float, float, float] = (1.0, 7.5, 7.7)
    condition_gains: tuple[float, float, float] = (0.9, 2.2, 2.3)
    removal_noise_sd: float = 0.8
    ai_noise_sd: float = 2.0
    gross_error_count: int = 30
    corrected_count: int = 26
    tremor_shift: float = 1.8
    tremor_gain: float = 0.55
    female_fraction: float = 0.55

    def __post_init__(self) -> None:
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.ai_noise_sd <= 0:
            raise ConfigError("ai_noise_sd must be positive")
        if self.gross_error_count < 0 or self.corrected_count < 0:
            raise ConfigError("error counts must be non-negative")
        if self.corrected_count > self.gross_error_count:
            raise ConfigError(
                f"cannot correct {self.corrected_count} of only "
                f"{self.gross_error_count} gross errors")
        if not 0.0 < self.female_fraction < 1.0:
            raise ConfigError("female_fraction must be in (0, 1)")


def _jittered(rng: np.random.Generator, p, scale: float, jitter_px: float):
    x = p[0] * scale + rng.normal(0.0, jitter_px)
    y = p[1] * scale + rng.normal(0.0, jitter_px)
    return (x, y)


def _draw_segment(draw: ImageDraw.ImageDraw, rng: np.random.Generator,
                  a, b, scale: float, jitter_px: float, width: int) -> None:
    # a midpoint displacement makes jitter visible as stroke wobble,
    # not just as misplacement
    pa = _jittered(rng, a, scale, jitter_px)
    pb = _jittered(rng, b, scale, jitter_px)
    mid = ((pa[0] + pb[0]) / 2 + rng.normal(0.0, jitter_px),
           (pa[1] + pb[1]) / 2 + rng.normal(0.0, jitter_px))
    draw.line([pa, mid], fill=0, width=width)
    draw.line([mid, pb], fill=0, width=width)


def render_drawing(rng: np.random.Generator, kept_elements: np.ndarray,
                   size: int, jitter_px: float) -> Image.Image:
    """Draw the template's kept elements with the given stroke jitter.

    Renders at double resolution and downsamples, so strokes get soft
    grayscale edges. Ink is dark on a white page, like a scanned drawing.
    """
    scale = size * 2
    width = max(2, scale // 128)
    img = Image.new("L", (scale, scale), 255)
    draw = ImageDraw.Draw(img)
    for index in kept_elements:
        kind = _TEMPLATE_ELEMENTS[index][0]
        if kind == "lines":
            for a, b in _TEMPLATE_ELEMENTS[index][1]:
                _draw_segment(draw, rng, a, b, scale, jitter_px, width)
        elif kind == "poly":
            pts = _TEMPLATE_ELEMENTS[index][1]
            for i in range(len(pts)):
                _draw_segment(draw, rng, pts[i], pts[(i + 1) % len(pts)],
                              scale, jitter_px, width)
        else:
            _, centers, radius = _TEMPLATE_ELEMENTS[index]
            r = radius * scale
            for c in centers:
                cx, cy = _jittered(rng, c, scale, jitter_px)
                draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=0)
    return img.resize((size, size), Image.BILINEAR)


def _even_floor(value: float) -> float:
    return float(2.0 * np.floor(value / 2.0))


def _even_ceil(value: float) -> float:
    return float(2.0 * np.ceil(value / 2.0))


def generate_synthetic_cohort(n: int, seed: int, out_dir: str,
                              params: GeneratorParams | None = None
                              ) -> CohortManifest:
    """Write a synthetic cohort (manifest, images, QC fixtures) to ``out_dir``.

    Deterministic per (n, seed, params): repeated runs produce
    byte-identical files. Labels are balanced (first half CN, second half
    MCI, order then fixed by the manifest). Besides ``manifest.csv`` and
    ``images/``, writes ``scores.csv`` (per-image expert/AI pairs in QC
    input format) and ``corrections.csv`` (the re-examined true scores for
    most planted gross errors).
    """
    if params is None:
        params = GeneratorParams()
    if n < 20:
        raise ConfigError(f"cohort size must be >= 20, got {n}")
    if params.gross_error_count > 3 * n:
        raise ConfigError(
            f"cannot plant {params.gross_error_count} gross errors in "
            f"{3 * n} image scores")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)

    n_mci = n // 2
    labels = ["CN"] * (n - n_mci) + ["MCI"] * n_mci

    # noise truncation keeps every clean |expert - AI| difference below the
    # 10-point flag threshold, so planted errors are exactly the flags
    noise_cap = min(4.0 * params.ai_noise_sd, 9.5)

    records: list[SubjectRecord] = []
    true_scores: dict[str, float] = {}
    score_rows: list[tuple[str, str, float, float]] = []
    for i, label in enumerate(labels):
        subject_id = f"s{i:04d}"
        is_mci = label == "MCI"
        z = rng.normal(params.impairment_shift if is_mci else 0.0, 1.0)
        tremor = rng.normal(params.tremor_shift if is_mci else 0.0, 1.0)
        jitter_px = 1.3 * np.exp(params.tremor_gain * np.tanh(tremor))

        age = float(np.clip(round(rng.normal(73.0 if is_mci else 71.0, 6.0), 1),
                            55.0, 90.0))
        sex = "female" if rng.random() < params.female_fraction else "male"
        education = float(np.clip(round(rng.normal(12.0, 4.0)), 6, 20))
        mmse = float(np.clip(round(rng.normal(24.9 if is_mci else 27.3, 1.8)),
                             0, 30))
        cdr = 0.5 if is_mci else 0.0

        expert: list[float] = []
        ai: list[float] = []
        image_paths: dict[str, str] = {}
        for j, condition in enumerate(CONDITIONS):
            lost = params.condition_offsets[j] + params.condition_gains[j] * z \
                + rng.normal(0.0, params.removal_noise_sd)
            lost = int(np.clip(round(lost), 0, TEMPLATE_ELEMENT_COUNT))
            order = rng.permutation(TEMPLATE_ELEMENT_COUNT)
            kept = np.sort(order[lost:])
            expert_score = float(POINTS_PER_ELEMENT * len(kept))
            noise = float(np.clip(rng.normal(0.0, params.ai_noise_sd),
                                  -noise_cap, noise_cap))
            ai_score = float(np.clip(round(expert_score + noise, 1), 0.0, 36.0))
            expert.append(expert_score)
            ai.append(ai_score)
            filename = f"{subject_id}_{condition}.png"
            render_drawing(rng, kept, params.image_size, jitter_px).save(
                os.path.join(images_dir, filename))
            image_paths[condition] = os.path.join("images", filename)
            true_scores[f"{subject_id}_{condition}"] = expert_score

        records.append(SubjectRecord(
            subject_id=subject_id, age=age, sex=sex, education=education,
            mmse=mmse, cdr=cdr, label=label,
            expert_scores=ScoreTriple(*expert), ai_scores=ScoreTriple(*ai),
            image_paths=image_paths))

    # plant gross expert-scoring errors: displace the recorded expert score
    # at least 12 points away from the AI score (even, in range), so the
    # discrepancy survives rounding and exceeds the 10-point line for sure
    flat_ids = [f"{r.subject_id}_{c}" for r in records for c in CONDITIONS]
    picked = rng.choice(len(flat_ids), size=params.gross_error_count,
                        replace=False)
    corrupted: dict[str, float] = {}
    for k in sorted(picked):
        image_id = flat_ids[k]
        record = records[k // 3]
        condition = CONDITIONS[k % 3]
        ai_score = getattr(record.ai_scores, condition)
        d = float(rng.integers(12, 21))
        if ai_score >= 18.0:
            bad = _even_floor(max(0.0, ai_score - d))
        else:
            bad = min(36.0, _even_ceil(min(36.0, ai_score + d)))
        corrupted[image_id] = bad
        triple = list(record.expert_scores.as_tuple())
        triple[k % 3] = bad
        record.expert_scores = ScoreTriple(*triple)

    for record in records:
        for condition in CONDITIONS:
            image_id = f"{record.subject_id}_{condition}"
            score_rows.append((image_id, condition,
                               getattr(record.expert_scores, condition),
                               getattr(record.ai_scores, condition)))

    corrected_ids = sorted(corrupted)[:]
    rng.shuffle(corrected_ids)
    corrected_ids = sorted(corrected_ids[:params.corrected_count])

    provenance = {
        "generator": {"n": n, "seed": seed,
                      **{k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(params).items()}},
    }
    manifest = CohortManifest(records, provenance, out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))

    with open(os.path.join(out_dir, "scores.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "condition", "expert_score", "ai_score"])
        for image_id, condition, expert_score, ai_score in score_rows:
            writer.writerow([image_id, condition, repr(expert_score),
                             repr(ai_score)])

    with open(os.path.join(out_dir, "corrections.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "corrected_score", "note"])
        for image_id in corrected_ids:
            writer.writerow([image_id, repr(true_scores[image_id]),
                             "re-examined"])

    return manifest
