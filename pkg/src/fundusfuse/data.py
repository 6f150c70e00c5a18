"""Manifests, synthetic notes, structured-feature preprocessing, patient splits and image handling."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import (
    DecodeError,
    EmptySplit,
    InvalidRatios,
    MissingFile,
    SchemaError,
    UnknownLabel,
)

LOGGER = logging.getLogger(__name__)

BASE_COLUMNS = (
    "patient_id", "image_path", "age", "sex", "exam_eye", "diabetes_duration",
    "insulin_use", "diabetes_diagnosis", "sdrg_grade", "icdr_grade",
)
STRUCTURED_FIELDS = ("age", "sex", "exam_eye", "diabetes_duration", "insulin_use", "diabetes_diagnosis")
CONTINUOUS_FIELDS = ("age", "diabetes_duration")
CATEGORIES = {
    "sex": ("male", "female"),
    "exam_eye": ("left", "right"),
    "insulin_use": (False, True),
    "diabetes_diagnosis": (False, True),
}
NEGATIVE_NOTE = "No abnormal findings are present."
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SPLITS = ("train", "val", "test")


@dataclass
class SampleRecord:
    patient_id: str
    image_path: str
    sdrg_grade: int
    icdr_grade: int
    age: float | None = None
    sex: str | None = None
    exam_eye: str | None = None
    diabetes_duration: float | None = None
    insulin_use: bool | None = None
    diabetes_diagnosis: bool | None = None
    disease_labels: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.patient_id:
            raise SchemaError("empty patient_id")
        for name in ("sdrg_grade", "icdr_grade"):
            if not 0 <= getattr(self, name) <= 4:
                raise SchemaError(f"{name} out of range 0-4", column=name)


# -- manifest ---------------------------------------------------------------

def _parse_float(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def _parse_bool(text: str) -> bool | None:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "y"):
        return True
    if lowered in ("0", "false", "no", "n"):
        return False
    return None


def _parse_choice(text: str, choices: Sequence[str]) -> str | None:
    lowered = text.strip().lower()
    if lowered in choices:
        return lowered
    short = {c[0]: c for c in choices}
    return short.get(lowered)


def _parse_grade(text: str, lineno: int, column: str) -> int:
    try:
        grade = int(text)
    except ValueError:
        raise SchemaError(f"invalid grade {text!r}", row=lineno, column=column) from None
    if not 0 <= grade <= 4:
        raise SchemaError(f"grade {grade} outside 0-4", row=lineno, column=column)
    return grade


def load_manifest(path) -> list[SampleRecord]:
    """Parse a manifest CSV into records.

    Image paths are resolved relative to the manifest directory. Unparseable
    optional cells become ``None``; a missing id, image or grade rejects the
    whole file with a :class:`SchemaError` naming row and column.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty manifest", row=1) from None
        header = [h.strip() for h in header]
        if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
            for i, name in enumerate(BASE_COLUMNS):
                if i >= len(header) or header[i] != name:
                    raise SchemaError(f"expected header column {name!r}", row=1, column=name)
        label_columns = header[len(BASE_COLUMNS):]
        for col in label_columns:
            if not col.startswith("label:") or len(col) == len("label:"):
                raise SchemaError("label columns must be named label:<name>", row=1, column=col)
        labels = [c[len("label:"):] for c in label_columns]
        if len(set(labels)) != len(labels):
            raise SchemaError("duplicate label column", row=1)

        records = []
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} cells, got {len(row)}", row=lineno)
            cells = dict(zip(header, (c.strip() for c in row)))
            for required in ("patient_id", "image_path", "sdrg_grade", "icdr_grade"):
                if not cells[required]:
                    raise SchemaError("missing required value", row=lineno, column=required)
            disease = {}
            for name, col in zip(labels, label_columns):
                value = cells[col]
                if value == "":
                    disease[name] = False
                elif value in ("0", "1"):
                    disease[name] = value == "1"
                else:
                    raise SchemaError(f"label value must be 0/1, got {value!r}", row=lineno, column=col)
            image_path = Path(cells["image_path"])
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            records.append(SampleRecord(
                patient_id=cells["patient_id"],
                image_path=str(image_path),
                sdrg_grade=_parse_grade(cells["sdrg_grade"], lineno, "sdrg_grade"),
                icdr_grade=_parse_grade(cells["icdr_grade"], lineno, "icdr_grade"),
                age=_parse_float(cells["age"]),
                sex=_parse_choice(cells["sex"], CATEGORIES["sex"]),
                exam_eye=_parse_choice(cells["exam_eye"], CATEGORIES["exam_eye"]),
                diabetes_duration=_parse_float(cells["diabetes_duration"]),
                insulin_use=_parse_bool(cells["insulin_use"]),
                diabetes_diagnosis=_parse_bool(cells["diabetes_diagnosis"]),
                disease_labels=disease,
            ))
    return records


def write_manifest(path, records: Sequence[SampleRecord], labels: Sequence[str]) -> None:
    path = Path(path)

    def fmt(value):
        if value is None:
            return ""
        if isinstance(value, bool):
            return "1" if value else "0"
        return str(value)

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(BASE_COLUMNS) + [f"label:{name}" for name in labels])
        for r in records:
            image_path = Path(r.image_path)
            try:
                image_path = image_path.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([
                r.patient_id, image_path.as_posix(), fmt(r.age), fmt(r.sex), fmt(r.exam_eye),
                fmt(r.diabetes_duration), fmt(r.insulin_use), fmt(r.diabetes_diagnosis),
                r.sdrg_grade, r.icdr_grade,
            ] + [fmt(bool(r.disease_labels.get(name, False))) for name in labels])


def label_order(records: Sequence[SampleRecord]) -> list[str]:
    return list(records[0].disease_labels) if records else []


def load_templates(path) -> dict[str, str]:
    """Read the two-column ``label,sentence`` table; order of rows is preserved."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"template table not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["label", "sentence"]:
            raise SchemaError("template header must be label,sentence", row=1)
        table = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0].strip():
                raise SchemaError("expected label,sentence", row=lineno)
            table[row[0].strip()] = row[1].strip()
    return table


def write_templates(path, table: dict[str, str]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "sentence"])
        writer.writerows(table.items())


# -- notes ------------------------------------------------------------------

def generate_clinical_note(disease_labels: dict[str, bool], template_table: dict[str, str],
                           order: Sequence[str] | None = None) -> str:
    """Join the template sentence of every present label, in label order."""
    if order is None:
        order = list(disease_labels)
    sentences = []
    for name in order:
        if not disease_labels.get(name, False):
            continue
        if name not in template_table:
            raise UnknownLabel(f"no template sentence for label {name!r}")
        sentences.append(template_table[name])
    return " ".join(sentences) if sentences else NEGATIVE_NOTE


# -- structured features ----------------------------------------------------

class DegenerateFieldWarning(UserWarning):
    pass


@dataclass
class StructuredStats:
    mean: dict[str, float]
    std: dict[str, float]
    median: dict[str, float]
    mode: dict[str, object]
    encoding: dict[str, dict]
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean, "std": self.std, "median": self.median,
            "mode": self.mode, "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StructuredStats":
        return cls(
            mean=dict(payload["mean"]), std=dict(payload["std"]), median=dict(payload["median"]),
            mode=dict(payload["mode"]), encoding=_encoding_tables(),
            degenerate=list(payload.get("degenerate", [])),
        )


def _encoding_tables() -> dict[str, dict]:
    return {name: {value: i for i, value in enumerate(values)} for name, values in CATEGORIES.items()}


def fit_structured_stats(train_records: Sequence[SampleRecord]) -> StructuredStats:
    """Fit standardisation and imputation statistics on training records.

    Standard deviations use the population convention (divide by N). A
    constant continuous field gets std 1 and a :class:`DegenerateFieldWarning`.
    """
    if not train_records:
        raise EmptySplit("cannot fit structured statistics on an empty training split")
    mean, std, median, mode, degenerate = {}, {}, {}, {}, []
    for name in CONTINUOUS_FIELDS:
        values = np.array([getattr(r, name) for r in train_records if getattr(r, name) is not None], float)
        if values.size == 0:
            mean[name], std[name], median[name] = 0.0, 1.0, 0.0
            degenerate.append(name)
            warnings.warn(f"{name} has no observed values; using mean 0, std 1", DegenerateFieldWarning)
            continue
        mean[name] = float(values.mean())
        median[name] = float(np.median(values))
        sd = float(values.std())
        if sd == 0.0:
            sd = 1.0
            degenerate.append(name)
            warnings.warn(f"{name} is constant in training data; std set to 1", DegenerateFieldWarning)
        std[name] = sd
    for name, choices in CATEGORIES.items():
        counts = Counter(getattr(r, name) for r in train_records if getattr(r, name) is not None)
        # ties resolve to the earliest declared category
        mode[name] = max(choices, key=lambda c: (counts.get(c, 0), -choices.index(c)))
    return StructuredStats(mean, std, median, mode, _encoding_tables(), degenerate)


def preprocess_structured(record: SampleRecord, stats: StructuredStats) -> np.ndarray:
    """Six-vector in order age, sex, exam_eye, diabetes_duration, insulin_use, diabetes_diagnosis."""
    out = np.empty(len(STRUCTURED_FIELDS), dtype=np.float32)
    for i, name in enumerate(STRUCTURED_FIELDS):
        value = getattr(record, name)
        if name in CONTINUOUS_FIELDS:
            if value is None:
                value = stats.median[name]
            out[i] = (value - stats.mean[name]) / stats.std[name]
        else:
            if value is None:
                value = stats.mode[name]
            out[i] = stats.encoding[name][value]
    return out


# -- patient split ----------------------------------------------------------

@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    ratios: tuple[float, float, float]
    seed: int

    def patients(self, split: str) -> set[str]:
        return {p for p, s in self.assignment.items() if s == split}

    def select(self, records: Iterable[SampleRecord], split: str) -> list[SampleRecord]:
        return [r for r in records if self.assignment[r.patient_id] == split]

    def counts(self) -> dict[str, int]:
        counts = Counter(self.assignment.values())
        return {s: counts.get(s, 0) for s in SPLITS}


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    quotas = [round(total * r, 9) for r in ratios]
    counts = [math.floor(q) for q in quotas]
    remainder = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def patient_split(records: Sequence[SampleRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Assign each patient to train/val/test so that no patient spans two splits."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    patients = sorted({r.patient_id for r in records})
    order = np.random.default_rng(seed).permutation(len(patients))
    counts = largest_remainder(len(patients), ratios)
    assignment, start = {}, 0
    for split, count in zip(SPLITS, counts):
        for idx in order[start:start + count]:
            assignment[patients[idx]] = split
        start += count
    return SplitAssignment(assignment, ratios, seed)


# -- images -----------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Decode a PNG/JPEG into an H x W x 3 uint8 array."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def resize_unit(image, side: int = 224) -> np.ndarray:
    """Bilinear resize (half-pixel centres, no antialiasing) to ``side`` and scale to [0, 1].

    Accepts H x W x 3 uint8 or float arrays; float input is assumed already in [0, 1].
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise DecodeError(f"expected H x W x 3 image, got shape {arr.shape}")
    arr = arr[:, :, :3]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.shape[:2] == (side, side):
        return np.clip(arr, 0.0, 1.0)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    t = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False, antialias=False)
    return np.clip(t[0].numpy().transpose(1, 2, 0), 0.0, 1.0)


def standardize(image01: np.ndarray) -> np.ndarray:
    """H x W x 3 in [0, 1] -> 3 x H x W standardised with ImageNet channel statistics."""
    mean = np.asarray(IMAGENET_MEAN, np.float32)
    std = np.asarray(IMAGENET_STD, np.float32)
    return ((image01 - mean) / std).transpose(2, 0, 1).astype(np.float32)


def preprocess_image(image, side: int = 224) -> np.ndarray:
    if isinstance(image, (str, Path)):
        image = read_image(image)
    return standardize(resize_unit(image, side))


def augment_image(image: np.ndarray, rng) -> np.ndarray:
    """Training-time augmentation of an H x W x 3 image in [0, 1].

    Draw order is fixed: horizontal flip, vertical flip, rotation angle,
    brightness factor, contrast factor. Only training pipelines call this.
    """
    out = np.asarray(image, dtype=np.float32)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1]
    angle = float(rng.uniform(-15.0, 15.0))
    brightness = float(rng.uniform(0.9, 1.1))
    contrast = float(rng.uniform(0.9, 1.1))
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * contrast + mean
    return np.clip(np.ascontiguousarray(out), 0.0, 1.0).astype(np.float32)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator so augmentation does not depend on loading order."""
    return np.random.default_rng([seed, epoch, index])
