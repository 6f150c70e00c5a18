"""Synthetic fundus-like dataset whose images, notes and structured fields all carry the labels.

Rendering rules (side ``S``):

* black background with a red-orange disc of radius 0.45 S (the "fundus");
* the green level of the whole disc encodes the severity grade:
  ``0.1 + 0.18 * grade``;
* each non-DR label owns a square marker in one quadrant, drawn in blue at 0.9
  when present;
* per-sample texture noise, streaks and a jittered red level make every image
  distinct. Rendering draws from its own per-exam generator, so the records are
  identical whether or not images are written.

:func:`detect_labels` inverts these rules and serves as the decoding oracle.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .data import SampleRecord, write_manifest, write_templates

LABELS = ("diabetic_retinopathy", "macular_edema", "hypertensive_retinopathy", "drusen", "hemorrhage")
TEMPLATES = {
    "diabetic_retinopathy": "Diabetic retinopathy is present.",
    "macular_edema": "Macular edema is present.",
    "hypertensive_retinopathy": "Hypertensive retinopathy is present.",
    "drusen": "Drusen are present.",
    "hemorrhage": "Retinal hemorrhage is present.",
}
MARKER_CENTRES = ((0.32, 0.32), (0.32, 0.68), (0.68, 0.32), (0.68, 0.68))  # (row, col) fractions
MARKER_HALF = 0.07
CENTRE_HALF = 0.08  # detector reads the grade inside this central square
MISSING_RATE = 0.05


def grade_level(grade: int) -> float:
    return 0.1 + 0.18 * grade


def render_image(grade: int, labels: dict[str, bool], rng: np.random.Generator, side: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    disc = (yy - 0.5) ** 2 + (xx - 0.5) ** 2 <= 0.45 ** 2
    img = np.zeros((side, side, 3), np.float32)
    texture = rng.normal(0.0, 0.04, size=(side, side)).astype(np.float32)
    img[..., 0] = (rng.uniform(0.5, 0.7) + texture) * disc
    img[..., 1] = grade_level(grade) * disc
    img[..., 2] = (0.05 + 0.5 * texture.clip(0)) * disc
    # a few random vessel-like bright streaks for per-sample identity
    for _ in range(3):
        r0, c0 = rng.uniform(0.2, 0.8, size=2)
        angle = rng.uniform(0, np.pi)
        dist = np.abs((yy - r0) * np.cos(angle) - (xx - c0) * np.sin(angle))
        img[..., 0] += 0.2 * ((dist < 0.015) & disc)
    for name, (r, c) in zip(LABELS[1:], MARKER_CENTRES):
        if labels.get(name):
            box = (np.abs(yy - r) <= MARKER_HALF) & (np.abs(xx - c) <= MARKER_HALF)
            img[..., 2][box] = 0.9
    return np.clip(img, 0.0, 1.0)


def detect_labels(image: np.ndarray) -> tuple[int, dict[str, bool]]:
    """Recover (grade, labels) from a rendered H x W x 3 image in [0, 1] or uint8."""
    img = np.asarray(image, np.float32)
    if img.max() > 1.0:
        img = img / 255.0
    side = img.shape[0]
    yy, xx = np.mgrid[0:side, 0:side] / side
    core = (np.abs(yy - 0.5) <= CENTRE_HALF) & (np.abs(xx - 0.5) <= CENTRE_HALF)
    step = grade_level(1) - grade_level(0)
    grade = int(np.clip(np.rint((img[..., 1][core].mean() - grade_level(0)) / step), 0, 4))
    labels = {"diabetic_retinopathy": grade > 0}
    for name, (r, c) in zip(LABELS[1:], MARKER_CENTRES):
        box = (np.abs(yy - r) <= MARKER_HALF / 2) & (np.abs(xx - c) <= MARKER_HALF / 2)
        labels[name] = bool(img[..., 2][box].mean() > 0.6)
    return grade, labels


def _maybe(rng, value):
    return None if rng.random() < MISSING_RATE else value


def generate_records(n_patients: int, seed: int, image_dir: Path | None = None, side: int = 64,
                     exams_per_patient: int = 1, prefix: str = "P") -> list[SampleRecord]:
    """Draw ``n_patients`` patients with 1..``exams_per_patient`` exams each; optionally write PNGs."""
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for p in range(n_patients):
        pid = f"{prefix}{seed}-{p:05d}"
        age = round(float(rng.uniform(30, 80)), 1)
        sex = str(rng.choice(["male", "female"]))
        n_exams = int(rng.integers(1, exams_per_patient + 1))
        base_grade = int(rng.integers(0, 5))
        for e in range(n_exams):
            grade = int(np.clip(base_grade + rng.integers(-1, 2), 0, 4)) if e else base_grade
            labels = {
                "diabetic_retinopathy": grade > 0,
                "macular_edema": bool(rng.random() < (0.6 if grade >= 3 else 0.2)),
                "hypertensive_retinopathy": bool(rng.random() < 0.3),
                "drusen": bool(rng.random() < 0.3),
                "hemorrhage": bool(rng.random() < (0.7 if grade >= 2 else 0.1)),
            }
            duration = round(float(max(0.0, 2.0 + 4.0 * grade + rng.normal(0, 1.0))), 1)
            insulin = bool(rng.random() < (0.8 if grade >= 3 else 0.2))
            diagnosis = True if grade > 0 else bool(rng.random() < 0.5)
            name = f"{pid}_{e}.png"
            image_path = str(image_dir / name) if image_dir is not None else name
            if image_dir is not None:
                img = render_image(grade, labels, np.random.default_rng([seed, p, e]), side)
                Image.fromarray((img * 255).round().astype(np.uint8)).save(image_path)
            records.append(SampleRecord(
                patient_id=pid, image_path=image_path, sdrg_grade=grade, icdr_grade=grade,
                age=_maybe(rng, age), sex=_maybe(rng, sex), exam_eye=["left", "right"][e % 2],
                diabetes_duration=_maybe(rng, duration), insulin_use=_maybe(rng, insulin),
                diabetes_diagnosis=_maybe(rng, diagnosis), disease_labels=labels,
            ))
    return records


def write_dataset(out_dir, n_patients: int, seed: int, side: int = 64, exams_per_patient: int = 2,
                  write_config: bool = True) -> Path:
    """Write manifest.csv, templates.csv, images/ and a toy config.txt under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = generate_records(n_patients, seed, out / "images", side, exams_per_patient)
    manifest = out / "manifest.csv"
    write_manifest(manifest, records, LABELS)
    write_templates(out / "templates.csv", TEMPLATES)
    if write_config:
        cfg = RunConfig.toy()
        cfg.train.seed = seed
        cfg.paths.manifest = "manifest.csv"
        cfg.paths.templates = "templates.csv"
        cfg.paths.out = "run"
        cfg.save(out / "config.txt")
    return manifest
