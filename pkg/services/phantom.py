"""
Phantom Dataset Service
Procedural stand-ins for the four pipeline modalities with an adjustable class signal
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from models.experiment import PhantomConfig
from models.records import (
    DatasetManifest,
    Label,
    ManifestEntry,
    MetadataRecord,
    Modality,
    PIPELINE_MODALITIES,
    Provenance,
    Sex,
)
from services.dataman import save_manifest, save_metadata
from utils.image_io import write_png

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.tsv"
METADATA_FILENAME = "metadata.tsv"

# Fractions of the image side
SIGNAL_RADIUS = 0.20
FAZ_RADIUS = 0.06
FAZ_GROWTH = 0.09
FOVEA_RADIUS = 0.07
BSCAN_CENTRE_HALF_WIDTH = 0.20


def _grid(side: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    return yy / side, xx / side


def signal_region_mask(modality: Modality, side: int) -> np.ndarray:
    """Boolean mask of where the class perturbation lives: a central disc, or the central column strip for B-scans"""
    modality = Modality(modality)
    yy, xx = _grid(side)
    if modality in (Modality.OCT_BMAC, Modality.OCT_BONH):
        return np.abs(xx - 0.5) <= BSCAN_CENTRE_HALF_WIDTH
    return (yy - 0.5) ** 2 + (xx - 0.5) ** 2 <= SIGNAL_RADIUS ** 2


def _trace_vessels(side: int, rng: np.random.Generator, starts: Sequence[Tuple[float, float, float]],
                   steps: int, branch_prob: float, turn: float) -> np.ndarray:
    """Random-walk vessel trees rasterized into a density map"""
    canvas = np.zeros((side, side), dtype=np.float64)
    stack = [(y, x, a, steps, 1.0) for y, x, a in starts]
    step_len = max(1.0, side / 96.0)
    while stack:
        y, x, angle, remaining, weight = stack.pop()
        for _ in range(remaining):
            angle += rng.normal(0.0, turn)
            y += step_len * np.sin(angle)
            x += step_len * np.cos(angle)
            iy, ix = int(round(y)), int(round(x))
            if not (0 <= iy < side and 0 <= ix < side):
                break
            canvas[iy, ix] += weight
            remaining -= 1
            if remaining > 4 and rng.random() < branch_prob:
                side_angle = angle + rng.choice((-1.0, 1.0)) * rng.uniform(0.4, 0.9)
                stack.append((y, x, side_angle, remaining // 2, weight * 0.7))
    return canvas


def _normalize(field: np.ndarray) -> np.ndarray:
    peak = field.max()
    return field / peak if peak > 0 else field


def _render_octa(side: int, positive: bool, strength: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(side)
    starts = []
    for k in range(10):
        theta = 2 * np.pi * (k + rng.uniform(0, 1)) / 10
        # start on the border circle, head inwards
        y = side * (0.5 + 0.5 * np.sin(theta))
        x = side * (0.5 + 0.5 * np.cos(theta))
        starts.append((y, x, theta + np.pi + rng.normal(0, 0.3)))
    vessels = _trace_vessels(side, rng, starts, steps=int(side * 0.8), branch_prob=0.08, turn=0.25)
    vessels = _normalize(ndimage.gaussian_filter(vessels, sigma=max(0.6, side / 128)))
    capillaries = _normalize(np.clip(ndimage.gaussian_filter(rng.normal(size=(side, side)), sigma=side / 64), 0, None))
    base = np.clip(0.25 + 0.55 * np.sqrt(vessels) + 0.35 * capillaries, 0, 1)

    radius = FAZ_RADIUS * rng.uniform(0.85, 1.15)
    if positive:
        radius += FAZ_GROWTH * strength
    r = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)
    dropout = 1.0 / (1.0 + np.exp((r - radius) * side / 1.5))
    return base * (1.0 - 0.9 * dropout)


# Layer depth (fraction of height), thickness, brightness
_BSCAN_LAYERS = (
    (0.30, 0.035, 0.95),
    (0.36, 0.050, 0.45),
    (0.43, 0.040, 0.70),
    (0.50, 0.030, 0.35),
    (0.57, 0.030, 0.90),
    (0.62, 0.060, 0.55),
)


def _render_bscan(side: int, modality: Modality, positive: bool, strength: float,
                  rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(side)
    tilt = rng.uniform(-0.03, 0.03)
    curve = rng.uniform(0.02, 0.05)
    centre = np.exp(-((xx - 0.5) ** 2) / (2 * 0.08 ** 2))
    offset = tilt * (xx - 0.5) + curve * (xx - 0.5) ** 2 * 4
    if modality == Modality.OCT_BMAC:
        # foveal pit pushes the inner layers down at the centre
        pit = 0.05 * centre
    else:
        pit = 0.02 * centre
    image = np.zeros((side, side), dtype=np.float64)
    thinning = 0.8 * strength if positive else 0.0
    for i, (depth, thickness, brightness) in enumerate(_BSCAN_LAYERS):
        depth = depth + rng.normal(0, 0.005) + offset + (pit if i < 3 else 0.0)
        width = thickness * rng.uniform(0.95, 1.05)
        if i == 0:
            # the innermost band thins in the central strip for the positive class
            width = width * (1.0 - thinning * centre)
        image += brightness * np.exp(-((yy - depth) ** 2) / (2 * (width / 2.0) ** 2 + 1e-12))
    if modality == Modality.OCT_BONH:
        cup = np.exp(-((xx - 0.5) ** 2) / (2 * 0.06 ** 2)) * (yy > 0.55)
        image *= 1.0 - 0.7 * cup
    return np.clip(image, 0, 1)


def _render_faf(side: int, positive: bool, strength: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(side)
    r = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)
    field = 1.0 / (1.0 + np.exp((r - 0.46) * side / 2.0))
    background = field * (0.45 + 0.1 * (1 - r / 0.5))

    disc_y, disc_x = 0.5 + rng.normal(0, 0.01), 0.72 + rng.normal(0, 0.01)
    disc = np.exp(-((yy - disc_y) ** 2 + (xx - disc_x) ** 2) / (2 * 0.05 ** 2))

    starts = []
    for base_angle in (np.pi * 0.75, np.pi * 1.25, np.pi * 0.9, np.pi * 1.1):
        starts.append((disc_y * side, disc_x * side, base_angle + rng.normal(0, 0.1)))
    vessels = _normalize(ndimage.gaussian_filter(
        _trace_vessels(side, rng, starts, steps=int(side * 0.7), branch_prob=0.05, turn=0.12),
        sigma=max(0.6, side / 128),
    ))

    fovea_radius = FOVEA_RADIUS * rng.uniform(0.85, 1.15)
    depth = 0.35
    if positive:
        fovea_radius += 0.05 * strength
        depth += 0.45 * strength
    fovea = np.exp(-(r ** 2) / (2 * fovea_radius ** 2))
    image = background * (1.0 - depth * fovea) + 0.5 * disc - 0.25 * np.sqrt(vessels) * field
    return np.clip(image, 0, 1)


def render_phantom(modality: Modality, label: Label, side: int, strength: float,
                   rng: np.random.Generator, noise_level: float = 0.05) -> np.ndarray:
    """
    One grayscale phantom in [0, 1].

    Every random draw happens regardless of the label, so with strength 0 the POS and NEG
    images come from the same distribution.
    """
    modality = Modality(modality)
    positive = Label(label) == Label.POS
    if modality == Modality.OCTA_SMAC:
        image = _render_octa(side, positive, strength, rng)
    elif modality in (Modality.OCT_BMAC, Modality.OCT_BONH):
        image = _render_bscan(side, modality, positive, strength, rng)
    elif modality == Modality.FAF:
        image = _render_faf(side, positive, strength, rng)
    else:
        raise ValueError(f"No phantom style for {modality.value}")
    gain = rng.uniform(0.97, 1.03)
    noise = rng.normal(0.0, noise_level, size=image.shape) if noise_level > 0 else 0.0
    return np.clip(image * gain + noise, 0.0, 1.0).astype(np.float32)


def phantom_batch(modality: Modality, labels: Sequence[Label], side: int, strength: float,
                  seed: int = 0, noise_level: float = 0.05) -> np.ndarray:
    """N x side x side stack, image i drawn from a generator keyed by (seed, i)"""
    return np.stack([
        render_phantom(modality, label, side, strength, np.random.default_rng([seed, i]), noise_level)
        for i, label in enumerate(labels)
    ]) if len(labels) else np.empty((0, side, side), dtype=np.float32)


def _patient_layout(config: PhantomConfig) -> List[Tuple[str, str, List[str]]]:
    """(family_id, patient_id, eye_ids); two eyes per patient"""
    layout = []
    for f in range(config.n_families):
        family_id = f"F{f:04d}"
        eyes_left = config.eyes_per_family
        p = 0
        while eyes_left > 0:
            n = min(2, eyes_left)
            patient_id = f"{family_id}-P{p}"
            eye_ids = [f"{patient_id}-{side}" for side in ("OD", "OS")[:n]]
            layout.append((family_id, patient_id, eye_ids))
            eyes_left -= n
            p += 1
    return layout


def _assign_labels(n_patients: int, positive_fraction: float, rng: np.random.Generator) -> List[Label]:
    n_pos = int(round(positive_fraction * n_patients))
    n_pos = min(max(n_pos, 1), n_patients - 1) if n_patients > 1 else n_pos
    flags = np.zeros(n_patients, dtype=bool)
    flags[rng.permutation(n_patients)[:n_pos]] = True
    return [Label.POS if f else Label.NEG for f in flags]


def _sample_metadata(label: Label, signal: float, rng: np.random.Generator) -> MetadataRecord:
    # positive patients skew older as signal grows
    shift = 6.0 * signal * (1.0 if label == Label.POS else -1.0)
    age = float(np.clip(rng.normal(70.0 + shift, 7.0), 40.0, 100.0))
    sex = Sex.FEMALE if rng.random() < 0.55 else Sex.MALE
    return MetadataRecord(age_years=round(age, 1), sex=sex)


def generate_phantoms(config: PhantomConfig, out_dir: str, workers: int = 1) -> DatasetManifest:
    """
    Render a complete phantom collection under `out_dir`.

    Writes images/<modality>/<eye_id>.png, manifest.tsv and metadata.tsv. Each image is
    drawn from a generator keyed by (seed, patient, eye, modality), so the output does not
    depend on the worker count.
    """
    rng = np.random.default_rng(config.seed)
    layout = _patient_layout(config)
    labels = _assign_labels(len(layout), config.positive_fraction, rng)
    metadata: Dict[str, MetadataRecord] = {}
    jobs = []
    for p_idx, ((family_id, patient_id, eye_ids), label) in enumerate(zip(layout, labels)):
        metadata[patient_id] = _sample_metadata(label, config.metadata_signal, np.random.default_rng([config.seed, p_idx, 9999]))
        for e_idx, eye_id in enumerate(eye_ids):
            for modality in config.modalities:
                m_idx = PIPELINE_MODALITIES.index(modality)
                rel = os.path.join("images", modality.value, f"{eye_id}.png")
                entry = ManifestEntry(
                    path=rel, family_id=family_id, patient_id=patient_id, eye_id=eye_id,
                    modality=modality, label=label, provenance=Provenance.REAL,
                )
                jobs.append((entry, (config.seed, p_idx, e_idx, m_idx)))

    def render(job):
        entry, key = job
        image = render_phantom(
            entry.modality, entry.label, config.side, config.class_signal_strength,
            np.random.default_rng(list(key)), config.noise_level,
        )
        write_png(os.path.join(out_dir, entry.path), image)
        return entry

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(render, jobs))
    else:
        entries = [render(job) for job in jobs]

    manifest = DatasetManifest(entries=entries, metadata=metadata)
    save_manifest(manifest, os.path.join(out_dir, MANIFEST_FILENAME))
    save_metadata(metadata, os.path.join(out_dir, METADATA_FILENAME))
    logger.info(
        "Phantoms generated",
        extra={"details": {
            "families": config.n_families,
            "patients": len(layout),
            "images": len(entries),
            "positive_patients": sum(1 for lb in labels if lb == Label.POS),
            "signal": config.class_signal_strength,
        }},
    )
    return manifest


def mean_in_region(images: np.ndarray, modality: Modality) -> np.ndarray:
    """Per-image mean intensity inside the signal region"""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images.mean(axis=-1)
    mask = signal_region_mask(modality, images.shape[-1])
    return images[:, mask].mean(axis=1)
