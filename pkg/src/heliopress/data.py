"""Synthetic solar images, cropping, and the month-based train/test split."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

TRAIN_MONTHS = frozenset(range(1, 9))
FILENAME_RE = re.compile(r"AIA_(\d+)_(\d{8})_(\d{4})\.pgm$")
DEFAULT_WAVELENGTH = 171


# ---------------------------------------------------------------------------
# synthetic sun

def _fractal_noise(rng: np.random.Generator, size: int, octaves: int = 3) -> np.ndarray:
    out = np.zeros((size, size))
    amp = 1.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.normal(size=(cells + 1, cells + 1))
        out += amp * ndimage.zoom(grid, size / (cells + 1), order=3, mode="nearest")[:size, :size]
        amp *= 0.5
    return out / 1.75


def render_sun(rng: np.random.Generator, size: int) -> np.ndarray:
    """One limb-darkened disk with bright blobs, low-frequency background and shot noise."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = size / 2 + rng.uniform(-0.03, 0.03, size=2) * size
    radius = rng.uniform(0.35, 0.45) * size
    u = rng.uniform(0.4, 0.8)
    i0 = rng.uniform(0.55, 0.8)
    r = np.hypot(yy - cy, xx - cx) / radius
    inside = r < 1.0
    cos_theta = np.sqrt(np.clip(1.0 - r * r, 0.0, 1.0))
    img = np.where(inside, i0 * (1.0 - u * (1.0 - cos_theta)), 0.0)

    for _ in range(rng.integers(0, 6)):
        ang = rng.uniform(0, 2 * np.pi)
        rad = radius * np.sqrt(rng.uniform(0, 0.8))
        by, bx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
        width = rng.uniform(0.02, 0.07) * size
        amp = rng.uniform(0.1, 0.35)
        img += amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * width ** 2)) * inside

    corona = 0.08 * np.exp(-np.maximum(r - 1.0, 0.0) * 6.0) * ~inside
    texture = _fractal_noise(rng, size)
    img = img + corona + np.where(inside, 0.04, 0.01) * texture
    img = np.clip(img, 0.0, None)
    photons = 400.0
    img = rng.poisson(img * photons) / photons
    return np.clip(img, 0.0, 1.0)


def synthetic_sun(seed: int, size: int, count: int) -> np.ndarray:
    """``count`` deterministic images of shape (size, size) with values in [0, 1]."""
    if size % 64:
        raise ValueError(f"size {size} must be a multiple of 64")
    out = np.empty((count, size, size))
    for i in range(count):
        out[i] = render_sun(np.random.default_rng([seed, i]), size)
    return out


def random_crop(image: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[-2:]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return image[..., top:top + crop, left:left + crop]


# ---------------------------------------------------------------------------
# month split

@dataclass
class DatasetIndex:
    records: list[tuple[str, datetime]] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.records]

    def months(self) -> set[int]:
        return {t.month for _, t in self.records}


def parse_timestamp(value: str) -> datetime:
    value = value.strip().rstrip("Z")
    for fmt in ("%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"):
        try:
            return datetime.strptime(value, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable timestamp {value!r}")


def timestamp_from_filename(path: str) -> datetime:
    m = FILENAME_RE.search(Path(path).name)
    if not m:
        raise ValueError(f"filename {path!r} does not match AIA_<wl>_<YYYYMMDD>_<HHMM>.pgm")
    return datetime.strptime(m.group(2) + m.group(3), "%Y%m%d%H%M")


def filename_for(timestamp: datetime, wavelength: int = DEFAULT_WAVELENGTH) -> str:
    return f"AIA_{wavelength}_{timestamp:%Y%m%d}_{timestamp:%H%M}.pgm"


def month_split(records: Iterable, rejected: list | None = None) -> tuple[DatasetIndex, DatasetIndex]:
    """January-August -> train, September-December -> test, each sorted by time.

    ``records`` holds paths (timestamp parsed from the filename) or
    ``(path, timestamp)`` pairs. Unparseable records are skipped, logged,
    and appended to ``rejected`` when given.
    """
    train, test = DatasetIndex(split="train"), DatasetIndex(split="test")
    for rec in records:
        try:
            if isinstance(rec, (tuple, list)):
                path, ts = rec
                ts = ts if isinstance(ts, datetime) else parse_timestamp(str(ts))
            else:
                path, ts = str(rec), timestamp_from_filename(str(rec))
        except ValueError as exc:
            log.warning("rejected record %r: %s", rec, exc)
            if rejected is not None:
                rejected.append((rec, str(exc)))
            continue
        (train if ts.month in TRAIN_MONTHS else test).records.append((str(path), ts))
    for idx in (train, test):
        idx.records.sort(key=lambda r: (r[1], r[0]))
    return train, test


def read_manifest(path: str | Path) -> list[tuple[str, str]]:
    """CSV with columns path,timestamp (header row optional)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "path":
                continue
            rows.append((row[0].strip(), row[1].strip() if len(row) > 1 else ""))
    return rows


def hourly_timestamps(count: int, start: datetime | None = None, span_year: bool = False) -> list[datetime]:
    """Timestamps on a 1-hour grid: consecutive, or spread evenly across one year."""
    start = start or datetime(2011, 1, 1)
    if not span_year:
        return [start + timedelta(hours=i) for i in range(count)]
    hours_in_year = (start.replace(year=start.year + 1) - start) // timedelta(hours=1)
    return [start + timedelta(hours=(i * hours_in_year) // max(count, 1)) for i in range(count)]
