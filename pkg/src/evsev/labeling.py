"""Pseudo-AOD labels and the spectral proxy channel for RGB patches.

RGB patches are float arrays of shape (3, H, W) with values in [0, 1].

The pseudo-AOD blends three image cues (haze index, dark-pixel lift and the
fraction of smoke-coloured pixels). All thresholds live in
:class:`LabelConfig`. Labels come from the same RGB pixels the network
sees, so a model trained on them can learn to reproduce the heuristic rather
than the physical aerosol load. The synthetic generator's oracle mode
(labels from the true optical depth) avoids that circularity.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LIGHT_MAX = 0.5
MODERATE_MAX = 1.5
EPS = 1e-6


class Severity(enum.IntEnum):
    LIGHT = 0
    MODERATE = 1
    HEAVY = 2


@dataclass(frozen=True)
class SeverityLabel:
    pseudo_aod: float
    cls: Severity


@dataclass(frozen=True)
class LabelConfig:
    haze_weight: float = 0.4
    dark_weight: float = 0.3
    smoke_weight: float = 0.3
    haze_offset: float = 0.9
    haze_span: float = 1.1
    dark_quantile: float = 0.10
    dark_normalizer: float = 0.6
    smoke_lum_lo: float = 0.4
    smoke_lum_hi: float = 0.9
    smoke_max_spread: float = 0.15


DEFAULT_LABEL_CONFIG = LabelConfig()


def _rgb(p) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] < 3:
        raise ValueError(f"expected a (3, H, W) RGB array, got shape {a.shape}")
    return a[:3]


def haze_index(p) -> float:
    """Blue/red ratio of channel means."""
    rgb = _rgb(p)
    return float(rgb[2].mean() / (rgb[0].mean() + EPS))


def dark_channel_aod(p, cfg: LabelConfig = DEFAULT_LABEL_CONFIG) -> float:
    """3 * clamp(d / normalizer, 0, 1) with d the mean min-channel of the darkest pixels."""
    dark = _rgb(p).min(axis=0).ravel()
    n = max(1, math.ceil(cfg.dark_quantile * dark.size))
    d = np.partition(dark, n - 1)[:n].mean()
    return float(3.0 * np.clip(d / cfg.dark_normalizer, 0.0, 1.0))


def smoke_color_score(p, cfg: LabelConfig = DEFAULT_LABEL_CONFIG) -> float:
    rgb = _rgb(p)
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    spread = rgb.max(axis=0) - rgb.min(axis=0)
    smoky = ((lum >= cfg.smoke_lum_lo) & (lum <= cfg.smoke_lum_hi)
             & (spread < cfg.smoke_max_spread) & (rgb[2] >= rgb[0]))
    return float(smoky.mean())


def haze_to_aod(h: float, cfg: LabelConfig = DEFAULT_LABEL_CONFIG) -> float:
    return 3.0 * float(np.clip(h - cfg.haze_offset, 0.0, 1.0)) / cfg.haze_span


def pseudo_aod(p, cfg: LabelConfig = DEFAULT_LABEL_CONFIG) -> float:
    return blend_aod(haze_index(p), dark_channel_aod(p, cfg), smoke_color_score(p, cfg), cfg)


def blend_aod(haze: float, dark: float, smoke: float, cfg: LabelConfig = DEFAULT_LABEL_CONFIG) -> float:
    """Weighted blend of the three component scores, clamped to [0, 3]."""
    v = (cfg.haze_weight * haze_to_aod(haze, cfg) + cfg.dark_weight * dark
         + cfg.smoke_weight * 3.0 * smoke)
    return float(np.clip(v, 0.0, 3.0))


def classify_severity(aod: float) -> Severity:
    if not aod >= 0:
        raise ValueError(f"AOD must be non-negative, got {aod}")
    if aod < LIGHT_MAX:
        return Severity.LIGHT
    if aod < MODERATE_MAX:
        return Severity.MODERATE
    return Severity.HEAVY


def label_patch(p, cfg: LabelConfig = DEFAULT_LABEL_CONFIG) -> SeverityLabel:
    aod = pseudo_aod(p, cfg)
    return SeverityLabel(aod, classify_severity(aod))


def spectral_proxy_channel(p) -> np.ndarray:
    rgb = _rgb(p)
    return np.clip(0.5 * rgb[0] + 0.3 * rgb[1] - 0.2 * rgb[2], 0.0, 1.0)


# --------------------------------------------------------------- manifest

MANIFEST_FIELDS = ("path", "scene_id", "pseudo_aod", "class")


@dataclass(frozen=True)
class ManifestRow:
    path: str
    scene_id: str
    pseudo_aod: float
    cls: int


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.path, r.scene_id, repr(float(r.pseudo_aod)), int(r.cls)])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{Path(path).name}: expected header {','.join(MANIFEST_FIELDS)}")
        rows = []
        for rec in reader:
            cls = int(rec["class"])
            if cls not in (0, 1, 2):
                raise ValueError(f"{path}: class must be 0, 1 or 2, got {cls}")
            rows.append(ManifestRow(rec["path"], rec["scene_id"], float(rec["pseudo_aod"]), cls))
        return rows
