"""Synthetic smoke scenes, degradations, scene-level splits and balanced sampling.

A patch is a float array of shape (4, H, W): R, G, B and the spectral proxy
channel, all in [0, 1].
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from . import labeling
from .labeling import LabelConfig, Severity, SeverityLabel
from .netpbm import read_ppm, write_ppm

PATCH_SIZE = 64
SMOKE_GRAY = np.array([0.74, 0.74, 0.78])
CLOUD_WHITE = np.array([0.96, 0.96, 0.97])
# terrain palette: dark vegetation, light vegetation, bare soil
TERRAIN_PALETTE = np.array([
    [0.10, 0.24, 0.08],
    [0.28, 0.42, 0.16],
    [0.46, 0.36, 0.22],
])
TAU_RANGES = {Severity.LIGHT: (0.0, 0.5), Severity.MODERATE: (0.5, 1.5), Severity.HEAVY: (1.5, 3.0)}
SKEWED_PROPORTIONS = (0.558, 0.066, 0.375)
GRAIN = 0.25                # relative amplitude of pixel-level ground texture
BRIGHTNESS_RANGE = (0.7, 1.5)  # per-landscape illumination factor

DEGRADATIONS = {
    ("cloud", "mild"): {"coverage": 0.30, "opacity": 0.5},
    ("cloud", "strong"): {"coverage": 0.60, "opacity": 0.8},
    ("blur", "mild"): {"sigma": 1.0},
    ("blur", "strong"): {"sigma": 2.5},
    ("noise", "mild"): {"sigma": 0.05},
    ("noise", "strong"): {"sigma": 0.15},
}


class SplitWarning(UserWarning):
    pass


def make_patch(rgb) -> np.ndarray:
    """Stack RGB with its proxy channel into a (4, H, W) patch."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64)[:3], 0.0, 1.0)
    return np.concatenate([rgb, labeling.spectral_proxy_channel(rgb)[None]], axis=0)


# --------------------------------------------------------------- generator

@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    terrain_seed: int
    tau: float
    center: tuple[float, float] = (0.5, 0.5)   # (row, col) as fractions of the patch side
    radius: float = 0.35                        # Gaussian sigma as a fraction of the side
    anisotropy: float = 1.0                     # ratio of major to minor axis
    angle: float = 0.0                          # radians

    def __post_init__(self):
        if not 0.0 <= self.tau <= 3.0:
            raise ValueError(f"optical depth must lie in [0, 3], got {self.tau}")


@dataclass
class LabeledExample:
    patch: np.ndarray
    pseudo_aod: float
    cls: int
    scene_id: str


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    return zoom(grid, size / (cells + 1), order=1, mode="nearest", grid_mode=True)[:size, :size]


def terrain(terrain_seed: int, size: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Value-noise vegetation/soil texture of shape (3, size, size).

    The field is drawn on a 2x tile and cropped at ``offset`` so patches of one
    scene share the same underlying landscape.
    """
    rng = np.random.default_rng(terrain_seed)
    tile = 2 * size
    coarse = 0.6 * _value_noise(rng, tile, 6) + 0.4 * _value_noise(rng, tile, 16)
    fine = rng.random((tile, tile))
    r, c = offset
    coarse = coarse[r:r + size, c:c + size]
    fine = fine[r:r + size, c:c + size]
    t = np.clip((coarse - coarse.min()) / (np.ptp(coarse) + 1e-12), 0, 1) * 2.0
    lo = np.floor(np.minimum(t, 1.999)).astype(int)
    frac = t - lo
    rgb = (TERRAIN_PALETTE[lo] * (1 - frac)[..., None] + TERRAIN_PALETTE[lo + 1] * frac[..., None])
    rgb = rgb * (1.0 - GRAIN + 2 * GRAIN * fine)[..., None] * rng.uniform(*BRIGHTNESS_RANGE)
    return np.clip(rgb.transpose(2, 0, 1), 0.0, 1.0)


def plume_opacity(spec: SceneSpec, size: int) -> np.ndarray:
    """Opacity 1 - exp(-tau * exp(-d^2 / 2)): Gaussian optical-depth falloff from the plume centre."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = spec.center[0] * (size - 1), spec.center[1] * (size - 1)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    u = (ca * dx + sa * dy) / (spec.radius * size * spec.anisotropy)
    v = (-sa * dx + ca * dy) / (spec.radius * size)
    return 1.0 - np.exp(-spec.tau * np.exp(-0.5 * (u * u + v * v)))


def generate_patch(spec: SceneSpec, rng_seed: int, size: int = PATCH_SIZE,
                   label_mode: str = "oracle",
                   label_cfg: LabelConfig = labeling.DEFAULT_LABEL_CONFIG) -> tuple[np.ndarray, SeverityLabel]:
    """Composite a smoke plume over terrain and label it.

    ``label_mode`` is ``"oracle"`` (class from tau, AOD target tau) or
    ``"pipeline"`` (pseudo-AOD heuristic on the rendered RGB).
    """
    rng = np.random.default_rng([spec.terrain_seed, rng_seed])
    offset = tuple(int(v) for v in rng.integers(0, size + 1, size=2))
    ground = terrain(spec.terrain_seed, size, offset)
    o = plume_opacity(spec, size)[None]
    rgb = (1.0 - o) * ground + o * SMOKE_GRAY[:, None, None]
    patch = make_patch(rgb)
    if label_mode == "oracle":
        label = SeverityLabel(spec.tau, labeling.classify_severity(spec.tau))
    elif label_mode == "pipeline":
        label = labeling.label_patch(patch[:3], label_cfg)
    else:
        raise ValueError(f"label_mode must be 'oracle' or 'pipeline', got {label_mode!r}")
    return patch, label


def sample_scene(scene_id: str, cls: Severity, rng: np.random.Generator) -> SceneSpec:
    lo, hi = TAU_RANGES[Severity(cls)]
    tau = float(rng.uniform(lo, hi))
    if cls != Severity.HEAVY:
        tau = min(tau, np.nextafter(hi, lo))
    return SceneSpec(
        scene_id=scene_id,
        terrain_seed=int(rng.integers(0, 2**31 - 1)),
        tau=tau,
        center=(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.35, 0.65))),
        radius=float(rng.uniform(0.3, 0.4)),
        anisotropy=float(rng.uniform(1.0, 1.4)),
        angle=float(rng.uniform(0, math.pi)),
    )


def class_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = n * p
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def synthesize_dataset(n: int, proportions: Sequence[float] = (1 / 3, 1 / 3, 1 / 3), seed: int = 0,
                       size: int = PATCH_SIZE, patches_per_scene: int = 3,
                       label_mode: str = "oracle",
                       label_cfg: LabelConfig = labeling.DEFAULT_LABEL_CONFIG) -> list[LabeledExample]:
    """Generate ``n`` patches whose scene classes follow ``proportions``.

    Every scene contributes up to ``patches_per_scene`` patches that share the
    optical depth and landscape but differ in crop offset and plume jitter.
    """
    rng = np.random.default_rng(seed)
    out: list[LabeledExample] = []
    sid = 0
    for cls, count in zip(Severity, class_counts(n, proportions)):
        remaining = count
        while remaining > 0:
            base = sample_scene(f"s{seed}_{sid:05d}", cls, rng)
            sid += 1
            for j in range(min(patches_per_scene, remaining)):
                jitter = rng.normal(0.0, 0.04, size=2)
                spec = SceneSpec(base.scene_id, base.terrain_seed, base.tau,
                                 (float(np.clip(base.center[0] + jitter[0], 0.2, 0.8)),
                                  float(np.clip(base.center[1] + jitter[1], 0.2, 0.8))),
                                 base.radius, base.anisotropy, base.angle)
                patch, label = generate_patch(spec, j, size, label_mode, label_cfg)
                out.append(LabeledExample(patch, label.pseudo_aod, int(label.cls), base.scene_id))
            remaining -= patches_per_scene
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ------------------------------------------------------------- degradation

def _cloud_mask(rng: np.random.Generator, h: int, w: int, coverage: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w))
    for _ in range(200):
        if (mask > 0.5).mean() >= coverage:
            break
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.12, 0.3) * h, rng.uniform(0.12, 0.3) * w
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        blob = np.clip(1.5 - d, 0.0, 1.0)  # soft edge between d=0.5 and d=1.5
        mask = np.maximum(mask, blob)
    return mask


def degrade_patch(p: np.ndarray, kind: str, level: str, seed: int = 0) -> np.ndarray:
    """Apply one of the six (kind, level) degradations and recompute the proxy channel."""
    try:
        params = DEGRADATIONS[(kind, level)]
    except KeyError:
        raise ValueError(f"unknown degradation {kind!r}/{level!r}") from None
    rgb = np.asarray(p, dtype=np.float64)[:3]
    rng = np.random.default_rng(seed)
    if kind == "cloud":
        m = params["opacity"] * _cloud_mask(rng, rgb.shape[1], rgb.shape[2], params["coverage"])[None]
        rgb = (1.0 - m) * rgb + m * CLOUD_WHITE[:, None, None]
    elif kind == "blur":
        rgb = np.stack([gaussian_filter(c, params["sigma"], mode="reflect", truncate=3.0) for c in rgb])
    else:
        rgb = rgb + rng.normal(0.0, params["sigma"], size=rgb.shape)
    return make_patch(rgb)


def flip_patch(p: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        p = p[:, :, ::-1]
    if vertical:
        p = p[:, ::-1, :]
    return np.ascontiguousarray(p)


# ------------------------------------------------------------------ splits

SPLITS = ("train", "val", "test")


def scene_split(manifest: Sequence[tuple[str, str]], fractions=(0.53, 0.09, 0.38),
                seed: int = 0) -> dict[str, str]:
    """Assign whole scenes to train/val/test, filling splits in order by patch count.

    ``manifest`` holds (path, scene_id) pairs. A scene goes to the current split
    while the midpoint of its patch block stays inside that split's target;
    the first scene always lands in train. Warns with :class:`SplitWarning`
    when a split ends up empty.
    """
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    sizes: dict[str, int] = {}
    for _, sid in manifest:
        sizes[sid] = sizes.get(sid, 0) + 1
    scenes = sorted(sizes)
    rng = np.random.default_rng(seed)
    scenes = [scenes[i] for i in rng.permutation(len(scenes))]
    total = sum(sizes.values())
    bounds = np.cumsum(f) * total
    assignment: dict[str, str] = {}
    filled = 0
    i = 0
    for sid in scenes:
        mid = filled + sizes[sid] / 2.0
        while i < 2 and mid > bounds[i] and filled > 0:
            i += 1
        assignment[sid] = SPLITS[i]
        filled += sizes[sid]
    empty = [s for s in SPLITS if s not in assignment.values()]
    if empty:
        warnings.warn(f"scene split left {', '.join(empty)} without any scene", SplitWarning, stacklevel=2)
    return assignment


# ----------------------------------------------------------------- sampler

@dataclass
class WeightedSampler:
    """Infinite stream of indices drawn with probability proportional to 1 / count(class)."""
    labels: Sequence[int]
    seed: int = 0
    chunk: int = 4096
    _rng: np.random.Generator = field(init=False, repr=False)
    _buf: np.ndarray = field(init=False, repr=False)
    _pos: int = field(init=False, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size == 0:
            raise ValueError("cannot sample from an empty label list")
        _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
        w = 1.0 / counts[inv]
        self.weights = w / w.sum()
        self._cdf = np.cumsum(self.weights)
        self._cdf[-1] = 1.0
        self._rng = np.random.default_rng(self.seed)
        self._buf = np.empty(0, dtype=int)
        self._pos = 0

    def __iter__(self) -> Iterator[int]:
        return self

    def __next__(self) -> int:
        if self._pos >= self._buf.size:
            self._buf = np.searchsorted(self._cdf, self._rng.random(self.chunk), side="right")
            self._pos = 0
        v = int(self._buf[self._pos])
        self._pos += 1
        return v

    def take(self, n: int) -> np.ndarray:
        return np.fromiter((next(self) for _ in range(n)), dtype=int, count=n)


def make_weighted_sampler(labels: Sequence[int], seed: int = 0) -> WeightedSampler:
    return WeightedSampler(labels, seed)


# ----------------------------------------------------------- dataset on disk

def write_dataset(root, examples: Sequence[LabeledExample], fractions=(0.53, 0.09, 0.38),
                  seed: int = 0) -> list[labeling.ManifestRow]:
    """Write ``patches/*.ppm``, ``manifest.csv`` and ``splits.csv`` under ``root``."""
    root = Path(root)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, ex in enumerate(examples):
        rel = f"patches/{ex.scene_id}_{i:05d}.ppm"
        write_ppm(root / rel, ex.patch[:3])
        rows.append(labeling.ManifestRow(rel, ex.scene_id, ex.pseudo_aod, ex.cls))
    labeling.write_manifest(root / "manifest.csv", rows)
    write_splits(root / "splits.csv", scene_split([(r.path, r.scene_id) for r in rows], fractions, seed))
    return rows


def write_splits(path, assignment: dict[str, str]) -> None:
    with open(path, "w") as fh:
        fh.write("scene_id,split\n")
        for sid in sorted(assignment):
            fh.write(f"{sid},{assignment[sid]}\n")


def read_splits(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "scene_id,split":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            if line.strip():
                sid, split = line.strip().split(",")
                out[sid] = split
    return out


def ingest_directory(src, label_cfg: LabelConfig = labeling.DEFAULT_LABEL_CONFIG,
                     scene_sep: str = "_") -> list[LabeledExample]:
    """Load every ``*.ppm`` under ``src`` and label it with the pseudo-AOD pipeline.

    Scene ids are the filename prefix before the first ``scene_sep``.
    """
    out = []
    for path in sorted(Path(src).glob("*.ppm")):
        rgb = read_ppm(path)
        label = labeling.label_patch(rgb, label_cfg)
        sid = path.stem.split(scene_sep, 1)[0]
        out.append(LabeledExample(make_patch(rgb), label.pseudo_aod, int(label.cls), sid))
    return out


def load_dataset(root, split: str | None = None) -> list[LabeledExample]:
    root = Path(root)
    rows = labeling.read_manifest(root / "manifest.csv")
    splits = read_splits(root / "splits.csv") if split is not None else {}
    out = []
    for r in rows:
        if split is not None and splits.get(r.scene_id) != split:
            continue
        out.append(LabeledExample(make_patch(read_ppm(root / r.path)), r.pseudo_aod, r.cls, r.scene_id))
    return out


def resize_nearest(p: np.ndarray, size: int) -> np.ndarray:
    c, h, w = p.shape
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return p[:, rows][:, :, cols]
