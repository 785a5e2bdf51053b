"""Evaluation: per-class metrics, calibration, uncertainty-error rank correlation,
selective prediction, bootstrap intervals, degradation sweeps and sliding-window
uncertainty maps.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import DEGRADATIONS, degrade_patch, resize_nearest
from .evidential import DirichletOutput
from .model import ModelConfig, ModelParams, predict_batch
from .netpbm import write_pgm

# analyst triage tiers by vacuity: automatic / review / expert
TIER_BOUNDS = (0.03, 0.10)


@dataclass(frozen=True)
class EvalRecord:
    true: int
    pred: int
    confidence: float
    vacuity: float
    dissonance: float
    aod_pred: float = 0.0

    @property
    def correct(self) -> bool:
        return self.true == self.pred


def make_records(labels: Sequence[int], outputs: Sequence[DirichletOutput]) -> list[EvalRecord]:
    if len(labels) != len(outputs):
        raise ValueError(f"{len(labels)} labels but {len(outputs)} outputs")
    return [EvalRecord(int(y), o.predicted, o.confidence, o.vacuity, o.dissonance, o.aod_pred)
            for y, o in zip(labels, outputs)]


def tier(vacuity: float) -> str:
    if vacuity < TIER_BOUNDS[0]:
        return "automatic"
    if vacuity <= TIER_BOUNDS[1]:
        return "review"
    return "expert"


def _arrays(records: Sequence[EvalRecord]):
    t = np.array([r.true for r in records], dtype=int)
    p = np.array([r.pred for r in records], dtype=int)
    conf = np.array([r.confidence for r in records], dtype=float)
    vac = np.array([r.vacuity for r in records], dtype=float)
    dis = np.array([r.dissonance for r in records], dtype=float)
    return t, p, conf, vac, dis


# ----------------------------------------------------------- classification

def confusion_and_per_class(records: Sequence[EvalRecord], num_classes: int = 3) -> dict:
    """Confusion matrix (rows = truth), per-class P/R/F1, and two accuracies.

    ``weighted_accuracy`` gives each record the weight n / (K_present * n_class),
    so the weights sum to n and every present class counts equally.
    """
    if not records:
        raise ValueError("no records to evaluate")
    t, p, _, vac, dis = _arrays(records)
    n = len(t)
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (t, p), 1)
    per_class = []
    for k in range(num_classes):
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        mask = t == k
        per_class.append({
            "class": k, "precision": float(prec), "recall": float(rec), "f1": float(f1),
            "support": int(mask.sum()),
            "mean_vacuity": float(vac[mask].mean()) if mask.any() else None,
            "mean_dissonance": float(dis[mask].mean()) if mask.any() else None,
        })
    correct = (t == p).astype(float)
    counts = np.bincount(t, minlength=num_classes)
    present = int((counts > 0).sum())
    w = n / (present * counts[t])
    return {
        "confusion": cm.tolist(),
        "per_class": per_class,
        "accuracy": float(correct.mean()),
        "weighted_accuracy": float((w * correct).sum() / n),
        "n": n,
    }


# -------------------------------------------------------------- calibration

def expected_calibration_error(records: Sequence[EvalRecord], n_bins: int = 15,
                               score: str = "confidence") -> tuple[float, list[dict]]:
    """Equal-width-bin ECE over [0, 1]; bins are right-inclusive, empty bins add nothing.

    ``score`` may be ``"vacuity"`` to bin accuracy by vacuity instead (the
    ``conf`` column then holds the mean vacuity of each bin and the gap is
    not meaningful as a calibration error).
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if not records:
        return 0.0, []
    t, p, conf, vac, _ = _arrays(records)
    s = conf if score == "confidence" else vac
    correct = (t == p).astype(float)
    idx = np.clip(np.ceil(s * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = len(s)
    ece = 0.0
    table = []
    for b in range(n_bins):
        m = idx == b
        cnt = int(m.sum())
        acc = float(correct[m].mean()) if cnt else 0.0
        cb = float(s[m].mean()) if cnt else 0.0
        if cnt:
            ece += cnt / n * abs(acc - cb)
        table.append({"bin_lo": b / n_bins, "bin_hi": (b + 1) / n_bins, "count": cnt, "acc": acc, "conf": cb})
    return float(ece), table


# ------------------------------------------------------------ rank statistics

class SpearmanResult(NamedTuple):
    rho: float
    p_value: float
    degenerate: bool = False


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> SpearmanResult:
    """Pearson correlation of average ranks; two-sided p from z = rho * sqrt(n - 1)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise ValueError("need at least 3 observations")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt((dx * dx).sum() * (dy * dy).sum())
    if den == 0.0:
        return SpearmanResult(float("nan"), float("nan"), True)
    rho = float(np.clip((dx * dy).sum() / den, -1.0, 1.0))
    z = rho * math.sqrt(len(x) - 1)
    return SpearmanResult(rho, math.erfc(abs(z) / math.sqrt(2.0)))


def uncertainty_error_correlation(records: Sequence[EvalRecord]) -> dict:
    t, p, _, vac, dis = _arrays(records)
    err = (t != p).astype(float)
    out = {}
    for name, u in (("vacuity", vac), ("dissonance", dis)):
        r = spearman_rho(u, err)
        out[name] = {"rho": r.rho, "p_value": r.p_value, "degenerate": r.degenerate}
    return out


# -------------------------------------------------------- selective prediction

def selective_prediction_curve(records: Sequence[EvalRecord],
                               retain_fractions: Sequence[float]) -> list[tuple[float, float, float]]:
    """Keep the ceil(f * n) lowest-vacuity records (stable on ties); report accuracy and mean vacuity."""
    t, p, _, vac, _ = _arrays(records)
    order = np.argsort(vac, kind="stable")
    correct = (t == p)[order].astype(float)
    vs = vac[order]
    n = len(vs)
    out = []
    for f in retain_fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"retain fraction must lie in (0, 1], got {f}")
        k = max(1, math.ceil(f * n - 1e-9))
        out.append((float(f), float(correct[:k].mean()), float(vs[:k].mean())))
    return out


# --------------------------------------------------------------- bootstrap

class BootstrapError(RuntimeError):
    pass


class _Undefined(Exception):
    pass


def _metric_fn(metric) -> Callable[[list[EvalRecord]], float]:
    if callable(metric):
        return metric
    if metric == "accuracy":
        return lambda rs: float(np.mean([r.correct for r in rs]))
    if metric == "weighted_accuracy":
        return lambda rs: confusion_and_per_class(rs)["weighted_accuracy"]
    if metric == "ece":
        return lambda rs: expected_calibration_error(rs)[0]
    if metric == "mean_vacuity":
        return lambda rs: float(np.mean([r.vacuity for r in rs]))
    name, _, k = str(metric).partition(":")
    if name in ("precision", "recall", "f1") and k.isdigit():
        k = int(k)

        def fn(rs):
            pc = confusion_and_per_class(rs)["per_class"][k]
            if pc["support"] == 0 or (name != "recall" and not any(r.pred == k for r in rs)):
                raise _Undefined
            return pc[name]
        return fn
    raise ValueError(f"unknown metric {metric!r}")


def bootstrap_ci(records: Sequence[EvalRecord], metric="accuracy", iterations: int = 10_000,
                 confidence: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of ``metric`` over resamples drawn with replacement.

    Metrics that are undefined on a resample (e.g. recall of an absent class)
    skip that resample; more than half skipped raises :class:`BootstrapError`.
    """
    if iterations < 100:
        raise ValueError("use at least 100 bootstrap iterations")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    recs = list(records)
    n = len(recs)
    if n == 0:
        raise ValueError("no records to resample")
    rng = np.random.default_rng(seed)
    vals = []
    skipped = 0
    if metric == "accuracy":
        correct = np.array([r.correct for r in recs], dtype=float)
        for _ in range(iterations):
            vals.append(correct[rng.integers(0, n, n)].mean())
    else:
        fn = _metric_fn(metric)
        for _ in range(iterations):
            sample = [recs[i] for i in rng.integers(0, n, n)]
            try:
                vals.append(fn(sample))
            except _Undefined:
                skipped += 1
    if skipped > iterations / 2:
        raise BootstrapError(f"metric {metric!r} undefined on {skipped}/{iterations} resamples")
    tail = (1.0 - confidence) / 2.0 * 100.0
    lo, hi = np.percentile(vals, [tail, 100.0 - tail])
    return float(lo), float(hi)


# ---------------------------------------------------------- uncertainty maps

def window_offsets(side: int, window: int, stride: int) -> list[int]:
    """0, stride, 2*stride, ... plus one offset flush with the far edge if it is not yet covered."""
    if window > side:
        raise ValueError(f"window {window} larger than image side {side}")
    if stride < 1 or window < 1:
        raise ValueError("window and stride must be positive")
    offs = list(range(0, side - window + 1, stride))
    if offs[-1] != side - window:
        offs.append(side - window)
    return offs


@dataclass
class UncertaintyMap:
    row_offsets: list[int]
    col_offsets: list[int]
    vacuity: np.ndarray
    dissonance: np.ndarray

    def cells(self):
        for i, r in enumerate(self.row_offsets):
            for j, c in enumerate(self.col_offsets):
                yield r, c, float(self.vacuity[i, j]), float(self.dissonance[i, j])


def uncertainty_map(image: np.ndarray, params: ModelParams, cfg: ModelConfig,
                    window: int, stride: int) -> UncertaintyMap:
    """Slide a window over a (4, H, W) image, resize each crop to the model input size and score it."""
    _, h, w = image.shape
    rows, cols = window_offsets(h, window, stride), window_offsets(w, window, stride)
    crops = [resize_nearest(image[:, r:r + window, c:c + window], cfg.input_size) for r in rows for c in cols]
    outs = predict_batch(crops, params, cfg)
    vac = np.array([o.vacuity for o in outs]).reshape(len(rows), len(cols))
    dis = np.array([o.dissonance for o in outs]).reshape(len(rows), len(cols))
    return UncertaintyMap(rows, cols, vac, dis)


def write_uncertainty_map(prefix, umap: UncertaintyMap, cell: int = 8) -> None:
    """Write ``<prefix>_vacuity.pgm``, ``<prefix>_dissonance.pgm`` and ``<prefix>.csv``."""
    prefix = Path(prefix)
    for name, grid, top in (("vacuity", umap.vacuity, 1.0), ("dissonance", umap.dissonance, 2.0 / 3.0)):
        raster = np.kron(np.clip(grid / top, 0, 1), np.ones((cell, cell)))
        write_pgm(prefix.parent / f"{prefix.name}_{name}.pgm", raster)
    with open(prefix.parent / f"{prefix.name}.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["row", "col", "vacuity", "dissonance"])
        for r, c, v, d in umap.cells():
            wr.writerow([r, c, repr(v), repr(d)])


# ------------------------------------------------------------- degradation

def degradation_report(patches: Sequence[np.ndarray], labels: Sequence[int], params: ModelParams,
                       cfg: ModelConfig, conditions=tuple(DEGRADATIONS), seed: int = 0) -> list[dict]:
    """Accuracy and mean vacuity on the clean set and under each (kind, level) degradation."""
    if len(patches) == 0:
        raise ValueError("degradation report needs a nonempty test set")
    labels = np.asarray(labels)
    rows = []
    for cond in (None,) + tuple(conditions):
        if cond is None:
            xs = list(patches)
            name = "clean"
        else:
            xs = [degrade_patch(p, cond[0], cond[1], seed + i) for i, p in enumerate(patches)]
            name = f"{cond[0]}_{cond[1]}"
        outs = predict_batch(xs, params, cfg)
        pred = np.array([o.predicted for o in outs])
        vac = np.array([o.vacuity for o in outs])
        dis = np.array([o.dissonance for o in outs])
        rows.append({"condition": name, "accuracy": float((pred == labels).mean()),
                     "mean_vacuity": float(vac.mean()), "mean_dissonance": float(dis.mean())})
    return rows


# ----------------------------------------------------------------- report

@dataclass
class EvalReport:
    classification: dict
    ece: float
    calibration_bins: list[dict]
    vacuity_bins: list[dict]
    spearman: dict
    selective: list[tuple[float, float, float]] = field(default_factory=list)
    bootstrap: dict = field(default_factory=dict)
    degradation: list[dict] = field(default_factory=list)
    forward_passes: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selective"] = [{"fraction": f, "accuracy": a, "mean_vacuity": v} for f, a, v in self.selective]
        return d

    def write(self, out_dir, records: Sequence[EvalRecord] | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        _write_csv(out / "calibration_bins.csv", ["bin_lo", "bin_hi", "count", "acc", "conf"],
                   [[b[k] for k in ("bin_lo", "bin_hi", "count", "acc", "conf")] for b in self.calibration_bins])
        _write_csv(out / "vacuity_bins.csv", ["bin_lo", "bin_hi", "count", "acc", "mean_vacuity"],
                   [[b[k] for k in ("bin_lo", "bin_hi", "count", "acc", "conf")] for b in self.vacuity_bins])
        if self.selective:
            _write_csv(out / "selective.csv", ["fraction", "accuracy", "mean_vacuity"],
                       [list(r) for r in self.selective])
        if self.degradation:
            _write_csv(out / "degradation.csv", ["condition", "accuracy", "mean_vacuity", "mean_dissonance"],
                       [[r["condition"], r["accuracy"], r["mean_vacuity"], r["mean_dissonance"]]
                        for r in self.degradation])
        if records is not None:
            _write_csv(out / "predictions.csv",
                       ["index", "true", "pred", "confidence", "vacuity", "dissonance", "aod_pred", "tier"],
                       [[i, r.true, r.pred, r.confidence, r.vacuity, r.dissonance, r.aod_pred, tier(r.vacuity)]
                        for i, r in enumerate(records)])


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def evaluate(records: Sequence[EvalRecord], n_bins: int = 15,
             retain_fractions: Sequence[float] = (), num_classes: int = 3) -> EvalReport:
    ece, bins = expected_calibration_error(records, n_bins)
    _, vbins = expected_calibration_error(records, n_bins, score="vacuity")
    return EvalReport(
        classification=confusion_and_per_class(records, num_classes),
        ece=ece,
        calibration_bins=bins,
        vacuity_bins=vbins,
        spearman=uncertainty_error_correlation(records),
        selective=selective_prediction_curve(records, retain_fractions) if retain_fractions else [],
    )
