"""Small CNN -> CBAM -> FC trunk -> (Dirichlet head | AOD head), and its training loop."""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import evidential as ev
from . import nncore as nn
from .cbam import CbamParams, cbam_apply
from .data import WeightedSampler, flip_patch
from .nncore import Tensor

log = logging.getLogger(__name__)

NUM_CLASSES = 3
IN_CHANNELS = 4


@dataclass
class ModelConfig:
    # small from-scratch backbone sized for single-core CPU training
    conv_channels: tuple[int, ...] = (16, 32, 64)
    fc_widths: tuple[int, ...] = (64, 32)
    dropout: float = 0.4
    cbam_reduction: int = 8
    num_classes: int = NUM_CLASSES
    input_size: int = 64
    # 20 epochs on a few hundred patches wants a large step and small batch;
    # 2e-3 / 8 was the most stable over seeds in a 1.5e-3 .. 3e-3 sweep.
    lr: float = 2e-3
    lr_min_ratio: float = 0.01
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 8
    kl_ramp_epochs: int = 10
    variance_term: bool = True
    ce_weight: float = 0.0
    augment_flips: bool = True
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.fc_widths = tuple(int(c) for c in self.fc_widths)
        self.betas = tuple(float(b) for b in self.betas)
        if self.num_classes != NUM_CLASSES:
            raise ValueError("the severity model has exactly 3 classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.input_size % (2 ** len(self.conv_channels)):
            raise ValueError("input_size must be divisible by 2 ** number of conv blocks")

    ARCH_FIELDS = ("conv_channels", "fc_widths", "cbam_reduction", "num_classes", "input_size")

    def arch(self) -> dict:
        return {k: getattr(self, k) for k in self.ARCH_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams(OrderedDict):
    """Name -> Tensor, in declaration order."""

    def cbam(self) -> CbamParams:
        return CbamParams(self["cbam.mlp_w1"], self["cbam.mlp_w2"],
                          self["cbam.mlp_w1"].shape[1] // self["cbam.mlp_w1"].shape[0],
                          self["cbam.spatial_kernel"], self["cbam.spatial_bias"])

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), v.requires_grad, k)) for k, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.values()])

    def decays(self, name: str) -> bool:
        return name.endswith(".w") and not name.startswith("cbam.")


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    """He-style fan-in initialisation; all four input channels drawn identically."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p = ModelParams()

    def add(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    c_in = IN_CHANNELS
    for i, c in enumerate(cfg.conv_channels):
        add(f"conv{i}.w", rng.normal(0, math.sqrt(2.0 / (c_in * 9)), (c, c_in, 3, 3)))
        add(f"conv{i}.b", np.zeros(c))
        c_in = c
    cb = CbamParams.init(c_in, cfg.cbam_reduction, rng=rng)
    for name, t in zip(("cbam.mlp_w1", "cbam.mlp_w2", "cbam.spatial_kernel", "cbam.spatial_bias"), cb.tensors()):
        add(name, t.data)
    width = c_in
    for i, m in enumerate(cfg.fc_widths):
        add(f"fc{i}.w", rng.normal(0, math.sqrt(2.0 / width), (m, width)))
        add(f"fc{i}.b", np.zeros(m))
        width = m
    add("head.w", rng.normal(0, 0.1 * math.sqrt(1.0 / width), (cfg.num_classes, width)))
    add("head.b", np.zeros(cfg.num_classes))
    add("aod.w", rng.normal(0, 0.1 * math.sqrt(1.0 / width), (1, width)))
    add("aod.b", np.zeros(1))
    return p


@dataclass
class ForwardResult:
    alpha: Tensor
    aod: Tensor
    channel_weights: np.ndarray
    spatial_map: np.ndarray


class ForwardCounter:
    """Counts per-patch forward passes; predict_batch must add exactly one per patch."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


FORWARD_COUNTER = ForwardCounter()


def forward_tensors(x: np.ndarray, params: ModelParams, cfg: ModelConfig, training: bool = False,
                    rng: np.random.Generator | None = None) -> ForwardResult:
    """Batched forward pass over an N x 4 x H x W array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (IN_CHANNELS, cfg.input_size, cfg.input_size):
        raise nn.ShapeError(f"expected N x {IN_CHANNELS} x {cfg.input_size} x {cfg.input_size} input, got {x.shape}")
    FORWARD_COUNTER.count += x.shape[0]
    h = Tensor(x - 0.5)
    for i in range(len(cfg.conv_channels)):
        h = nn.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        h = nn.max_pool2d(nn.relu(h), 2)
    h, cw, smap = cbam_apply(h, params.cbam())
    h = nn.pool(h, "global_avg")
    for i in range(len(cfg.fc_widths)):
        h = nn.relu(nn.linear(h, params[f"fc{i}.w"], params[f"fc{i}.b"]))
        h = nn.dropout(h, cfg.dropout, rng, training)
    alpha = ev.alpha_tensor(nn.linear(h, params["head.w"], params["head.b"]))
    aod = nn.softplus(nn.reshape(nn.linear(h, params["aod.w"], params["aod.b"]), (x.shape[0],)))
    return ForwardResult(alpha, aod, cw.data, smap.data)


def forward(patch: np.ndarray, params: ModelParams, cfg: ModelConfig, mode: str = "eval",
            seed: int = 0) -> ev.DirichletOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.default_rng(seed) if mode == "train" else None
    res = forward_tensors(np.asarray(patch)[None], params, cfg, mode == "train", rng)
    return ev.dirichlet_output(res.alpha.data[0], float(res.aod.data[0]))


def predict_batch(patches: Sequence[np.ndarray], params: ModelParams, cfg: ModelConfig,
                  chunk: int = 64) -> list[ev.DirichletOutput]:
    """Eval-mode outputs, one forward pass per patch, in input order."""
    out: list[ev.DirichletOutput] = []
    for start in range(0, len(patches), chunk):
        x = np.stack(patches[start:start + chunk])
        res = forward_tensors(x, params, cfg, training=False)
        for a, d in zip(res.alpha.data, res.aod.data):
            out.append(ev.dirichlet_output(a, float(d)))
    return out


def batch_loss(x, y, aod_true, params, cfg, epoch, rng,
               class_weights=None) -> tuple[Tensor, ev.LossBreakdown]:
    res = forward_tensors(x, params, cfg, training=True, rng=rng)
    anneal = ev.anneal_coefficient(epoch, cfg.kl_ramp_epochs)
    return ev.total_loss_tensor(res.alpha, ev.one_hot(y, cfg.num_classes), res.aod, aod_true, anneal,
                                cfg.variance_term, cfg.ce_weight, class_weights)


# ---------------------------------------------------------------- training

def cosine_lr(epoch: int, cfg: ModelConfig) -> float:
    """Cosine decay from lr at epoch 0 to lr * lr_min_ratio at the final epoch."""
    if cfg.epochs <= 1:
        return cfg.lr
    lo = cfg.lr * cfg.lr_min_ratio
    return lo + (cfg.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


@dataclass
class AdamW:
    params: ModelParams
    cfg: ModelConfig
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.params.decays(name) and self.cfg.weight_decay:
                p.data *= 1 - lr * self.cfg.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.adam_eps)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


def train(x: np.ndarray, y: np.ndarray, aod: np.ndarray, cfg: ModelConfig,
          params: ModelParams | None = None, progress=None) -> tuple[ModelParams, list[dict]]:
    """Fit on arrays (N x 4 x H x W patches, class ids, AOD targets).

    Each epoch draws ceil(N / batch_size) class-balanced batches. Returns the
    trained parameters and one history row per epoch (mean loss parts and lr).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    aod = np.asarray(aod, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if len(np.unique(y)) < 2:
        raise ValueError("training set needs at least two classes")
    params = init_params(cfg) if params is None else params
    for p in params.values():
        p.requires_grad = True
    opt = AdamW(params, cfg)
    sampler = WeightedSampler(y.tolist(), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    n_batches = math.ceil(len(x) / cfg.batch_size)
    counts = np.bincount(y, minlength=cfg.num_classes).astype(np.float64)
    class_weights = np.where(counts > 0, len(y) / (cfg.num_classes * np.maximum(counts, 1)), 0.0)
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        sums = dict(edl=0.0, kl=0.0, aod=0.0, total=0.0, ce=0.0)
        for b in range(n_batches):
            idx = sampler.take(cfg.batch_size)
            xb = x[idx]
            if cfg.augment_flips:
                flips = rng.random((len(idx), 2)) < 0.5
                xb = np.stack([flip_patch(xi, fh, fv) for xi, (fh, fv) in zip(xb, flips)])
            for p in params.values():
                p.zero_grad()
            with nn.GradTape() as tape:
                loss, parts = batch_loss(xb, y[idx], aod[idx], params, cfg, epoch, rng, class_weights)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(epoch, b, f"loss parts {parts}")
            tape.backward(loss)
            opt.step(lr)
            for k in sums:
                sums[k] += getattr(parts, k)
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "lr": lr,
               "anneal": ev.anneal_coefficient(epoch, cfg.kl_ramp_epochs)}
        history.append(row)
        log.info("epoch %d  total %.4f  edl %.4f  kl %.4f  aod %.4f  lr %.2e",
                 epoch, row["total"], row["edl"], row["kl"], row["aod"], lr)
        if progress is not None:
            progress(row)
    return params, history


# -------------------------------------------------------------- checkpoint

MAGIC = b"EVSEVCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Magic, version, JSON config echo, then each tensor as little-endian float64."""
    echo = json.dumps({"model": cfg.to_dict(), **(extra or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an evsev checkpoint")
    version, n = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    echo = json.loads(buf[off:off + n])
    off += n
    cfg = ModelConfig.from_dict(echo["model"])
    if expect is not None and expect.arch() != cfg.arch():
        raise CheckpointError(f"checkpoint architecture {cfg.arch()} does not match config {expect.arch()}")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = ModelParams()
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + ln].decode()
        off += 4 + ln
        (ndim,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        params[name] = Tensor(data, requires_grad=True, name=name)
    ref = init_params(cfg)
    if list(ref) != list(params) or any(ref[k].shape != params[k].shape for k in ref):
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    return params, cfg, echo
