"""Losses, initialization, the Adam optimizer and the training loop.

The per-map loss is a class-balanced cross entropy summed (not averaged)
over pixels, with the balance weight computed per ground-truth patch. Deep
supervision sums the per-iteration losses with weights 1, 2, ..., L+1 so
later iterations dominate the objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from . import ops
from .model import ModelParameters, default_config, rednet_forward
from .tensor import Tape, Tensor, record_op

__all__ = [
    "CLAMP_EPS",
    "LossWeights",
    "class_balance_beta",
    "weighted_bce",
    "deep_supervised_loss",
    "init_bilinear",
    "init_weights",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "PRESETS",
    "make_train_config",
    "parse_config_text",
    "config_to_text",
    "ConfigError",
    "train",
    "TrainResult",
]

# Predictions are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before logs so a fully
# saturated sigmoid cannot produce an infinite loss.
CLAMP_EPS = 1e-7


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Per-iteration loss weights; the preset is weight l+1 for iteration l."""

    alpha: Tuple[float, ...]

    def __post_init__(self):
        if not self.alpha or any(a <= 0 for a in self.alpha):
            raise ValueError(f"loss weights must be positive, got {self.alpha}")

    @staticmethod
    def for_depth(recursion: int) -> "LossWeights":
        return LossWeights(tuple(float(l + 1) for l in range(recursion + 1)))


def class_balance_beta(gt) -> float:
    """Fraction of edge pixels in a ground-truth raster, in [0, 1]."""
    arr = np.asarray(gt)
    if arr.size == 0:
        raise ValueError("class_balance_beta needs a non-empty ground truth")
    return float((arr > 0.5).mean())


def _per_sample_beta(pos: np.ndarray) -> np.ndarray:
    """Edge fraction per sample for 4-d batches, single value otherwise."""
    if pos.ndim == 4:
        return pos.mean(axis=(1, 2, 3), keepdims=True)
    return np.asarray(pos.mean())


def weighted_bce(pred: Tensor, gt) -> Tensor:
    """Class-balanced cross entropy, summed over pixels.

    With beta the edge-pixel fraction of the patch, edge pixels weigh in at
    (1 - beta) and non-edge pixels at beta, so the rare class dominates.
    4-d inputs are treated as a batch of single-channel patches with one
    beta per sample; the per-sample losses are summed.
    """
    gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if gt_arr.shape != pred.shape:
        raise ValueError(f"weighted_bce shape mismatch: pred {pred.shape} vs gt {gt_arr.shape}")
    if pred.ndim == 4 and pred.shape[1] != 1:
        raise ValueError(f"edge maps are single-channel, got {pred.shape[1]} channels")
    d = pred.data
    pos = gt_arr > 0.5
    beta = _per_sample_beta(pos).astype(d.dtype)
    w_pos = 1.0 - beta
    w_neg = beta
    p = np.clip(d, CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = np.where(pos, -w_pos * np.log(p), -w_neg * np.log1p(-p))
    total = np.asarray(loss.sum(), dtype=d.dtype)

    def vjp(g):
        inside = (d > CLAMP_EPS) & (d < 1.0 - CLAMP_EPS)  # clamp blocks the gradient outside
        grad = np.where(pos, -w_pos / p, w_neg / (1.0 - p))
        return (np.where(inside, grad, 0.0) * float(g),)

    return record_op("weighted_bce", (pred,), total, vjp)


def deep_supervised_loss(edge_maps: Sequence[Tensor], gt, weights: LossWeights) -> Tensor:
    """Weighted sum of the per-iteration losses against one ground truth."""
    if len(edge_maps) != len(weights.alpha):
        raise ValueError(
            f"got {len(edge_maps)} edge maps but {len(weights.alpha)} loss weights"
        )
    total: Optional[Tensor] = None
    for m, a in zip(edge_maps, weights.alpha):
        term = ops.scale(weighted_bce(m, gt), a)
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_bilinear(kh: int, kw: int, stride: int = 2) -> np.ndarray:
    """Separable tent kernel; a stride-2 transposed conv with it upsamples bilinearly.

    Per axis: f = ceil(k/2), c = (2f - 1 - f mod 2)/2, w(i) = 1 - |i - c|/f.
    The overlapping taps form a partition of unity, so constant inputs map to
    the same constant away from the borders.
    """
    if kh < 1 or kw < 1:
        raise ValueError("kernel extents must be positive")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    def w1d(k: int) -> np.ndarray:
        f = math.ceil(k / 2)
        c = (2 * f - 1 - f % 2) / 2
        return 1.0 - np.abs(np.arange(k) - c) / f

    return np.outer(w1d(kh), w1d(kw))


def _bilinear_kernel_fill(shape: Tuple[int, ...], dtype) -> np.ndarray:
    """Fill a (Cin, Cout, kH, kW) transposed-conv kernel as a pure upsampler.

    Matching channel counts get an identity channel map; otherwise every
    channel pair carries the tent scaled by 1/Cin, which still preserves
    constants.
    """
    cin, cout, kh, kw = shape
    k2d = init_bilinear(kh, kw, stride=UP_STRIDE_DEFAULT)
    w = np.zeros(shape, dtype=dtype)
    if cin == cout:
        for c in range(cin):
            w[c, c] = k2d
    else:
        w[:, :] = k2d / cin
    return w


UP_STRIDE_DEFAULT = 2


def init_weights(params: ModelParameters, seed: int) -> ModelParameters:
    """Gaussian (std 0.01) conv kernels, zero biases, unit batch-norm scale,
    tent-filter transposed convolutions; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    for path, t in params.items():
        if path.startswith("up") and path.endswith("/w"):
            t.data[...] = _bilinear_kernel_fill(t.shape, params.dtype)
        elif path.endswith("/w"):
            t.data[...] = rng.normal(0.0, 0.01, t.shape)
        elif path.endswith("/gamma"):
            t.data[...] = 1.0
        else:  # conv biases and batch-norm shifts
            t.data[...] = 0.0
    for st in params.bn_stats.values():
        st.reset()
    return params


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParameters, state: AdamState) -> None:
    """One bias-corrected Adam update; decay is coupled L2 added to the gradient."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for path, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {path!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# train configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Training knobs; the field defaults are the full-scale preset."""

    batch_size: int = 8
    epochs: int = 500
    patch_size: int = 256
    seed: int = 0
    recursion: int = 2
    width_multiplier: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    patches_per_image: int = 500
    hflip: bool = True
    noise_std: float = 20.0 / 255.0  # pixel intensities live in [0, 1]
    blur_sigma: float = 0.0  # optional augmentation, off by default
    precision: str = "float32"
    checkpoint_every: int = 1  # epochs
    max_steps: Optional[int] = None

    def dtype(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        return np.float32 if self.precision == "float32" else np.float64


# Named presets: full-scale constants, and the laptop-scale shrink used by the
# verification suite (width 1/8, 64x64 patches, augmentation off).
PRESETS: Dict[str, dict] = {
    "paper": {},
    "desk": {
        "batch_size": 4,
        "epochs": 250,
        "patch_size": 64,
        "width_multiplier": 0.125,
        "patches_per_image": 8,
        "hflip": False,
        "noise_std": 0.0,
        "checkpoint_every": 50,
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, ftype, raw: str):
    raw = raw.strip()
    if ftype in (int, "int"):
        return int(raw)
    if ftype in (float, "float"):
        return float(raw)
    if ftype in (bool, "bool"):
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {name!r}: cannot parse boolean from {raw!r}")
    if "Optional[int]" in str(ftype) or ftype == Optional[int]:
        return None if raw.lower() in ("none", "") else int(raw)
    return raw


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse `key=value` lines; '#' starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def make_train_config(
    preset: Optional[str] = None,
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> TrainConfig:
    """Resolve preset -> config file -> overrides, rejecting unknown keys."""
    cfg = TrainConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[preset].items():
            setattr(cfg, k, v)
    kv: Dict[str, str] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        kv.update(parse_config_text(path.read_text()))
    if overrides:
        kv.update(overrides)
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, raw in kv.items():
        if key not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, by_name[key].type, raw))
    cfg.dtype()  # validate precision
    return cfg


def config_to_text(cfg: TrainConfig) -> str:
    lines = [f"{k}={v}" for k, v in sorted(asdict(cfg).items())]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    losses: List[float]  # one entry per iteration l = 0..L
    total: float


@dataclass
class TrainResult:
    records: List[StepRecord]
    checkpoints: List[Path]
    loss_csv: Optional[Path] = None


def _loss_csv_text(records: Sequence[StepRecord], recursion: int) -> str:
    header = "step,epoch," + ",".join(f"loss_l{l}" for l in range(recursion + 1)) + ",total"
    lines = [header]
    for r in records:
        parts = ",".join(f"{v:.9e}" for v in r.losses)
        lines.append(f"{r.step},{r.epoch},{parts},{r.total:.9e}")
    return "\n".join(lines) + "\n"


def _make_batch(dataset, idxs, config: TrainConfig, rng: np.random.Generator, dtype):
    """Crop, flip and noise one batch; the ground truth gets every geometric op."""
    ps = config.patch_size
    xs = np.empty((len(idxs), 3, ps, ps), dtype=dtype)
    gs = np.empty((len(idxs), 1, ps, ps), dtype=dtype)
    ident = []
    for slot, idx in enumerate(idxs):
        img, gt = dataset[idx]
        h, w = img.shape[:2]
        r = int(rng.integers(0, h - ps + 1))
        c = int(rng.integers(0, w - ps + 1))
        patch = img[r : r + ps, c : c + ps]
        gpatch = gt[r : r + ps, c : c + ps]
        if config.hflip:
            patch, gpatch = data_mod.hflip(patch, gpatch, bool(rng.random() < 0.5))
        if config.noise_std > 0:
            patch = data_mod.add_gaussian_noise(patch, config.noise_std, rng)
        if config.blur_sigma > 0:
            patch = data_mod.gaussian_blur(patch, config.blur_sigma)
        xs[slot] = patch.transpose(2, 0, 1)
        gs[slot, 0] = gpatch
        ident.append((int(idx), r, c))
    return xs, gs, ident


def train(
    params: ModelParameters,
    dataset,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Run the optimization loop and optionally emit checkpoints plus a loss CSV.

    ``dataset`` is a manifest or a sequence of (image HxWx3 float, gt HxW binary)
    pairs. Checkpoints.land at epoch boundaries only, which keeps resumed runs
    bitwise aligned with uninterrupted ones.
    """
    if isinstance(dataset, data_mod.DatasetManifest):
        dataset = data_mod.load_dataset(dataset)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    for i, (img, gt) in enumerate(dataset):
        if img.shape[:2] != gt.shape[:2]:
            raise ValueError(f"dataset entry {i}: image {img.shape} vs gt {gt.shape} size mismatch")
        if img.shape[0] < config.patch_size or img.shape[1] < config.patch_size:
            raise ValueError(
                f"dataset entry {i} is smaller than the {config.patch_size}px patch; pad it first"
            )

    dtype = config.dtype()
    if params.dtype != np.dtype(dtype):
        raise ValueError(
            f"model parameters are {params.dtype} but the config asks for {config.precision}"
        )
    weights = LossWeights.for_depth(config.recursion)
    adam = AdamState(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    start_epoch = 0
    global_step = 0
    best_loss = math.inf

    if resume is not None:
        restored, leftovers, meta = ckpt.load_model(resume)
        if meta.get("kind") != "train":
            raise ValueError(f"{resume} is not a training checkpoint; cannot resume from it")
        for p, t in params.items():
            t.data = restored[p].data
        for bn_path, st in params.bn_stats.items():
            src = restored.bn_stats[bn_path]
            st.mean, st.var, st.updates = src.mean, src.var, src.updates
        adam.t = int(leftovers["trainer/adam_t"])
        for path in params.paths():
            adam.m[path] = leftovers[f"adam/m/{path}"].astype(dtype, copy=False)
            adam.v[path] = leftovers[f"adam/v/{path}"].astype(dtype, copy=False)
        start_epoch = int(leftovers["trainer/epoch"])
        global_step = int(leftovers["trainer/step"])
        best_loss = float(meta["best_loss"])
        rng.bit_generator.state = meta["rng_state"]

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def save_train_ckpt(name: str, epoch_next: int) -> Path:
        extra = {f"adam/m/{p}": a for p, a in adam.m.items()}
        extra.update({f"adam/v/{p}": a for p, a in adam.v.items()})
        extra["trainer/adam_t"] = np.asarray(adam.t, dtype=np.int64)
        extra["trainer/epoch"] = np.asarray(epoch_next, dtype=np.int64)
        extra["trainer/step"] = np.asarray(global_step, dtype=np.int64)
        meta = {
            "kind": "train",
            "rng_state": rng.bit_generator.state,
            "best_loss": best_loss,
            "train_config": asdict(config),
        }
        return ckpt.save_model(out_path / name, params, extra_arrays=extra, extra_meta=meta)

    records: List[StepRecord] = []
    checkpoints: List[Path] = []
    steps_per_epoch = (len(dataset) * config.patches_per_image) // config.batch_size
    if steps_per_epoch < 1:
        raise ValueError("batch size exceeds patches per epoch; lower it or raise patches_per_image")

    stop = False
    next_epoch = start_epoch  # epoch a resumed run would start from
    for epoch in range(start_epoch, config.epochs):
        order = np.repeat(np.arange(len(dataset)), config.patches_per_image)
        rng.shuffle(order)
        epoch_total = 0.0
        epoch_steps = 0
        for s in range(steps_per_epoch):
            if config.max_steps is not None and global_step >= config.max_steps:
                stop = True
                break
            idxs = order[s * config.batch_size : (s + 1) * config.batch_size]
            xb, gb, ident = _make_batch(dataset, idxs, config, rng, dtype)
            with Tape() as tape:
                fwd = rednet_forward(Tensor(xb), params, config.recursion, "train")
                parts = [weighted_bce(m, gb) for m in fwd.edge_maps]
                total = None
                for part, a in zip(parts, weights.alpha):
                    term = ops.scale(part, a)
                    total = term if total is None else ops.add(total, term)
            total_val = float(total.data)
            if not math.isfinite(total_val):
                raise FloatingPointError(
                    f"non-finite loss at step {global_step}; batch (image, row, col) = {ident}"
                )
            tape.backward(total)
            adam_step(params, adam)
            params.zero_grad()
            records.append(
                StepRecord(global_step, epoch, [float(p.data) for p in parts], total_val)
            )
            epoch_total += total_val
            epoch_steps += 1
            global_step += 1
        if not stop:
            next_epoch = epoch + 1
            if epoch_steps and out_path is not None:
                epoch_mean = epoch_total / epoch_steps
                if epoch_mean < best_loss:
                    best_loss = epoch_mean
                    checkpoints.append(save_train_ckpt("best.ckpt", next_epoch))
                if next_epoch % config.checkpoint_every == 0:
                    checkpoints.append(save_train_ckpt(f"epoch_{next_epoch:05d}.ckpt", next_epoch))
        if stop:
            break

    loss_csv = None
    if out_path is not None:
        checkpoints.append(save_train_ckpt("last.ckpt", next_epoch))
        loss_csv = out_path / "loss.csv"
        loss_csv.write_text(_loss_csv_text(records, config.recursion))
    return TrainResult(records=records, checkpoints=checkpoints, loss_csv=loss_csv)
