"""Cross-entropy, AdamW, poly learning-rate schedule, augmentation, training loop, checkpoints."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .metrics import IGNORE_INDEX, ConfusionMatrix, SegMetrics, compute_metrics
from .nn import ParamStore
from .tensor import Tensor, backward, make_result, no_grad

log = logging.getLogger(__name__)

# fixed per-channel normalisation applied to [0, 1] images before the network
IMAGE_MEAN = np.array([0.5, 0.5, 0.5], dtype=np.float32)
IMAGE_STD = np.array([0.25, 0.25, 0.25], dtype=np.float32)


class TrainError(Exception):
    pass


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, target, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log softmax(logits)[target] over pixels whose target is not ``ignore_index``."""
    target = np.asarray(target)
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise TrainError(f"logits {logits.shape} and target {target.shape} are incompatible")
    k = logits.shape[1]
    valid = target != ignore_index
    tgt = np.where(valid, target, 0).astype(np.int64)
    if (tgt < 0).any() or (tgt >= k).any():
        raise TrainError(f"target class ids must lie in [0, {k}) or equal {ignore_index}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    denom = max(count, 1)
    loss = np.asarray(-(picked * valid).sum() / denom, dtype=x.dtype)

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, tgt[:, None], np.take_along_axis(grad, tgt[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (g / denom)
        return (grad.astype(x.dtype, copy=False),)

    return make_result(loss, (logits,), bw, "cross_entropy")


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------

@dataclass
class OptimState:
    lr0: float = 6e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParamStore, state: OptimState, lr_t: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay; clears gradients afterwards."""
    missing = [n for n, t in params.learnable() if t.grad is None]
    if missing:
        raise TrainError(f"no gradient for parameter {missing[0]!r}; run backward first")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.learnable():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr_t * update - lr_t * state.weight_decay * p.data).astype(p.data.dtype, copy=False)
        p.grad = None


@dataclass
class TrainConfig:
    total_iters: int = 2000
    batch_size: int = 4
    lr: float = 6e-5
    weight_decay: float = 0.01
    poly_power: float = 1.0
    min_lr: float = 0.0
    seed: int = 0
    crop_size: int = 64
    resize_ratio_range: tuple = (0.5, 2.0)
    hflip_prob: float = 0.5
    log_interval: int = 50
    eval_interval: int = 0

    def __post_init__(self):
        self.resize_ratio_range = tuple(float(v) for v in self.resize_ratio_range)
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        lo, hi = self.resize_ratio_range
        if not 0 < lo <= hi:
            raise ValueError(f"resize ratio range {self.resize_ratio_range} must be positive and ordered")


def poly_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    return (cfg.lr - cfg.min_lr) * (1.0 - it / cfg.total_iters) ** cfg.poly_power + cfg.min_lr


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

def augment(image: np.ndarray, mask: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
            ratio: float | None = None, flip: bool | None = None) -> tuple:
    """Random resize, random crop (or pad), random horizontal flip.

    ``ratio`` and ``flip`` override the random draws. Padding uses zeros for the
    image and the ignore index for the mask.
    """
    if image.shape[1:] != mask.shape:
        raise TrainError(f"image {image.shape} and mask {mask.shape} are not aligned")
    if ratio is None:
        ratio = float(rng.uniform(*cfg.resize_ratio_range))
    h, w = mask.shape
    nh, nw = max(1, int(round(h * ratio))), max(1, int(round(w * ratio)))
    if (nh, nw) != (h, w):
        image = F.resize_bilinear_array(image, (nh, nw)).astype(np.float32)
        mask = F.resize_nearest(mask, (nh, nw))
    crop = cfg.crop_size
    if nh < crop or nw < crop:
        ph, pw = max(crop - nh, 0), max(crop - nw, 0)
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        nh, nw = mask.shape
    y0 = int(rng.integers(0, nh - crop + 1))
    x0 = int(rng.integers(0, nw - crop + 1))
    image = image[:, y0:y0 + crop, x0:x0 + crop]
    mask = mask[y0:y0 + crop, x0:x0 + crop]
    if flip is None:
        flip = bool(rng.random() < cfg.hflip_prob)
    if flip:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask, dtype=np.uint8)


def normalize(images: np.ndarray) -> np.ndarray:
    return ((images - IMAGE_MEAN[:, None, None]) / IMAGE_STD[:, None, None]).astype(np.float32)


# ----------------------------------------------------------------------------
# evaluation and inference
# ----------------------------------------------------------------------------

def predict_logits(model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        dtype = next(iter(model.params.entries()))[1].dtype
        return model(Tensor(normalize(images).astype(dtype))).data


def predict_mask(model, image: np.ndarray) -> np.ndarray:
    """(3, H, W) image in [0, 1] -> (H, W) class ids; pads to a multiple of 32 when needed."""
    _, h, w = image.shape
    ph, pw = (-h) % 32, (-w) % 32
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge") if ph or pw else image
    logits = predict_logits(model, padded[None])
    return logits[0].argmax(axis=0)[:h, :w].astype(np.uint8)


def evaluate(model, samples, num_classes: int = 2, batch_size: int = 8) -> SegMetrics:
    cm = ConfusionMatrix(num_classes)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        shapes = {s.mask.shape for s in chunk}
        if len(shapes) == 1 and all(d % 32 == 0 for d in next(iter(shapes))):
            logits = predict_logits(model, np.stack([s.image for s in chunk]))
            for s, lg in zip(chunk, logits):
                cm.accumulate(lg.argmax(axis=0), s.mask)
        else:
            for s in chunk:
                cm.accumulate(predict_mask(model, s.image), s.mask)
    return compute_metrics(cm)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    start_iter: int = 0
    end_iter: int = 0
    final_metrics: SegMetrics | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - n % batch_size if n >= batch_size else n, batch_size):
            yield order[i:i + batch_size]


def train(model, dataset, cfg: TrainConfig, eval_set=None, log_path=None, state: OptimState | None = None,
          start_iter: int = 0, rng_state: dict | None = None, stop_iter: int | None = None) -> TrainReport:
    """Run iterations ``start_iter + 1 .. stop_iter`` (default ``cfg.total_iters``) of the schedule.

    The data RNG is derived from ``cfg.seed``; pass ``rng_state`` and the
    optimiser ``state`` from :func:`restore_training` to resume. A run split at
    an epoch boundary reproduces the uninterrupted loss series exactly.
    """
    if not dataset:
        raise TrainError("training dataset is empty")
    if not 0 <= start_iter < cfg.total_iters:
        raise TrainError(f"start iteration {start_iter} outside [0, {cfg.total_iters})")
    stop = cfg.total_iters if stop_iter is None else stop_iter
    if not start_iter < stop <= cfg.total_iters:
        raise TrainError(f"stop iteration {stop} outside ({start_iter}, {cfg.total_iters}]")
    if state is None:
        state = OptimState(lr0=cfg.lr, weight_decay=cfg.weight_decay)
    state.weight_decay = cfg.weight_decay
    rng = np.random.default_rng(cfg.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    batches = _batches(len(dataset), min(cfg.batch_size, len(dataset)), rng)
    dtype = next(iter(model.params.entries()))[1].dtype
    report = TrainReport(start_iter=start_iter)
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for it in range(start_iter, stop):
            idx = next(batches)
            imgs, masks = zip(*(augment(dataset[j].image, dataset[j].mask, cfg, rng) for j in idx))
            x = Tensor(normalize(np.stack(imgs)).astype(dtype))
            loss = cross_entropy_loss(model(x), np.stack(masks))
            backward(loss)
            lr = poly_lr(it, cfg)
            adamw_step(model.params, state, lr)
            lv = float(loss.data)
            report.losses.append(lv)
            report.lrs.append(lr)
            n = it + 1
            if logf and (n % cfg.log_interval == 0 or n == stop):
                logf.write(f"iter {n} lr {lr:.6e} loss {lv:.6f}\n")
                logf.flush()
            if n % cfg.log_interval == 0:
                log.info("iter %d lr %.3e loss %.4f", n, lr, lv)
            if eval_set and cfg.eval_interval and n % cfg.eval_interval == 0:
                log.info("iter %d eval mIoU %.4f", n, evaluate(model, eval_set).miou)
    finally:
        if logf:
            logf.close()
    report.end_iter = stop
    report.rng_state = rng.bit_generator.state
    report.optim_state = state
    if eval_set:
        report.final_metrics = evaluate(model, eval_set)
    return report


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC_PREFIX = b"LEFCKPT"
VERSION = b"1"
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def write_tensors(path, tensors: dict) -> None:
    """Serialise ``name -> float array`` in order to the checkpoint binary layout."""
    chunks = [MAGIC_PREFIX + VERSION, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:7] != MAGIC_PREFIX:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if buf[7:8] != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {buf[7:8]!r}")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptCheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{path}: bad entry name") from exc
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CorruptCheckpointError(f"{path}: {name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


EXTRA_PREFIX = "@"


def save_checkpoint(store: ParamStore, path, extra: dict | None = None) -> None:
    """Write every store entry, then ``extra`` arrays under names prefixed with '@'."""
    tensors = {name: t.data for name, t, _ in store.entries()}
    for k, v in (extra or {}).items():
        tensors[EXTRA_PREFIX + k] = np.asarray(v)
    write_tensors(path, tensors)


def load_checkpoint(store: ParamStore, path) -> dict:
    """Restore every parameter in ``store`` from ``path``; returns the '@' extras."""
    tensors = read_tensors(path)
    extras = {k[len(EXTRA_PREFIX):]: v for k, v in tensors.items() if k.startswith(EXTRA_PREFIX)}
    params = {k: v for k, v in tensors.items() if not k.startswith(EXTRA_PREFIX)}
    for name, t, _ in store.entries():
        if name not in params:
            raise CheckpointError(f"{path}: parameter {name!r} missing from checkpoint")
        arr = params[name]
        if arr.shape != t.shape:
            raise ShapeMismatchError(f"{path}: parameter {name!r} has shape {arr.shape}, model expects {t.shape}")
    unknown = sorted(set(params) - set(store))
    if unknown:
        raise CheckpointError(f"{path}: checkpoint has unknown parameter {unknown[0]!r}")
    for name, t, _ in store.entries():
        t.data = params[name].astype(t.dtype, copy=True)
        t.grad = None
    return extras


def training_extras(report: TrainReport) -> dict:
    """Iteration, optimiser moments and data-RNG state as checkpoint extras."""
    st = report.optim_state
    extras = {"iter": np.array(report.end_iter, dtype=np.float64), "optim/t": np.array(st.t, dtype=np.float64)}
    for name in st.m:
        extras[f"optim/m/{name}"] = st.m[name]
        extras[f"optim/v/{name}"] = st.v[name]
    rs = report.rng_state["state"]
    words = [rs["state"] >> (64 * i) & 0xFFFFFFFF_FFFFFFFF for i in range(2)]
    words += [rs["inc"] >> (64 * i) & 0xFFFFFFFF_FFFFFFFF for i in range(2)]
    # 64-bit words stored as four float64 16-bit limbs each to stay exact
    limbs = [(w >> (16 * j)) & 0xFFFF for w in words for j in range(4)]
    extras["rng"] = np.array(limbs + [report.rng_state["has_uint32"], report.rng_state["uinteger"]], dtype=np.float64)
    return extras


def restore_training(extras: dict, cfg: TrainConfig) -> tuple:
    """Inverse of :func:`training_extras`: ``(start_iter, OptimState, rng_state)``."""
    if "iter" not in extras:
        return 0, None, None
    start = int(extras["iter"])
    st = OptimState(lr0=cfg.lr, weight_decay=cfg.weight_decay, t=int(extras.get("optim/t", 0)))
    for k, v in extras.items():
        if k.startswith("optim/m/"):
            st.m[k[len("optim/m/"):]] = v.copy()
        elif k.startswith("optim/v/"):
            st.v[k[len("optim/v/"):]] = v.copy()
    rng_state = None
    if "rng" in extras:
        vals = [int(x) for x in extras["rng"]]
        words = [sum(vals[4 * i + j] << (16 * j) for j in range(4)) for i in range(4)]
        rng_state = {
            "bit_generator": "PCG64",
            "state": {"state": words[0] | words[1] << 64, "inc": words[2] | words[3] << 64},
            "has_uint32": vals[16],
            "uinteger": vals[17],
        }
    return start, st, rng_state
