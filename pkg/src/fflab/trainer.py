"""Training loop, checkpoint format, and count-error evaluation.

The optimizer is Adam with decoupled weight decay: decayed parameters
shrink by (1 - lr * wd) before the moment update, and parameters tagged
no_decay (biases, normalization scales) are never shrunk. Evaluation
pads full images to a multiple of 32 by reflection and counts only the
grid cells that cover the original frame.
"""

import csv
import dataclasses
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import data as D
from .loss import LossConfig, total_loss

__all__ = [
    "TrainConfig",
    "TrainResult",
    "MetricsReport",
    "TrainingDiverged",
    "CheckpointError",
    "AdamW",
    "clip_gradients",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_arrays",
]

CHECKPOINT_MAGIC = b"FFCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step at which it happened."""

    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint file."""


@dataclasses.dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.005
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int = 2000
    seed: int = 0
    crop: int = 256
    flip_prob: float = 0.5
    augment: bool = True
    rasterize_mode: str = "additive"
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    eval_every: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not (self.lr >= 0.0 and math.isfinite(self.lr)):
            raise ValueError("lr must be finite and non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not (0.0 <= self.betas[0] < 1.0 and 0.0 <= self.betas[1] < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclasses.dataclass
class MetricsReport:
    mae: float
    mse: float
    n_images: int
    rows: list  # (true count, predicted count) per image, dataset order

    def to_dict(self):
        return {
            "mae": self.mae,
            "mse": self.mse,
            "n_images": self.n_images,
            "rows": [[float(c), float(p)] for c, p in self.rows],
        }


@dataclasses.dataclass
class TrainResult:
    steps: int
    curve: list  # dicts with step/count/ot/variation/total
    eval_history: list  # (step, MetricsReport)


class AdamW:
    """Adam with decoupled weight decay over a model's named parameters."""

    def __init__(self, model, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(model.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and not p.no_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(model, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    grads = [p.grad for _, p in model.named_parameters() if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def _model_dtype(model):
    for _, p in model.named_parameters():
        return p.data.dtype
    return np.float64


def _to_input(image, channels, dtype):
    x = np.asarray(image, dtype=dtype)[None, None]
    if channels > 1:
        x = np.repeat(x, channels, axis=1)
    return x


def train(model, samples, config, out_dir=None):
    """Optimize the model on (image, annotation) samples.

    Batches draw sample indices with replacement from the run's seeded
    generator; each image is cropped/flipped, rasterized at the loss
    stride, and contributes one per-image loss to the batch mean. Writes
    checkpoint.ffck and loss_curve.csv under out_dir when given. A
    non-finite loss aborts with TrainingDiverged after writing the last
    finite-loss parameters.
    """
    if not samples:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model, config.lr, config.weight_decay, config.betas, config.adam_eps)
    dtype = _model_dtype(model)
    channels = model.config.in_channels
    stride = config.loss.stride

    model.train()
    curve = []
    eval_history = []
    last_good = {k: v.copy() for k, v in model.state_dict().items()}

    def flush(final_step):
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(out_dir, "checkpoint.ffck"))
        write_loss_curve(os.path.join(out_dir, "loss_curve.csv"), curve)

    for step in range(config.steps):
        idx = rng.integers(0, len(samples), size=config.batch_size)
        images, maps, point_sets = [], [], []
        for i in idx:
            image, ann = samples[i]
            if config.augment:
                crop = min(config.crop, *image.shape)
                crop -= crop % 32
                image, ann = D.augment(image, ann, crop=crop,
                                       flip_prob=config.flip_prob, rng=rng)
            images.append(image)
            maps.append(D.rasterize(ann, stride=stride, mode=config.rasterize_mode))
            point_sets.append(ann.as_array())

        batch = np.concatenate([_to_input(im, channels, dtype) for im in images])
        density = model(Tensor(batch))

        loss = None
        sums = {"count": 0.0, "ot": 0.0, "variation": 0.0, "total": 0.0}
        for b in range(len(images)):
            per, parts = total_loss(maps[b], density[b, 0], point_sets[b], config.loss)
            loss = per if loss is None else T.add(loss, per)
            for k in sums:
                sums[k] += parts[k]
        loss = T.mul(loss, 1.0 / len(images))

        loss_val = loss.item()
        if not math.isfinite(loss_val):
            model.load_state_dict(last_good)
            flush(step)
            raise TrainingDiverged(
                step, f"non-finite loss {loss_val} at step {step}; "
                      "restored parameters from the previous step")

        model.zero_grad()
        loss.backward()
        if config.grad_clip is not None:
            clip_gradients(model, config.grad_clip)
        opt.step()
        last_good = {k: v.copy() for k, v in model.state_dict().items()}

        row = {"step": step}
        row.update((k, sums[k] / len(images)) for k in ("count", "ot", "variation", "total"))
        curve.append(row)

        if config.eval_every and (step + 1) % config.eval_every == 0:
            eval_history.append((step + 1, evaluate(model, samples)))

    flush(config.steps)
    return TrainResult(config.steps, curve, eval_history)


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "count", "ot", "variation", "total"])
        for row in curve:
            writer.writerow([row["step"]] +
                            [f"{row[k]:.10g}" for k in ("count", "ot", "variation", "total")])


def read_loss_curve(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["step", "count", "ot", "variation", "total"]:
            raise ValueError(f"{path}: unexpected loss-curve header {header}")
        return [{"step": int(r[0]), "count": float(r[1]), "ot": float(r[2]),
                 "variation": float(r[3]), "total": float(r[4])} for r in reader]


def predicted_count(model, image):
    """Count estimate for one full image of arbitrary size.

    The image is padded on the bottom/right by reflection up to a
    multiple of 32; the density sum then runs over the grid cells whose
    origin lies inside the original frame, so pure padding cells never
    contribute.
    """
    h, w = image.shape
    ph = (-h) % 32
    pw = (-w) % 32
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "edge"
        image = np.pad(image, ((0, ph), (0, pw)), mode=mode)
    x = _to_input(image, model.config.in_channels, _model_dtype(model))
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            density = model(Tensor(x)).data[0, 0]
    finally:
        if was_training:
            model.train()
    return float(density[:math.ceil(h / 8), :math.ceil(w / 8)].sum())


def evaluate(model, samples, workers=None):
    """MAE and root-mean-square count error over full images.

    workers defaults to the FFLAB_THREADS environment variable (1 if
    unset). Images shard across threads against the read-only model and
    the per-image table is merged in dataset order regardless of worker
    count.
    """
    if not samples:
        raise ValueError("dataset is empty")
    if workers is None:
        workers = int(os.environ.get("FFLAB_THREADS", "1"))
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    preds = list(pool.map(
                        lambda s: predicted_count(model, s[0]), samples))
            else:
                preds = [predicted_count(model, image) for image, _ in samples]
    finally:
        if was_training:
            model.train()
    rows = [(float(ann.count), pred) for (_, ann), pred in zip(samples, preds)]
    errors = np.array([c - p for c, p in rows])
    return MetricsReport(
        mae=float(np.mean(np.abs(errors))),
        mse=float(np.sqrt(np.mean(errors * errors))),
        n_images=len(rows),
        rows=rows,
    )


def save_checkpoint(model, path):
    """Serialize parameters and buffers; see load_checkpoint for layout."""
    state = model.state_dict()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(state))
    for name, array in state.items():
        encoded = name.encode("utf-8")
        dtype = np.dtype(array.dtype)
        if dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: cannot serialize dtype {dtype}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _DTYPE_TAGS[dtype], array.ndim)
        blob += struct.pack(f"<{array.ndim}I", *array.shape)
        blob += np.ascontiguousarray(array).astype(dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def read_checkpoint_arrays(path):
    """Parse a checkpoint into a {name: array} dict without needing a model.

    Layout: magic "FFCK", u32 version, u32 entry count, then per entry a
    u16 name length, the UTF-8 name, a u8 dtype tag (0 float64,
    1 float32), a u8 rank, u32 dims, and the raw little-endian values.
    """
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: file ends inside {what} "
                                  f"(byte {pos}, need {n} more)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2, "entry header"))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: {name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        values = take(n_bytes, f"values of {name}")
        state[name] = np.frombuffer(values, dtype=dtype.newbyteorder("<")) \
            .astype(dtype).reshape(shape)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after "
                              f"{count} entries")
    return state


def load_checkpoint(model, path):
    """Restore a checkpoint written by save_checkpoint into the model."""
    state = read_checkpoint_arrays(path)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: does not match the model ({e})")
    return model
