"""Datasets, augmentation, optimisation and metric logging.

Images are stored as float64 (n, c, h, w) arrays, point sets as (n, d).
"""

from __future__ import annotations

import csv
import gzip
import logging
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import AdjointError, adjoint_backward, grad_route_to_extractor
from .models import ForwardError, ImplicitModel
from .ode import SolverError
from .shared_init import SharedInit, broadcast_init, update_init
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_ENV = "HOMOODE_MNIST_DIR"


class FormatError(ValueError):
    pass


class DataUnavailableError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)


# ---- random streams --------------------------------------------------------
def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, dropout, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# ---- IDX files ---------------------------------------------------------------
def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expect_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    try:
        with _open(path) as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if len(buf) < 4:
        raise OSError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic >> 8 != 0x08 or (expect_magic is not None and magic != expect_magic):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    size = int(np.prod(dims))
    if len(buf) < head + size:
        raise OSError(f"{path}: truncated IDX body ({len(buf) - head} of {size} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=head).reshape(dims)


def save_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (gzipped if the name ends in .gz)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    body = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(str(path), "wb") as fh:
        fh.write(body)


def standardize_mnist(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float64) / 255.0 - MNIST_MEAN) / MNIST_STD


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    raw = read_idx(images_path, IDX_IMAGES)
    lab = read_idx(labels_path, IDX_LABELS)
    if raw.shape[0] != lab.shape[0]:
        raise FormatError("image and label files disagree on the sample count")
    return Dataset(standardize_mnist(raw)[:, None], lab.astype(np.int64), split, 10)


def find_mnist_dir(root=None) -> Path:
    candidates = [root] if root else [os.environ.get(MNIST_ENV), "data/mnist",
                                      Path.home() / ".cache" / "homoode" / "mnist"]
    for c in candidates:
        if not c:
            continue
        d = Path(c)
        name = MNIST_FILES["test"][0]
        if (d / name).exists() or (d / (name + ".gz")).exists():
            return d
    raise DataUnavailableError(
        f"MNIST IDX files not found; set {MNIST_ENV} or place the four files in ./data/mnist")


def _resolve(d: Path, name: str) -> Path:
    return d / name if (d / name).exists() else d / (name + ".gz")


def load_mnist(root=None, split: str = "train") -> Dataset:
    d = find_mnist_dir(root)
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(_resolve(d, img), _resolve(d, lab), split)


def mnist_subset(root=None, n_train: int = 10000, n_test: int = 2000, seed: int = 0):
    """Random class-mixed subsets of the official train and test splits."""
    rng = substream(seed, "data")
    tr = load_mnist(root, "train")
    te = load_mnist(root, "test")
    return (tr.subset(np.sort(rng.permutation(len(tr))[:n_train])),
            te.subset(np.sort(rng.permutation(len(te))[:n_test])))


# ---- small built-in datasets ---------------------------------------------------
def _two_class(X, y, seed: int, split: str) -> Dataset:
    perm = np.random.default_rng(seed).permutation(len(y))
    return Dataset(np.asarray(X, float)[perm], np.asarray(y)[perm], split, 2)


def synth_circles(n: int, noise: float = 0.0, seed: int = 0, split: str = "train") -> Dataset:
    """Two concentric circles of radii 1.0 (class 0) and 0.5 (class 1)."""
    from sklearn.datasets import make_circles

    if n % 2:
        raise ValueError("n must be even")
    X, y = make_circles(n_samples=n, noise=noise, factor=0.5, random_state=seed,
                        shuffle=False)
    return _two_class(X, y, seed, split)


def synth_moons(n: int, noise: float = 0.0, seed: int = 0, split: str = "train") -> Dataset:
    from sklearn.datasets import make_moons

    if n % 2:
        raise ValueError("n must be even")
    X, y = make_moons(n_samples=n, noise=noise, random_state=seed, shuffle=False)
    return _two_class(X, y, seed, split)


def load_digits_split(n_test: int = 397, seed: int = 0):
    """The 8x8 handwritten digits bundled with scikit-learn, standardized."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = d.images.astype(np.float64) / 16.0
    x = (x - x.mean()) / x.std()
    perm = substream(seed, "data").permutation(len(d.target))
    te, tr = perm[:n_test], perm[n_test:]
    full = Dataset(x[:, None], d.target, "train", 10)
    return full.subset(np.sort(tr), "train"), full.subset(np.sort(te), "test")


# ---- augmentation --------------------------------------------------------------
def augment(images: np.ndarray, pad: int = 0, flip: bool = False, seed=None,
            return_offsets: bool = False):
    """Zero-pad, random-crop back to size, and optionally flip horizontally (p = 0.5)."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(images)
    n, _, h, w = x.shape
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oy = rng.integers(0, 2 * pad + 1, size=n)
        ox = rng.integers(0, 2 * pad + 1, size=n)
        out = np.stack([xp[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
    else:
        oy = ox = np.full(n, 0)
        out = x.copy()
    if flip:
        fl = rng.random(n) < 0.5
        out[fl] = out[fl][..., ::-1]
    return (out, oy, ox) if return_offsets else out


# ---- optimisation ----------------------------------------------------------------
class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---- metric log ------------------------------------------------------------------
METRIC_HEADER = ("epoch", "split", "accuracy", "mean_nfe", "loss", "wall_time_s")


@dataclass
class MetricRow:
    epoch: int
    split: str
    accuracy: float
    mean_nfe: float
    loss: float
    wall_time_s: float


@dataclass
class MetricLog:
    rows: List[MetricRow] = field(default_factory=list)
    skipped_batches: int = 0
    total_nfe: int = 0
    forwards: int = 0

    def append(self, row: MetricRow) -> None:
        if self.rows and row.epoch < self.rows[-1].epoch:
            raise ValueError("epochs must be non-decreasing")
        self.rows.append(row)

    def last(self, split: str) -> Optional[MetricRow]:
        for r in reversed(self.rows):
            if r.split == split:
                return r
        return None

    def to_csv(self, path, comment: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(METRIC_HEADER)
            for r in self.rows:
                w.writerow([r.epoch, r.split, repr(r.accuracy), repr(r.mean_nfe), repr(r.loss),
                            f"{r.wall_time_s:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "MetricLog":
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rd = csv.DictReader(lines)
        out = cls()
        for d in rd:
            out.append(MetricRow(int(d["epoch"]), d["split"], float(d["accuracy"]),
                                 float(d["mean_nfe"]), float(d["loss"]), float(d["wall_time_s"])))
        return out


# ---- training ----------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment_pad: int = 0
    augment_flip: bool = False
    backward: str = "direct"  # or "adjoint"
    eval_batch_size: int = 256
    eval_train: bool = False  # re-evaluate the train split after each epoch
    seed: int = 0

    def __post_init__(self):
        if self.backward not in ("direct", "adjoint"):
            raise ValueError("backward must be 'direct' or 'adjoint'")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


def initial_state(model: ImplicitModel, si: Optional[SharedInit], batch: int) -> Optional[Tensor]:
    if si is None or model.config.kind != "homoode":
        return None
    if model.config.arch == "mlp":
        return broadcast_init(si, 0, 0, batch)
    h, w = model.feature_hw
    return broadcast_init(si, h, w, batch)


def evaluate(model: ImplicitModel, data: Dataset, shared_init: Optional[SharedInit] = None,
             batch_size: int = 256) -> Tuple[float, float, float]:
    """(accuracy, mean NFE per forward, mean loss) with dropout off and no tape.

    A batch whose forward fails counts as misclassified and is left out of
    the loss and NFE means.
    """
    correct, loss_sum, scored, nfes = 0, 0.0, 0, []
    for i in range(0, len(data), batch_size):
        xb, yb = data.images[i:i + batch_size], data.labels[i:i + batch_size]
        try:
            logits, rec = model.predict(xb, initial_state(model, shared_init, len(yb)))
        except (ForwardError, SolverError) as exc:
            log.warning("evaluation forward failed on %d samples: %s", len(yb), exc)
            continue
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        loss_sum += model.loss(logits, yb).item() * len(yb)
        scored += len(yb)
        nfes.append(rec.nfe)
    loss = loss_sum / scored if scored else float("nan")
    return correct / max(len(data), 1), float(np.mean(nfes)) if nfes else 0.0, loss


def train_step(model: ImplicitModel, opt: Adam, xb, yb, cfg: TrainConfig, z0: Optional[Tensor],
               rng: Optional[np.random.Generator]):
    """One optimizer step; returns (loss, correct, ForwardRecord)."""
    params = opt.params
    use_adjoint = cfg.backward == "adjoint" and model.config.kind in ("homoode", "node", "anode")
    if use_adjoint:
        try:
            return _adjoint_step(model, opt, xb, yb, z0, rng)
        except AdjointError as exc:
            log.warning("adjoint failed (%s); falling back to direct backprop", exc)
    with Tape() as tape:
        rec = model.forward(xb, z0=z0, rng=rng)
        logits = model.classify(rec.z_final)
        loss = model.loss(logits, yb)
    grads = tape.gradient(loss, params)
    opt.step(grads)
    correct = int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return loss.item(), correct, rec


def _adjoint_step(model: ImplicitModel, opt: Adam, xb, yb, z0, rng):
    rec = model.forward(xb, z0=z0, rng=rng)  # no tape: nothing retained
    with Tape() as tape:
        zf = Tensor(rec.z_final.data, requires_grad=True)
        logits = model.classify(zf)
        loss = model.loss(logits, yb)
    head = [p for n, p in model.named_parameters("head.")]
    g_head = tape.gradient(loss, head + [zf])
    adj = adjoint_backward(model, rec, g_head[-1])
    if model.config.kind == "homoode":
        ext, _ = grad_route_to_extractor(adj.grad_x, model, xb)
    else:
        # the initial state is the extractor output (plus zero augmentation)
        ext, _ = grad_route_to_extractor(adj.grad_z0[:, :model.config.channels], model, xb)
    by_name = dict(zip([n for n, _ in model.named_parameters("head.")], g_head[:-1]))
    by_name.update(adj.grad_theta)
    by_name.update(ext)
    grads = [by_name.get(n, np.zeros_like(p.data)) for n, p in model.params.items()]
    opt.step(grads)
    correct = int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return loss.item(), correct, rec


def train_loop(model: ImplicitModel, train: Dataset, test: Optional[Dataset] = None,
               cfg: Optional[TrainConfig] = None, shared_init: Optional[SharedInit] = None,
               log_: Optional[MetricLog] = None) -> MetricLog:
    """Adam on the model parameters, with optional shared-init updates on its own schedule."""
    cfg = cfg or TrainConfig()
    mlog = log_ or MetricLog()
    opt = Adam(list(model.params.values()), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    shuffle_rng = substream(cfg.seed, "shuffle")
    aug_rng = substream(cfg.seed, "augment")
    drop_rng = substream(cfg.seed, "dropout") if model.config.dropout > 0 else None
    is_image = train.images.ndim == 4
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        loss_sum, correct, seen, nfes = 0.0, 0, 0, []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb, yb = train.images[idx], train.labels[idx]
            if is_image and (cfg.augment_pad or cfg.augment_flip):
                xb = augment(xb, cfg.augment_pad, cfg.augment_flip, aug_rng)
            z0 = initial_state(model, shared_init, len(idx))
            try:
                loss, corr, rec = train_step(model, opt, xb, yb, cfg, z0, drop_rng)
            except (ForwardError, SolverError) as exc:
                mlog.skipped_batches += 1
                log.warning("epoch %d: skipping batch after forward failure: %s", epoch, exc)
                continue
            loss_sum += loss * len(idx)
            correct += corr
            seen += len(idx)
            nfes.append(rec.nfe)
            mlog.total_nfe += rec.nfe
            mlog.forwards += 1
            if shared_init is not None and model.config.kind == "homoode" and shared_init.tick():
                update_init(shared_init, rec.z_final.data)
        wall = time.perf_counter() - start
        if cfg.eval_train:
            acc, mnfe, ls = evaluate(model, train, shared_init, cfg.eval_batch_size)
            mlog.append(MetricRow(epoch, "train", acc, mnfe, ls, wall))
        else:
            mlog.append(MetricRow(epoch, "train", correct / max(seen, 1),
                                  float(np.mean(nfes)) if nfes else 0.0,
                                  loss_sum / max(seen, 1), wall))
        if test is not None:
            acc, mnfe, ls = evaluate(model, test, shared_init, cfg.eval_batch_size)
            mlog.append(MetricRow(epoch, "test", acc, mnfe, ls, time.perf_counter() - start))
    return mlog
