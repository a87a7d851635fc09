"""Training protocol: Dice loss, paired augmentation, 5-fold plans, training runs."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import SamplePair
from .metrics import BINARY_KEYS, SEMANTIC_KEYS, confusion_from_masks, binary_metrics, semantic_metrics
from .optim import AdamW
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

DICE_EPS = 1.0
N_FOLDS = 5


class NumericalError(FloatingPointError):
    pass


# -- loss -------------------------------------------------------------------

def dice_loss(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss over the whole batch.

    ``c == 1``: sigmoid probabilities against a {0,1} mask.  ``c > 1``:
    softmax probabilities against one-hot class indices, averaged over the
    classes present in the batch target.
    """
    target = np.asarray(target)
    B, c, H, W = logits.shape
    if target.shape != (B, H, W):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if c == 1:
        p = ops.sigmoid(logits)
        t = Tensor(target.reshape(B, 1, H, W).astype(logits.dtype))
        inter = ops.sum(p * t)
        return 1.0 - (2.0 * inter + eps) / (ops.sum(p) + float(t.data.sum()) + eps)
    p = ops.softmax_channels(logits)
    onehot = (target[:, None] == np.arange(c).reshape(1, c, 1, 1)).astype(logits.dtype)
    present = [k for k in range(c) if onehot[:, k].any()]
    t = Tensor(onehot)
    inter = ops.sum(p * t, axis=(0, 2, 3))
    psum = ops.sum(p, axis=(0, 2, 3))
    tsum = onehot.sum(axis=(0, 2, 3))
    per_class = (2.0 * inter + eps) / (psum + tsum + eps)
    sel = np.zeros(c, dtype=logits.dtype)
    sel[present] = 1.0 / len(present)
    return 1.0 - ops.sum(per_class * sel)


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugParams:
    quarter_turns: int
    hflip: bool
    vflip: bool


def sample_augmentation(rng) -> AugParams:
    """Rotation in {0, 90, 180, 270} with p = 1/4 each; each flip with p = 1/2, independently."""
    k = int(rng.integers(0, 4))
    return AugParams(k, bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def apply_geometry(arr: np.ndarray, params: AugParams) -> np.ndarray:
    """Index-only transform of the two leading axes of an HxW or HxWxC array."""
    out = np.rot90(arr, params.quarter_turns, axes=(0, 1))
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def normalize_colors(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 1, -1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 1, -1)
    return ((image - mean) / std).astype(np.float32)


def augment_pair(image: np.ndarray, mask: np.ndarray, rng, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)):
    if image.shape[0] != image.shape[1] or mask.shape != image.shape[:2]:
        raise ValueError(f"augment_pair needs square, equal-sized image and mask; got {image.shape}, {mask.shape}")
    params = sample_augmentation(rng)
    return normalize_colors(apply_geometry(image, params), mean, std), apply_geometry(mask, params)


def color_stats(samples: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over every pixel of ``samples``."""
    stack = np.stack([s.image for s in samples]).astype(np.float64)
    mean = stack.mean(axis=(0, 1, 2))
    std = stack.std(axis=(0, 1, 2))
    return mean, np.where(std > 0, std, 1.0)


# -- folds ------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list[np.ndarray]
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def train_indices(self, fold: int, data_setting: str = "large") -> np.ndarray:
        """Union of the four training folds; the small setting keeps
        floor(0.1 * |fold|) seeded picks from each of them."""
        if data_setting not in ("large", "small"):
            raise ValueError(f"unknown data setting {data_setting!r}")
        parts = []
        for k, f in enumerate(self.folds):
            if k == fold:
                continue
            if data_setting == "small":
                rng = np.random.default_rng([self.seed, 1000 + k])
                f = np.sort(rng.choice(f, size=int(np.floor(0.1 * len(f))), replace=False))
            parts.append(f)
        return np.concatenate(parts) if parts else np.array([], dtype=np.int64)


def make_folds(n_items: int, seed: int = 0, n_folds: int = N_FOLDS) -> FoldPlan:
    if n_items < n_folds:
        raise ValueError(f"need at least {n_folds} items for {n_folds}-fold cross-validation")
    perm = np.random.default_rng(seed).permutation(n_items)
    return FoldPlan([np.sort(f) for f in np.array_split(perm, n_folds)], seed)


def make_grouped_folds(groups: list[str], seed: int = 0, n_folds: int = N_FOLDS) -> FoldPlan:
    """Split by group label (e.g. source image) so patches of one source share a fold."""
    uniq = sorted(set(groups))
    plan = make_folds(len(uniq), seed, n_folds)
    where = {g: k for k, f in enumerate(plan.folds) for g in (uniq[i] for i in f)}
    folds = [np.array([i for i, g in enumerate(groups) if where[g] == k], dtype=np.int64)
             for k in range(n_folds)]
    return FoldPlan(folds, seed)


# -- configs / logs ---------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    n_epochs: int = 30
    seed: int = 0
    data_setting: str = "large"
    loss: str = "dice"
    weight_decay: float = 0.01
    augment: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.n_epochs <= 0:
            raise ValueError("batch_size, learning_rate and n_epochs must be positive")
        if self.loss != "dice":
            raise ValueError("dice is the only supported loss")
        if self.data_setting not in ("large", "small"):
            raise ValueError(f"unknown data setting {self.data_setting!r}")


DATASET_PRESETS: dict[str, TrainConfig] = {
    "kvasir": TrainConfig(batch_size=8, learning_rate=1e-4, n_epochs=150),
    "nucleiseg": TrainConfig(batch_size=16, learning_rate=1e-4, n_epochs=200),
    "coco-stuff": TrainConfig(batch_size=16, learning_rate=1e-3, n_epochs=200),
    "urde": TrainConfig(batch_size=4, learning_rate=5e-4, n_epochs=500),
    "isaid": TrainConfig(batch_size=16, learning_rate=1e-4, n_epochs=250),
}


@dataclass
class EpochRecord:
    epoch: int
    cumulative_seconds: float
    loss: float
    metrics: dict[str, float]


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.cumulative_seconds <= self.records[-1].cumulative_seconds:
            raise ValueError("cumulative seconds must strictly increase")
        self.records.append(rec)

    @property
    def metric_keys(self) -> list[str]:
        return list(self.records[0].metrics) if self.records else []

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = self.metric_keys
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "cumulative_seconds", "loss", *keys])
            for r in self.records:
                w.writerow([r.epoch, repr(r.cumulative_seconds), repr(r.loss),
                            *(repr(r.metrics[k]) for k in keys)])
        return path

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                epoch = int(row.pop("epoch"))
                secs = float(row.pop("cumulative_seconds"))
                loss = float(row.pop("loss"))
                log.records.append(EpochRecord(epoch, secs, loss, {k: float(v) for k, v in row.items()}))
        return log


# -- evaluation -------------------------------------------------------------

def _batch_arrays(samples: list[SamplePair], mean, std, dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([normalize_colors(s.image, mean, std).transpose(2, 0, 1) for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples])
    return x, y


def predict_masks(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Class-index predictions in eval mode.  ``images`` are normalised [B,3,H,W]."""
    was_training = model.training
    model.eval()
    preds = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            logits = model(Tensor(images[s:s + batch_size].astype(model.dtype))).data
            if logits.shape[1] == 1:
                preds.append((logits[:, 0] > 0).astype(np.int64))  # sigmoid > 0.5
            else:
                preds.append(logits.argmax(axis=1))
    model.train(was_training)
    return np.concatenate(preds) if preds else np.zeros((0,), dtype=np.int64)


@dataclass
class EvalResult:
    mean: dict[str, float]
    per_image: list[dict[str, float]]
    predictions: np.ndarray


def evaluate(model, samples: list[SamplePair], mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0),
             batch_size: int = 8, micro: bool = False) -> EvalResult:
    """Per-image metrics averaged over the split (or pooled counts if ``micro``)."""
    x, y = _batch_arrays(samples, mean, std, model.dtype)
    preds = predict_masks(model, x, batch_size)
    n_out = model.cfg.n_classes
    n_classes = 2 if n_out == 1 else n_out
    counts = [confusion_from_masks(p, g, n_classes) for p, g in zip(preds, y)]
    score = binary_metrics if n_classes == 2 else semantic_metrics
    per_image = [score(c).as_dict() for c in counts]
    keys = BINARY_KEYS if n_classes == 2 else SEMANTIC_KEYS
    if micro:
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        mean_rec = score(total).as_dict()
    else:
        mean_rec = {k: float(np.mean([r[k] for r in per_image])) for k in keys}
    return EvalResult(mean_rec, per_image, preds)


# -- training ---------------------------------------------------------------

@dataclass
class RunResult:
    log: RunLog
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    color_mean: np.ndarray
    color_std: np.ndarray


def train_run(
    model,
    dataset: list[SamplePair],
    cfg: TrainConfig,
    fold: int,
    plan: FoldPlan | None = None,
    out_dir=None,
    color_norm: tuple | None = None,
    eval_every: int = 1,
) -> RunResult:
    """Train ``model`` on the training folds of ``plan`` and test on fold ``fold``.

    Writes ``runlog.csv``, ``final.ckpt`` and ``best.ckpt`` (highest test IoU)
    into ``out_dir`` when given.
    """
    plan = plan or make_folds(len(dataset), cfg.seed)
    train_idx = plan.train_indices(fold, cfg.data_setting)
    test_idx = plan.test_indices(fold)
    train_set = [dataset[i] for i in train_idx]
    test_set = [dataset[i] for i in test_idx]
    if color_norm is None:
        mean, std = color_stats(train_set)
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in color_norm)

    out = Path(out_dir) if out_dir is not None else None
    norm_extra = {"color_mean": list(map(float, mean)), "color_std": list(map(float, std))}
    opt = AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    log = RunLog()
    best_iou = -np.inf
    best_path = final_path = None
    order_rng = np.random.default_rng([cfg.seed, fold, 7])
    iou_key = "iou" if model.cfg.n_classes == 1 else "mean_iou"
    t0 = time.perf_counter()
    last_t = 0.0

    for epoch in range(1, cfg.n_epochs + 1):
        model.train()
        order = order_rng.permutation(len(train_set))
        losses = []
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xs, ys = [], []
            for i in idx:
                pair = train_set[i]
                if cfg.augment:
                    # per-sample stream: independent of batching and worker order
                    rng = np.random.default_rng([cfg.seed, fold, epoch, int(train_idx[i])])
                    img, msk = augment_pair(pair.image, pair.mask, rng, mean, std)
                else:
                    img, msk = normalize_colors(pair.image, mean, std), pair.mask
                xs.append(img.transpose(2, 0, 1))
                ys.append(msk)
            x = Tensor(np.stack(xs).astype(model.dtype))
            loss = dice_loss(model(x), np.stack(ys))
            lv = loss.item()
            if not np.isfinite(lv):
                raise NumericalError(f"non-finite loss (seed={cfg.seed}, epoch={epoch}, batch={b})")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(lv)

        if epoch % eval_every == 0 or epoch == cfg.n_epochs:
            metrics = evaluate(model, test_set, mean, std, batch_size=cfg.batch_size).mean
        else:
            metrics = dict.fromkeys(log.metric_keys or [iou_key], float("nan"))
        now = max(time.perf_counter() - t0, np.nextafter(last_t, np.inf))
        last_t = now
        log.append(EpochRecord(epoch, now, float(np.mean(losses)), metrics))
        logger.info("epoch %d loss %.4f %s %.4f", epoch, np.mean(losses), iou_key, metrics.get(iou_key, np.nan))

        if out is not None:
            log.write_csv(out / "runlog.csv")
            if metrics.get(iou_key, -np.inf) > best_iou:
                best_iou = metrics[iou_key]
                best_path = save_checkpoint(model, out / "best.ckpt", {"epoch": epoch, **norm_extra})
    if out is not None:
        final_path = save_checkpoint(model, out / "final.ckpt", {"epoch": cfg.n_epochs, **norm_extra})
    return RunResult(log, final_path, best_path, mean, std)
