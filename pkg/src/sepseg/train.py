"""Adam optimizer, training loop, k-fold splitting and evaluation.

The loop draws stratified batches with replacement, augments them,
optimizes weighted cross-entropy and tracks the best-validation
checkpoint. Everything is driven by explicit RNG substreams, so a run is
bit-reproducible from its seed.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autograd import Rng, Tensor, backward
from .data import save_checkpoint
from .metrics import (
    ClassWeights,
    dice_standard,
    inverse_frequency_weights,
    jaccard,
    overlap_score,
    probs_to_mask,
    weighted_cross_entropy,
)
from .model import ModelSpec, build_model, forward


class NumericError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState):
    """One Adam update over named parameters; gradients are consumed from
    each tensor's ``grad`` and reset afterwards."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.zero_grad()


def clip_gradients(params, max_norm: float):
    """Global-norm gradient clipping; returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def kfold_split(samples, folds: int, fold_index: int, seed: int):
    """Volume-granularity split; validation fold selected by index.

    Deterministic given the seed; the union of all folds' validation
    sets partitions the volumes.
    """
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if not 0 <= fold_index < folds:
        raise ValueError(f"fold index {fold_index} out of range for {folds} folds")
    volume_ids = sorted({s.volume_id for s in samples})
    if len(volume_ids) < folds:
        raise ValueError(f"need at least {folds} volumes for {folds} folds, "
                         f"got {len(volume_ids)}")
    order = list(Rng(seed, 7).integers(0, 2**62, len(volume_ids)))
    shuffled = [v for _, v in sorted(zip(order, volume_ids))]
    val_ids = set(shuffled[fold_index::folds])
    train = [s for s in samples if s.volume_id not in val_ids]
    val = [s for s in samples if s.volume_id in val_ids]
    return train, val


def split_slices(samples, folds: int, fold_index: int, seed: int):
    """Slice-granularity fallback split for single-volume datasets
    (e.g. phantoms), same fold semantics as kfold_split."""
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    order = list(Rng(seed, 7).integers(0, 2**62, len(samples)))
    shuffled = [s for _, s in sorted(zip(order, range(len(samples))))]
    val_idx = set(shuffled[fold_index::folds])
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 16
    lr: float = 0.001
    dropout: float = 0.05
    val_fraction: float = 0.25
    folds: int = 4
    fold_index: int = 0
    seed: int = 0
    eval_every: int = 500
    augment: bool = True
    grad_clip: float = 5.0
    lesion_class: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class RunRecord:
    iteration: int
    loss: float
    train_dice: float
    val_dice: float
    val_overlap: float
    wall_time: float


def run_log_lines(records):
    """Deterministic log rows; wall time is kept out so identically
    seeded runs produce byte-identical logs."""
    lines = ["iteration,loss,train_dice,val_dice,val_overlap"]
    for r in records:
        lines.append(
            f"{r.iteration},{r.loss:.8f},{r.train_dice:.6f},{r.val_dice:.6f},{r.val_overlap:.6f}"
        )
    return "\n".join(lines) + "\n"


def _draw_batch(train_set, lesion_idx, batch_size, rng, lesion_class):
    """Sample with replacement, forcing >= 1 lesion-bearing slice when
    the split has any."""
    n = len(train_set)
    idx = list(rng.integers(0, n, batch_size))
    if lesion_idx and not any(np.any(train_set[i].mask == lesion_class) for i in idx):
        idx[0] = lesion_idx[int(rng.integers(0, len(lesion_idx)))]
    return [train_set[i] for i in idx]


def _batch_arrays(batch, config, rng_aug, aug_spec):
    from .preprocess import augment_pair

    images, labels = [], []
    for slot, s in enumerate(batch):
        img, msk = s.image[0], s.mask
        if config.augment:
            img, msk = augment_pair(img, msk, aug_spec, rng_aug.substream(slot))
        images.append(img[None])
        labels.append(msk)
    return np.stack(images), np.stack(labels)


def _mean_dice(model, samples, batch, lesion_class):
    """Mean per-slice dice (standard + overlap) in infer mode; slices
    with empty truth are skipped for the per-slice mean."""
    dices, overlaps = [], []
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        x = Tensor(np.stack([s.image for s in chunk]))
        probs = forward(model, x, mode="infer")
        pred = probs_to_mask(probs, lesion_class)
        for j, s in enumerate(chunk):
            truth = (s.mask == lesion_class).astype(np.uint8)
            if not truth.any():
                continue
            dices.append(dice_standard(pred[j], truth))
            overlaps.append(overlap_score(pred[j], truth))
    if not dices:
        return 0.0, 0.0
    return float(np.mean(dices)), float(np.mean(overlaps))


def train(model_spec: ModelSpec, config: TrainConfig, train_set, val_set,
          out_dir=None, aug_spec=None, log_fn=None):
    """Run the optimization loop; returns (model, records, best).

    ``best`` is (iteration, val_dice, checkpoint arrays). When ``out_dir``
    is given, best.ckpt / final.ckpt / run_log.csv / timing.txt are
    written there.
    """
    import os

    from .preprocess import AugmentSpec

    if not train_set:
        raise ValueError("training split is empty")
    if aug_spec is None:
        aug_spec = AugmentSpec()
    rng = Rng(config.seed)
    model = build_model(model_spec, rng.substream(0))
    weights = inverse_frequency_weights(
        (s.mask for s in train_set), model_spec.num_classes
    )
    params = model.named_parameters()
    state = AdamState(lr=config.lr)
    model_spec.dropout_rate = config.dropout
    lesion_idx = [
        i for i, s in enumerate(train_set) if np.any(s.mask == config.lesion_class)
    ]
    records = []
    best = None  # (iteration, val_dice, snapshot)
    start = time.time()

    for it in range(1, config.iterations + 1):
        batch = _draw_batch(
            train_set, lesion_idx, config.batch_size, rng.substream(1, it),
            config.lesion_class,
        )
        x_np, y_np = _batch_arrays(batch, config, rng.substream(2, it), aug_spec)
        x = Tensor(x_np)
        probs = forward(model, x, mode="train", rng=rng.substream(3, it))
        loss = weighted_cross_entropy(probs, y_np, weights)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(
                f"non-finite loss {loss_val} at iteration {it} "
                f"(batch volumes {[s.volume_id for s in batch]})"
            )
        backward(loss)
        clip_gradients(params, config.grad_clip)
        adam_step(params, state)

        if it % config.eval_every == 0 or it == config.iterations:
            train_dice, _ = _mean_dice(model, train_set, config.batch_size,
                                       config.lesion_class)
            val_dice, val_overlap = _mean_dice(
                model, val_set if val_set else train_set, config.batch_size,
                config.lesion_class,
            )
            rec = RunRecord(it, loss_val, train_dice, val_dice, val_overlap,
                            time.time() - start)
            records.append(rec)
            if log_fn:
                log_fn(rec)
            if best is None or val_dice > best[1]:
                snapshot = OrderedDict(
                    (k, p.data.copy()) for k, p in params.items()
                )
                best = (it, val_dice, snapshot)

    if best is None:
        best = (config.iterations, 0.0,
                OrderedDict((k, p.data.copy()) for k, p in params.items()))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(best[2], os.path.join(out_dir, "best.ckpt"))
        save_checkpoint(params, os.path.join(out_dir, "final.ckpt"))
        with open(os.path.join(out_dir, "run_log.csv"), "w") as fh:
            fh.write(run_log_lines(records))
        with open(os.path.join(out_dir, "timing.txt"), "w") as fh:
            for r in records:
                fh.write(f"{r.iteration},{r.wall_time:.3f}\n")
    return model, records, best


def evaluate(model, samples, lesion_class: int = 1, batch: int = 8):
    """Per-volume and aggregate scores in infer mode.

    Per-volume rows: mean per-slice scores over slices with nonempty
    truth; a global-voxel variant pools all pixels of the volume.
    """
    by_volume = OrderedDict()
    for s in samples:
        by_volume.setdefault(s.volume_id, []).append(s)
    rows = []
    for vid, group in by_volume.items():
        preds, truths = [], []
        for i in range(0, len(group), batch):
            chunk = group[i : i + batch]
            x = Tensor(np.stack([s.image for s in chunk]))
            probs = forward(model, x, mode="infer")
            preds.append(probs_to_mask(probs, lesion_class))
            truths.append(np.stack([(s.mask == lesion_class) for s in chunk]))
        pred = np.concatenate(preds)
        truth = np.concatenate(truths).astype(np.uint8)
        slice_scores = [
            (overlap_score(pred[i], truth[i]), dice_standard(pred[i], truth[i]),
             jaccard(pred[i], truth[i]))
            for i in range(len(group))
            if truth[i].any()
        ]
        if slice_scores:
            per_slice = tuple(float(np.mean(col)) for col in zip(*slice_scores))
        else:
            per_slice = (float("nan"),) * 3
        global_scores = (overlap_score(pred, truth), dice_standard(pred, truth),
                         jaccard(pred, truth))
        rows.append({
            "volume_id": vid,
            "overlap": per_slice[0],
            "dice": per_slice[1],
            "jaccard": per_slice[2],
            "overlap_global": global_scores[0],
            "dice_global": global_scores[1],
            "jaccard_global": global_scores[2],
        })
    means = {}
    for key in ("overlap", "dice", "jaccard", "overlap_global", "dice_global",
                "jaccard_global"):
        vals = [r[key] for r in rows if np.isfinite(r[key])]
        means[key] = float(np.mean(vals)) if vals else float("nan")
    return rows, means
