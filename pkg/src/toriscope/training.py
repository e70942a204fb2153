"""Self-supervised triplet training and the region-supervised baseline."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contour_io import MODEL_RATE_HZ, REGIONS, PitchSeries
from .encoder import ContourEncoder, save_checkpoint
from .tensor_core import Adam

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    updates: int = 25000
    batch_size: int = 128
    margin: float = 0.4
    negatives: int = 8
    slice_seconds: float = 30.0
    learning_rate: float = 1e-3
    seed: int = 0
    mode: str = "ssl"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0 < self.margin <= 2:
            raise ValueError("margin must lie in (0, 2]")
        frames = self.slice_seconds * MODEL_RATE_HZ
        if abs(frames - round(frames)) > 1e-9:
            raise ValueError("slice_seconds * 20 must be an integer")
        if self.mode not in ("ssl", "region"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.updates < 0 or self.batch_size < 1:
            raise ValueError("updates must be >= 0 and batch_size >= 1")

    @property
    def slice_frames(self) -> int:
        return int(round(self.slice_seconds * MODEL_RATE_HZ))


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # [B, K] indices into the batch's anchors
    song_ids: list


def random_slice(channels: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly placed ``frames``-long window of a [2, T] series; short series are zero-padded."""
    t = channels.shape[1]
    if t <= frames:
        out = np.zeros((channels.shape[0], frames), dtype=channels.dtype)
        out[:, :t] = channels
        return out
    start = int(rng.integers(0, t - frames + 1))
    return channels[:, start:start + frames]


def sample_triplet_batch(corpus: Sequence[np.ndarray], song_ids: Sequence[str], batch_size: int,
                         rng: np.random.Generator, frames: int = 600, negatives: int = 8) -> TripletBatch:
    """Draw distinct songs, two independent slices of each, and in-batch negatives."""
    if len(corpus) < negatives + 1:
        raise TrainingError(f"need at least {negatives + 1} eligible songs, got {len(corpus)}")
    if batch_size < negatives + 1:
        raise TrainingError(f"batch size {batch_size} cannot supply {negatives} negatives per anchor")
    if batch_size > len(corpus):
        raise TrainingError(f"batch size {batch_size} exceeds the {len(corpus)} eligible songs")
    chosen = rng.choice(len(corpus), size=batch_size, replace=False)
    anchors = np.stack([random_slice(corpus[i], frames, rng) for i in chosen])
    positives = np.stack([random_slice(corpus[i], frames, rng) for i in chosen])
    neg = np.empty((batch_size, negatives), dtype=np.int64)
    for i in range(batch_size):
        others = np.delete(np.arange(batch_size), i)
        neg[i] = rng.choice(others, size=negatives, replace=False)
    return TripletBatch(anchors, positives, neg, [song_ids[i] for i in chosen])


def _normalize(v: np.ndarray):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise TrainingError("zero-norm embedding; cosine similarity undefined")
    return v / norm, norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    an, _ = _normalize(np.asarray(a, dtype=np.float64))
    bn, _ = _normalize(np.asarray(b, dtype=np.float64))
    return float(an @ bn)


def triplet_loss(v_a, v_p, v_n_set, margin: float = 0.4, return_grad: bool = False):
    """Hinge triplet loss on cosine similarity, averaged over the negatives.

    ``v_n_set`` is a [K, D] array.  With ``return_grad`` the gradients w.r.t.
    anchor, positive and negatives are returned alongside the loss.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    a = np.asarray(v_a, dtype=np.float64)
    p = np.asarray(v_p, dtype=np.float64)
    n = np.atleast_2d(np.asarray(v_n_set, dtype=np.float64))
    if not (a.shape == p.shape and n.shape[1] == a.shape[0]):
        raise ValueError("anchor, positive and negatives must share one dimension")
    an, a_norm = _normalize(a)
    pn, p_norm = _normalize(p)
    nn, n_norm = _normalize(n)
    s_ap = an @ pn
    s_an = nn @ an
    hinge = margin - s_ap + s_an
    active = hinge > 0
    k = len(n)
    loss = float(np.sum(np.maximum(hinge, 0.0)) / k)
    if not return_grad:
        return loss
    w = active / k
    g_an = -w.sum() * pn + w @ nn
    g_pn = -w.sum() * an
    g_nn = w[:, None] * an[None, :]
    da = (g_an - (g_an @ an) * an) / a_norm
    dp = (g_pn - (g_pn @ pn) * pn) / p_norm
    dn = (g_nn - np.sum(g_nn * nn, axis=1, keepdims=True) * nn) / n_norm
    return loss, da, dp, dn


def batch_triplet_loss(anchors: np.ndarray, positives: np.ndarray, neg_idx: np.ndarray, margin: float):
    """Mean hinge loss over all (anchor, negative) pairs; negatives index other anchors.

    Returns (loss, d_anchors, d_positives).
    """
    an, a_norm = _normalize(anchors)
    pn, p_norm = _normalize(positives)
    b, k = neg_idx.shape
    s_ap = np.sum(an * pn, axis=1)
    s_an = np.einsum("bd,bkd->bk", an, an[neg_idx])
    hinge = margin - s_ap[:, None] + s_an
    active = hinge > 0
    loss = float(np.sum(np.maximum(hinge, 0.0)) / (b * k))
    w = (active / (b * k)).astype(anchors.dtype)
    g_an = -w.sum(axis=1, keepdims=True) * pn + np.einsum("bk,bkd->bd", w, an[neg_idx])
    g_pn = -w.sum(axis=1, keepdims=True) * an
    np.add.at(g_an, neg_idx.reshape(-1), (w[:, :, None] * an[:, None, :]).reshape(b * k, -1))
    da = (g_an - np.sum(g_an * an, axis=1, keepdims=True) * an) / a_norm
    dp = (g_pn - np.sum(g_pn * pn, axis=1, keepdims=True) * pn) / p_norm
    return loss, da, dp


def class_weights(labels: Sequence[int], n_classes: int = len(REGIONS), names: Sequence[str] = REGIONS) -> np.ndarray:
    """Inverse-frequency weights N / (C * N_c); every class must occur."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    missing = [names[c] if c < len(names) else str(c) for c in range(n_classes) if counts[c] == 0]
    if missing:
        raise TrainingError(f"class(es) absent from corpus, weight undefined: {', '.join(missing)}")
    return len(labels) / (n_classes * counts.astype(np.float64))


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                           return_grad: bool = False):
    """Class-weighted softmax cross-entropy normalized by the summed sample weights."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if np.any((labels < 0) | (labels >= c)):
        raise ValueError("labels out of range")
    if np.any(np.asarray(weights) <= 0):
        raise ValueError("class weights must be positive")
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.asarray(weights, dtype=np.float64)[labels]
    total = w.sum()
    loss = float(-np.sum(w * log_p[np.arange(n), labels]) / total)
    if not return_grad:
        return loss
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad.astype(logits.dtype)


class LossLog:
    def __init__(self, path: Optional[Path]):
        self.values: list[float] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None
        if self._fh:
            self._fh.write("step,loss\n")

    def append(self, step: int, loss: float):
        self.values.append(loss)
        if self._fh:
            self._fh.write(f"{step},{loss!r}\n")

    def close(self):
        if self._fh:
            self._fh.close()


def train(model: ContourEncoder, corpus: Sequence[PitchSeries], config: TrainConfig,
          out_dir=None, region_labels: Optional[Sequence[int]] = None,
          held_out: Optional[Sequence[PitchSeries]] = None, provenance: Optional[dict] = None):
    """Run ``config.updates`` Adam steps; returns the list of per-step losses.

    ``region_labels`` (indices into REGIONS, aligned with ``corpus``) is required
    in region mode, where ``model`` must carry a classification head.  With
    ``out_dir`` the loss trace, a config sidecar and checkpoints are written there.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
        (out_dir / "held_out_loss.csv").unlink(missing_ok=True)
    channels = [s.as_channels(model.dtype) for s in corpus]
    ids = [s.song_id for s in corpus]
    frames = config.slice_frames
    rng = np.random.default_rng([config.seed, 1])
    if config.batch_size > len(corpus) > 0:
        log.warning("batch size %d exceeds the %d eligible songs; using %d", config.batch_size, len(corpus), len(corpus))
        config = replace(config, batch_size=len(corpus))
    if config.mode == "region":
        if region_labels is None or len(region_labels) != len(corpus):
            raise TrainingError("region mode needs one region label per song")
        if model.head is None:
            raise TrainingError("region mode needs an encoder built with a classification head")
        weights = class_weights(region_labels)
        region_labels = np.asarray(region_labels, dtype=np.int64)
    elif len(corpus) < config.negatives + 1:
        raise TrainingError(f"need at least {config.negatives + 1} eligible songs, got {len(corpus)}")

    opt = Adam(model.named_parameters(), lr=config.learning_rate)
    trace = LossLog(out_dir / "loss.csv" if out_dir else None)
    model.train()
    started = time.perf_counter()
    try:
        for step in range(1, config.updates + 1):
            model.zero_grad()
            if config.mode == "ssl":
                batch = sample_triplet_batch(channels, ids, config.batch_size, rng, frames, config.negatives)
                b = len(batch.anchors)
                emb = model.forward(np.concatenate([batch.anchors, batch.positives]))
                loss, da, dp = batch_triplet_loss(emb[:b], emb[b:], batch.negatives, config.margin)
                grad = np.concatenate([da, dp])
                batch_ids = batch.song_ids
            else:
                chosen = rng.choice(len(corpus), size=config.batch_size, replace=False)
                x = np.stack([random_slice(channels[i], frames, rng) for i in chosen])
                emb = model.forward(x)
                logits = model.logits(emb)
                loss, dlogits = weighted_cross_entropy(logits, region_labels[chosen], weights, return_grad=True)
                grad = model.head.backward(dlogits)
                batch_ids = [ids[i] for i in chosen]
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}; batch songs: {', '.join(batch_ids)}")
            model.backward(grad.astype(model.dtype, copy=False))
            opt.step(model.named_grads())
            trace.append(step, loss)
            if step % 100 == 0:
                log.info("step %d loss %.4f (%.1fs)", step, loss, time.perf_counter() - started)
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"checkpoint_{step:06d}.ckpt", provenance)
                if held_out:
                    _report_held_out(model, held_out, config, out_dir, step)
    finally:
        trace.close()
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.ckpt", provenance)
    return trace.values


def _report_held_out(model, held_out, config, out_dir: Path, step: int):
    """Append a fixed-seed SSL loss on held-out songs (no parameter update)."""
    series = [s.as_channels(model.dtype) for s in held_out]
    if len(series) < config.negatives + 1:
        return
    rng = np.random.default_rng([config.seed, 2])
    batch = sample_triplet_batch(series, [s.song_id for s in held_out], len(series), rng,
                                 config.slice_frames, config.negatives)
    model.eval()
    b = len(batch.anchors)
    emb = model.forward(np.concatenate([batch.anchors, batch.positives]))
    loss, _, _ = batch_triplet_loss(emb[:b], emb[b:], batch.negatives, config.margin)
    model.train()
    path = out_dir / "held_out_loss.csv"
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("step,loss\n")
        fh.write(f"{step},{loss!r}\n")
