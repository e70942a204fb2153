"""The contour encoder: four conv blocks, pooling, and context attention.

Input is a [N, 2, T] batch of (tonic-relative pitch, confidence) at 20 Hz;
output is one 256-dimensional embedding per item.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contour_io import PitchSeries, SongRecord, decimate, included, parse_contour_file, to_pitch_series
from .scale_analysis import TonicEstimate, estimate_tonic
from .tensor_core import ACTIVATIONS, BatchNorm1d, ContextAttention, Conv1d, Linear, MaxPool1d

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TORICKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class InputTooShortError(ValueError):
    pass


@dataclass
class EncoderConfig:
    channels: tuple = (64, 128, 256, 256)
    kernel: int = 3
    pool_sizes: tuple = (5, 4, 4)
    embedding_dim: int = 256
    attention_heads: int = 8
    activation: str = "relu"
    in_channels: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.pool_sizes = tuple(int(p) for p in self.pool_sizes)
        self.validate()

    def validate(self):
        if len(self.pool_sizes) != len(self.channels) - 1:
            raise ValueError("need exactly one pooling size between consecutive conv layers")
        if self.embedding_dim != self.channels[-1]:
            raise ValueError("embedding_dim must equal the last conv channel count")
        if self.embedding_dim % self.attention_heads:
            raise ValueError("embedding_dim must be divisible by attention_heads")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kernel % 2 != 1 or any(p < 1 for p in self.pool_sizes):
            raise ValueError("kernel must be odd and pooling sizes positive")

    @property
    def min_length(self) -> int:
        """Shortest input for which every pooling stage still yields a frame."""
        return int(np.prod(self.pool_sizes))

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pool_sizes"] = list(self.pool_sizes)
        return d


@dataclass
class Embedding:
    song_id: str
    vector: np.ndarray


class ContourEncoder:
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32, head_classes: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.blocks = []
        prev = config.in_channels
        for i, ch in enumerate(config.channels):
            self.blocks.append((f"conv{i}", Conv1d(prev, ch, config.kernel, rng=rng, dtype=dtype)))
            self.blocks.append((f"bn{i}", BatchNorm1d(ch, dtype=dtype)))
            self.blocks.append((f"act{i}", ACTIVATIONS[config.activation]()))
            if i < len(config.pool_sizes):
                self.blocks.append((f"pool{i}", MaxPool1d(config.pool_sizes[i])))
            prev = ch
        self.attention = ContextAttention(config.embedding_dim, config.attention_heads, rng=rng, dtype=dtype)
        self.head = Linear(config.embedding_dim, head_classes, rng=rng, dtype=dtype) if head_classes else None
        self.training = True

    @property
    def dtype(self):
        return self.attention.params["weight"].dtype

    def layers(self):
        yield from self.blocks
        yield "attention", self.attention
        if self.head is not None:
            yield "head", self.head

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.grads.items()}

    def batchnorms(self):
        return [(name, layer) for name, layer in self.blocks if isinstance(layer, BatchNorm1d)]

    def zero_grad(self):
        for _, layer in self.layers():
            layer.zero_grad()

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training: bool):
        self.training = training
        for _, layer in self.layers():
            layer.training = training

    def astype(self, dtype):
        for _, layer in self.layers():
            layer.astype(dtype)
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        """[N, 2, T] -> [N, embedding_dim]."""
        if x.ndim != 3 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"encoder expects [N, {self.config.in_channels}, T], got {x.shape}")
        if x.shape[2] < self.config.min_length:
            raise InputTooShortError(
                f"input has {x.shape[2]} frames; at least {self.config.min_length} are required"
            )
        h = x.astype(self.dtype, copy=False)
        for _, layer in self.blocks:
            h = layer.forward(h)
        return self.attention.forward(np.ascontiguousarray(h.transpose(0, 2, 1)))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.attention.backward(grad_out).transpose(0, 2, 1)
        for _, layer in reversed(self.blocks):
            g = layer.backward(g)
        return g

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        if self.head is None:
            raise RuntimeError("encoder has no classification head")
        return self.head.forward(embeddings)

    def embed(self, series: PitchSeries) -> Embedding:
        if self.training:
            raise RuntimeError("switch the encoder to eval mode before embedding songs")
        vec = self.forward(series.as_channels(self.dtype)[None])[0]
        return Embedding(series.song_id, vec)

    def embed_many(self, series: Sequence[PitchSeries]) -> list[Embedding]:
        """Embed songs, batching together those of equal length."""
        if self.training:
            raise RuntimeError("switch the encoder to eval mode before embedding songs")
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(series):
            by_len.setdefault(len(s), []).append(i)
        out: list[Optional[Embedding]] = [None] * len(series)
        for length in sorted(by_len):
            idx = by_len[length]
            batch = np.stack([series[i].as_channels(self.dtype) for i in idx])
            vecs = self.forward(batch)
            for j, i in enumerate(idx):
                out[i] = Embedding(series[i].song_id, vecs[j].copy())
        return out


def build_encoder(config: Optional[EncoderConfig] = None, seed: int = 0, dtype=np.float32,
                  head_classes: int = 0) -> ContourEncoder:
    return ContourEncoder(config or EncoderConfig(), seed=seed, dtype=dtype, head_classes=head_classes)


def prepare_series(record: SongRecord, tonic: Optional[TonicEstimate | float] = None) -> PitchSeries:
    """Parse a manifest entry and turn it into model input, estimating the tonic if absent."""
    contour = parse_contour_file(record.resolve_contour(), song_id=record.song_id)
    if tonic is None:
        tonic = estimate_tonic(contour)
    tonic_midi = tonic.tonic_midi if isinstance(tonic, TonicEstimate) else float(tonic)
    return to_pitch_series(decimate(contour), tonic_midi)


def load_corpus_series(records: Sequence[SongRecord], tonics: Optional[dict] = None, workers: int = 1):
    """Prepare every included record; returns (series list, failures list of (song_id, message))."""
    tonics = tonics or {}
    recs = included(records)

    def one(rec):
        try:
            return prepare_series(rec, tonics.get(rec.song_id)), None
        except Exception as exc:  # collected per song, reported by the caller
            return None, (rec.song_id, f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, recs))
    else:
        results = [one(r) for r in recs]
    series = [s for s, _ in results if s is not None]
    failures = [f for _, f in results if f is not None]
    return series, failures


def encode_corpus(model: ContourEncoder, records: Sequence[SongRecord], tonics: Optional[dict] = None,
                  workers: int = 1):
    """Embed each included song from its whole contour.

    Returns ``(embeddings, failures)``; a failing song is logged and skipped.
    """
    series, failures = load_corpus_series(records, tonics, workers)
    ok = [s for s in series if len(s) >= model.config.min_length]
    for s in series:
        if len(s) < model.config.min_length:
            failures.append((s.song_id, f"InputTooShortError: {len(s)} frames < {model.config.min_length}"))
    model.eval()
    embeddings = model.embed_many(ok)
    for sid, msg in failures:
        log.warning("skipping %s: %s", sid, msg)
    return embeddings, failures


def write_embeddings_csv(path, embeddings: Sequence[Embedding]) -> None:
    dim = len(embeddings[0].vector) if embeddings else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["song_id"] + [f"e{i}" for i in range(dim)])
        for e in embeddings:
            w.writerow([e.song_id] + [repr(float(x)) for x in e.vector])


def read_feature_csv(path) -> tuple[list[str], np.ndarray]:
    """Read any ``song_id,<features...>`` CSV (embeddings or histograms)."""
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return ids, np.array(rows, dtype=np.float64)


# -- checkpoints -------------------------------------------------------------

def _state_arrays(model: ContourEncoder):
    arrays = list(model.named_parameters().items())
    for name, bn in model.batchnorms():
        arrays.append((f"{name}.running_mean", bn.running_mean))
        arrays.append((f"{name}.running_var", bn.running_var))
    return arrays


def save_checkpoint(model: ContourEncoder, path, provenance: Optional[dict] = None) -> None:
    """Write a JSON header plus a little-endian float32 payload.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, payload.
    """
    arrays = _state_arrays(model)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "seed": model.seed,
        "head_classes": model.head.out_features if model.head is not None else 0,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "batchnorm_updates": {name: bn.updates for name, bn in model.batchnorms()},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "provenance": provenance or {},
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        fh.write(payload)


def read_checkpoint_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt checkpoint header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('format_version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    payload = data[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt file)")
    return header, payload


def load_checkpoint(path, expected_embedding_dim: Optional[int] = None) -> ContourEncoder:
    header, payload = _read(path)
    config = EncoderConfig(**header["config"])
    if expected_embedding_dim is not None and config.embedding_dim != expected_embedding_dim:
        raise ConfigMismatchError(
            f"{path}: checkpoint embedding_dim {config.embedding_dim} != expected {expected_embedding_dim}"
        )
    model = ContourEncoder(config, seed=header["seed"], dtype=np.float32, head_classes=header["head_classes"])
    targets = dict(_state_arrays(model))
    offset = 0
    for spec in header["tensors"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in targets or targets[name].shape != shape:
            raise ConfigMismatchError(f"{path}: tensor {name} {shape} does not fit the declared config")
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        targets[name][...] = arr
        offset += 4 * count
    for name, bn in model.batchnorms():
        bn.updates = int(header["batchnorm_updates"][name])
    model.eval()
    return model
