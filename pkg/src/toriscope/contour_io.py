"""Pitch contour files, corpus manifests and the 20 Hz model input.

Contours are stored as CSV with the header ``time_sec,f0_hz,confidence``
(an empty ``f0_hz`` field marks an unvoiced frame).  Manifests are JSON
lines, one :class:`SongRecord` per line.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CONTOUR_HEADER = "time_sec,f0_hz,confidence"
MODEL_RATE_HZ = 20
CONFIDENCE_THRESHOLD = 0.8

REGIONS = (
    "gyeonggi",
    "gangwon",
    "chungbuk",
    "chungnam",
    "jeonbuk",
    "jeonnam",
    "gyeongbuk",
    "gyeongnam",
    "jeju",
)
UNKNOWN_REGION = "unknown"
TORI_LABELS = ("gyung", "menari", "yukja", "others")

_SPACING_TOL = 1e-6


class ContourError(ValueError):
    """Raised for malformed contour files or invalid contour data."""


class ManifestError(ValueError):
    """Raised for malformed corpus manifests."""


@dataclass
class Contour:
    """Raw tracker output: frame times, f0 (NaN when absent) and confidence."""

    song_id: str
    times: np.ndarray
    f0_hz: np.ndarray
    confidence: np.ndarray
    source_rate_hz: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        validate_contour(self)

    def __len__(self):
        return len(self.times)

    @property
    def voiced(self) -> np.ndarray:
        """Mask of frames that survive confidence masking."""
        return ~np.isnan(self.f0_hz) & (self.confidence >= CONFIDENCE_THRESHOLD)


@dataclass
class PitchSeries:
    song_id: str
    pitch: np.ndarray
    confidence: np.ndarray
    tonic_midi: float
    rate_hz: int = MODEL_RATE_HZ

    def __len__(self):
        return len(self.pitch)

    def as_channels(self, dtype=np.float32) -> np.ndarray:
        """Stack into the [2, T] (pitch, confidence) layout the encoder expects."""
        return np.stack([self.pitch, self.confidence]).astype(dtype)


@dataclass
class SongRecord:
    song_id: str
    contour_path: str
    title: str
    region: str
    singer: Optional[str] = None
    tori_label: Optional[str] = None
    audio_url: Optional[str] = None
    excluded: bool = False
    # resolved location of the contour file; not serialized
    base_dir: Optional[Path] = field(default=None, repr=False, compare=False)

    def resolve_contour(self) -> Path:
        path = Path(self.contour_path)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def validate_contour(contour: Contour) -> None:
    n = len(contour.times)
    if n == 0:
        raise ContourError(f"{contour.song_id}: contour has no frames")
    if not (len(contour.f0_hz) == len(contour.confidence) == n):
        raise ContourError(f"{contour.song_id}: frame arrays differ in length")
    if not contour.source_rate_hz > 0:
        raise ContourError(f"{contour.song_id}: source rate must be positive")
    if np.any(contour.times < 0):
        raise ContourError(f"{contour.song_id}: negative frame time")
    if n > 1:
        steps = np.diff(contour.times)
        if np.any(steps <= 0):
            raise ContourError(f"{contour.song_id}: frame times not strictly increasing")
        expected = contour.times[0] + np.arange(n) / contour.source_rate_hz
        if np.max(np.abs(contour.times - expected)) > _SPACING_TOL:
            raise ContourError(
                f"{contour.song_id}: frame spacing inconsistent with {contour.source_rate_hz} Hz"
            )
    c = contour.confidence
    if np.any(~np.isfinite(c)) or np.any((c < 0) | (c > 1)):
        raise ContourError(f"{contour.song_id}: confidence outside [0, 1]")
    present = ~np.isnan(contour.f0_hz)
    if np.any(~np.isfinite(contour.f0_hz[present])) or np.any(contour.f0_hz[present] <= 0):
        raise ContourError(f"{contour.song_id}: f0 values must be positive")


def parse_contour_file(path, song_id: Optional[str] = None) -> Contour:
    """Read a contour CSV.  The frame rate is inferred from the time column.

    Errors carry the 1-based line number of the offending row.
    """
    path = Path(path)
    song_id = song_id if song_id is not None else path.stem
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CONTOUR_HEADER:
            raise ContourError(f"{path}: line 1: expected header {CONTOUR_HEADER!r}, got {header!r}")
        times, f0s, confs = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ContourError(f"{path}: line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                t = float(parts[0])
                f0 = float(parts[1]) if parts[1].strip() else math.nan
                c = float(parts[2])
            except ValueError:
                raise ContourError(f"{path}: line {lineno}: non-numeric field") from None
            if not 0.0 <= c <= 1.0:
                raise ContourError(f"{path}: line {lineno}: confidence {c} outside [0, 1]")
            if not math.isnan(f0) and not f0 > 0:
                raise ContourError(f"{path}: line {lineno}: f0 must be positive, got {f0}")
            if times and t <= times[-1]:
                raise ContourError(f"{path}: line {lineno}: time {t} not increasing")
            times.append(t)
            f0s.append(f0)
            confs.append(c)
    if not times:
        raise ContourError(f"{path}: no frames")
    if len(times) > 1:
        rate = (len(times) - 1) / (times[-1] - times[0])
        # tracker rates are whole numbers of frames per second
        rate = float(round(rate)) if abs(rate - round(rate)) < 1e-3 else rate
    else:
        rate = 100.0
    return Contour(song_id, np.array(times), np.array(f0s), np.array(confs), rate)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_contour(contour: Contour) -> str:
    lines = [CONTOUR_HEADER]
    for t, f0, c in zip(contour.times, contour.f0_hz, contour.confidence):
        f0_field = "" if math.isnan(f0) else _fmt(f0)
        lines.append(f"{_fmt(t)},{f0_field},{_fmt(c)}")
    return "\n".join(lines) + "\n"


def write_contour_file(contour: Contour, path) -> None:
    Path(path).write_text(serialize_contour(contour), encoding="utf-8")


def decimate(contour: Contour, target_rate_hz: float = MODEL_RATE_HZ) -> Contour:
    """Keep every k-th frame (k = source rate / target rate), starting at frame 0."""
    ratio = contour.source_rate_hz / target_rate_hz
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise ContourError(
            f"{contour.song_id}: {contour.source_rate_hz} Hz is not an integer multiple of {target_rate_hz} Hz"
        )
    if k == 1:
        return contour
    return Contour(
        contour.song_id,
        contour.times[::k],
        contour.f0_hz[::k],
        contour.confidence[::k],
        float(target_rate_hz),
    )


def hz_to_semitone(f0_hz):
    """MIDI pitch number of a frequency (69 = 440 Hz); works on scalars and arrays."""
    arr = np.asarray(f0_hz, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("frequency must be positive")
    out = 69.0 + 12.0 * np.log2(arr / 440.0)
    return float(out) if out.ndim == 0 else out


def semitone_to_hz(midi):
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - 69.0) / 12.0)


def to_pitch_series(contour: Contour, tonic_midi: float) -> PitchSeries:
    """Tonic-normalize a 20 Hz contour and zero the pitch of low-confidence frames."""
    if abs(contour.source_rate_hz - MODEL_RATE_HZ) > 1e-9:
        raise ContourError(
            f"{contour.song_id}: expected a {MODEL_RATE_HZ} Hz contour, got {contour.source_rate_hz} Hz"
        )
    present = ~np.isnan(contour.f0_hz)
    confidence = np.where(present, contour.confidence, 0.0)
    keep = present & (confidence >= CONFIDENCE_THRESHOLD)
    pitch = np.zeros(len(contour), dtype=np.float64)
    if keep.any():
        pitch[keep] = hz_to_semitone(contour.f0_hz[keep]) - tonic_midi
    return PitchSeries(contour.song_id, pitch, confidence, float(tonic_midi))


_REQUIRED_FIELDS = ("song_id", "contour_path", "title", "region")


def load_manifest(path) -> list[SongRecord]:
    path = Path(path)
    records: list[SongRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            missing = [k for k in _REQUIRED_FIELDS if k not in obj]
            if missing:
                raise ManifestError(f"{path}: line {lineno}: missing field(s) {', '.join(missing)}")
            sid = str(obj["song_id"])
            if sid in seen:
                raise ManifestError(f"{path}: line {lineno}: duplicate song_id {sid!r}")
            seen.add(sid)
            region = str(obj["region"])
            if region not in REGIONS:
                log.warning("%s: line %d: unknown region %r mapped to %r", path, lineno, region, UNKNOWN_REGION)
                region = UNKNOWN_REGION
            label = obj.get("tori_label")
            if label is not None and label not in TORI_LABELS:
                raise ManifestError(f"{path}: line {lineno}: unknown tori label {label!r}")
            records.append(
                SongRecord(
                    song_id=sid,
                    contour_path=str(obj["contour_path"]),
                    title=str(obj["title"]),
                    region=region,
                    singer=obj.get("singer"),
                    tori_label=label,
                    audio_url=obj.get("audio_url"),
                    excluded=bool(obj.get("excluded", False)),
                    base_dir=path.parent,
                )
            )
    return records


def write_manifest(records: Iterable[SongRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=False) + "\n")


def load_series(record: SongRecord, tonic_midi: float) -> PitchSeries:
    """Parse, decimate to 20 Hz and tonic-normalize one manifest entry."""
    contour = parse_contour_file(record.resolve_contour(), song_id=record.song_id)
    return to_pitch_series(decimate(contour, MODEL_RATE_HZ), tonic_midi)


def included(records: Sequence[SongRecord]) -> list[SongRecord]:
    return [r for r in records if not r.excluded]
