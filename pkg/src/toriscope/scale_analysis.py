"""Tonic estimation and tonic-normalized pitch histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .contour_io import Contour, hz_to_semitone

RANGE_CENTS = (-1200.0, 1200.0)
TONIC_OFFSETS_CENTS = tuple(range(0, 100, 10))


class ScaleError(ValueError):
    pass


@dataclass
class TonicEstimate:
    tonic_midi: float
    offset_cents: int
    peak_count: int


@dataclass
class ToneHistogram:
    bins: np.ndarray
    counted_frames: int
    range_cents = RANGE_CENTS

    @property
    def bin_count(self) -> int:
        return len(self.bins)


def voiced_midi(contour: Contour) -> np.ndarray:
    mask = contour.voiced
    if not mask.any():
        return np.empty(0)
    return hz_to_semitone(contour.f0_hz[mask])


def estimate_tonic(contour: Contour) -> TonicEstimate:
    """Most populated 100-cent pitch bin, searched over bin-edge shifts of 0..90 cents.

    For a shift ``d`` the bins are centred on ``n*100 + d`` cents.  The tonic is
    the centre of the fullest bin over all shifts; ties go to the smaller shift,
    then to the lower centre.
    """
    midi = voiced_midi(contour)
    if midi.size == 0:
        raise ScaleError(f"{contour.song_id}: all frames are masked, cannot estimate tonic")
    cents = midi * 100.0
    best = None
    for shift in TONIC_OFFSETS_CENTS:
        idx = np.floor((cents - shift + 50.0) / 100.0).astype(np.int64)
        values, counts = np.unique(idx, return_counts=True)
        # np.unique sorts ascending, so argmax picks the lowest centre on ties
        j = int(np.argmax(counts))
        if best is None or counts[j] > best[2]:
            best = (shift, int(values[j]), int(counts[j]))
    shift, bin_idx, count = best
    return TonicEstimate(tonic_midi=(bin_idx * 100 + shift) / 100.0, offset_cents=shift, peak_count=count)


def build_histogram(contour: Contour, tonic: TonicEstimate | float, bin_count: int) -> ToneHistogram:
    """Normalized histogram of voiced-frame offsets from the tonic over [-1200, 1200) cents.

    Frames outside the two-octave window are dropped rather than clipped.
    """
    if bin_count < 2:
        raise ScaleError("bin_count must be at least 2")
    tonic_midi = tonic.tonic_midi if isinstance(tonic, TonicEstimate) else float(tonic)
    offsets = (voiced_midi(contour) - tonic_midi) * 100.0
    lo, hi = RANGE_CENTS
    offsets = offsets[(offsets >= lo) & (offsets < hi)]
    if offsets.size == 0:
        raise ScaleError(f"{contour.song_id}: no voiced frames within two octaves of the tonic")
    width = (hi - lo) / bin_count
    idx = np.minimum(np.floor((offsets - lo) / width).astype(np.int64), bin_count - 1)
    counts = np.bincount(idx, minlength=bin_count).astype(np.float64)
    return ToneHistogram(bins=counts / offsets.size, counted_frames=int(offsets.size))


def write_histogram_csv(path, song_ids: Sequence[str], histograms: Sequence[ToneHistogram]) -> None:
    n = histograms[0].bin_count if histograms else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["song_id"] + [f"b{i}" for i in range(n)])
        for sid, h in zip(song_ids, histograms):
            w.writerow([sid] + [repr(float(x)) for x in h.bins])


def write_tonic_csv(path, song_ids: Sequence[str], tonics: Sequence[TonicEstimate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["song_id", "tonic_midi", "offset_cents", "peak_count"])
        for sid, t in zip(song_ids, tonics):
            w.writerow([sid, repr(t.tonic_midi), t.offset_cents, t.peak_count])


def read_tonic_csv(path) -> dict[str, TonicEstimate]:
    out = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["song_id"]] = TonicEstimate(
                float(row["tonic_midi"]), int(row["offset_cents"]), int(row["peak_count"])
            )
    return out
