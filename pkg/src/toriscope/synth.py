"""Synthetic folk-song contours with class-specific scales and idioms.

Each class ("tori" stand-in) fixes a set of scale degrees, optional
vibrato on designated degrees and an optional descending-glide idiom.
Songs are rendered at 100 Hz in the same CSV format the parser reads, so
the whole pipeline can be exercised without the original recordings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .contour_io import (
    REGIONS,
    TORI_LABELS,
    Contour,
    SongRecord,
    semitone_to_hz,
    hz_to_semitone,
    write_contour_file,
    write_manifest,
)

SOURCE_RATE_HZ = 100


@dataclass
class ClassSpec:
    name: str
    degrees: tuple
    # degree -> (depth in semitones, rate in Hz)
    vibrato: dict = field(default_factory=dict)
    glide: bool = False
    # ascending motion by leaps of two scale steps
    leaps: bool = False


@dataclass
class SyntheticSpec:
    classes: list
    songs_per_class: int = 20
    duration_range: tuple = (40.0, 80.0)
    tonic_hz_range: tuple = (180.0, 330.0)
    jitter_sigma: float = 0.08
    intonation_sigma: float = 0.1
    glide_seconds: float = 0.2


@dataclass
class NoteEvent:
    onset: float
    offset: float
    degree: float
    vibrato: Optional[tuple] = None


# Class templates loosely modelled on the tori descriptions.  They share a
# scale core and differ mostly in ornamentation: vibrato of equal depth but
# different rate has the same pitch histogram, and leap/glide idioms are
# temporal, so the classes are only partly separable from histograms.
DEFAULT_CLASSES = {
    "gyung": ClassSpec("gyung", (-5, -3, 0, 2, 4, 7), vibrato={-5: (0.4, 3.0), 7: (0.4, 3.0)}),
    "menari": ClassSpec("menari", (-5, -3, 0, 2, 4, 7), glide=True, leaps=True),
    "yukja": ClassSpec("yukja", (-5, -3, 0, 2, 4, 7), vibrato={-5: (0.4, 7.0), 7: (0.4, 7.0)}, glide=True),
    "others": ClassSpec("others", (-2, 0, 2, 3)),
}


def default_spec(n_classes: int, songs_per_class: int = 20) -> SyntheticSpec:
    if not 2 <= n_classes <= len(TORI_LABELS):
        raise ValueError(f"number of classes must be between 2 and {len(TORI_LABELS)}")
    classes = [DEFAULT_CLASSES[name] for name in TORI_LABELS[:n_classes]]
    return SyntheticSpec(classes=classes, songs_per_class=songs_per_class)


def _plan_notes(cls: ClassSpec, duration: float, rng: np.random.Generator) -> list[NoteEvent]:
    degrees = sorted(cls.degrees)
    home = degrees.index(0) if 0 in degrees else len(degrees) // 2
    tempo = rng.uniform(0.8, 1.25)
    notes: list[NoteEvent] = []
    t = rng.uniform(0.2, 1.0)
    while t < duration:
        idx = home
        n_notes = int(rng.integers(4, 11))
        for k in range(n_notes):
            last = k == n_notes - 1
            if last:
                idx = home
            elif k > 0:
                step = rng.choice([-2, -1, 1, 2], p=[0.15, 0.35, 0.35, 0.15])
                if cls.leaps and step > 0:
                    step = 2
                idx = int(np.clip(idx + step, 0, len(degrees) - 1))
                if rng.random() < 0.2:
                    idx = home
            length = rng.uniform(0.3, 0.9) * tempo
            if idx == home:
                length *= 1.6
            degree = degrees[idx]
            end = min(t + length, duration)
            notes.append(NoteEvent(t, end, float(degree), cls.vibrato.get(degree)))
            t = end
            if t >= duration:
                break
        t += rng.uniform(0.3, 1.2)
    return notes


def render_song(cls: ClassSpec, spec: SyntheticSpec, rng: np.random.Generator, song_id: str):
    """Render one song; returns (contour, tonic_midi, notes)."""
    tonic_midi = hz_to_semitone(rng.uniform(*spec.tonic_hz_range))
    duration = rng.uniform(*spec.duration_range)
    n = int(round(duration * SOURCE_RATE_HZ))
    times = np.arange(n) / SOURCE_RATE_HZ
    notes = _plan_notes(cls, n / SOURCE_RATE_HZ, rng)
    intonation = {d: rng.normal(0.0, spec.intonation_sigma) if spec.intonation_sigma > 0 else 0.0
                  for d in sorted(cls.degrees)}

    pitch = np.full(n, np.nan)
    for i, note in enumerate(notes):
        a = int(np.ceil(note.onset * SOURCE_RATE_HZ - 1e-9))
        b = min(int(np.ceil(note.offset * SOURCE_RATE_HZ - 1e-9)), n)
        if b <= a:
            continue
        seg_t = times[a:b] - note.onset
        seg = np.full(b - a, note.degree + intonation[note.degree])
        if note.vibrato is not None:
            depth, rate = note.vibrato
            seg = seg + depth * np.sin(2 * np.pi * rate * seg_t)
        nxt = notes[i + 1] if i + 1 < len(notes) else None
        if cls.glide and nxt is not None and nxt.degree < note.degree and abs(nxt.onset - note.offset) < 1e-9:
            g = min(int(spec.glide_seconds * SOURCE_RATE_HZ), b - a)
            target = nxt.degree + intonation[nxt.degree]
            ramp = np.linspace(0.0, 1.0, g + 1)[1:]
            seg[-g:] = seg[-g:] + ramp * (target - seg[-g:])
        pitch[a:b] = seg

    voiced = ~np.isnan(pitch)
    if spec.jitter_sigma > 0:
        # smooth AR(1) wobble rather than white noise
        white = rng.normal(0.0, spec.jitter_sigma * np.sqrt(1 - 0.95**2), n)
        pitch = pitch + lfilter([1.0], [1.0, -0.95], white)

    confidence = np.where(voiced, rng.uniform(0.85, 1.0, n), rng.uniform(0.0, 0.4, n))
    f0 = np.where(voiced, semitone_to_hz(tonic_midi + np.nan_to_num(pitch)), np.nan)
    # tracker noise in silent parts: some unvoiced frames still report a pitch
    noisy = ~voiced & (rng.random(n) < 0.5)
    f0[noisy] = rng.uniform(80.0, 800.0, int(noisy.sum()))
    # fixed-precision values keep the CSV compact and exactly round-trippable
    f0 = np.round(f0, 4)
    confidence = np.round(confidence, 4)
    contour = Contour(song_id, np.round(times, 2), f0, confidence, float(SOURCE_RATE_HZ))
    return contour, tonic_midi, notes


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int, out_dir) -> list[SongRecord]:
    """Write contours and ``manifest.jsonl`` under ``out_dir``; returns the records.

    Regions are assigned in a shuffled round-robin over all nine names,
    independently of class, so region tags carry no class information.
    """
    if not spec.classes:
        raise ValueError("synthetic spec declares no classes")
    names = [c.name for c in spec.classes]
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    for name in names:
        if name not in TORI_LABELS:
            raise ValueError(f"class name {name!r} is not a tori label {TORI_LABELS}")
    out_dir = Path(out_dir)
    (out_dir / "contours").mkdir(parents=True, exist_ok=True)
    total = len(spec.classes) * spec.songs_per_class
    region_rng = np.random.default_rng([seed, 9999])
    regions = [REGIONS[i % len(REGIONS)] for i in range(total)]
    region_rng.shuffle(regions)

    records = []
    k = 0
    for ci, cls in enumerate(spec.classes):
        for si in range(spec.songs_per_class):
            rng = np.random.default_rng([seed, ci, si])
            song_id = f"{cls.name}_{si:03d}"
            contour, _, _ = render_song(cls, spec, rng, song_id)
            rel = f"contours/{song_id}.csv"
            write_contour_file(contour, out_dir / rel)
            records.append(
                SongRecord(
                    song_id=song_id,
                    contour_path=rel,
                    title=f"Synthetic {cls.name} song {si + 1}",
                    region=regions[k],
                    singer=f"singer_{(k * 7) % 23:02d}",
                    tori_label=cls.name,
                    audio_url=None,
                    excluded=False,
                    base_dir=out_dir,
                )
            )
            k += 1
    write_manifest(records, out_dir / "manifest.jsonl")
    return records


def spec_to_json(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    for c in d["classes"]:
        c["vibrato"] = {str(k): list(v) for k, v in c["vibrato"].items()}
        c["degrees"] = list(c["degrees"])
    return d
