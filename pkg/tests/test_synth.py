import numpy as np
import pytest

from toriscope.contour_io import REGIONS, hz_to_semitone, load_manifest, parse_contour_file
from toriscope.synth import ClassSpec, SyntheticSpec, default_spec, generate_synthetic_corpus, render_song


def test_counts(tmp_path):
    recs = generate_synthetic_corpus(default_spec(3, 20), seed=1, out_dir=tmp_path)
    assert len(recs) == 60
    assert len(list((tmp_path / "contours").glob("*.csv"))) == 60
    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert len(loaded) == 60
    assert sorted({r.tori_label for r in loaded}) == ["gyung", "menari", "yukja"]


def test_deterministic(tmp_path):
    spec = default_spec(2, 3)
    generate_synthetic_corpus(spec, seed=5, out_dir=tmp_path / "a")
    generate_synthetic_corpus(spec, seed=5, out_dir=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_contours_parse_at_100hz(tmp_path):
    recs = generate_synthetic_corpus(default_spec(2, 2), seed=3, out_dir=tmp_path)
    c = parse_contour_file(recs[0].resolve_contour())
    assert c.source_rate_hz == 100


def test_all_regions_present(tmp_path):
    recs = generate_synthetic_corpus(default_spec(3, 3), seed=3, out_dir=tmp_path)
    assert {r.region for r in recs} == set(REGIONS)


def test_empty_class_list(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticSpec(classes=[]), seed=0, out_dir=tmp_path)


def test_vibrato_matches_sinusoid():
    cls = ClassSpec("gyung", (0, 7), vibrato={7: (0.5, 5.0)})
    spec = SyntheticSpec([cls], songs_per_class=1, duration_range=(20.0, 20.0),
                         jitter_sigma=0.0, intonation_sigma=0.0)
    contour, tonic, notes = render_song(cls, spec, np.random.default_rng(11), "v")
    checked = 0
    for note in notes:
        if note.degree != 7:
            continue
        idx = np.flatnonzero((contour.times >= note.onset) & (contour.times < note.offset - 1e-9))
        idx = idx[contour.voiced[idx]]
        dev = hz_to_semitone(contour.f0_hz[idx]) - tonic - 7.0
        expected = 0.5 * np.sin(2 * np.pi * 5.0 * (contour.times[idx] - note.onset))
        # f0 is stored with 4 decimals in Hz, about 1e-4 semitone
        np.testing.assert_allclose(dev, expected, atol=5e-4)
        assert np.max(np.abs(dev)) <= 0.5 + 5e-4
        checked += len(idx)
    assert checked > 100
