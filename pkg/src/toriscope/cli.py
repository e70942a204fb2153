"""Command-line pipeline: synth -> tonic/histogram -> train -> encode -> eval -> project -> report.

Every command writes a provenance JSON next to its outputs (argv, working
directory, resolved configuration and SHA-256 of inputs and outputs).
``replay`` re-executes a provenance file and checks the outputs match.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .contour_io import REGIONS, included, load_manifest, parse_contour_file
from .encoder import (
    EncoderConfig,
    build_encoder,
    encode_corpus,
    load_checkpoint,
    load_corpus_series,
    read_feature_csv,
    write_embeddings_csv,
)
from .evaluation import LabeledSet, evaluate, write_report
from .projection import export_report, pca_2d, read_projection_csv, write_projection_csv
from .scale_analysis import build_histogram, estimate_tonic, read_tonic_csv, write_histogram_csv, write_tonic_csv
from .synth import default_spec, generate_synthetic_corpus, spec_to_json
from .training import TrainConfig, train

log = logging.getLogger("toriscope")


class CommandError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(path: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(Path.cwd().resolve()))
    except ValueError:
        return str(Path(path).resolve())


def write_provenance(path: Path, args, argv, config: dict, inputs, outputs) -> None:
    record = {
        "tool": "toriscope",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "cwd": str(Path.cwd().resolve()),
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": {_rel(p): sha256_file(p) for p in sorted(set(map(Path, inputs))) if Path(p).is_file()},
        "outputs": {_rel(p): sha256_file(p) for p in sorted(set(map(Path, outputs)))},
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _provenance_for(output: Path) -> Path:
    """``projection.csv`` -> ``projection.csv.provenance.json``."""
    return output.with_name(output.name + ".provenance.json")


def _manifest_dir(args) -> Path:
    return Path(args.manifest).resolve().parent


def _load_records(args):
    records = load_manifest(args.manifest)
    if not records:
        raise CommandError(f"{args.manifest}: manifest is empty")
    return records


def _contour_paths(records):
    return [r.resolve_contour() for r in included(records)]


def _tonics(args, records) -> dict:
    if getattr(args, "tonics", None):
        return read_tonic_csv(args.tonics)
    return {}


def _pmap(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- commands ------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    spec = default_spec(args.classes, args.per_class)
    if args.duration:
        spec.duration_range = tuple(args.duration)
    if args.jitter is not None:
        spec.jitter_sigma = args.jitter
    records = generate_synthetic_corpus(spec, args.seed, out)
    outputs = [out / "manifest.jsonl"] + [r.resolve_contour() for r in records]
    log.info("wrote %d synthetic songs to %s", len(records), out)
    return out / "provenance_synth.json", {"synthetic_spec": spec_to_json(spec)}, [], outputs


def cmd_ingest(args):
    records = _load_records(args)

    def check(rec):
        try:
            c = parse_contour_file(rec.resolve_contour(), song_id=rec.song_id)
            return rec.song_id, len(c), c.source_rate_hz, None
        except Exception as exc:
            return rec.song_id, 0, None, str(exc)

    results = _pmap(check, records, args.workers)
    errors = [(sid, err) for sid, _, _, err in results if err]
    summary = {
        "songs": len(records),
        "excluded": sum(r.excluded for r in records),
        "labelled": sum(r.tori_label is not None for r in records),
        "frames": int(sum(n for _, n, _, _ in results)),
        "errors": [{"song_id": s, "error": e} for s, e in errors],
    }
    out = Path(args.out) if args.out else _manifest_dir(args) / "ingest.json"
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({k: v for k, v in summary.items() if k != "errors"}, sort_keys=True))
    for sid, err in errors:
        print(f"error: {sid}: {err}", file=sys.stderr)
    if errors:
        raise CommandError(f"{len(errors)} contour file(s) failed validation")
    inputs = [Path(args.manifest)] + [r.resolve_contour() for r in records]
    return _provenance_for(out), {}, inputs, [out]


def _estimate_all(records, workers):
    def one(rec):
        c = parse_contour_file(rec.resolve_contour(), song_id=rec.song_id)
        return c, estimate_tonic(c)

    return _pmap(one, records, workers)


def cmd_tonic(args):
    records = included(_load_records(args))
    results = _estimate_all(records, args.workers)
    out = Path(args.out) if args.out else _manifest_dir(args) / "tonics.csv"
    write_tonic_csv(out, [r.song_id for r in records], [t for _, t in results])
    inputs = [Path(args.manifest)] + _contour_paths(records)
    return _provenance_for(out), {}, inputs, [out]


def _histograms(records, bins: int, tonics: dict, workers: int):
    def one(rec):
        c = parse_contour_file(rec.resolve_contour(), song_id=rec.song_id)
        tonic = tonics.get(rec.song_id) or estimate_tonic(c)
        return build_histogram(c, tonic, bins)

    return _pmap(one, records, workers)


def cmd_histogram(args):
    records = included(_load_records(args))
    hists = _histograms(records, args.bins, _tonics(args, records), args.workers)
    out = Path(args.out) if args.out else _manifest_dir(args) / f"hist{args.bins}.csv"
    write_histogram_csv(out, [r.song_id for r in records], hists)
    inputs = [Path(args.manifest)] + _contour_paths(records) + ([args.tonics] if args.tonics else [])
    return _provenance_for(out), {"bins": args.bins}, inputs, [out]


def _encoder_config(args) -> EncoderConfig:
    return EncoderConfig(attention_heads=args.heads, activation=args.activation)


def cmd_train(args):
    records = _load_records(args)
    out = Path(args.out) if args.out else _manifest_dir(args) / "runs" / args.mode
    out.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(
        updates=args.updates, batch_size=args.batch, margin=args.margin, negatives=args.negatives,
        slice_seconds=args.slice_seconds, learning_rate=args.lr, seed=args.seed, mode=args.mode,
        checkpoint_every=args.checkpoint_every,
    )
    series, failures = load_corpus_series(records, _tonics(args, records), args.workers)
    for sid, msg in failures:
        log.warning("skipping %s: %s", sid, msg)
    region_labels = None
    if args.mode == "region":
        by_id = {r.song_id: r for r in records}
        keep = [s for s in series if by_id[s.song_id].region in REGIONS]
        if len(keep) < len(series):
            log.warning("%d song(s) with unknown region left out of region training", len(series) - len(keep))
        series = keep
        region_labels = [REGIONS.index(by_id[s.song_id].region) for s in series]
    held_out = None
    if args.held_out_fraction > 0:
        rng = np.random.default_rng([args.seed, 3])
        mask = rng.random(len(series)) < args.held_out_fraction
        held_out = [s for s, m in zip(series, mask) if m]
        series = [s for s, m in zip(series, mask) if not m]
        if region_labels is not None:
            region_labels = [l for l, m in zip(region_labels, mask) if not m]
    enc_config = _encoder_config(args)
    model = build_encoder(enc_config, seed=args.seed, head_classes=len(REGIONS) if args.mode == "region" else 0)
    provenance = {"seed": args.seed, "mode": args.mode, "songs": len(series)}
    train(model, series, config, out_dir=out, region_labels=region_labels, held_out=held_out,
          provenance=provenance)
    outputs = sorted(out.glob("*.ckpt")) + [out / "loss.csv", out / "train_config.json"]
    if (out / "held_out_loss.csv").exists():
        outputs.append(out / "held_out_loss.csv")
    inputs = [Path(args.manifest)] + _contour_paths(records) + ([args.tonics] if args.tonics else [])
    cfg = {"train": vars(config), "encoder": enc_config.to_json()}
    return out / "provenance_train.json", cfg, inputs, outputs


def _default_checkpoint(args) -> Path:
    return _manifest_dir(args) / "runs" / "ssl" / "model.ckpt"


def _encode(args, records, checkpoint: Path):
    model = load_checkpoint(checkpoint, expected_embedding_dim=256)
    embeddings, failures = encode_corpus(model, records, _tonics(args, records), args.workers)
    return embeddings, failures


def cmd_encode(args):
    records = _load_records(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(args)
    embeddings, failures = _encode(args, records, ckpt)
    if not embeddings:
        raise CommandError("no song could be encoded")
    out = Path(args.out) if args.out else ckpt.parent / "embeddings.csv"
    write_embeddings_csv(out, embeddings)
    inputs = [Path(args.manifest), ckpt] + _contour_paths(records) + ([args.tonics] if args.tonics else [])
    cfg = {"failures": [{"song_id": s, "error": e} for s, e in failures]}
    return _provenance_for(out), cfg, inputs, [out]


def _feature_table(args, records):
    """(song_ids, features, extra input files) for the requested feature kind."""
    kind = args.features
    inputs = []
    if kind in ("hist25", "hist124"):
        bins = int(kind[4:])
        recs = included(records)
        hists = _histograms(recs, bins, _tonics(args, records), args.workers)
        inputs += _contour_paths(records)
        return [r.song_id for r in recs], np.array([h.bins for h in hists]), inputs
    if args.embeddings:
        ids, X = read_feature_csv(args.embeddings)
        return ids, X, [Path(args.embeddings)]
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(args)
    if not ckpt.exists():
        raise CommandError(f"no embeddings given and checkpoint {ckpt} does not exist; run `train` first")
    embeddings, _ = _encode(args, records, ckpt)
    inputs += [ckpt] + _contour_paths(records)
    return [e.song_id for e in embeddings], np.array([e.vector for e in embeddings], dtype=np.float64), inputs


def cmd_eval(args):
    records = _load_records(args)
    ids, X, inputs = _feature_table(args, records)
    labels = {r.song_id: r.tori_label for r in records}
    data = LabeledSet.from_table(ids, X, labels)
    name = args.name or args.features
    report = evaluate(data, name, repeats=args.repeats, seed=args.seed)
    out = Path(args.out) if args.out else _manifest_dir(args) / "reports" / f"eval_{name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_out = out.with_name(out.stem + "_repeats.csv")
    write_report(report, out, csv_out)
    print(json.dumps({k: report[k] for k in ("embedding_name", "ndcg", "rf_accuracy_mean", "rf_accuracy_std")}))
    return _provenance_for(out), {}, [Path(args.manifest)] + inputs, [out, csv_out]


def cmd_project(args):
    records = _load_records(args)
    ids, X, inputs = _feature_table(args, records)
    proj = pca_2d(ids, X)
    labels = {r.song_id: (r.tori_label or r.region) for r in records}
    out = Path(args.out) if args.out else _manifest_dir(args) / "projection.csv"
    write_projection_csv(out, proj, labels)
    cfg = {"explained_variance": list(proj.explained_variance)}
    return _provenance_for(out), cfg, [Path(args.manifest)] + inputs, [out]


def cmd_report(args):
    records = _load_records(args)
    proj, _ = read_projection_csv(args.projection)
    out = Path(args.out) if args.out else Path(args.projection).with_suffix(".html")
    export_report(proj, records, out)
    return _provenance_for(out), {}, [Path(args.manifest), Path(args.projection)], [out]


def replay(provenance_path, check: bool = True) -> list[str]:
    """Re-run the command recorded in a provenance file; returns paths whose checksum changed."""
    prov = json.loads(Path(provenance_path).read_text(encoding="utf-8"))
    saved = prov["outputs"]
    prev = Path.cwd()
    os.chdir(prov["cwd"])
    try:
        rc = main(prov["argv"])
        if rc != 0:
            raise CommandError(f"replayed command exited with status {rc}")
        return [p for p, digest in saved.items() if not Path(p).exists() or sha256_file(p) != digest]
    finally:
        os.chdir(prev)


def cmd_replay(args):
    changed = replay(args.provenance)
    if changed:
        for p in changed:
            print(f"mismatch: {p}", file=sys.stderr)
        raise CommandError(f"{len(changed)} output(s) differ from the recorded provenance")
    print(f"replay of {args.provenance}: all outputs bit-identical")
    return None


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw in the run")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for per-song stages")
    common.add_argument("--log-level", default="INFO")

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--manifest", required=True, help="corpus manifest (JSON lines)")
    corpus.add_argument("--tonics", help="tonic table CSV from `tonic`; estimated on the fly if omitted")

    p = argparse.ArgumentParser(prog="toriscope", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled corpus")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--duration", type=float, nargs=2, metavar=("MIN", "MAX"), help="song length range, s")
    s.add_argument("--jitter", type=float, help="pitch jitter sigma, semitones")
    s.add_argument("--out", default="corpus", help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common, corpus], help="validate a manifest and its contours")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("tonic", parents=[common, corpus], help="write the tonic table")
    s.add_argument("--out")
    s.set_defaults(func=cmd_tonic)

    s = sub.add_parser("histogram", parents=[common, corpus], help="write pitch histograms")
    s.add_argument("--bins", type=int, choices=(25, 124), default=25)
    s.add_argument("--out")
    s.set_defaults(func=cmd_histogram)

    s = sub.add_parser("train", parents=[common, corpus], help="train the contour encoder")
    s.add_argument("--mode", choices=("ssl", "region"), default="ssl")
    s.add_argument("--updates", type=int, default=25000)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--margin", type=float, default=0.4)
    s.add_argument("--negatives", type=int, default=8)
    s.add_argument("--slice-seconds", type=float, default=30.0)
    s.add_argument("--checkpoint-every", type=int, default=1000)
    s.add_argument("--heads", type=int, default=8)
    s.add_argument("--activation", choices=("relu", "tanh", "identity"), default="relu")
    s.add_argument("--held-out-fraction", type=float, default=0.0)
    s.add_argument("--out", help="run directory (default: <manifest dir>/runs/<mode>)")
    s.set_defaults(func=cmd_train)

    feature_args = argparse.ArgumentParser(add_help=False)
    feature_args.add_argument("--features", choices=("embeddings", "hist25", "hist124"), default="embeddings")
    feature_args.add_argument("--embeddings", help="embedding CSV; otherwise encoded from --checkpoint")
    feature_args.add_argument("--checkpoint", help="encoder checkpoint (default: <manifest dir>/runs/ssl/model.ckpt)")

    s = sub.add_parser("encode", parents=[common, corpus], help="embed every included song")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("eval", parents=[common, corpus, feature_args], help="nDCG and random-forest metrics")
    s.add_argument("--repeats", type=int, default=30)
    s.add_argument("--name", help="name recorded in the report (default: the feature kind)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("project", parents=[common, corpus, feature_args], help="2-D PCA projection CSV")
    s.add_argument("--out")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("report", parents=[common], help="static HTML map of a projection")
    s.add_argument("--manifest", required=True)
    s.add_argument("--projection", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("replay", parents=[common], help="re-run a provenance file and verify outputs")
    s.add_argument("provenance")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
        if result is not None:
            prov_path, config, inputs, outputs = result
            config = {"args": {k: v for k, v in vars(args).items() if k != "func"}, **config}
            write_provenance(Path(prov_path), args, argv, config, inputs, outputs)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"toriscope {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
