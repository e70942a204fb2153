"""Repeated stratified train/test evaluation and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .forest import train_forest
from .ranking import mean_ndcg


@dataclass
class LabeledSet:
    song_ids: list
    features: np.ndarray
    labels: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.labels) != len(self.song_ids):
            raise ValueError("need one uniform-dimension feature row and one label per song")
        if len(set(self.labels)) < 2:
            raise ValueError("a labeled set needs at least two distinct labels")

    @classmethod
    def from_table(cls, song_ids, features, label_map: dict):
        """Keep the rows whose song id has a label in ``label_map``."""
        rows = [i for i, s in enumerate(song_ids) if label_map.get(s) is not None]
        return cls([song_ids[i] for i in rows], np.asarray(features)[rows], [label_map[song_ids[i]] for i in rows])


def stratified_split(labels: Sequence[str], train_fraction: float, rng: np.random.Generator):
    labels = np.asarray(labels)
    train_idx, test_idx = [], []
    for lab in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == lab)
        if len(members) < 2:
            raise ValueError(f"class {lab!r} has {len(members)} item(s); cannot stratify")
        members = rng.permutation(members)
        k = int(np.clip(round(train_fraction * len(members)), 1, len(members) - 1))
        train_idx.extend(members[:k].tolist())
        test_idx.extend(members[k:].tolist())
    return np.sort(train_idx), np.sort(test_idx)


def repeated_split_eval(data: LabeledSet, repeats: int = 30, train_fraction: float = 0.75, seed: int = 0,
                        n_trees: int = 100):
    """Forest accuracy over repeated stratified splits.

    Returns ``(mean, population std, per-repeat accuracies)``.
    """
    accs = []
    labels = np.asarray(data.labels)
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        tr, te = stratified_split(data.labels, train_fraction, rng)
        forest = train_forest(data.features[tr], labels[tr].tolist(), seed=(seed, r), n_trees=n_trees)
        pred = np.asarray(forest.predict(data.features[te]))
        accs.append(float(np.mean(pred == labels[te])))
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std(ddof=0)), accs.tolist()


def evaluate(data: LabeledSet, name: str, repeats: int = 30, seed: int = 0, train_fraction: float = 0.75) -> dict:
    ndcg = mean_ndcg(data.features, data.labels, data.song_ids)
    mean, std, accs = repeated_split_eval(data, repeats, train_fraction, seed)
    return {
        "embedding_name": name,
        "ndcg": ndcg,
        "rf_accuracy_mean": mean,
        "rf_accuracy_std": std,
        "std_kind": "population",
        "repeats": repeats,
        "seed": seed,
        "n_items": len(data.labels),
        "per_repeat_accuracy": accs,
    }


def write_report(report: dict, json_path, csv_path=None) -> None:
    body = {k: v for k, v in report.items() if k != "per_repeat_accuracy"}
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "accuracy"])
            for i, a in enumerate(report["per_repeat_accuracy"]):
                w.writerow([i, repr(a)])
