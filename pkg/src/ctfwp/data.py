"""Dataset ingestion, synthetic task generation, and evaluation metrics.

Two on-disk formats are understood:

* a directory of per-sequence delimited files (header row, first column
  ``t``), with a sibling ``labels.csv`` mapping file name -> class id and an
  optional ``statics.csv``; missing cells are empty or the token NaN;
* the UEA ``.ts`` format subset: ``@`` header directives, then one line per
  case with channels separated by colons and the class label after the final
  colon. Timestamps are synthesized on a unit grid.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Array = np.ndarray


class ParseError(ValueError):
    def __init__(self, message: str, path: str = "", line: int = 0):
        loc = f"{path}:{line}: " if path else ""
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class MetricError(ValueError):
    """Metric undefined for the given labels."""


@dataclass
class SequenceRecord:
    name: str
    times: Array  # strictly increasing
    values: Array  # (len, channels), np.nan where missing
    mask: Array  # bool, False exactly where missing
    label: int
    static: Optional[Array] = None


@dataclass
class DatasetManifest:
    splits: dict = field(default_factory=dict)  # split name -> list of record names
    n_classes: int = 0
    channels: int = 0
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# delimited per-sequence files


def _parse_cell(tok: str, path: str, line_no: int) -> float:
    s = tok.strip()
    if s == "" or s.lower() == "nan":
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise ParseError(f"bad numeric cell {tok!r}", path, line_no) from None


def parse_csv_sequences(directory) -> list:
    """Read every sequence file in a directory; labels.csv is required."""
    directory = str(directory)
    labels_path = os.path.join(directory, "labels.csv")
    if not os.path.exists(labels_path):
        raise ParseError("labels.csv not found", directory)
    labels: dict[str, int] = {}
    with open(labels_path) as fh:
        for i, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or (i == 1 and line.lower().startswith("file")):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(f"expected 'file,label', got {line!r}", labels_path, i)
            try:
                labels[parts[0].strip()] = int(parts[1])
            except ValueError:
                raise ParseError(f"unknown label {parts[1]!r}", labels_path, i) from None
    statics: dict[str, Array] = {}
    statics_path = os.path.join(directory, "statics.csv")
    if os.path.exists(statics_path):
        with open(statics_path) as fh:
            for i, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or (i == 1 and line.lower().startswith("file")):
                    continue
                parts = line.split(",")
                statics[parts[0].strip()] = np.array([_parse_cell(t, statics_path, i) for t in parts[1:]])
    records = []
    for fname in sorted(os.listdir(directory)):
        if not fname.endswith(".csv") or fname in ("labels.csv", "statics.csv"):
            continue
        path = os.path.join(directory, fname)
        if fname not in labels:
            raise ParseError(f"no label for sequence file {fname!r}", labels_path)
        times, rows = [], []
        with open(path) as fh:
            header = fh.readline()
            ncols = len(header.strip().split(","))
            if ncols < 2 or header.strip().split(",")[0].strip() != "t":
                raise ParseError("header must start with column 't'", path, 1)
            for i, raw in enumerate(fh, start=2):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split(",")
                if len(parts) != ncols:
                    raise ParseError(f"ragged row: {len(parts)} cells, header has {ncols}", path, i)
                t = _parse_cell(parts[0], path, i)
                if math.isnan(t):
                    raise ParseError("missing timestamp", path, i)
                if times and t <= times[-1]:
                    raise ParseError(f"time {t:g} not increasing", path, i)
                times.append(t)
                rows.append([_parse_cell(c, path, i) for c in parts[1:]])
        values = np.array(rows, dtype=np.float64)
        mask = ~np.isnan(values)
        records.append(
            SequenceRecord(
                name=fname,
                times=np.array(times),
                values=values,
                mask=mask,
                label=labels[fname],
                static=statics.get(fname),
            )
        )
    return records


def write_csv_sequences(records: list, directory) -> None:
    """Inverse of parse_csv_sequences (parse -> write -> parse is the identity)."""
    directory = str(directory)
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w") as fh:
        fh.write("file,label\n")
        for r in records:
            fh.write(f"{r.name},{r.label}\n")
    if any(r.static is not None for r in records):
        with open(os.path.join(directory, "statics.csv"), "w") as fh:
            fh.write("file,values\n")
            for r in records:
                if r.static is not None:
                    fh.write(r.name + "," + ",".join("%.17g" % v for v in r.static) + "\n")
    for r in records:
        with open(os.path.join(directory, r.name), "w") as fh:
            fh.write("t," + ",".join(f"c{i}" for i in range(r.values.shape[1])) + "\n")
            for t, row, mrow in zip(r.times, r.values, r.mask):
                cells = ["%.17g" % t]
                cells += ["%.17g" % v if m else "" for v, m in zip(row, mrow)]
                fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# UEA .ts subset


def parse_uea_ts(path, split_ratios=(0.7, 0.15, 0.15), split_seed: int = 0):
    """Returns (DatasetManifest, records). Class ids follow header order."""
    path = str(path)
    class_order: list[str] = []
    problem = ""
    records: list[SequenceRecord] = []
    in_data = False
    case_idx = 0
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data and line.startswith("@"):
                parts = line.split()
                directive = parts[0].lower()
                if directive == "@problemname" and len(parts) > 1:
                    problem = parts[1]
                elif directive == "@classlabel":
                    if len(parts) < 2 or parts[1].lower() not in ("true", "false"):
                        raise ParseError("@classLabel needs true/false", path, line_no)
                    class_order = parts[2:]
                elif directive == "@data":
                    in_data = True
                continue
            if not in_data:
                raise ParseError(f"unexpected line before @data: {line!r}", path, line_no)
            case_idx += 1
            chunks = line.split(":")
            if len(chunks) < 2:
                raise ParseError(f"case {case_idx}: expected channels and label", path, line_no)
            label_tok = chunks[-1].strip()
            if class_order and label_tok not in class_order:
                raise ParseError(f"case {case_idx}: label {label_tok!r} not declared in header", path, line_no)
            chans = []
            for chunk in chunks[:-1]:
                vals = [(_parse_cell(tok, path, line_no) if tok.strip() != "?" else math.nan) for tok in chunk.split(",")]
                chans.append(vals)
            lengths = {len(c) for c in chans}
            if len(lengths) != 1:
                raise ParseError(f"case {case_idx}: channel lengths differ: {sorted(lengths)}", path, line_no)
            values = np.array(chans, dtype=np.float64).T  # (len, channels)
            label = class_order.index(label_tok) if class_order else int(float(label_tok))
            mask = ~np.isnan(values)
            records.append(
                SequenceRecord(
                    name=f"case{case_idx:05d}",
                    times=np.arange(values.shape[0], dtype=np.float64),
                    values=values,
                    mask=mask,
                    label=label,
                )
            )
    if not records:
        raise ParseError("no data cases found", path)
    n_classes = len(class_order) if class_order else len({r.label for r in records})
    manifest = DatasetManifest(
        splits=make_split([r.name for r in records], split_ratios, split_seed),
        n_classes=n_classes,
        channels=records[0].values.shape[1],
        metadata={"problem": problem, "classes": " ".join(class_order)},
    )
    return manifest, records


def make_split(names: list, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    order = list(names)
    rng.shuffle(order)
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    return {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }


def parse_manifest(path) -> dict:
    """Split file: '[split]' headers with one record id per line."""
    splits: dict[str, list[str]] = {}
    current = None
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                splits[current] = []
            elif current is None:
                raise ParseError("record id before any [split] header", str(path), line_no)
            else:
                splits[current].append(line)
    return splits


# ---------------------------------------------------------------------------
# synthetic tasks


def gen_synth_task(kind: str, n: int, seed: int, **kw) -> list:
    if kind == "irregular_key_count":
        return _gen_key_count(n, seed, **kw)
    if kind == "delayed_recall":
        return _gen_delayed_recall(n, seed, **kw)
    raise ValueError(f"unknown synthetic task {kind!r}")


def _gen_key_count(n: int, seed: int, length: int = 12, noise_channels: int = 1) -> list:
    """Events at irregular times, one of two one-hot keys each; label = majority key."""
    rng = np.random.default_rng(seed)
    records = []
    for idx in range(n):
        while True:
            times = np.sort(rng.uniform(0.0, 1.0, size=length))
            while np.any(np.diff(times) <= 1e-9):
                times = np.sort(rng.uniform(0.0, 1.0, size=length))
            bias = rng.choice([0.25, 0.75])
            keys = (rng.uniform(size=length) < bias).astype(int)
            n_one = int(keys.sum())
            if n_one * 2 != length:  # resample ties
                break
        label = int(n_one * 2 > length)
        values = np.zeros((length, 2 + noise_channels))
        values[np.arange(length), keys] = 1.0
        if noise_channels:
            values[:, 2:] = rng.normal(scale=0.3, size=(length, noise_channels))
        records.append(
            SequenceRecord(
                name=f"seq{idx:05d}.csv",
                times=times,
                values=values,
                mask=np.ones_like(values, dtype=bool),
                label=label,
            )
        )
    return records


def _gen_delayed_recall(n: int, seed: int, n_keys: int = 4, n_values: int = 2, distractors: int = 200) -> list:
    """Store one key->value pair early, show distractor pairs, cue the key at the end.

    Channels: n_keys one-hot key channels + n_values one-hot value channels.
    The final observation repeats the stored key with an empty value slot; the
    label is the stored value class. Additive memories overwrite under the
    distractor stream; error-correcting ones keep the early association.
    """
    rng = np.random.default_rng(seed)
    records = []
    for idx in range(n):
        key0 = 0  # the cueing key; distractors use the other keys
        label = int(rng.integers(n_values))
        length = distractors + 2
        values = np.zeros((length, n_keys + n_values))
        values[0, key0] = 1.0
        values[0, n_keys + label] = 1.0
        for j in range(1, distractors + 1):
            dk = int(rng.integers(1, n_keys))
            dv = int(rng.integers(n_values))
            values[j, dk] = 1.0
            values[j, n_keys + dv] = 1.0
        values[-1, key0] = 1.0  # recall cue, no value
        times = np.arange(length, dtype=np.float64)
        records.append(
            SequenceRecord(
                name=f"seq{idx:05d}.csv",
                times=times,
                values=values,
                mask=np.ones_like(values, dtype=bool),
                label=label,
            )
        )
    return records


# ---------------------------------------------------------------------------
# metrics


def accuracy(pred, gold) -> float:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise MetricError(f"prediction/label shapes differ: {pred.shape} vs {gold.shape}")
    return float(np.mean(pred == gold))


def auc_score(scores, labels) -> float:
    """Rank-based AUC; ties count one half (equals the pairwise oracle)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: both classes must be present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
