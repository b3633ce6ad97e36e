"""Confirmation-bias diagnostics, test accuracy and the per-round CSV log.

This is the only module that reads the hidden labels of client partitions.
"""
import math
from dataclasses import dataclass, field, fields

import numpy as np

from flfl import nn_core as nn


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    pseudo_label_accuracy: float
    label_ratio: float
    correct_label_ratio: float
    wrong_label_ratio: float
    cw_ratio: float
    mean_La: float
    mean_Lcs: float
    taus: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    clients: list = field(default_factory=list)


FIELDS = [f.name for f in fields(RoundMetrics)]
_LIST_FIELDS = {"taus", "betas", "clients"}


@dataclass(frozen=True)
class PseudoLabelStats:
    pseudo_label_accuracy: float
    label_ratio: float
    correct_ratio: float
    wrong_ratio: float
    cw_ratio: float


def pseudo_label_metrics(labels, masks, hidden_labels):
    """Counts over the concatenated samples of every selected client.

    ``labels``, ``masks`` and ``hidden_labels`` are sequences with one array
    per client.
    """
    if not (len(labels) == len(masks) == len(hidden_labels)):
        raise ValueError("need labels, masks and hidden labels for the same clients")
    n = masked = correct = 0
    for lab, m, truth in zip(labels, masks, hidden_labels):
        lab, m, truth = np.asarray(lab), np.asarray(m, dtype=bool), np.asarray(truth)
        if not (lab.shape == m.shape == truth.shape):
            raise ValueError("size mismatch between pseudo-labels, mask and hidden labels")
        n += lab.size
        masked += int(m.sum())
        correct += int((m & (lab == truth)).sum())
    wrong = masked - correct
    if n == 0:
        return PseudoLabelStats(0.0, 0.0, 0.0, 0.0, 0.0)
    acc = correct / masked if masked else 0.0
    if wrong:
        cw = correct / wrong
    else:
        cw = math.inf if correct else 0.0
    return PseudoLabelStats(acc, masked / n, correct / n, wrong / n, cw)


def test_accuracy(spec, params, bn, features, labels):
    if len(features) == 0:
        raise ValueError("empty test set")
    probs, _ = nn.forward(spec, params, bn, features, mode="eval")
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def _parse(s, integer=False):
    return int(s) if integer else float(s)


def format_record(rec: RoundMetrics):
    cells = []
    for name in FIELDS:
        v = getattr(rec, name)
        if name in _LIST_FIELDS:
            cells.append(";".join(_fmt(x) for x in v))
        else:
            cells.append(_fmt(v))
    return ",".join(cells)


def parse_record(line):
    cells = line.rstrip("\n").split(",")
    if len(cells) != len(FIELDS):
        raise ValueError(f"expected {len(FIELDS)} columns, got {len(cells)}")
    kw = {}
    for name, cell in zip(FIELDS, cells):
        integer = name in ("round", "clients")
        if name in _LIST_FIELDS:
            kw[name] = [_parse(x, integer) for x in cell.split(";")] if cell else []
        else:
            kw[name] = _parse(cell, integer)
    return RoundMetrics(**kw)


def header():
    return ",".join(FIELDS)


def write_metrics(path, records):
    try:
        with open(path, "w") as fh:
            fh.write(header() + "\n")
            for rec in records:
                fh.write(format_record(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


class MetricsWriter:
    """Appends records in round order, flushing after each one."""

    def __init__(self, path):
        self.path = path
        try:
            self._fh = open(path, "w")
        except OSError as exc:
            raise OSError(f"cannot open metrics file {path}: {exc}") from exc
        self._fh.write(header() + "\n")

    def append(self, rec):
        self._fh.write(format_record(rec) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read metrics from {path}: {exc}") from exc
    if not lines or lines[0] != header():
        raise ValueError(f"{path}: unexpected metrics header")
    return [parse_record(line) for line in lines[1:] if line]
