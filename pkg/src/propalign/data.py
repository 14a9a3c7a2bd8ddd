"""Core records for two-modality datasets, scores, couplings and reports.

CSV is the interchange format throughout: datasets as one row per sample,
couplings as sparse (group, i, j, weight) triplets, metric reports as JSON.
Floats are written with 17 significant digits so round-trips are bit-exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"
COUPLING_WEIGHT_FLOOR = 1e-12

WEIGHTINGS = ("mean_over_groups", "count_weighted", "inverse_count_weighted")


class DatasetFormatError(ValueError):
    """Raised when a dataset file violates the CSV schema."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass
class LabeledDataset:
    """Feature matrix of one modality with perturbation labels.

    truth_index maps each row to the row index of its true partner in the
    other modality's dataset (evaluation only); latents are the generating
    latent states (synthetic data only).
    """

    modality_id: int
    features: np.ndarray          # (n, d)
    labels: np.ndarray            # (n,) ints in 0..T
    truth_index: np.ndarray | None = None
    latents: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.modality_id not in (1, 2):
            raise ValueError(f"modality_id must be 1 or 2, got {self.modality_id}")
        self.features = _freeze(np.asarray(self.features, dtype=np.float64))
        self.labels = _freeze(np.asarray(self.labels, dtype=np.int64))
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels length must match feature rows")
        if not np.all(np.isfinite(self.features)):
            r = int(np.argwhere(~np.isfinite(self.features).all(axis=1))[0, 0])
            raise ValueError(f"non-finite value at row {r}")
        if n and self.labels.min() < 0:
            raise ValueError("label outside [0, T]: negative label")
        present = np.unique(self.labels)
        if n and not np.array_equal(present, np.arange(self.labels.max() + 1)):
            missing = sorted(set(range(int(self.labels.max()) + 1)) - set(present.tolist()))
            raise ValueError(f"empty label class(es) {missing}; classes must be dense 0..T")
        if self.truth_index is not None:
            self.truth_index = _freeze(np.asarray(self.truth_index, dtype=np.int64))
            if self.truth_index.shape != (n,):
                raise ValueError("truth_index length must match feature rows")
            if n and (self.truth_index.min() < 0 or len(np.unique(self.truth_index)) != n):
                raise ValueError("truth_index must be an injection into partner rows")
        if self.latents is not None:
            self.latents = _freeze(np.asarray(self.latents, dtype=np.float64))
            if self.latents.ndim != 2 or self.latents.shape[0] != n:
                raise ValueError("latents must be (n, d_z)")
        if self.ids is None:
            self.ids = _freeze(np.arange(n, dtype=np.int64))
        else:
            self.ids = _freeze(np.asarray(self.ids, dtype=np.int64))
            if self.ids.shape != (n,):
                raise ValueError("ids length must match feature rows")
            if n and len(np.unique(self.ids)) != n:
                dup = self.ids[np.where(np.diff(np.sort(self.ids)) == 0)[0][0] + 1]
                raise ValueError(f"duplicated id {dup}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_labels(self) -> int:
        """Number of label classes, T + 1."""
        return int(self.labels.max()) + 1 if self.n else 0

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        """Row subset preserving order; truth_index is kept verbatim (it still
        refers to the partner's original row numbering)."""
        rows = np.asarray(rows)
        return LabeledDataset(
            modality_id=self.modality_id,
            features=self.features[rows],
            labels=self.labels[rows],
            truth_index=None if self.truth_index is None else self.truth_index[rows],
            latents=None if self.latents is None else self.latents[rows],
            ids=self.ids[rows],
        )


@dataclass
class PropensityTable:
    """Per-sample label-posterior vectors and their log-ratio transform.

    Each scores row lies on the probability simplex over the T+1 labels;
    logits[i][t] = log(scores[i][t+1] / scores[i][0]) after clamping.
    """

    scores: np.ndarray   # (n, T+1)
    logits: np.ndarray   # (n, T)
    labels: np.ndarray   # (n,)

    def __post_init__(self) -> None:
        self.scores = _freeze(np.asarray(self.scores, dtype=np.float64))
        self.logits = _freeze(np.asarray(self.logits, dtype=np.float64))
        self.labels = _freeze(np.asarray(self.labels, dtype=np.int64))
        n, k = self.scores.shape
        if self.logits.shape != (n, k - 1):
            raise ValueError("logits must be (n, T)")
        if self.labels.shape != (n,):
            raise ValueError("labels must be (n,)")
        if n:
            if self.scores.min() < 0:
                raise ValueError("scores must be nonnegative")
            if np.abs(self.scores.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValueError("score rows must sum to 1 within 1e-9")

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class GroupCoupling:
    """Transport plan between the two modalities' rows of one label group."""

    group_label: int
    row_ids: np.ndarray          # rows of dataset 1
    col_ids: np.ndarray          # rows of dataset 2
    weights: np.ndarray          # (n1, n2), >= 0
    marginal_left: np.ndarray
    marginal_right: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.row_ids = _freeze(np.asarray(self.row_ids, dtype=np.int64))
        self.col_ids = _freeze(np.asarray(self.col_ids, dtype=np.int64))
        self.weights = _freeze(np.asarray(self.weights, dtype=np.float64))
        self.marginal_left = _freeze(np.asarray(self.marginal_left, dtype=np.float64))
        self.marginal_right = _freeze(np.asarray(self.marginal_right, dtype=np.float64))
        n1, n2 = self.weights.shape
        if self.row_ids.shape != (n1,) or self.col_ids.shape != (n2,):
            raise ValueError("row_ids/col_ids must match weights shape")
        if self.marginal_left.shape != (n1,) or self.marginal_right.shape != (n2,):
            raise ValueError("marginals must match weights shape")
        if n1 and n2 and self.weights.min() < 0:
            raise ValueError("coupling weights must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass
class RowConditional:
    """Row-normalized coupling; each row is a probability vector."""

    group_label: int
    row_ids: np.ndarray
    col_ids: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.row_ids = _freeze(np.asarray(self.row_ids, dtype=np.int64))
        self.col_ids = _freeze(np.asarray(self.col_ids, dtype=np.int64))
        self.weights = _freeze(np.asarray(self.weights, dtype=np.float64))
        if self.weights.size:
            dev = np.abs(self.weights.sum(axis=1) - 1.0).max()
            if dev > 1e-9:
                raise ValueError(f"row sums deviate from 1 by {dev:.3e}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def row_conditional(coupling: GroupCoupling) -> RowConditional:
    """Normalize each coupling row into a conditional distribution."""
    sums = coupling.weights.sum(axis=1, keepdims=True)
    if coupling.weights.size and sums.min() <= 0:
        raise ValueError("cannot row-normalize a coupling with a zero row")
    return RowConditional(
        group_label=coupling.group_label,
        row_ids=coupling.row_ids,
        col_ids=coupling.col_ids,
        weights=coupling.weights / sums,
    )


@dataclass
class MetricReport:
    """Named scalar metric with per-group values and a weighted aggregate."""

    metric_name: str
    per_group: dict[int, float]
    weighting: str = "mean_over_groups"
    group_counts: dict[int, int] | None = None
    aggregate: float = field(init=False)

    def __post_init__(self) -> None:
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.weighting != "mean_over_groups" and self.group_counts is None:
            raise ValueError(f"weighting {self.weighting!r} requires group_counts")
        self.aggregate = aggregate_groups(self.per_group, self.weighting, self.group_counts)


def aggregate_groups(per_group: dict[int, float], weighting: str,
                     group_counts: dict[int, int] | None = None) -> float:
    labels = sorted(per_group)
    vals = np.array([per_group[t] for t in labels], dtype=np.float64)
    if weighting == "mean_over_groups":
        w = np.ones(len(labels))
    elif weighting == "count_weighted":
        w = np.array([group_counts[t] for t in labels], dtype=np.float64)
    elif weighting == "inverse_count_weighted":
        w = 1.0 / np.array([group_counts[t] for t in labels], dtype=np.float64)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return float((vals * w).sum() / w.sum())


# ---------------------------------------------------------------------------
# dataset CSV i/o


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Write a dataset CSV; optional columns are omitted when absent."""
    path = Path(path)
    header = ["id", "label", "modality"] + [f"f{j}" for j in range(ds.dim)]
    if ds.truth_index is not None:
        header.append("truth")
    if ds.latents is not None:
        header += [f"z{j}" for j in range(ds.latents.shape[1])]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            row = [int(ds.ids[i]), int(ds.labels[i]), ds.modality_id]
            row += [_fmt(v) for v in ds.features[i]]
            if ds.truth_index is not None:
                row.append(int(ds.truth_index[i]))
            if ds.latents is not None:
                row += [_fmt(v) for v in ds.latents[i]]
            w.writerow(row)


def _parse_header(header: list[str]) -> tuple[int, bool, int]:
    """Return (n_features, has_truth, n_latents) or raise DatasetFormatError."""
    if header[:3] != ["id", "label", "modality"]:
        raise DatasetFormatError(f"malformed header: must start id,label,modality, got {header[:3]}")
    rest = header[3:]
    nf = 0
    while nf < len(rest) and rest[nf] == f"f{nf}":
        nf += 1
    if nf == 0:
        raise DatasetFormatError("malformed header: expected feature columns f0..")
    rest = rest[nf:]
    has_truth = bool(rest) and rest[0] == "truth"
    if has_truth:
        rest = rest[1:]
    nz = 0
    while nz < len(rest) and rest[nz] == f"z{nz}":
        nz += 1
    if rest[nz:]:
        raise DatasetFormatError(f"malformed header: unexpected column {rest[nz]!r}")
    return nf, has_truth, nz


def load_dataset(path: str | Path) -> LabeledDataset:
    """Load and validate a dataset CSV written by save_dataset."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("malformed header: empty file") from None
        nf, has_truth, nz = _parse_header([h.strip() for h in header])
        ids, labels, modalities, feats, truths, zs = [], [], [], [], [], []
        for r, row in enumerate(reader):
            if len(row) != len(header):
                raise DatasetFormatError(f"row {r} has {len(row)} fields, expected {len(header)}")
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                modalities.append(int(row[2]))
                feats.append([float(v) for v in row[3:3 + nf]])
                k = 3 + nf
                if has_truth:
                    truths.append(int(row[k]))
                    k += 1
                if nz:
                    zs.append([float(v) for v in row[k:k + nz]])
            except ValueError as e:
                raise DatasetFormatError(f"unparsable value at row {r}: {e}") from None
            if not all(np.isfinite(feats[-1])) or (nz and not all(np.isfinite(zs[-1]))):
                raise DatasetFormatError(f"non-finite value at row {r}")
    if not ids:
        raise DatasetFormatError("dataset has no rows")
    if len(set(modalities)) != 1:
        raise DatasetFormatError("modality column must be constant")
    seen: dict[int, int] = {}
    for r, i in enumerate(ids):
        if i in seen:
            raise DatasetFormatError(f"duplicated id {i} at row {r}")
        seen[i] = r
    try:
        return LabeledDataset(
            modality_id=modalities[0],
            features=np.array(feats, dtype=np.float64),
            labels=np.array(labels, dtype=np.int64),
            truth_index=np.array(truths, dtype=np.int64) if has_truth else None,
            latents=np.array(zs, dtype=np.float64) if nz else None,
            ids=np.array(ids, dtype=np.int64),
        )
    except ValueError as e:
        raise DatasetFormatError(str(e)) from None


# ---------------------------------------------------------------------------
# grouping


def group_indices(ds1: LabeledDataset, ds2: LabeledDataset) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Partition both datasets' rows by label, ordered by label.

    Raises if a label occurs in only one modality: matching is defined only
    within shared label classes.
    """
    l1 = set(np.unique(ds1.labels).tolist())
    l2 = set(np.unique(ds2.labels).tolist())
    if l1 != l2:
        only = sorted(l1.symmetric_difference(l2))
        raise ValueError(f"label(s) {only} present in one modality only")
    out = []
    for t in sorted(l1):
        out.append((int(t),
                    np.flatnonzero(ds1.labels == t),
                    np.flatnonzero(ds2.labels == t)))
    return out


# ---------------------------------------------------------------------------
# coupling and report i/o


def save_couplings(couplings: list[GroupCoupling], path: str | Path) -> None:
    """Write couplings as sparse triplets (group,i,j,weight) with dataset row
    indices; weights below 1e-12 are dropped."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "i", "j", "weight"])
        for cp in couplings:
            keep = np.argwhere(cp.weights >= COUPLING_WEIGHT_FLOOR)
            for a, b in keep:
                w.writerow([cp.group_label, int(cp.row_ids[a]), int(cp.col_ids[b]),
                            _fmt(cp.weights[a, b])])


def load_couplings(path: str | Path, ds1: LabeledDataset, ds2: LabeledDataset) -> list[GroupCoupling]:
    """Rebuild dense per-group couplings from a triplet CSV; the datasets
    supply group shapes and index order."""
    path = Path(path)
    triplets: dict[int, list[tuple[int, int, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["group", "i", "j", "weight"]:
            raise DatasetFormatError(f"malformed coupling header {header}")
        for row in reader:
            t, i, j, wgt = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            triplets.setdefault(t, []).append((i, j, wgt))
    out = []
    for t, rows1, rows2 in group_indices(ds1, ds2):
        pos1 = {int(r): a for a, r in enumerate(rows1)}
        pos2 = {int(r): b for b, r in enumerate(rows2)}
        weights = np.zeros((len(rows1), len(rows2)))
        for i, j, wgt in triplets.get(t, []):
            weights[pos1[i], pos2[j]] = wgt
        out.append(GroupCoupling(
            group_label=t, row_ids=rows1, col_ids=rows2, weights=weights,
            marginal_left=weights.sum(axis=1), marginal_right=weights.sum(axis=0)))
    return out


def save_report(report: MetricReport, path: str | Path) -> None:
    path = Path(path)
    payload = {
        "metric": report.metric_name,
        "weighting": report.weighting,
        "aggregate": report.aggregate,
        "per_group": {str(t): report.per_group[t] for t in sorted(report.per_group)},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
