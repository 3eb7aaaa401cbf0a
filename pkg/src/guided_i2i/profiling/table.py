"""Named feature matrices with CSV round-tripping."""

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError


@dataclass
class FeatureTable:
    rows: list
    columns: list
    values: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.columns)):
            raise InputError(f"values shape {self.values.shape} != ({len(self.rows)}, {len(self.columns)})")
        if len(set(self.columns)) != len(self.columns):
            raise InputError("column names must be unique")

    @property
    def shape(self):
        return self.values.shape

    def row_index(self):
        return {r: i for i, r in enumerate(self.rows)}

    def select_rows(self, rows):
        idx = self.row_index()
        missing = [r for r in rows if r not in idx]
        if missing:
            raise InputError(f"unknown rows: {missing[:5]}")
        return FeatureTable(list(rows), list(self.columns), self.values[[idx[r] for r in rows]], dict(self.flags))

    def select_columns(self, columns):
        idx = {c: i for i, c in enumerate(self.columns)}
        missing = [c for c in columns if c not in idx]
        if missing:
            raise InputError(f"unknown columns: {missing[:5]}")
        return FeatureTable(list(self.rows), list(columns), self.values[:, [idx[c] for c in columns]], dict(self.flags))

    def aggregate(self, group_of, reducer=np.median):
        """Collapse rows sharing ``group_of[row]`` with ``reducer`` (median by default).

        Rows absent from ``group_of`` are dropped; groups are ordered by first appearance.
        """
        groups = {}
        for i, r in enumerate(self.rows):
            if r in group_of:
                groups.setdefault(group_of[r], []).append(i)
        keys = list(groups)
        vals = np.array([reducer(self.values[groups[g]], axis=0) for g in keys]).reshape(len(keys), len(self.columns))
        return FeatureTable(keys, list(self.columns), vals)

    def to_csv(self, path, row_header="row_id"):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            w.writerow([row_header] + list(self.columns))
            for r, v in zip(self.rows, self.values):
                w.writerow([r] + [repr(float(x)) for x in v])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows, vals = [], []
            for line in reader:
                rows.append(line[0])
                vals.append([float(x) for x in line[1:]])
        return cls(rows, header[1:], np.array(vals).reshape(len(rows), len(header) - 1))
