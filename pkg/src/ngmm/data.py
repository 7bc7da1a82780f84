"""Grouped datasets and their CSV representation.

CSV layout: header ``group_id,y,x1,...,xp,z1,...,zq``, one row per
observation, group-level ``z`` repeated on every row of its group.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = ["DataFormatError", "Dataset", "GroupData", "read_csv", "write_csv", "format_float"]


class DataFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True, eq=False)
class GroupData:
    """One group: responses, observation covariates and random-effect design.

    Exactly one of ``z`` (group-constant, length q) or ``z_matrix``
    (one row per observation) is set.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray | None = None
    z_matrix: np.ndarray | None = None
    group_id: str = "0"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, -1)
        if y.size < 1:
            raise ValueError("a group needs at least one observation")
        if x.shape[0] != y.size:
            raise ValueError(f"x has {x.shape[0]} rows but y has {y.size} entries")
        if (self.z is None) == (self.z_matrix is None):
            raise ValueError("exactly one of z / z_matrix must be given")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "group_id", str(self.group_id))
        if self.z is not None:
            object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(-1))
        else:
            zm = np.asarray(self.z_matrix, dtype=float)
            if zm.ndim != 2 or zm.shape[0] != y.size:
                raise ValueError("z_matrix must have one row per observation")
            object.__setattr__(self, "z_matrix", zm)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.size if self.z is not None else self.z_matrix.shape[1]

    @property
    def group_constant(self) -> bool:
        return self.z is not None

    def z_rows(self) -> np.ndarray:
        """Random-effect design as an ``n x q`` matrix."""
        if self.z is not None:
            return np.tile(self.z, (self.n, 1))
        return self.z_matrix

    def subset(self, idx) -> "GroupData":
        idx = np.asarray(idx, dtype=int)
        if self.z is not None:
            return GroupData(self.y[idx], self.x[idx], z=self.z, group_id=self.group_id)
        return GroupData(self.y[idx], self.x[idx], z_matrix=self.z_matrix[idx],
                         group_id=self.group_id)

    def with_y(self, y) -> "GroupData":
        if self.z is not None:
            return GroupData(y, self.x, z=self.z, group_id=self.group_id)
        return GroupData(y, self.x, z_matrix=self.z_matrix, group_id=self.group_id)


@dataclass(frozen=True)
class Dataset:
    groups: tuple[GroupData, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))

    def __iter__(self) -> Iterator[GroupData]:
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, i) -> GroupData:
        return self.groups[i]

    @property
    def n_obs(self) -> int:
        return int(np.sum([g.n for g in self.groups]))

    @property
    def p(self) -> int:
        return self.groups[0].p

    @property
    def q(self) -> int:
        return self.groups[0].q

    def by_id(self) -> dict[str, GroupData]:
        return {g.group_id: g for g in self.groups}

    def responses(self) -> np.ndarray:
        return np.concatenate([g.y for g in self.groups]) if self.groups else np.zeros(0)


def format_float(v: float) -> str:
    """Shortest repr that round-trips exactly."""
    v = float(v)
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_csv(data: Dataset | Sequence[GroupData], path: str | Path | None = None) -> str:
    groups = list(data)
    p, q = groups[0].p, groups[0].q
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group_id", "y"] + [f"x{i + 1}" for i in range(p)] + [f"z{i + 1}" for i in range(q)])
    for g in groups:
        zr = g.z_rows()
        for i in range(g.n):
            w.writerow([g.group_id, format_float(g.y[i])]
                       + [format_float(v) for v in g.x[i]]
                       + [format_float(v) for v in zr[i]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _parse_header(header: list[str]) -> tuple[int, int, bool]:
    if len(header) < 2 or header[0] != "group_id":
        raise DataFormatError("header must start with group_id", line=1)
    has_y = header[1] == "y"
    rest = header[2:] if has_y else header[1:]
    xs = [c for c in rest if c.startswith("x")]
    zs = [c for c in rest if c.startswith("z")]
    if xs + zs != rest or xs != [f"x{i + 1}" for i in range(len(xs))] \
            or zs != [f"z{i + 1}" for i in range(len(zs))]:
        raise DataFormatError("columns must be group_id,y,x1..xp,z1..zq", line=1)
    if not xs or not zs:
        raise DataFormatError("need at least one x and one z column", line=1)
    return len(xs), len(zs), has_y


def read_csv(source: str | Path | Iterable[str], require_y: bool = True) -> Dataset:
    """Parse the dataset CSV format.

    Groups keep order of first appearance.  If every group has a constant
    z the groups are group-constant; otherwise every group stores a
    ``z_matrix``.  Without a ``y`` column responses are set to NaN-free
    zeros so the rows can still be used as prediction covariates.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("empty file", line=1) from None
    p, q, has_y = _parse_header(header)
    if require_y and not has_y:
        raise DataFormatError("missing y column", line=1)
    width = 1 + int(has_y) + p + q
    rows: dict[str, list] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(f"expected {width} fields, got {len(row)}", line=lineno)
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataFormatError(f"non-numeric field ({exc})", line=lineno) from None
        if not np.all(np.isfinite(vals)):
            raise DataFormatError("non-finite field", line=lineno)
        rows.setdefault(row[0], []).append((lineno, vals))
    if not rows:
        raise DataFormatError("no data rows", line=2)
    parsed = {}
    for gid, recs in rows.items():
        arr = np.array([v for _, v in recs], dtype=float)
        y = arr[:, 0] if has_y else np.zeros(len(arr))
        off = int(has_y)
        parsed[gid] = (y, arr[:, off: off + p], arr[:, off + p:], recs[0][0])
    constant = all(np.all(z == z[0]) for _, _, z, _ in parsed.values())
    groups = []
    for gid, (y, x, z, _) in parsed.items():
        if constant:
            groups.append(GroupData(y, x, z=z[0], group_id=gid))
        else:
            groups.append(GroupData(y, x, z_matrix=z, group_id=gid))
    return Dataset(groups)


def validate_support(data: Dataset, fam) -> None:
    """Raise DataFormatError naming the first group with an invalid response."""
    for g in data:
        try:
            fam.check_support(g.y)
        except ValueError as exc:
            raise DataFormatError(f"group {g.group_id}: {exc}") from None
