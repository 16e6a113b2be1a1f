"""Metrics CSV with a fixed schema; reals are written with 9 significant digits."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

HEADER = ("step", "loss_cont", "loss_forget", "loss_total", "acc", "knn_acc", "buffer_fill", "wall_ms")


class MetricsSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss_cont: float
    loss_forget: float
    loss_total: float
    acc: float
    knn_acc: float
    buffer_fill: int
    wall_ms: float

    def cells(self) -> list[str]:
        out = []
        for f, v in zip(fields(self), astuple(self)):
            out.append(str(int(v)) if f.type in ("int", int) else format(float(v), ".9g"))
        return out

    @classmethod
    def from_cells(cls, cells) -> "MetricsRow":
        vals = []
        for f, c in zip(fields(cls), cells):
            vals.append(int(c) if f.type in ("int", int) else float(c))
        return cls(*vals)


class MetricsWriter:
    """Append rows to a CSV, flushing after each so partial runs survive."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot open metrics file {self.path}: {exc}") from exc
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(HEADER)
        self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._csv.writerow(row.cells())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(rows, path) -> None:
    with MetricsWriter(path) as w:
        for row in rows:
            w.write(row)


def read_metrics(path) -> list[MetricsRow]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != HEADER:
                raise MetricsSchemaError(f"{path}: header {header} does not match {','.join(HEADER)}")
            rows = []
            for lineno, cells in enumerate(reader, start=2):
                if len(cells) != len(HEADER):
                    raise MetricsSchemaError(f"{path}:{lineno}: expected {len(HEADER)} columns")
                rows.append(MetricsRow.from_cells(cells))
            return rows
    except OSError as exc:
        raise OSError(f"cannot read metrics file {path}: {exc}") from exc
