"""Table ingestion, schema inference, encoding to model space and back,
and the bundled toy-table generator.

Continuous columns are min-max scaled to [-1, 1]; discrete columns are
one-hot encoded in schema category order. Decoding clamps continuous model
output to [-1, 1] before inverse scaling and takes a per-block argmax for
discrete output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

CONTINUOUS = "continuous"
DISCRETE = "discrete"
TASKS = ("binary", "multiclass", "regression", "none")


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    minimum: float | None = None
    maximum: float | None = None
    categories: tuple[str, ...] | None = None

    def n_categories(self) -> int:
        return len(self.categories) if self.categories else 0


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[ColumnSchema, ...]
    target: str | None = None
    task: str = "none"

    @property
    def cont_columns(self) -> list[ColumnSchema]:
        return [c for c in self.columns if c.kind == CONTINUOUS]

    @property
    def disc_columns(self) -> list[ColumnSchema]:
        return [c for c in self.columns if c.kind == DISCRETE]

    @property
    def n_cont(self) -> int:
        return len(self.cont_columns)

    @property
    def n_disc(self) -> int:
        return len(self.disc_columns)

    @property
    def cat_sizes(self) -> tuple[int, ...]:
        return tuple(c.n_categories() for c in self.disc_columns)

    def column(self, name: str) -> ColumnSchema:
        for c in self.columns:
            if c.name == name:
                return c
        raise DataError(f"no column named {name!r}")

    def to_dict(self) -> dict:
        return {
            "columns": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "minimum": c.minimum,
                    "maximum": c.maximum,
                    "categories": list(c.categories) if c.categories else None,
                }
                for c in self.columns
            ],
            "target": self.target,
            "task": self.task,
        }

    @staticmethod
    def from_dict(d: dict) -> "TableSchema":
        cols = tuple(
            ColumnSchema(
                name=c["name"],
                kind=c["kind"],
                minimum=c.get("minimum"),
                maximum=c.get("maximum"),
                categories=tuple(c["categories"]) if c.get("categories") else None,
            )
            for c in d["columns"]
        )
        return TableSchema(cols, d.get("target"), d.get("task", "none"))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Table:
    """Parsed rows: floats in continuous cells, strings in discrete cells."""
    header: list[str]
    rows: list[list]

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        j = self.header.index(name)
        return [r[j] for r in self.rows]


def _parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_schema_spec(path: str) -> dict:
    """Read a declarative schema file (JSON): per-column kind/categories and
    optional min/max, plus target column and task."""
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _spec_columns(spec: dict | None) -> dict:
    """Column overrides keyed by name; accepts both the mapping form and the
    list form that TableSchema.to_dict() writes."""
    cols = (spec or {}).get("columns", {})
    if isinstance(cols, list):
        return {c["name"]: c for c in cols}
    return cols


def load_csv(path: str, spec: dict | None = None) -> tuple[TableSchema, Table]:
    """Load a headered CSV, infer or apply a schema, and parse the cells.

    Without an override a column is continuous iff every cell parses as a
    finite float; otherwise discrete with its sorted distinct values as
    categories. Rows with missing cells (or cells that fail a declared
    continuous parse) are dropped with a warning listing their 1-based data
    row numbers.
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            raw = list(reader)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not raw:
        raise DataError(f"{path}: empty file")
    header = raw[0]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    body = raw[1:]
    if not body:
        raise DataError(f"{path}: no data rows")

    ncols = len(header)
    bad_rows: list[int] = []
    complete: list[tuple[int, list[str]]] = []
    for i, row in enumerate(body, start=1):
        if len(row) != ncols or any(cell.strip() == "" for cell in row):
            bad_rows.append(i)
        else:
            complete.append((i, row))
    spec_cols = _spec_columns(spec)

    kinds: list[str] = []
    for j, name in enumerate(header):
        declared = spec_cols.get(name, {}).get("kind")
        if declared is not None:
            if declared not in (CONTINUOUS, DISCRETE):
                raise DataError(f"column {name!r}: unknown kind {declared!r}")
            kinds.append(declared)
        else:
            numeric = all(_parse_float(row[j]) is not None for _, row in complete)
            kinds.append(CONTINUOUS if numeric else DISCRETE)

    rows: list[list] = []
    for i, row in complete:
        parsed: list = []
        ok = True
        for j, kind in enumerate(kinds):
            if kind == CONTINUOUS:
                v = _parse_float(row[j])
                if v is None:
                    ok = False
                    break
                parsed.append(v)
            else:
                parsed.append(row[j])
        if ok:
            rows.append(parsed)
        else:
            bad_rows.append(i)
    if bad_rows:
        shown = ", ".join(str(r) for r in sorted(bad_rows)[:10])
        warnings.warn(
            f"{path}: dropped {len(bad_rows)} row(s) with missing/unparseable "
            f"cells (rows {shown}{'...' if len(bad_rows) > 10 else ''})"
        )
    if not rows:
        raise DataError(f"{path}: no usable rows")

    columns: list[ColumnSchema] = []
    for j, (name, kind) in enumerate(zip(header, kinds)):
        declared = spec_cols.get(name, {})
        if kind == CONTINUOUS:
            vals = [r[j] for r in rows]
            lo = declared.get("minimum", min(vals))
            hi = declared.get("maximum", max(vals))
            if not lo < hi:
                raise DataError(f"column {name!r}: constant continuous column")
            columns.append(ColumnSchema(name, CONTINUOUS, float(lo), float(hi)))
        else:
            if declared.get("categories"):
                cats = tuple(str(c) for c in declared["categories"])
            else:
                cats = tuple(sorted({str(r[j]) for r in rows}))
            if len(cats) != len(set(cats)):
                raise DataError(f"column {name!r}: duplicate categories")
            if len(cats) < 2:
                raise DataError(f"column {name!r}: needs at least 2 categories")
            columns.append(ColumnSchema(name, DISCRETE, categories=cats))

    target = (spec or {}).get("target")
    task = (spec or {}).get("task", "none")
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; one of {TASKS}")
    if target is not None and target not in header:
        raise DataError(f"target column {target!r} not in table")
    return TableSchema(tuple(columns), target, task), Table(header, rows)


def write_csv(table: Table, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.header)
        writer.writerows(table.rows)


def encode(table: Table, schema: TableSchema) -> tuple[np.ndarray, np.ndarray]:
    """Encode rows to model space: (batch, n_cont) in [-1, 1] and a
    (batch, sum_K) one-hot block matrix. Values outside a continuous
    column's schema range clamp with a warning; unknown categories raise."""
    n = len(table.rows)
    name_to_j = {name: j for j, name in enumerate(table.header)}
    cont = np.zeros((n, schema.n_cont))
    for ci, col in enumerate(schema.cont_columns):
        j = name_to_j[col.name]
        vals = np.asarray([r[j] for r in table.rows], dtype=np.float64)
        lo, hi = col.minimum, col.maximum
        outside = (vals < lo) | (vals > hi)
        if np.any(outside):
            warnings.warn(
                f"column {col.name!r}: {int(outside.sum())} value(s) outside "
                f"[{lo}, {hi}] clamped during encoding"
            )
            vals = np.clip(vals, lo, hi)
        cont[:, ci] = 2.0 * (vals - lo) / (hi - lo) - 1.0

    disc = np.zeros((n, int(sum(schema.cat_sizes))))
    off = 0
    for col in schema.disc_columns:
        j = name_to_j[col.name]
        index = {c: i for i, c in enumerate(col.categories)}
        for r, row in enumerate(table.rows):
            v = str(row[j])
            if v not in index:
                raise DataError(f"column {col.name!r}: unknown category {v!r}")
            disc[r, off + index[v]] = 1.0
        off += col.n_categories()
    return cont, disc


def decode(cont: np.ndarray, disc_scores: np.ndarray, schema: TableSchema) -> Table:
    """Map model output back to a table: clamp + inverse scale the continuous
    block, per-block argmax (ties to the lowest index) for the discrete one."""
    cont = np.asarray(cont, dtype=np.float64)
    n = cont.shape[0] if schema.n_cont else np.asarray(disc_scores).shape[0]
    cont_cols: list[np.ndarray] = []
    for ci, col in enumerate(schema.cont_columns):
        c = np.clip(cont[:, ci], -1.0, 1.0)
        cont_cols.append((c + 1.0) / 2.0 * (col.maximum - col.minimum) + col.minimum)

    disc_cols: list[list[str]] = []
    off = 0
    for col in schema.disc_columns:
        k = col.n_categories()
        idx = np.argmax(np.asarray(disc_scores)[:, off:off + k], axis=1)
        disc_cols.append([col.categories[i] for i in idx])
        off += k

    header = [c.name for c in schema.columns]
    rows: list[list] = []
    ci = di = 0
    getters: list = []
    for col in schema.columns:
        if col.kind == CONTINUOUS:
            getters.append(("c", ci))
            ci += 1
        else:
            getters.append(("d", di))
            di += 1
    for r in range(n):
        row: list = []
        for kind, j in getters:
            row.append(float(cont_cols[j][r]) if kind == "c" else disc_cols[j][r])
        rows.append(row)
    return Table(header, rows)


# ---------------------------------------------------------------------------
# toy table: two coordinates plus two label columns they determine

TOY_CENTERS = np.array([[-1.5, -1.5], [1.5, -1.5], [-1.5, 1.5], [1.5, 1.5]])
TOY_RADIUS = 1.0
TOY_JITTER = 0.15        # 0.05 of the 3.0 center-to-center layout scale
TOY_SECTOR_GAP = 0.06    # radians kept clear around quadrant boundaries
TOY_COLORS = tuple(f"c{i:02d}" for i in range(16))
TOY_RINGS = tuple(f"ring{i}" for i in range(4))


def generate_toy(n: int, rng: np.random.Generator, stratified: bool = True
                 ) -> tuple[TableSchema, Table]:
    """Generate the 4-column toy table: points on four jittered rings, with a
    ring label and a 16-way color determined by (ring, angular quadrant of
    the final position). Needs n >= 16; stratified generation guarantees
    every ring appears."""
    if n < 16:
        raise DataError(f"toy table needs n >= 16, got {n}")
    if stratified:
        counts = [n // 4 + (1 if i < n % 4 else 0) for i in range(4)]
        circle = np.repeat(np.arange(4), counts)
    else:
        circle = rng.integers(0, 4, size=n)

    def draw(m):
        theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
        offset = rng.normal(0.0, TOY_JITTER, size=(m, 2))
        return (TOY_RADIUS * np.stack([np.cos(theta), np.sin(theta)], axis=1)
                + offset)

    # resample points whose final angle falls inside the margin band around a
    # quadrant boundary, so color classes stay separated in position space
    rel = draw(n)
    while True:
        ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2.0 * np.pi)
        near_boundary = np.abs(ang - np.round(ang / (np.pi / 2)) * (np.pi / 2))
        bad = near_boundary < TOY_SECTOR_GAP
        if not bad.any():
            break
        rel[bad] = draw(int(bad.sum()))
    pos = TOY_CENTERS[circle] + rel
    sector = np.minimum((ang / (np.pi / 2.0)).astype(int), 3)
    color = circle * 4 + sector

    header = ["x", "y", "color", "circle"]
    rows = [
        [float(pos[i, 0]), float(pos[i, 1]), TOY_COLORS[color[i]], TOY_RINGS[circle[i]]]
        for i in range(n)
    ]
    columns = (
        ColumnSchema("x", CONTINUOUS, float(pos[:, 0].min()), float(pos[:, 0].max())),
        ColumnSchema("y", CONTINUOUS, float(pos[:, 1].min()), float(pos[:, 1].max())),
        ColumnSchema("color", DISCRETE, categories=TOY_COLORS),
        ColumnSchema("circle", DISCRETE, categories=TOY_RINGS),
    )
    schema = TableSchema(columns, target="color", task="multiclass")
    return schema, Table(header, rows)
