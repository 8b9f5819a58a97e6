"""Statistical engine: binning, filtering, group-aggregate, table reshaping,
the 11 closed-domain functions, and summary-metric extraction.

Two independent routes produce analytical tables:

* ``run_statistical_function`` executes a known function with hand-written
  per-function loops (closed domain);
* ``synthesize_analytical_table`` executes a generic split-apply-combine
  pipeline parameterized by an :class:`~dynaslide.core.OpenLogic` tuple.

For every shipped function the two must agree byte-for-byte, which the test
suite checks differentially.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

from . import core, errors
from .core import (
    AGG_OPS,
    AnalyticalTable,
    ClosedCall,
    ConstraintSpec,
    OpenLogic,
    canonical_round,
    format_quantity,
    make_open_logic,
    make_table,
)

# sampled-parameter candidate sets; the default pack's dictionary must match
PARAMETER_CANDIDATES = {
    "area_bin_step": (10, 15, 20, 25, 30),
    "price_bin_step": (0.75, 1.0, 1.5, 1.75, 2.0),
}

# binning domains in record-native units (area m^2; price 10^4 CNY)
AREA_DOMAIN = (40.0, 160.0)
PRICE_DOMAIN = (100.0, 900.0)
PRICE_M_FACTOR = 100.0  # 10^4 CNY per million CNY

BINNED_KEY = {"dim_area": "area_range", "dim_price": "price_range",
              "dim_unit_price": "unit_price_range"}


def binned_key_for(field: str) -> str:
    return BINNED_KEY.get(field, f"{field}_range")


# ---------------------------------------------------------------------------
# Field resolution over projected rows
# ---------------------------------------------------------------------------

def resolve_field(row: dict, name: str):
    """Raw value of a direct or derived field on a projected row."""
    if name in row:
        return row[name]
    if name in ("year", "month"):
        date = row.get("date_code")
        if date is None:
            raise errors.UnknownField(f"{name} (no date_code in row)")
        if isinstance(date, str):
            date = dt.date.fromisoformat(date)
        return date.year if name == "year" else f"{date.year:04d}-{date.month:02d}"
    if name in core.DERIVED_MEASURE_FIELDS:
        a, b = core.DERIVED_MEASURE_FIELDS[name]
        return resolve_field(row, a) * resolve_field(row, b)
    raise errors.UnknownField(name)


def group_label(row: dict, key: str) -> str:
    """Header label of a grouping key for one row."""
    value = resolve_field(row, key)
    if isinstance(value, str):
        return value
    return format_quantity(float(value))


# ---------------------------------------------------------------------------
# Constraint application (Split)
# ---------------------------------------------------------------------------

def bin_axis(v_start: float, v_end: float, v_step: float, T: str) -> list[tuple[str, float, float]]:
    """Half-open bins [lo, hi) tiling [v_start, v_end); the final bin is
    truncated at v_end."""
    if not (v_start < v_end):
        raise errors.InvalidBounds(f"v_start {v_start} must be < v_end {v_end}")
    if not (v_step > 0):
        raise errors.InvalidBounds(f"v_step {v_step} must be positive")
    axis = []
    i = 0
    while True:
        lo = v_start + i * v_step
        if lo >= v_end:
            break
        hi = min(lo + v_step, v_end)
        axis.append((bin_label(lo, hi, T), lo, hi))
        i += 1
    return axis


def bin_label(lo: float, hi: float, T: str) -> str:
    if T == "-":
        return f"{format_quantity(lo)}-{format_quantity(hi)}"
    if T == "{}-{}M":
        return f"{format_quantity(lo / PRICE_M_FACTOR)}-{format_quantity(hi / PRICE_M_FACTOR)}M"
    if "{}" in T:
        return T.format(format_quantity(lo), format_quantity(hi))
    raise errors.UnknownOp(f"not a binning template: {T}")


def apply_binning(records: list[dict], field: str, v_start, v_end, v_step,
                  T: str = "-") -> list[dict]:
    """Tag each in-range record with its bin label; drop out-of-range records."""
    axis = bin_axis(float(v_start), float(v_end), float(v_step), T)
    key = binned_key_for(field)
    out = []
    for row in records:
        v = float(resolve_field(row, field))
        if not (v_start <= v < v_end):
            continue
        idx = int((v - v_start) // v_step)
        idx = min(idx, len(axis) - 1)
        # arithmetic index verified against the actual boundaries
        while idx > 0 and v < axis[idx][1]:
            idx -= 1
        while idx < len(axis) - 1 and v >= axis[idx][2]:
            idx += 1
        tagged = dict(row)
        tagged[key] = axis[idx][0]
        out.append(tagged)
    return out


def apply_filter(records: list[dict], k: str, T: str, v, v_end=None) -> list[dict]:
    """Keep records where the field satisfies the filter op."""
    known = set(core.SCHEMA_FIELDS) | set(core.DERIVED_TIME_FIELDS) | set(core.DERIVED_MEASURE_FIELDS)
    if k not in known:
        raise errors.UnknownField(k)
    if T == "=":
        return [r for r in records if resolve_field(r, k) == v]
    if T == "between":
        return [r for r in records if v <= resolve_field(r, k) <= v_end]
    raise errors.UnknownOp(T)


def apply_constraint(records: list[dict], c: ConstraintSpec) -> list[dict]:
    if c.is_binning():
        return apply_binning(records, c.k, c.v_start, c.v_end, c.v_step, c.T)
    return apply_filter(records, c.k, c.T, c.v_start, c.v_end)


# ---------------------------------------------------------------------------
# Aggregation (Apply)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupRow:
    keys: dict  # grouping key -> label
    values: tuple  # one aggregate per (F, O) pair

    def __post_init__(self):
        object.__setattr__(self, "keys", dict(self.keys))


def group_aggregate(records: list[dict], group_keys: list[str],
                    F: list[str], O: list[str]) -> list[GroupRow]:
    """One output row per distinct group-key tuple, in first-seen order.

    AVG is computed as SUM/COUNT exactly; empty groups are never emitted
    (groups come from the data).
    """
    if len(F) != len(O):
        raise errors.MismatchedFieldOps(f"{len(F)} fields vs {len(O)} ops")
    for op in O:
        if op not in AGG_OPS:
            raise errors.UnknownOp(op)
    acc: dict[tuple, list] = {}
    order: list[tuple] = []
    for row in records:
        key = tuple(group_label(row, k) for k in group_keys)
        if key not in acc:
            acc[key] = [[0.0, 0] for _ in F]  # (sum, count) per metric
            order.append(key)
        slots = acc[key]
        for i, (f, op) in enumerate(zip(F, O)):
            slots[i][1] += 1
            if op != "COUNT":
                slots[i][0] += float(resolve_field(row, f))
    out = []
    for key in order:
        values = []
        for (total, count), op in zip(acc[key], O):
            if op == "COUNT":
                values.append(float(count))
            elif op == "SUM":
                values.append(total)
            else:
                values.append(total / count)
        out.append(GroupRow(keys=dict(zip(group_keys, key)), values=tuple(values)))
    return out


def transpose(matrix: list[list]) -> list[list]:
    return [list(row) for row in zip(*matrix)] if matrix else []


def _fill_value(op: str):
    # empty groups: 0 for COUNT/SUM, null-marker for AVG
    return None if op == "AVG" else 0.0


def reshape_table(aggregated: list[GroupRow], S: str, H: tuple,
                  domains: dict | None = None) -> AnalyticalTable:
    """Combine step: lay grouped rows out as one of the canonical structures.

    ``H`` is (H_row, H_col); ``domains`` optionally fixes the ordered label
    domain per grouping key (defaults to sorted distinct data labels).
    """
    H_row, H_col = tuple(H[0]), tuple(H[1])
    domains = domains or {}

    def axis(key: str) -> list[str]:
        if key in domains:
            return list(domains[key])
        seen = []
        for g in aggregated:
            if key not in g.keys:
                raise errors.MissingKey(key)
            if g.keys[key] not in seen:
                seen.append(g.keys[key])
        return sorted(seen)

    if S == "XC":
        if len(H_row) != 1 or len(H_col) != 1:
            raise errors.SchemaViolation("XC needs one row key and one col key")
        rk, ck = H_row[0], H_col[0]
        rows, cols = axis(rk), axis(ck)
        by_cell = {}
        for g in aggregated:
            if rk not in g.keys or ck not in g.keys:
                raise errors.MissingKey(f"{rk}/{ck}")
            by_cell[(g.keys[rk], g.keys[ck])] = g.values[0]
        cells = [[by_cell.get((r, c)) for c in cols] for r in rows]
        return make_table("XC", rows, cols, cells)
    if S == "CF":
        if len(H_row) != 1:
            raise errors.SchemaViolation("CF needs exactly one row key")
        rk = H_row[0]
        rows = axis(rk)
        by_row = {}
        for g in aggregated:
            if rk not in g.keys:
                raise errors.MissingKey(rk)
            by_row[g.keys[rk]] = g.values
        cells = [list(by_row.get(r, (None,) * len(H_col))) for r in rows]
        return make_table("CF", rows, H_col, cells)
    if S == "FC":
        if len(H_col) != 1:
            raise errors.SchemaViolation("FC needs exactly one col key")
        inner = reshape_table(aggregated, "CF", (H_col, H_row), domains)
        return make_table("FC", H_row, inner.row_headers, transpose([list(r) for r in inner.cells]))
    raise errors.SchemaViolation(f"unknown structure: {S}")


def _zero_fill(table: AnalyticalTable, ops_by_metric: list[str], S: str) -> AnalyticalTable:
    """Replace missing intersections: 0 for COUNT/SUM, None marker for AVG."""
    if S == "XC":
        fills = [_fill_value(ops_by_metric[0])]
        cells = [[fills[0] if v is None else v for v in row] for row in table.cells]
    elif S == "CF":
        cells = [
            [(_fill_value(ops_by_metric[j]) if v is None else v) for j, v in enumerate(row)]
            for row in table.cells
        ]
    else:  # FC: metric per row
        cells = [
            [(_fill_value(ops_by_metric[i]) if v is None else v) for v in row]
            for i, row in enumerate(table.cells)
        ]
    return make_table(table.structure, table.row_headers, table.col_headers, cells)


# ---------------------------------------------------------------------------
# Generic pipeline (the open-domain route)
# ---------------------------------------------------------------------------

def constraint_domain(c: ConstraintSpec) -> tuple[str, list[str]] | None:
    """Enumerable label domain contributed by a constraint, if any."""
    if c.is_binning():
        key = binned_key_for(c.k)
        return key, [label for label, _, _ in
                     bin_axis(float(c.v_start), float(c.v_end), float(c.v_step), c.T)]
    if c.T == "between" and c.k == "year":
        return "year", [str(y) for y in range(int(c.v_start), int(c.v_end) + 1)]
    if c.T == "between" and c.k == "month":
        return "month", month_axis(str(c.v_start), str(c.v_end))
    return None


def month_axis(start: str, end: str) -> list[str]:
    y, m = int(start[:4]), int(start[5:7])
    ey, em = int(end[:4]), int(end[5:7])
    out = []
    while (y, m) <= (ey, em):
        out.append(f"{y:04d}-{m:02d}")
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return out


def synthesize_analytical_table(raw: list[dict], logic: OpenLogic) -> AnalyticalTable:
    """Generic logic reconstruction: split (constraints), apply (group +
    aggregate), combine (reshape into the declared structure)."""
    core.validate_open_logic(logic)
    data = list(raw)
    domains: dict[str, list[str]] = {}
    for c in logic.C:
        data = apply_constraint(data, c)
        dom = constraint_domain(c)
        if dom is not None:
            domains[dom[0]] = dom[1]
    if logic.S == "XC":
        group_keys = list(logic.H_row) + list(logic.H_col)
    elif logic.S == "CF":
        group_keys = list(logic.H_row)
    else:
        group_keys = list(logic.H_col)
    aggregated = group_aggregate(data, group_keys, list(logic.F), list(logic.O))
    table = reshape_table(aggregated, logic.S, (logic.H_row, logic.H_col), domains)
    return _zero_fill(table, list(logic.O), logic.S)


# ---------------------------------------------------------------------------
# Closed-domain function registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StatFunction:
    id: str
    name: str
    structure: str
    metric_headers: tuple[str, ...]  # canonical metric ids on the metric axis
    axis_keys: tuple[str, ...]  # grouping keys (1 for CF/FC, 2 for XC)
    source_fields: tuple[str, ...]
    operations: tuple[str, ...]
    span_args: tuple[str, ...]  # scope arguments (start/end year or month)
    candidate_params: tuple[str, ...]  # sampled parameters
    summary_metrics: tuple[str, ...]


FUNCTIONS: dict[str, StatFunction] = {}


def _register(fn: StatFunction) -> StatFunction:
    FUNCTIONS[fn.id] = fn
    return fn


_register(StatFunction(
    "F1", "yearly supply and trade volume", "CF",
    ("supply volume", "trade volume"), ("year",),
    ("supply_sets", "trade_sets"), ("SUM", "SUM"),
    ("start_year", "end_year"), (),
    ("base_period_transaction_units", "terminal_period_transaction_units",
     "total_transaction_change_pct", "transaction_trend_direction"),
))
_register(StatFunction(
    "F2", "monthly supply and trade volume", "CF",
    ("supply volume", "trade volume"), ("month",),
    ("supply_sets", "trade_sets"), ("SUM", "SUM"),
    ("start_month", "end_month"), (),
    ("base_period_transaction_units", "terminal_period_transaction_units",
     "transaction_change_units", "transaction_trend_direction"),
))
_register(StatFunction(
    "F3", "transaction counts by area segment", "CF",
    ("area range counts",), ("area_range",),
    ("dim_area",), ("COUNT",),
    (), ("area_bin_step",),
    ("dominant_area_segment", "dominant_area_segment_volume",
     "total_transaction_units"),
))
_register(StatFunction(
    "F4", "transaction counts by price segment", "CF",
    ("price range counts",), ("price_range",),
    ("dim_price",), ("COUNT",),
    (), ("price_bin_step",),
    ("dominant_price_segment", "dominant_price_segment_volume",
     "total_transaction_units"),
))
_register(StatFunction(
    "F5", "price by area cross matrix", "XC",
    (), ("price_range", "area_range"),
    ("trade_sets",), ("COUNT",),
    (), ("price_bin_step", "area_bin_step"),
    ("modal_price_segment", "modal_area_segment", "peak_segment_volume",
     "total_transaction_units"),
))
_register(StatFunction(
    "F6", "yearly average total price", "FC",
    ("avg price",), ("year",),
    ("dim_price",), ("AVG",),
    ("start_year", "end_year"), (),
    ("base_period_avg_price", "terminal_period_avg_price",
     "total_price_change_pct", "price_trend_direction"),
))
_register(StatFunction(
    "F7", "yearly unit price trend", "FC",
    ("unit price",), ("year",),
    ("dim_unit_price",), ("AVG",),
    ("start_year", "end_year"), (),
    ("base_period_transaction_price", "terminal_period_transaction_price",
     "absolute_price_change", "price_trend_direction"),
))
_register(StatFunction(
    "F8", "total supply and trade area by year", "CF",
    ("total supply area", "total trade area"), ("year",),
    ("supply_area", "trade_area"), ("SUM", "SUM"),
    ("start_year", "end_year"), (),
    ("base_period_traded_area", "terminal_period_traded_area",
     "total_area_change_pct", "area_trend_direction"),
))
_register(StatFunction(
    "F9", "unit price by block and year", "XC",
    (), ("block", "year"),
    ("dim_unit_price",), ("AVG",),
    ("start_year", "end_year"), (),
    ("base_period_avg_price", "terminal_period_avg_price",
     "total_price_change_pct", "price_trend_direction"),
))
_register(StatFunction(
    "F10", "monthly unit price trend", "FC",
    ("unit price",), ("month",),
    ("dim_unit_price",), ("AVG",),
    ("start_month", "end_month"), (),
    ("base_period_transaction_price", "terminal_period_transaction_price",
     "absolute_price_change", "price_trend_direction"),
))
_register(StatFunction(
    "F11", "supply versus trade comparison", "FC",
    ("supply volume", "trade volume"), ("year",),
    ("supply_sets", "trade_sets"), ("SUM", "SUM"),
    ("start_year", "end_year"), (),
    ("base_period_supply_units", "terminal_period_supply_units",
     "total_supply_change_pct", "supply_trend_direction"),
))


def get_function(function_id: str) -> StatFunction:
    if function_id not in FUNCTIONS:
        raise errors.UnknownFunction(function_id)
    return FUNCTIONS[function_id]


def validate_args(fn: StatFunction, args: dict) -> dict:
    """Check candidate params against their sets and span args for presence."""
    for p in fn.candidate_params:
        if p not in args:
            raise errors.InvalidParam(f"{fn.id} requires parameter {p}")
        if args[p] not in PARAMETER_CANDIDATES[p]:
            raise errors.InvalidParam(f"{p}={args[p]!r} not in candidate set")
    for a in fn.span_args:
        if a not in args:
            raise errors.InvalidParam(f"{fn.id} requires argument {a}")
    extra = set(args) - set(fn.candidate_params) - set(fn.span_args)
    if extra:
        raise errors.InvalidParam(f"unexpected arguments: {sorted(extra)}")
    return args


def _constraints_for(fn: StatFunction, args: dict) -> list[ConstraintSpec]:
    out = []
    for key in fn.axis_keys:
        if key == "year":
            out.append(ConstraintSpec("year", "between",
                                      int(args["start_year"]), int(args["end_year"])))
        elif key == "month":
            out.append(ConstraintSpec("month", "between",
                                      str(args["start_month"]), str(args["end_month"])))
        elif key == "area_range":
            out.append(ConstraintSpec("dim_area", "-", AREA_DOMAIN[0], AREA_DOMAIN[1],
                                      float(args["area_bin_step"])))
        elif key == "price_range":
            out.append(ConstraintSpec("dim_price", "{}-{}M", PRICE_DOMAIN[0], PRICE_DOMAIN[1],
                                      float(args["price_bin_step"]) * PRICE_M_FACTOR))
        # direct fields (block) need no constraint
    return out


def closed_to_open(function_id: str, args: dict) -> OpenLogic:
    """The equivalent open-domain tuple of a closed function call."""
    fn = get_function(function_id)
    validate_args(fn, args)
    C = _constraints_for(fn, args)
    if not C:
        raise errors.InvalidParam(f"{fn.id}: no constraint derivable")
    if fn.structure == "XC":
        H_row, H_col = (fn.axis_keys[0],), (fn.axis_keys[1],)
    elif fn.structure == "CF":
        H_row, H_col = (fn.axis_keys[0],), fn.metric_headers
    else:  # FC
        H_row, H_col = fn.metric_headers, (fn.axis_keys[0],)
    return make_open_logic(fn.structure, H_row, H_col, C,
                           fn.source_fields, fn.operations)


# --- hand-written closed-route executors -----------------------------------

def _axis_labels(fn: StatFunction, key: str, args: dict, raw: list[dict]) -> list[str]:
    if key == "year":
        return [str(y) for y in range(int(args["start_year"]), int(args["end_year"]) + 1)]
    if key == "month":
        return month_axis(str(args["start_month"]), str(args["end_month"]))
    if key == "area_range":
        return [label for label, _, _ in
                bin_axis(AREA_DOMAIN[0], AREA_DOMAIN[1], float(args["area_bin_step"]), "-")]
    if key == "price_range":
        return [label for label, _, _ in
                bin_axis(PRICE_DOMAIN[0], PRICE_DOMAIN[1],
                         float(args["price_bin_step"]) * PRICE_M_FACTOR, "{}-{}M")]
    # direct field: sorted distinct values found in the data
    return sorted({group_label(r, key) for r in raw})


def _labeler(key: str, args: dict):
    """Build a row -> axis-label function (None = outside scope).

    Bin membership is decided by linear scan over the shared bin boundaries,
    keeping this route independent of the arithmetic indexing used by
    apply_binning.
    """
    if key == "year":
        lo, hi = int(args["start_year"]), int(args["end_year"])

        def label_year(row):
            y = resolve_field(row, "year")
            return str(y) if lo <= y <= hi else None

        return label_year
    if key == "month":
        lo, hi = str(args["start_month"]), str(args["end_month"])

        def label_month(row):
            m = resolve_field(row, "month")
            return m if lo <= m <= hi else None

        return label_month
    if key in ("area_range", "price_range"):
        if key == "area_range":
            axis = bin_axis(AREA_DOMAIN[0], AREA_DOMAIN[1], float(args["area_bin_step"]), "-")
            field = "dim_area"
        else:
            axis = bin_axis(PRICE_DOMAIN[0], PRICE_DOMAIN[1],
                            float(args["price_bin_step"]) * PRICE_M_FACTOR, "{}-{}M")
            field = "dim_price"

        def label_bin(row):
            v = float(resolve_field(row, field))
            for label, lo, hi in axis:
                if lo <= v < hi:
                    return label
            return None

        return label_bin
    return lambda row: group_label(row, key)


def run_statistical_function(function_id: str, raw: list[dict], args: dict) -> AnalyticalTable:
    """Execute a closed-domain function over retrieved raw rows."""
    fn = get_function(function_id)
    validate_args(fn, args)
    if fn.structure == "XC":
        row_key, col_key = fn.axis_keys
        rows = _axis_labels(fn, row_key, args, raw)
        cols = _axis_labels(fn, col_key, args, raw)
        row_label = _labeler(row_key, args)
        col_label = _labeler(col_key, args)
        op = fn.operations[0]
        field = fn.source_fields[0]
        sums: dict[tuple, float] = {}
        counts: dict[tuple, int] = {}
        for r in raw:
            rl = row_label(r)
            cl = col_label(r)
            if rl is None or cl is None:
                continue
            cell = (rl, cl)
            counts[cell] = counts.get(cell, 0) + 1
            if op != "COUNT":
                sums[cell] = sums.get(cell, 0.0) + float(resolve_field(r, field))
        cells = []
        for rl in rows:
            line = []
            for cl in cols:
                n = counts.get((rl, cl), 0)
                if op == "COUNT":
                    line.append(float(n))
                elif op == "SUM":
                    line.append(sums.get((rl, cl), 0.0))
                else:
                    line.append(sums[(rl, cl)] / n if n else None)
            cells.append(line)
        return make_table("XC", rows, cols, cells)

    axis_key = fn.axis_keys[0]
    labels = _axis_labels(fn, axis_key, args, raw)
    labeler = _labeler(axis_key, args)
    per_label: dict[str, list] = {}
    for r in raw:
        label = labeler(r)
        if label is None:
            continue
        slots = per_label.setdefault(label, [[0.0, 0] for _ in fn.source_fields])
        for i, (field, op) in enumerate(zip(fn.source_fields, fn.operations)):
            slots[i][1] += 1
            if op != "COUNT":
                slots[i][0] += float(resolve_field(r, field))
    matrix = []
    for label in labels:
        line = []
        for i, op in enumerate(fn.operations):
            if label not in per_label:
                line.append(_fill_value(op))
                continue
            total, count = per_label[label][i]
            if op == "COUNT":
                line.append(float(count))
            elif op == "SUM":
                line.append(total)
            else:
                line.append(total / count if count else None)
        matrix.append(line)
    if fn.structure == "CF":
        return make_table("CF", labels, fn.metric_headers, matrix)
    return make_table("FC", fn.metric_headers, labels, transpose(matrix))


def run_logic(logic, raw: list[dict]) -> AnalyticalTable:
    """Dispatch a ClosedCall or OpenLogic against raw rows."""
    if isinstance(logic, ClosedCall):
        return run_statistical_function(logic.function_id, raw, logic.params)
    return synthesize_analytical_table(raw, logic)


# ---------------------------------------------------------------------------
# Summary metrics
# ---------------------------------------------------------------------------

METRIC_KINDS = {
    "base_period_transaction_units": "count",
    "terminal_period_transaction_units": "count",
    "total_transaction_change_pct": "percent",
    "transaction_trend_direction": "direction",
    "transaction_change_units": "count",
    "dominant_area_segment": "label",
    "dominant_area_segment_volume": "count",
    "dominant_price_segment": "label",
    "dominant_price_segment_volume": "count",
    "total_transaction_units": "count",
    "modal_price_segment": "label",
    "modal_area_segment": "label",
    "peak_segment_volume": "count",
    "base_period_avg_price": "price",
    "terminal_period_avg_price": "price",
    "total_price_change_pct": "percent",
    "price_trend_direction": "direction",
    "base_period_transaction_price": "price",
    "terminal_period_transaction_price": "price",
    "absolute_price_change": "price",
    "base_period_traded_area": "price",
    "terminal_period_traded_area": "price",
    "total_area_change_pct": "percent",
    "area_trend_direction": "direction",
    "base_period_supply_units": "count",
    "terminal_period_supply_units": "count",
    "total_supply_change_pct": "percent",
    "supply_trend_direction": "direction",
}


def _direction(base: float, terminal: float) -> str:
    if terminal > base:
        return "Increasing"
    if terminal < base:
        return "Decreasing"
    return "Flat"


def _change_pct(base: float, terminal: float) -> float:
    if base == 0:
        # growth from an empty base is capped at +/-100%
        if terminal == 0:
            return 0.0
        return 100.0 if terminal > 0 else -100.0
    return canonical_round((terminal - base) / base, "percent")


def _col_index(table: AnalyticalTable, canon: str) -> int:
    headers = table.col_header_canon or table.col_headers
    for i, h in enumerate(headers):
        if h == canon or table.col_headers[i] == canon:
            return i
    raise errors.UnknownMetric(canon)


def _row_index(table: AnalyticalTable, canon: str) -> int:
    headers = table.row_header_canon or table.row_headers
    for i, h in enumerate(headers):
        if h == canon or table.row_headers[i] == canon:
            return i
    raise errors.UnknownMetric(canon)


def _require_cell(v, where: str) -> float:
    if v is None:
        raise errors.InsufficientColumns(f"empty {where}")
    return float(v)


def _count(v) -> int:
    return int(canonical_round(float(v), "count"))


def _price(v) -> float:
    return canonical_round(float(v), "price")


def extract_summary_metrics(table: AnalyticalTable, function_id: str) -> dict:
    """Compute the function's declared 2-4 summary metrics from its table.

    Values are stored canonically rounded (counts as ints, prices to one
    decimal, change percentages in points with one decimal).
    """
    fn = get_function(function_id)
    m: dict[str, object] = {}

    def series_endpoints(values, what: str) -> tuple[float, float]:
        if len(values) < 2:
            raise errors.InsufficientColumns(f"{what}: trend needs >= 2 periods")
        return (_require_cell(values[0], f"base {what}"),
                _require_cell(values[-1], f"terminal {what}"))

    if function_id in ("F1", "F2"):
        j = _col_index(table, "trade volume")
        col = [row[j] for row in table.cells]
        base, term = series_endpoints(col, "trade volume")
        m["base_period_transaction_units"] = _count(base)
        m["terminal_period_transaction_units"] = _count(term)
        if function_id == "F1":
            m["total_transaction_change_pct"] = _change_pct(base, term)
        else:
            m["transaction_change_units"] = _count(term) - _count(base)
        m["transaction_trend_direction"] = _direction(base, term)
    elif function_id in ("F3", "F4"):
        j = 0
        col = [(_require_cell(row[j], "segment count")) for row in table.cells]
        if not col:
            raise errors.InsufficientColumns("no segments")
        peak = max(range(len(col)), key=lambda i: (col[i], -i))
        seg = "area" if function_id == "F3" else "price"
        m[f"dominant_{seg}_segment"] = table.row_headers[peak]
        m[f"dominant_{seg}_segment_volume"] = _count(col[peak])
        m["total_transaction_units"] = _count(sum(col))
    elif function_id == "F5":
        best = None
        for i, row in enumerate(table.cells):
            for j, v in enumerate(row):
                v = _require_cell(v, "cross cell")
                if best is None or v > best[0]:
                    best = (v, i, j)
        if best is None:
            raise errors.InsufficientColumns("empty cross matrix")
        m["modal_price_segment"] = table.row_headers[best[1]]
        m["modal_area_segment"] = table.col_headers[best[2]]
        m["peak_segment_volume"] = _count(best[0])
        m["total_transaction_units"] = _count(
            sum(v for row in table.cells for v in row))
    elif function_id == "F6":
        i = _row_index(table, "avg price")
        base, term = series_endpoints(list(table.cells[i]), "avg price")
        m["base_period_avg_price"] = _price(base)
        m["terminal_period_avg_price"] = _price(term)
        m["total_price_change_pct"] = _change_pct(base, term)
        m["price_trend_direction"] = _direction(base, term)
    elif function_id in ("F7", "F10"):
        i = _row_index(table, "unit price")
        base, term = series_endpoints(list(table.cells[i]), "unit price")
        m["base_period_transaction_price"] = _price(base)
        m["terminal_period_transaction_price"] = _price(term)
        m["absolute_price_change"] = _price(term - base)
        m["price_trend_direction"] = _direction(base, term)
    elif function_id == "F8":
        j = _col_index(table, "total trade area")
        base, term = series_endpoints([row[j] for row in table.cells], "trade area")
        m["base_period_traded_area"] = _price(base)
        m["terminal_period_traded_area"] = _price(term)
        m["total_area_change_pct"] = _change_pct(base, term)
        m["area_trend_direction"] = _direction(base, term)
    elif function_id == "F9":
        if len(table.col_headers) < 2:
            raise errors.InsufficientColumns("trend needs >= 2 periods")
        def col_mean(j: int, what: str) -> float:
            vals = [row[j] for row in table.cells if row[j] is not None]
            if not vals:
                raise errors.InsufficientColumns(f"empty {what}")
            return sum(vals) / len(vals)
        base = col_mean(0, "base period")
        term = col_mean(len(table.col_headers) - 1, "terminal period")
        m["base_period_avg_price"] = _price(base)
        m["terminal_period_avg_price"] = _price(term)
        m["total_price_change_pct"] = _change_pct(base, term)
        m["price_trend_direction"] = _direction(base, term)
    elif function_id == "F11":
        i = _row_index(table, "supply volume")
        base, term = series_endpoints(list(table.cells[i]), "supply volume")
        m["base_period_supply_units"] = _count(base)
        m["terminal_period_supply_units"] = _count(term)
        m["total_supply_change_pct"] = _change_pct(base, term)
        m["supply_trend_direction"] = _direction(base, term)
    else:
        raise errors.UnknownFunction(function_id)

    assert set(m) == set(fn.summary_metrics), f"metric set mismatch for {function_id}"
    return m


def trend_change_pct(base: float, terminal: float) -> float:
    """Public change-rate helper: (terminal - base) / base, canonically rounded."""
    return _change_pct(base, terminal)


def format_metric(metric_id: str, value) -> str:
    """Render one summary metric for template substitution."""
    kind = METRIC_KINDS.get(metric_id)
    if kind is None:
        raise errors.UnknownMetric(metric_id)
    if kind == "count":
        return str(int(value))
    if kind == "price":
        return format(float(value), ".1f")
    if kind == "percent":
        return format(float(value), ".1f")
    return str(value)
