"""Core domain types, validation, and canonical numeric formatting.

All types are immutable value objects.  Serialization is canonical: for any
value ``x`` of these types, ``from_dict(to_dict(x)) == x`` and the emitted
JSON is byte-stable for identical inputs.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
import re
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

from . import errors

FORMAT_VERSION = 1

# Schema of one transaction row, in canonical column order.
SCHEMA_FIELDS = (
    "city",
    "block",
    "project",
    "date_code",
    "supply_sets",
    "trade_sets",
    "dim_area",
    "dim_price",
    "dim_unit_price",
)

# Fields derivable per record without being stored columns.  Time keys come
# from date_code; the two area measures weight dim_area by unit counts so
# supply- and trade-side floor area stay distinguishable under SUM.
DERIVED_TIME_FIELDS = ("year", "month")
DERIVED_MEASURE_FIELDS = {
    "supply_area": ("dim_area", "supply_sets"),
    "trade_area": ("dim_area", "trade_sets"),
}

DEFAULT_DATE_WINDOW = (dt.date(2020, 1, 1), dt.date(2024, 12, 31))

_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


# ---------------------------------------------------------------------------
# Transaction records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransactionRecord:
    """One housing transaction row."""

    city: str
    block: str
    project: str
    date_code: dt.date
    supply_sets: int
    trade_sets: int
    dim_area: float
    dim_price: float  # unit: 10^4 CNY
    dim_unit_price: float  # unit: CNY / m^2

    def get(self, name: str):
        """Field access by name, including derived fields."""
        if name in SCHEMA_FIELDS:
            return getattr(self, name)
        if name == "year":
            return self.date_code.year
        if name == "month":
            return f"{self.date_code.year:04d}-{self.date_code.month:02d}"
        if name in DERIVED_MEASURE_FIELDS:
            a, b = DERIVED_MEASURE_FIELDS[name]
            return getattr(self, a) * getattr(self, b)
        raise errors.UnknownField(name)


def validate_record(
    r: TransactionRecord,
    window: tuple[dt.date, dt.date] = DEFAULT_DATE_WINDOW,
) -> TransactionRecord:
    """Return ``r`` unchanged iff all record invariants hold.

    Raises MissingField, NonPositive, or DateOutOfWindow otherwise.
    """
    for name in ("city", "block", "project"):
        value = getattr(r, name)
        if not isinstance(value, str) or not value.strip():
            raise errors.MissingField(name)
    if r.date_code is None:
        raise errors.MissingField("date_code")
    for name in ("supply_sets", "trade_sets"):
        value = getattr(r, name)
        if value is None:
            raise errors.MissingField(name)
        if value < 0:
            raise errors.NonPositive(name)
    for name in ("dim_area", "dim_price", "dim_unit_price"):
        value = getattr(r, name)
        if value is None:
            raise errors.MissingField(name)
        if not math.isfinite(value) or value <= 0:
            raise errors.NonPositive(name)
    if not (window[0] <= r.date_code <= window[1]):
        raise errors.DateOutOfWindow(str(r.date_code))
    return r


def record_to_dict(r: TransactionRecord) -> dict:
    d = {name: getattr(r, name) for name in SCHEMA_FIELDS}
    d["date_code"] = r.date_code.isoformat()
    return d


def record_from_dict(d: dict) -> TransactionRecord:
    return TransactionRecord(
        city=d["city"],
        block=d["block"],
        project=d["project"],
        date_code=dt.date.fromisoformat(d["date_code"]),
        supply_sets=int(d["supply_sets"]),
        trade_sets=int(d["trade_sets"]),
        dim_area=float(d["dim_area"]),
        dim_price=float(d["dim_price"]),
        dim_unit_price=float(d["dim_unit_price"]),
    )


# ---------------------------------------------------------------------------
# Canonical rounding
# ---------------------------------------------------------------------------

def canonical_round(value: float, kind: str) -> float:
    """Round a number the one way the whole system agrees on.

    kind="percent": ``value`` is a ratio; returns percentage points with one
    decimal (half-up).  kind="price": one decimal, half-up.  kind="count":
    nearest integer, half-up.
    """
    if not math.isfinite(value):
        raise errors.NonFinite(repr(value))
    if kind == "percent":
        return _quantize(value * 100.0, "0.1")
    if kind == "price":
        return _quantize(value, "0.1")
    if kind == "count":
        return _quantize(value, "1")
    raise ValueError(f"unknown rounding kind: {kind}")


def _quantize(value: float, step: str) -> float:
    return float(Decimal(repr(value)).quantize(Decimal(step), rounding=ROUND_HALF_UP))


def format_quantity(value: float) -> str:
    """Render a number without a trailing ``.0`` (bin labels, summaries)."""
    if value == int(value):
        return str(int(value))
    return format(value, "g")


# ---------------------------------------------------------------------------
# Analytical tables and charts
# ---------------------------------------------------------------------------

STRUCTURES = ("FC", "CF", "XC")
AVG_EMPTY_MARKER = "—"  # rendered for AVG over an empty group


@dataclass(frozen=True)
class AnalyticalTable:
    """A computed table body: headers plus a |rows| x |cols| cell matrix.

    ``cells`` entries are floats, or None for AVG over an empty group.
    ``row_header_canon`` / ``col_header_canon``, when set, give the canonical
    metric id behind an aliased display header (None per entry otherwise).
    """

    structure: str
    row_headers: tuple[str, ...]
    col_headers: tuple[str, ...]
    cells: tuple[tuple[float | None, ...], ...]
    row_header_canon: tuple[str | None, ...] | None = None
    col_header_canon: tuple[str | None, ...] | None = None

    def cell(self, i: int, j: int) -> float | None:
        return self.cells[i][j]


def make_table(structure, row_headers, col_headers, cells,
               row_header_canon=None, col_header_canon=None) -> AnalyticalTable:
    t = AnalyticalTable(
        structure=structure,
        row_headers=tuple(row_headers),
        col_headers=tuple(col_headers),
        cells=tuple(tuple(row) for row in cells),
        row_header_canon=None if row_header_canon is None else tuple(row_header_canon),
        col_header_canon=None if col_header_canon is None else tuple(col_header_canon),
    )
    validate_table(t)
    return t


def validate_table(t: AnalyticalTable) -> AnalyticalTable:
    if t.structure not in STRUCTURES:
        raise errors.DynaSlideError(f"unknown table structure: {t.structure}")
    if len(t.cells) != len(t.row_headers):
        raise errors.DynaSlideError("cell matrix row count != row header count")
    for row in t.cells:
        if len(row) != len(t.col_headers):
            raise errors.DynaSlideError("cell matrix col count != col header count")
        for v in row:
            if v is not None and not math.isfinite(v):
                raise errors.NonFinite("table cell")
    for canon, headers in ((t.row_header_canon, t.row_headers),
                           (t.col_header_canon, t.col_headers)):
        if canon is not None and len(canon) != len(headers):
            raise errors.DynaSlideError("canon list length != header length")
    return t


def table_to_dict(t: AnalyticalTable) -> dict:
    d = {
        "structure": t.structure,
        "row_headers": list(t.row_headers),
        "col_headers": list(t.col_headers),
        "cells": [list(row) for row in t.cells],
    }
    if t.row_header_canon is not None:
        d["row_header_canon"] = list(t.row_header_canon)
    if t.col_header_canon is not None:
        d["col_header_canon"] = list(t.col_header_canon)
    return d


def table_from_dict(d: dict) -> AnalyticalTable:
    return make_table(
        d["structure"], d["row_headers"], d["col_headers"],
        [[None if v is None else float(v) for v in row] for row in d["cells"]],
        d.get("row_header_canon"), d.get("col_header_canon"),
    )


@dataclass(frozen=True)
class ChartSeries:
    name: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class ChartSpec:
    """Chart payload: homologous projection of table data."""

    chart_type: str  # bar | line
    series: tuple[ChartSeries, ...]
    categories: tuple[str, ...]
    svg_ref: str | None = None


def make_chart(chart_type, series, categories, svg_ref=None) -> ChartSpec:
    spec = ChartSpec(
        chart_type=chart_type,
        series=tuple(ChartSeries(name=n, values=tuple(v)) for n, v in series),
        categories=tuple(categories),
        svg_ref=svg_ref,
    )
    validate_chart(spec)
    return spec


def validate_chart(c: ChartSpec) -> ChartSpec:
    if c.chart_type not in ("bar", "line"):
        raise errors.DynaSlideError(f"unknown chart type: {c.chart_type}")
    for s in c.series:
        if len(s.values) != len(c.categories):
            raise errors.DynaSlideError(
                f"series {s.name!r} has {len(s.values)} values for "
                f"{len(c.categories)} categories")
    return c


def chart_to_dict(c: ChartSpec) -> dict:
    d = {
        "chart_type": c.chart_type,
        "series": [{"name": s.name, "values": list(s.values)} for s in c.series],
        "categories": list(c.categories),
    }
    if c.svg_ref is not None:
        d["svg_ref"] = c.svg_ref
    return d


def chart_from_dict(d: dict) -> ChartSpec:
    return make_chart(
        d["chart_type"],
        [(s["name"], [float(v) for v in s["values"]]) for s in d["series"]],
        d["categories"],
        d.get("svg_ref"),
    )


# ---------------------------------------------------------------------------
# Slide documents
# ---------------------------------------------------------------------------

ELEMENT_TYPES = ("textBox", "table", "chart")
ELEMENT_ROLES = ("title", "caption", "table_body", "chart_body", "summary")


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    width: int
    height: int

    def area(self) -> int:
        return self.width * self.height

    def to_list(self) -> list[int]:
        return [self.x, self.y, self.width, self.height]


def rect_from_list(v) -> Rect:
    x, y, w, h = v
    return Rect(int(x), int(y), int(w), int(h))


@dataclass(frozen=True)
class SlideElement:
    """One positioned slide element; exactly the five fields id/type/role/
    text/layout are always present, payload only for table/chart bodies."""

    id: str
    type: str
    role: str
    text: str
    layout: Rect
    payload: AnalyticalTable | ChartSpec | None = None

    def with_text(self, text: str) -> "SlideElement":
        return replace(self, text=text)

    def with_payload(self, payload) -> "SlideElement":
        return replace(self, payload=payload)


@dataclass(frozen=True)
class SlideDocument:
    theme_id: int
    subtemplate_id: int
    elements: tuple[SlideElement, ...]

    def find(self, role: str) -> SlideElement | None:
        for e in self.elements:
            if e.role == role:
                return e
        return None

    def find_all(self, role: str) -> list[SlideElement]:
        return [e for e in self.elements if e.role == role]


def validate_element(e: SlideElement) -> SlideElement:
    if e.type not in ELEMENT_TYPES:
        raise errors.DynaSlideError(f"unknown element type: {e.type}")
    if e.role not in ELEMENT_ROLES:
        raise errors.DynaSlideError(f"unknown element role: {e.role}")
    if e.layout.width <= 0 or e.layout.height <= 0:
        raise errors.DynaSlideError(f"element {e.id}: degenerate layout rect")
    if e.role == "table_body" and e.payload is not None and not isinstance(e.payload, AnalyticalTable):
        raise errors.DynaSlideError(f"element {e.id}: table_body payload must be a table")
    if e.role == "chart_body" and e.payload is not None and not isinstance(e.payload, ChartSpec):
        raise errors.DynaSlideError(f"element {e.id}: chart_body payload must be a chart")
    return e


def validate_slide(doc: SlideDocument, require_content: bool = True) -> SlideDocument:
    """Check element integrity and the one-title / one-summary composition."""
    if not (1 <= doc.theme_id <= 6):
        raise errors.DynaSlideError(f"theme_id out of range: {doc.theme_id}")
    if not (1 <= doc.subtemplate_id <= 34):
        raise errors.DynaSlideError(f"subtemplate_id out of range: {doc.subtemplate_id}")
    ids = [e.id for e in doc.elements]
    if len(set(ids)) != len(ids):
        raise errors.DynaSlideError("duplicate element ids")
    roles = [e.role for e in doc.elements]
    for e in doc.elements:
        validate_element(e)
    if roles.count("title") != 1:
        raise errors.DynaSlideError("slide must contain exactly one title")
    if roles.count("summary") != 1:
        raise errors.DynaSlideError("slide must contain exactly one summary")
    if roles.count("caption") < 1:
        raise errors.DynaSlideError("slide must contain at least one caption")
    if roles.count("table_body") + roles.count("chart_body") < 1:
        raise errors.DynaSlideError("slide must contain a table or a chart")
    if require_content:
        for e in doc.elements:
            if e.role in ("table_body", "chart_body") and e.payload is None:
                raise errors.DynaSlideError(f"element {e.id}: missing payload")
    return doc


def element_to_dict(e: SlideElement) -> dict:
    d = {
        "id": e.id,
        "type": e.type,
        "role": e.role,
        "text": e.text,
        "layout": e.layout.to_list(),
    }
    if isinstance(e.payload, AnalyticalTable):
        d["payload"] = {"kind": "table", **table_to_dict(e.payload)}
    elif isinstance(e.payload, ChartSpec):
        d["payload"] = {"kind": "chart", **chart_to_dict(e.payload)}
    return d


def element_from_dict(d: dict) -> SlideElement:
    payload = None
    p = d.get("payload")
    if p is not None:
        if p.get("kind") == "table":
            payload = table_from_dict(p)
        elif p.get("kind") == "chart":
            payload = chart_from_dict(p)
        else:
            raise errors.DynaSlideError(f"unknown payload kind: {p.get('kind')}")
    return SlideElement(
        id=d["id"], type=d["type"], role=d["role"], text=d["text"],
        layout=rect_from_list(d["layout"]), payload=payload,
    )


def slide_to_dict(doc: SlideDocument) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "theme_id": doc.theme_id,
        "subtemplate_id": doc.subtemplate_id,
        "elements": [element_to_dict(e) for e in doc.elements],
    }


def slide_from_dict(d: dict) -> SlideDocument:
    if d.get("format_version") != FORMAT_VERSION:
        raise errors.DynaSlideError(f"unsupported format_version: {d.get('format_version')}")
    return SlideDocument(
        theme_id=int(d["theme_id"]),
        subtemplate_id=int(d["subtemplate_id"]),
        elements=tuple(element_from_dict(e) for e in d["elements"]),
    )


# ---------------------------------------------------------------------------
# Filter sets and slide metadata
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSet:
    """Data configuration of a slide: table, scope variables, function, params."""

    table_name: str
    variables: dict  # variable name -> concrete value
    function_id: str  # F1..F11
    params: dict  # parameter name -> sampled value

    def __post_init__(self):
        # defensive copies; dataclass frozen only protects attribute rebinding
        object.__setattr__(self, "variables", dict(self.variables))
        object.__setattr__(self, "params", dict(self.params))

    def __hash__(self):
        return hash((self.table_name, self.function_id,
                     tuple(sorted(self.variables.items())),
                     tuple(sorted(self.params.items()))))


def filterset_to_dict(fs: FilterSet) -> dict:
    return {
        "table_name": fs.table_name,
        "variables": dict(sorted(fs.variables.items())),
        "function_id": fs.function_id,
        "params": dict(sorted(fs.params.items())),
    }


def filterset_from_dict(d: dict) -> FilterSet:
    return FilterSet(
        table_name=d["table_name"],
        variables=dict(d.get("variables", {})),
        function_id=d["function_id"],
        params=dict(d.get("params", {})),
    )


@dataclass(frozen=True)
class TemplateSlot:
    """One entry of template_slide: which template filled which layout slot."""

    role: str
    layout: Rect
    template_id: str
    aliases: dict | None = None  # canonical metric id -> chosen display alias

    def __post_init__(self):
        # normalize so equality never hinges on {} vs None
        if not self.aliases:
            object.__setattr__(self, "aliases", None)
        else:
            object.__setattr__(self, "aliases", dict(self.aliases))

    def __hash__(self):
        return hash((self.role, self.layout, self.template_id))


@dataclass(frozen=True)
class SlideMetadata:
    """Ground truth for one slide (source) or one triple (with query filters)."""

    slide_filters: FilterSet
    template_slide: tuple[TemplateSlot, ...]
    query_filters: dict | None = None  # instruction deltas: variables/params maps
    update_filters: FilterSet | None = None
    output_slide: str | None = None


def metadata_to_dict(m: SlideMetadata) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "slide_filters": filterset_to_dict(m.slide_filters),
        "template_slide": [
            {
                "role": s.role,
                "layout": s.layout.to_list(),
                "template_id": s.template_id,
                **({"aliases": dict(sorted(s.aliases.items()))} if s.aliases else {}),
            }
            for s in m.template_slide
        ],
    }
    if m.query_filters is not None:
        d["query_filters"] = _sorted_deep(m.query_filters)
    if m.update_filters is not None:
        d["update_filters"] = filterset_to_dict(m.update_filters)
    if m.output_slide is not None:
        d["output_slide"] = m.output_slide
    return d


def metadata_from_dict(d: dict) -> SlideMetadata:
    if d.get("format_version") != FORMAT_VERSION:
        raise errors.DynaSlideError(f"unsupported format_version: {d.get('format_version')}")
    return SlideMetadata(
        slide_filters=filterset_from_dict(d["slide_filters"]),
        template_slide=tuple(
            TemplateSlot(
                role=s["role"],
                layout=rect_from_list(s["layout"]),
                template_id=s["template_id"],
                aliases=dict(s["aliases"]) if s.get("aliases") else None,
            )
            for s in d["template_slide"]
        ),
        query_filters=d.get("query_filters"),
        update_filters=(filterset_from_dict(d["update_filters"])
                        if d.get("update_filters") else None),
        output_slide=d.get("output_slide"),
    )


def _sorted_deep(v):
    if isinstance(v, dict):
        return {k: _sorted_deep(v[k]) for k in sorted(v)}
    if isinstance(v, (list, tuple)):
        return [_sorted_deep(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# Parameter state (the agent's executable specification)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSpec:
    """5-element slicing spec: field, op/format template, bounds, step.

    T values: "=" equality filter, "between" inclusive range filter,
    "-" plain range binning, "{}-{}M" money binning (labels in millions).
    """

    k: str
    T: str
    v_start: object
    v_end: object = None
    v_step: object = None

    def is_binning(self) -> bool:
        return "{}" in self.T or self.T == "-"

    def to_list(self) -> list:
        return [self.k, self.T, _plain(self.v_start), _plain(self.v_end), _plain(self.v_step)]


def constraint_from_list(v) -> ConstraintSpec:
    if len(v) != 5:
        raise errors.SchemaViolation("constraint spec must have 5 elements")
    return ConstraintSpec(k=v[0], T=v[1], v_start=v[2], v_end=v[3], v_step=v[4])


def _plain(v):
    if isinstance(v, dt.date):
        return v.isoformat()
    return v


@dataclass(frozen=True)
class ClosedCall:
    """Closed-domain logic: one known statistical function plus arguments."""

    function_id: str
    params: dict

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))

    def __hash__(self):
        return hash((self.function_id, tuple(sorted(self.params.items()))))


AGG_OPS = ("SUM", "AVG", "COUNT")


@dataclass(frozen=True)
class OpenLogic:
    """Open-domain logic tuple: structure, headers, constraints, fields, ops.

    ``H`` axes hold grouping-key names on constraint axes and metric labels
    on metric axes.  ``C`` is one or more ConstraintSpec applied in order
    (two binnings are needed for cross-constraint tables over two numeric
    dimensions).
    """

    S: str
    H_row: tuple[str, ...]
    H_col: tuple[str, ...]
    C: tuple[ConstraintSpec, ...]
    F: tuple[str, ...]
    O: tuple[str, ...]


def make_open_logic(S, H_row, H_col, C, F, O) -> OpenLogic:
    logic = OpenLogic(
        S=S,
        H_row=tuple(H_row),
        H_col=tuple(H_col),
        C=tuple(C),
        F=tuple(F),
        O=tuple(O),
    )
    validate_open_logic(logic)
    return logic


def validate_open_logic(logic: OpenLogic) -> OpenLogic:
    if logic.S not in STRUCTURES:
        raise errors.SchemaViolation(f"unknown structure type: {logic.S}")
    if len(logic.F) != len(logic.O):
        raise errors.MismatchedFieldOps(
            f"{len(logic.F)} source fields vs {len(logic.O)} operations")
    if not logic.F:
        raise errors.SchemaViolation("at least one (field, op) pair required")
    for op in logic.O:
        if op not in AGG_OPS:
            raise errors.SchemaViolation(f"unknown aggregation op: {op}")
    valid_fields = set(SCHEMA_FIELDS) | set(DERIVED_MEASURE_FIELDS)
    for f in logic.F:
        if f not in valid_fields:
            raise errors.SchemaViolation(f"unknown source field: {f}")
    if not logic.C:
        raise errors.SchemaViolation("at least one constraint required")
    constraint_fields = set(SCHEMA_FIELDS) | set(DERIVED_TIME_FIELDS)
    for c in logic.C:
        if c.k not in constraint_fields:
            raise errors.SchemaViolation(f"constraint names unknown field: {c.k}")
        if c.is_binning():
            if c.v_start is None or c.v_end is None or c.v_step is None:
                raise errors.SchemaViolation("binning constraint needs start/end/step")
            if not (c.v_start < c.v_end):
                raise errors.SchemaViolation("binning requires v_start < v_end")
            if not (c.v_step > 0):
                raise errors.SchemaViolation("binning requires v_step > 0")
        elif c.T not in ("=", "between"):
            raise errors.SchemaViolation(f"unknown constraint op: {c.T}")
    return logic


def open_logic_to_dict(logic: OpenLogic) -> dict:
    return {
        "S": logic.S,
        "H": {"row_headers": list(logic.H_row), "col_headers": list(logic.H_col)},
        "C": [c.to_list() for c in logic.C],
        "F": list(logic.F),
        "O": list(logic.O),
    }


def open_logic_from_dict(d: dict) -> OpenLogic:
    try:
        H = d["H"]
        C = d["C"]
        # a bare 5-list is accepted as shorthand for a single constraint
        if C and not isinstance(C[0], (list, tuple)):
            C = [C]
        return make_open_logic(
            d["S"], H["row_headers"], H["col_headers"],
            [constraint_from_list(c) for c in C], d["F"], d["O"],
        )
    except (KeyError, TypeError, IndexError) as e:
        raise errors.SchemaViolation(f"malformed open logic: {e}") from e


@dataclass(frozen=True)
class ParameterState:
    """Executable update specification: table, nine slots, function logic."""

    table_name: str
    slots: dict  # exactly the nine schema fields -> constraint or None
    logic: ClosedCall | OpenLogic

    def __post_init__(self):
        object.__setattr__(self, "slots", dict(self.slots))

    def __hash__(self):
        return hash((self.table_name, self.logic))


def validate_state(state: ParameterState) -> ParameterState:
    if not state.table_name or not isinstance(state.table_name, str):
        raise errors.SchemaViolation("table_name must be a non-empty string")
    if tuple(sorted(state.slots)) != tuple(sorted(SCHEMA_FIELDS)):
        raise errors.SchemaViolation(
            "slots must have exactly the nine schema field keys")
    for name, value in state.slots.items():
        if value is None:
            continue
        if isinstance(value, tuple):
            if len(value) != 2:
                raise errors.SchemaViolation(f"slot {name}: range must have two bounds")
        elif not isinstance(value, (str, int, float)):
            raise errors.SchemaViolation(f"slot {name}: unsupported constraint type")
    if isinstance(state.logic, OpenLogic):
        validate_open_logic(state.logic)
    elif isinstance(state.logic, ClosedCall):
        if not re.fullmatch(r"F\d+", state.logic.function_id):
            raise errors.SchemaViolation(
                f"malformed function id: {state.logic.function_id}")
    else:
        raise errors.SchemaViolation("logic must be a closed call or an open tuple")
    return state


def _slot_value_to_json(v):
    if v is None:
        return None
    if isinstance(v, tuple):
        return [_plain(v[0]), _plain(v[1])]
    return _plain(v)


def _slot_value_from_json(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise errors.SchemaViolation("slot range must have two bounds")
        return (_parse_bound(v[0]), _parse_bound(v[1]))
    return v


def _parse_bound(v):
    if isinstance(v, str) and _DATE_RE.match(v):
        return dt.date.fromisoformat(v)
    return v


def state_to_dict(state: ParameterState) -> dict:
    if isinstance(state.logic, ClosedCall):
        logic = {
            "kind": "closed",
            "function_id": state.logic.function_id,
            "params": dict(sorted(state.logic.params.items())),
        }
    else:
        logic = {"kind": "open", **open_logic_to_dict(state.logic)}
    return {
        "table_name": state.table_name,
        "slots": {name: _slot_value_to_json(state.slots[name]) for name in SCHEMA_FIELDS},
        "logic": logic,
    }


def state_from_dict(d: dict) -> ParameterState:
    if not isinstance(d, dict):
        raise errors.SchemaViolation("parameter state must be an object")
    extra = set(d) - {"table_name", "slots", "logic"}
    if extra:
        raise errors.SchemaViolation(f"unexpected state keys: {sorted(extra)}")
    try:
        slots_in = d["slots"]
        logic_in = d["logic"]
        table_name = d["table_name"]
    except (KeyError, TypeError) as e:
        raise errors.SchemaViolation(f"missing state key: {e}") from e
    if not isinstance(slots_in, dict):
        raise errors.SchemaViolation("slots must be an object")
    slots = {name: _slot_value_from_json(v) for name, v in slots_in.items()}
    if not isinstance(logic_in, dict):
        raise errors.SchemaViolation("logic must be an object")
    kind = logic_in.get("kind")
    if kind == "closed":
        try:
            logic = ClosedCall(function_id=logic_in["function_id"],
                               params=dict(logic_in.get("params", {})))
        except (KeyError, TypeError) as e:
            raise errors.SchemaViolation(f"malformed closed call: {e}") from e
    elif kind == "open":
        logic = open_logic_from_dict(logic_in)
    else:
        raise errors.SchemaViolation(f"unknown logic kind: {kind}")
    return validate_state(ParameterState(table_name=table_name, slots=slots, logic=logic))


# ---------------------------------------------------------------------------
# Canonical JSON + digests
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def pretty_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def digest(obj) -> str:
    """Stable sha256 hex digest of a JSON-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())
