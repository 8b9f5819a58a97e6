"""Slide assembly: layout scaffolds, content placement, SVG charts, and
layout-preserving repopulation.

Layout convention: title band on top, caption above its table/chart, summary
band at the bottom, all on a 1280x720 integer canvas.  The 34 sub-templates
vary slot arrangement inside that grid.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from . import core, errors
from .core import (
    AVG_EMPTY_MARKER,
    AnalyticalTable,
    ChartSpec,
    Rect,
    SlideDocument,
    SlideElement,
    canonical_round,
    format_quantity,
    make_chart,
)

CANVAS = (1280, 720)

TITLE_RECT = Rect(40, 24, 1200, 72)
SUMMARY_RECT = Rect(40, 620, 1200, 76)

PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377")


@dataclass(frozen=True)
class SubTemplate:
    id: int
    theme_id: int
    kind: str  # table | chart | table_chart
    chart_type: str | None  # bar | line | None
    slots: tuple[tuple[str, Rect], ...]  # (role, rect) in document order


def _slots_single(body_role: str, inset: int) -> tuple:
    return (
        ("title", TITLE_RECT),
        ("caption", Rect(40 + inset, 116, 1200 - 2 * inset, 44)),
        (body_role, Rect(40 + inset, 172, 1200 - 2 * inset, 432)),
        ("summary", SUMMARY_RECT),
    )


def _slots_dual(table_left: bool, inset: int) -> tuple:
    left = Rect(40, 172, 600 - inset, 432)
    right = Rect(656 + inset, 172, 584 - inset, 432)
    table_rect, chart_rect = (left, right) if table_left else (right, left)
    return (
        ("title", TITLE_RECT),
        ("caption", Rect(40, 116, 1200, 44)),
        ("table_body", table_rect),
        ("chart_body", chart_rect),
        ("summary", SUMMARY_RECT),
    )


def _build_subtemplates() -> dict[int, SubTemplate]:
    # themes 1..4 get six variants, themes 5..6 get five (34 total)
    plans = {
        1: ["table", "bar", "line", "table_bar", "table_line", "table_wide"],
        2: ["table", "bar", "line", "table_bar", "table_line", "table_wide"],
        3: ["table", "bar", "line", "table_bar", "table_line", "table_wide"],
        4: ["table", "bar", "line", "table_bar", "table_line", "table_wide"],
        5: ["table", "bar", "line", "table_bar", "table_line"],
        6: ["table", "bar", "line", "table_bar", "table_line"],
    }
    out = {}
    next_id = 1
    for theme_id, kinds in plans.items():
        for i, kind in enumerate(kinds):
            inset = 12 * i  # distinct geometry per variant
            if kind == "table":
                st = SubTemplate(next_id, theme_id, "table", None,
                                 _slots_single("table_body", inset))
            elif kind == "table_wide":
                st = SubTemplate(next_id, theme_id, "table", None,
                                 _slots_single("table_body", 0))
            elif kind == "bar":
                st = SubTemplate(next_id, theme_id, "chart", "bar",
                                 _slots_single("chart_body", inset))
            elif kind == "line":
                st = SubTemplate(next_id, theme_id, "chart", "line",
                                 _slots_single("chart_body", inset))
            elif kind == "table_bar":
                st = SubTemplate(next_id, theme_id, "table_chart", "bar",
                                 _slots_dual(table_left=True, inset=inset))
            else:  # table_line
                st = SubTemplate(next_id, theme_id, "table_chart", "line",
                                 _slots_dual(table_left=False, inset=inset))
            out[next_id] = st
            next_id += 1
    return out


SUBTEMPLATES: dict[int, SubTemplate] = _build_subtemplates()


def get_subtemplate(subtemplate_id: int) -> SubTemplate:
    if subtemplate_id not in SUBTEMPLATES:
        raise errors.UnknownSubtemplate(str(subtemplate_id))
    return SUBTEMPLATES[subtemplate_id]


def subtemplates_for_theme(theme_id: int) -> list[SubTemplate]:
    return [st for st in SUBTEMPLATES.values() if st.theme_id == theme_id]


_ROLE_TYPE = {"title": "textBox", "caption": "textBox", "summary": "textBox",
              "table_body": "table", "chart_body": "chart"}


def create_slide(theme_id: int, subtemplate_id: int) -> SlideDocument:
    """Empty scaffold carrying the sub-template's roles and layout rects."""
    st = get_subtemplate(subtemplate_id)
    if st.theme_id != theme_id:
        raise errors.UnknownSubtemplate(
            f"sub-template {subtemplate_id} does not belong to theme {theme_id}")
    elements = tuple(
        SlideElement(id=f"e{i + 1}", type=_ROLE_TYPE[role], role=role,
                     text="", layout=rect)
        for i, (role, rect) in enumerate(st.slots)
    )
    doc = SlideDocument(theme_id=theme_id, subtemplate_id=subtemplate_id,
                        elements=elements)
    return core.validate_slide(doc, require_content=False)


# ---------------------------------------------------------------------------
# Content placement
# ---------------------------------------------------------------------------

def _replace_element(doc: SlideDocument, role: str, text: str | None = None,
                     payload=None, occupied_check: bool = True) -> SlideDocument:
    target = doc.find(role)
    if target is None:
        raise errors.UnknownRole(role)
    if occupied_check and (target.text or target.payload is not None):
        raise errors.SlotOccupied(f"{role} already filled")
    new = target
    if text is not None:
        new = new.with_text(text)
    if payload is not None:
        new = new.with_payload(payload)
    elements = tuple(new if e.id == target.id else e for e in doc.elements)
    return replace(doc, elements=elements)


def add_title(slide: SlideDocument, text: str, slot: str = "title") -> SlideDocument:
    if slot != "title":
        raise errors.RoleMismatch(f"title content cannot fill slot {slot}")
    return _replace_element(slide, "title", text=text)


def add_text(slide: SlideDocument, text: str, slot: str) -> SlideDocument:
    if slot not in ("caption", "summary"):
        raise errors.RoleMismatch(f"text content cannot fill slot {slot}")
    return _replace_element(slide, slot, text=text)


def add_table(slide: SlideDocument, table: AnalyticalTable,
              slot: str = "table_body") -> SlideDocument:
    if slot != "table_body":
        raise errors.RoleMismatch(f"table content cannot fill slot {slot}")
    return _replace_element(slide, slot, text=render_table_text(table), payload=table)


def add_line_chart(slide: SlideDocument, chart: ChartSpec,
                   slot: str = "chart_body") -> SlideDocument:
    if slot != "chart_body" or chart.chart_type != "line":
        raise errors.RoleMismatch("line chart must fill a chart slot")
    return _replace_element(slide, slot, payload=chart)


def add_bar_chart(slide: SlideDocument, chart: ChartSpec,
                  slot: str = "chart_body") -> SlideDocument:
    if slot != "chart_body" or chart.chart_type != "bar":
        raise errors.RoleMismatch("bar chart must fill a chart slot")
    return _replace_element(slide, slot, payload=chart)


def format_cell(v: float | None) -> str:
    if v is None:
        return AVG_EMPTY_MARKER
    return format_quantity(canonical_round(float(v), "price"))


def render_table_text(table: AnalyticalTable) -> str:
    """Plain text grid of a table (display form of the payload)."""
    lines = [" | ".join([""] + list(table.col_headers)).strip()]
    for header, row in zip(table.row_headers, table.cells):
        lines.append(" | ".join([header] + [format_cell(v) for v in row]))
    return "\n".join(lines)


def alias_table(table: AnalyticalTable, aliases: dict) -> AnalyticalTable:
    """Swap metric headers for display aliases, keeping the canonical ids."""
    if not aliases:
        return table

    def swap(headers):
        display, canon = [], []
        hit = False
        for h in headers:
            if h in aliases:
                display.append(aliases[h])
                canon.append(h)
                hit = True
            else:
                display.append(h)
                canon.append(None)
        return display, (canon if hit else None)

    rows, row_canon = swap(table.row_headers)
    cols, col_canon = swap(table.col_headers)
    return core.make_table(table.structure, rows, cols,
                           [list(r) for r in table.cells], row_canon, col_canon)


def chart_from_table(table: AnalyticalTable, chart_type: str) -> ChartSpec:
    """Project a table into homologous chart series.

    CF tables chart each metric column over the row labels; FC and XC tables
    chart each row over the column labels.  Categories where any series has
    an empty-AVG cell are dropped from the chart.
    """
    if table.structure == "CF":
        categories = list(table.row_headers)
        series = [(name, [row[j] for row in table.cells])
                  for j, name in enumerate(table.col_headers)]
    else:
        categories = list(table.col_headers)
        series = [(name, list(row))
                  for name, row in zip(table.row_headers, table.cells)]
    keep = [j for j in range(len(categories))
            if all(values[j] is not None for _, values in series)]
    categories = [categories[j] for j in keep]
    series = [(name, [values[j] for j in keep]) for name, values in series]
    return make_chart(chart_type, series, categories)


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

def render_chart_svg(spec: ChartSpec, rect: Rect) -> str:
    """Deterministic SVG 1.1 text for a chart, sized to the given rect."""
    if not spec.categories or not spec.series:
        raise errors.EmptySeries("chart has no categories or no series")
    core.validate_chart(spec)
    w, h = rect.width, rect.height
    ml, mr, mt, mb = 56, 12, 28, 34
    pw, ph = w - ml - mr, h - mt - mb
    values = [v for s in spec.series for v in s.values]
    vmin = min(0.0, min(values))
    vmax = max(values)
    if vmax == vmin:
        vmax = vmin + 1.0

    def sy(v: float) -> float:
        return mt + ph * (1.0 - (v - vmin) / (vmax - vmin))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="#333333"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="#333333"/>',
        f'<text x="{ml - 6}" y="{sy(vmax):.2f}" text-anchor="end" font-size="11">'
        f"{format_quantity(canonical_round(vmax, 'price'))}</text>",
        f'<text x="{ml - 6}" y="{sy(vmin):.2f}" text-anchor="end" font-size="11">'
        f"{format_quantity(canonical_round(vmin, 'price'))}</text>",
    ]
    n = len(spec.categories)
    slot = pw / n
    for j, cat in enumerate(spec.categories):
        cx = ml + slot * (j + 0.5)
        parts.append(
            f'<text x="{cx:.2f}" y="{h - mb + 16}" text-anchor="middle" '
            f'font-size="11">{_esc(cat)}</text>')
    for i, s in enumerate(spec.series):
        color = PALETTE[i % len(PALETTE)]
        parts.append(
            f'<text x="{ml + 4 + 110 * i}" y="{mt - 10}" font-size="11" '
            f'fill="{color}">{_esc(s.name)}</text>')
        if spec.chart_type == "bar":
            band = slot * 0.8 / len(spec.series)
            for j, v in enumerate(s.values):
                x = ml + slot * j + slot * 0.1 + band * i
                y = sy(max(v, 0.0))
                bh = abs(sy(0.0) - sy(v))
                parts.append(
                    f'<rect x="{x:.2f}" y="{y:.2f}" width="{band:.2f}" '
                    f'height="{bh:.2f}" fill="{color}"/>')
        else:
            points = " ".join(
                f"{ml + slot * (j + 0.5):.2f},{sy(v):.2f}"
                for j, v in enumerate(s.values))
            parts.append(
                f'<polyline points="{points}" fill="none" stroke="{color}" '
                f'stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


# ---------------------------------------------------------------------------
# Repopulation
# ---------------------------------------------------------------------------

def repopulate(source: SlideDocument, new_contents: dict) -> SlideDocument:
    """Fill updated content into a slide while preserving its layout exactly.

    ``new_contents`` maps role -> str (text roles) or payload object (table /
    chart roles).  Output ids, order, roles, and rectangles are identical to
    the source; only text and payload fields change.
    """
    for role in new_contents:
        if source.find(role) is None:
            raise errors.UnknownRole(role)
    elements = []
    for e in source.elements:
        if e.role not in new_contents:
            elements.append(e)
            continue
        content = new_contents[e.role]
        if e.role in ("title", "caption", "summary"):
            if not isinstance(content, str):
                raise errors.RoleMismatch(f"{e.role} content must be text")
            elements.append(e.with_text(content))
        elif e.role == "table_body":
            if not isinstance(content, AnalyticalTable):
                raise errors.RoleMismatch("table_body content must be a table")
            elements.append(e.with_text(render_table_text(content)).with_payload(content))
        else:
            if not isinstance(content, ChartSpec):
                raise errors.RoleMismatch("chart_body content must be a chart")
            elements.append(e.with_payload(content))
    return replace(source, elements=tuple(elements))


def strip_content(doc: SlideDocument) -> SlideDocument:
    """Layout skeleton of a document: text and payload removed everywhere."""
    return replace(doc, elements=tuple(
        replace(e, text="", payload=None) for e in doc.elements))
