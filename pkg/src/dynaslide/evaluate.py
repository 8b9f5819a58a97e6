"""Scoring: task success rate, element-level accuracy, module-wise accuracy,
and report emission."""
from __future__ import annotations

from dataclasses import dataclass

from . import core, errors
from .agent import STAGES
from .core import AnalyticalTable, ChartSpec, SlideDocument, canonical_round, normalize_whitespace

ELEMENT_BUCKETS = ("Title", "Table", "Chart", "Summary")

# Table-3 style module names in pipeline order (layout reported separately)
MODULE_NAMES = {
    "function_logic": "Func. Logic",
    "data_source": "Data Src.",
    "instruction_parse": "Instr. Parse",
    "sql_generate": "SQL Gen.",
    "tool_invocation": "Tool Inv.",
    "summary_update": "Sum. Upd.",
}
LAYOUT_MODULE = "Layout Parse"


def _cell_equal(a: float | None, b: float | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return canonical_round(float(a), "price") == canonical_round(float(b), "price")


def _effective_headers(headers, canon) -> tuple:
    if canon is None:
        return tuple(headers)
    return tuple(c if c is not None else h for h, c in zip(headers, canon))


def tables_equal(a: AnalyticalTable, b: AnalyticalTable) -> bool:
    """Numeric equality after canonical rounding; canon ids beat aliases."""
    if a.structure != b.structure:
        return False
    if _effective_headers(a.row_headers, a.row_header_canon) != \
            _effective_headers(b.row_headers, b.row_header_canon):
        return False
    if _effective_headers(a.col_headers, a.col_header_canon) != \
            _effective_headers(b.col_headers, b.col_header_canon):
        return False
    for ra, rb in zip(a.cells, b.cells):
        for va, vb in zip(ra, rb):
            if not _cell_equal(va, vb):
                return False
    return True


def charts_equal(a: ChartSpec, b: ChartSpec) -> bool:
    if a.chart_type != b.chart_type or a.categories != b.categories:
        return False
    if len(a.series) != len(b.series):
        return False
    for sa, sb in zip(a.series, b.series):
        if sa.name != sb.name or len(sa.values) != len(sb.values):
            return False
        if any(canonical_round(x, "price") != canonical_round(y, "price")
               for x, y in zip(sa.values, sb.values)):
            return False
    return True


def _texts_equal(a: str, b: str) -> bool:
    return normalize_whitespace(a) == normalize_whitespace(b)


def _skeletons_equal(pred: SlideDocument, gold: SlideDocument) -> bool:
    if (pred.theme_id, pred.subtemplate_id) != (gold.theme_id, gold.subtemplate_id):
        return False
    if len(pred.elements) != len(gold.elements):
        return False
    for pe, ge in zip(pred.elements, gold.elements):
        if (pe.id, pe.type, pe.role, pe.layout) != (ge.id, ge.type, ge.role, ge.layout):
            return False
    return True


def element_matches(pred: SlideDocument | None, gold: SlideDocument) -> dict:
    """Per-bucket correctness; captions are folded into Title."""
    out = {}
    gold_roles = {e.role for e in gold.elements}

    def pred_el(role: str):
        return pred.find(role) if pred is not None else None

    # Title bucket: the title plus every caption
    title_ok = False
    if pred is not None:
        gp, gg = pred_el("title"), gold.find("title")
        title_ok = gp is not None and _texts_equal(gp.text, gg.text)
        for gc in gold.find_all("caption"):
            pc = next((e for e in pred.elements
                       if e.role == "caption" and e.id == gc.id), None)
            if pc is None or not _texts_equal(pc.text, gc.text):
                title_ok = False
    out["Title"] = title_ok
    if "table_body" in gold_roles:
        gp, gg = pred_el("table_body"), gold.find("table_body")
        out["Table"] = (
            gp is not None and isinstance(gp.payload, AnalyticalTable)
            and tables_equal(gp.payload, gg.payload)
            and _texts_equal(gp.text, gg.text))
    if "chart_body" in gold_roles:
        gp, gg = pred_el("chart_body"), gold.find("chart_body")
        out["Chart"] = (gp is not None and isinstance(gp.payload, ChartSpec)
                        and charts_equal(gp.payload, gg.payload))
    gp, gg = pred_el("summary"), gold.find("summary")
    out["Summary"] = gp is not None and _texts_equal(gp.text, gg.text)
    return out


def slide_exact_match(pred: SlideDocument | None, gold: SlideDocument) -> bool:
    """True iff layout skeletons, all texts, table cells, and chart series
    agree (numerics compared after canonical rounding)."""
    if pred is None:
        return False
    if not _skeletons_equal(pred, gold):
        return False
    matches = element_matches(pred, gold)
    return all(matches.values())


def element_accuracy(preds: list, golds: list) -> dict:
    """Per-role accuracy over Title / Table / Chart / Summary."""
    if len(preds) != len(golds):
        raise errors.LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    hits = {b: 0 for b in ELEMENT_BUCKETS}
    seen = {b: 0 for b in ELEMENT_BUCKETS}
    for pred, gold in zip(preds, golds):
        matches = element_matches(pred, gold)
        for bucket, ok in matches.items():
            seen[bucket] += 1
            hits[bucket] += 1 if ok else 0
    return {b: (hits[b] / seen[b] if seen[b] else None) for b in ELEMENT_BUCKETS}


def module_accuracy(traces_by_case: dict) -> dict:
    """Per-stage accuracy from trace digests versus gold intermediates."""
    counts = {name: [0, 0] for name in list(MODULE_NAMES.values()) + [LAYOUT_MODULE]}
    for case_id, traces in traces_by_case.items():
        if len(traces) != len(STAGES):
            raise errors.IncompleteTrace(
                f"case {case_id}: {len(traces)} traces, expected {len(STAGES)}")
        for t in traces:
            name = LAYOUT_MODULE if t.stage == "layout_parse" else MODULE_NAMES[t.stage]
            if t.expected_digest is None:
                raise errors.IncompleteTrace(
                    f"case {case_id}: stage {t.stage} has no gold digest")
            counts[name][1] += 1
            if t.output_digest is not None and t.output_digest == t.expected_digest:
                counts[name][0] += 1
    return {name: (hit / total if total else None)
            for name, (hit, total) in counts.items()}


# ---------------------------------------------------------------------------
# Run-level scoring and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseScore:
    case_id: str
    theme_id: int
    mode: str
    exact: bool
    elements: dict


def score_cases(triples, outputs: dict, mode: str) -> list[CaseScore]:
    """Score one run: outputs maps triple id -> predicted SlideDocument/None."""
    scores = []
    for t in triples:
        pred = outputs.get(t.id)
        scores.append(CaseScore(
            case_id=t.id,
            theme_id=t.theme_id,
            mode=mode,
            exact=slide_exact_match(pred, t.target),
            elements=element_matches(pred, t.target),
        ))
    return scores


def _pct(x: float | None) -> float | None:
    return None if x is None else round(100.0 * x, 2)


def report(scores: list[CaseScore],
           traces_by_mode: dict | None = None) -> dict:
    """Machine-readable report: per-theme x mode success rates, element-level
    accuracy, and module-wise accuracy when traces are supplied."""
    modes = sorted({s.mode for s in scores})
    themes = sorted({s.theme_id for s in scores})
    success: dict = {}
    for mode in modes:
        per_theme = {}
        for theme in themes:
            cases = [s for s in scores if s.mode == mode and s.theme_id == theme]
            per_theme[str(theme)] = _pct(
                sum(s.exact for s in cases) / len(cases)) if cases else None
        all_cases = [s for s in scores if s.mode == mode]
        per_theme["average"] = _pct(
            sum(s.exact for s in all_cases) / len(all_cases)) if all_cases else None
        success[mode] = per_theme
    elements: dict = {}
    for mode in modes:
        cases = [s for s in scores if s.mode == mode]
        agg: dict = {}
        for bucket in ELEMENT_BUCKETS:
            seen = [s.elements[bucket] for s in cases if bucket in s.elements]
            agg[bucket] = _pct(sum(seen) / len(seen)) if seen else None
        elements[mode] = agg
    out = {
        "format_version": core.FORMAT_VERSION,
        "cases": len(scores),
        "task_success_rate": success,
        "element_accuracy": elements,
    }
    if traces_by_mode:
        out["module_accuracy"] = {
            mode: {k: _pct(v) for k, v in module_accuracy(traces).items()}
            for mode, traces in sorted(traces_by_mode.items())
        }
    return out


def render_report_text(rep: dict) -> str:
    """Stable human-readable rendering of a report document."""
    lines = [f"cases: {rep['cases']}", "", "task success rate (%)"]
    themes = sorted({k for mode in rep["task_success_rate"].values()
                     for k in mode if k != "average"})
    header = "theme".ljust(10) + "".join(m.ljust(10) for m in sorted(rep["task_success_rate"]))
    lines.append(header)
    for theme in themes + ["average"]:
        row = theme.ljust(10)
        for mode in sorted(rep["task_success_rate"]):
            v = rep["task_success_rate"][mode].get(theme)
            row += (f"{v:.2f}" if v is not None else "-").ljust(10)
        lines.append(row)
    lines += ["", "element-level accuracy (%)"]
    for mode in sorted(rep["element_accuracy"]):
        for bucket in ELEMENT_BUCKETS:
            v = rep["element_accuracy"][mode].get(bucket)
            lines.append(f"{mode:8s} {bucket:8s} " + (f"{v:.2f}" if v is not None else "-"))
    if "module_accuracy" in rep:
        lines += ["", "module-wise accuracy (%)"]
        for mode in sorted(rep["module_accuracy"]):
            for name, v in rep["module_accuracy"][mode].items():
                lines.append(f"{mode:8s} {name:12s} " + (f"{v:.2f}" if v is not None else "-"))
    return "\n".join(lines) + "\n"
