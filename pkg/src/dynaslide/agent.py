"""Agent pipeline: slide understanding plus instruction-driven update.

Seven stages run in a fixed order (layout parse, data-source extraction,
function-logic extraction, instruction parsing, SQL generation, tool
invocation, summary update); every run emits exactly one trace per stage
regardless of failures.  Model calls go through a pluggable provider; the
oracle provider answers from ground-truth metadata, making the whole
pipeline self-verifying.
"""
from __future__ import annotations

import json
import os
import random
import re
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import bench, core, datastore, errors, pack as packmod, render, stats
from .core import (
    AnalyticalTable,
    ClosedCall,
    OpenLogic,
    ParameterState,
    Rect,
    SlideDocument,
    digest,
    normalize_whitespace,
)

STAGES = (
    "layout_parse",
    "data_source",
    "function_logic",
    "instruction_parse",
    "sql_generate",
    "tool_invocation",
    "summary_update",
)

TASKS = (
    "layout_parse",
    "data_source_extract",
    "logic_closed",
    "logic_open",
    "instruction_parse",
    "sql_generate",
    "summary_rewrite",
)

IOU_THRESHOLD = 0.5
DEFAULT_JITTER = 0.05


# ---------------------------------------------------------------------------
# IoU matching
# ---------------------------------------------------------------------------

def _as_bbox(r) -> tuple[float, float, float, float]:
    if isinstance(r, Rect):
        return (float(r.x), float(r.y), float(r.width), float(r.height))
    x, y, w, h = r
    return (float(x), float(y), float(w), float(h))


def iou(a, b) -> float:
    """Intersection over union of two x/y/width/height rectangles."""
    ax, ay, aw, ah = _as_bbox(a)
    bx, by, bw, bh = _as_bbox(b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise errors.DegenerateRect("zero-area rectangle")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


@dataclass(frozen=True)
class LayoutPrediction:
    label: str
    bbox: tuple[float, float, float, float]
    confidence: float = 1.0


@dataclass(frozen=True)
class AlignedElement:
    id: str
    role: str  # predicted role, or "unlabeled"
    layout: Rect
    text: str


def match_elements(predictions: list[LayoutPrediction],
                   shapes: list[core.SlideElement],
                   threshold: float = IOU_THRESHOLD) -> list[AlignedElement]:
    """Greedy one-to-one assignment by descending IoU (strictly above the
    threshold); unmatched shapes come back with role "unlabeled"."""
    pairs = []
    for si, shape in enumerate(shapes):
        for pi, pred in enumerate(predictions):
            score = iou(shape.layout, pred.bbox)
            if score > threshold:
                pairs.append((score, si, pi))
    # ties broken by shape id order, then prediction order
    pairs.sort(key=lambda t: (-t[0], shapes[t[1]].id, t[2]))
    shape_role: dict[int, str] = {}
    used_preds: set[int] = set()
    for score, si, pi in pairs:
        if si in shape_role or pi in used_preds:
            continue
        shape_role[si] = predictions[pi].label
        used_preds.add(pi)
    return [
        AlignedElement(id=s.id, role=shape_role.get(i, "unlabeled"),
                       layout=s.layout, text=s.text)
        for i, s in enumerate(shapes)
    ]


# ---------------------------------------------------------------------------
# Response schemas
# ---------------------------------------------------------------------------

_BBOX = {"type": "array", "items": {"type": "number"},
         "minItems": 4, "maxItems": 4}
_SLOT_VALUE = {
    "oneOf": [
        {"type": "null"},
        {"type": "string"},
        {"type": "number"},
        {"type": "array", "minItems": 2, "maxItems": 2},
    ]
}

RESPONSE_SCHEMAS = {
    "layout_parse": {
        "type": "object",
        "required": ["predictions"],
        "properties": {
            "predictions": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["label", "bbox"],
                    "properties": {
                        "label": {"type": "string"},
                        "bbox": _BBOX,
                        "confidence": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            }
        },
    },
    "data_source_extract": {
        "type": "object",
        "required": ["table_name", "slots"],
        "properties": {
            "table_name": {"type": "string"},
            "slots": {
                "type": "object",
                "properties": {f: _SLOT_VALUE for f in core.SCHEMA_FIELDS},
                "additionalProperties": False,
            },
        },
    },
    "logic_closed": {
        "type": "object",
        "required": ["function_id", "params"],
        "properties": {
            "function_id": {"type": "string"},
            "params": {"type": "object"},
        },
    },
    "logic_open": {
        "type": "object",
        "required": ["S", "H", "C", "F", "O"],
        "properties": {
            "S": {"type": "string"},
            "H": {
                "type": "object",
                "required": ["row_headers", "col_headers"],
                "properties": {
                    "row_headers": {"type": "array", "items": {"type": "string"}},
                    "col_headers": {"type": "array", "items": {"type": "string"}},
                },
            },
            "C": {"type": "array"},
            "F": {"type": "array", "items": {"type": "string"}},
            "O": {"type": "array", "items": {"type": "string"}},
        },
    },
    "instruction_parse": {
        "type": "object",
        "required": ["table_name", "slots", "logic"],
        "properties": {
            "table_name": {"type": "string"},
            "slots": {"type": "object"},
            "logic": {"type": "object"},
        },
    },
    "sql_generate": {
        "type": "object",
        "required": ["sql", "params"],
        "properties": {
            "sql": {"type": "string"},
            "params": {"type": "array"},
        },
    },
    "summary_rewrite": {
        "type": "object",
        "required": ["summary"],
        "properties": {"summary": {"type": "string"}},
    },
}


def validate_response(task: str, response) -> dict:
    if task not in RESPONSE_SCHEMAS:
        raise errors.ProviderError(f"unknown task: {task}")
    if not isinstance(response, dict):
        raise errors.SchemaViolation(f"{task}: response must be an object")
    try:
        jsonschema.validate(response, RESPONSE_SCHEMAS[task])
    except jsonschema.ValidationError as e:
        raise errors.SchemaViolation(f"{task}: {e.message}") from e
    return response


def request_digest(task: str, request_input: dict) -> str:
    return digest({"task": task, "input": request_input})


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class ModelProvider:
    """Capability map from pipeline tasks to structured handlers."""

    provider_id = "base"

    def supports(self, task: str) -> bool:
        return task in TASKS

    def handle(self, task: str, request: dict) -> dict:
        raise NotImplementedError


class OracleProvider(ModelProvider):
    """Answers every task from the ground-truth metadata carried in the
    request's ``gold`` slot, with seeded bbox jitter on layout parsing so the
    IoU path is exercised honestly."""

    provider_id = "oracle"

    def __init__(self, pk: packmod.TemplatePack, jitter: float = DEFAULT_JITTER,
                 seed: int = 0):
        self.pack = pk
        self.jitter = jitter
        self.seed = seed

    def handle(self, task: str, request: dict) -> dict:
        gold = request.get("gold")
        if gold is None:
            raise errors.ProviderError("oracle provider needs ground truth")
        if task == "layout_parse":
            rng = random.Random(datastore._derived_seed(
                self.seed, request_digest(task, request["input"])))
            preds = []
            for el in request["input"]["elements"]:
                x, y, w, h = el["bbox"]
                jw = self.jitter
                preds.append({
                    "label": gold["roles"][el["id"]],
                    "bbox": [x + rng.uniform(-jw, jw) * w,
                             y + rng.uniform(-jw, jw) * h,
                             w * (1 + rng.uniform(-jw, jw)),
                             h * (1 + rng.uniform(-jw, jw))],
                    "confidence": 1.0,
                })
            return {"predictions": preds}
        if task == "data_source_extract":
            return {"table_name": gold["state"]["table_name"],
                    "slots": gold["state"]["slots"]}
        if task == "logic_closed":
            return dict(gold["logic"])
        if task == "logic_open":
            return dict(gold["logic_open"])
        if task == "instruction_parse":
            return dict(gold["state"])
        if task == "sql_generate":
            return {"sql": gold["sql"], "params": gold["params"]}
        if task == "summary_rewrite":
            template = self.pack.template(gold["template_id"])
            values = {**gold["variables"], **request["input"]["metrics"]}
            return {"summary": packmod.instantiate_text(template, values)}
        raise errors.ProviderError(f"unsupported task: {task}")


class ReplayProvider(ModelProvider):
    """Replays recorded responses from one JSON file per request digest."""

    provider_id = "replay"

    def __init__(self, fixtures_dir: str | Path):
        self.fixtures_dir = Path(fixtures_dir)

    def handle(self, task: str, request: dict) -> dict:
        path = self.fixtures_dir / f"{request_digest(task, request['input'])}.json"
        if not path.exists():
            raise errors.ProviderError(f"no fixture for {task}: {path.name}")
        return json.loads(path.read_text(encoding="utf-8"))


class RecordingProvider(ModelProvider):
    """Delegates to another provider and records fixtures for replay."""

    def __init__(self, inner: ModelProvider, fixtures_dir: str | Path):
        self.inner = inner
        self.fixtures_dir = Path(fixtures_dir)
        self.fixtures_dir.mkdir(parents=True, exist_ok=True)
        self.provider_id = f"recording({inner.provider_id})"

    def handle(self, task: str, request: dict) -> dict:
        response = self.inner.handle(task, request)
        path = self.fixtures_dir / f"{request_digest(task, request['input'])}.json"
        path.write_text(core.pretty_json(response), encoding="utf-8")
        return response


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_fenced_json(content: str) -> dict:
    match = _FENCE_RE.search(content)
    payload = match.group(1) if match else content
    try:
        return json.loads(payload)
    except json.JSONDecodeError as e:
        raise errors.ProviderError(f"response is not valid JSON: {e}") from e


class RemoteProvider(ModelProvider):
    """HTTP JSON provider for a chat-completions-style endpoint.

    POSTs {task, input, schema}; responses must be JSON, either direct or as
    fenced JSON inside a ``content`` field.  One retry on parse failure.
    """

    provider_id = "remote"

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 transport=None, timeout: float = 60.0):
        self.base_url = base_url or os.environ.get("DYNASLIDE_MODEL_URL")
        self.api_key = api_key or os.environ.get("DYNASLIDE_MODEL_KEY")
        self.transport = transport or self._http_post
        self.timeout = timeout
        if not self.base_url and transport is None:
            raise errors.ProviderError("DYNASLIDE_MODEL_URL is not set")

    def _http_post(self, body: dict) -> str:
        req = urllib.request.Request(
            self.base_url,
            data=json.dumps(body).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                **({"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}),
            },
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")

    def handle(self, task: str, request: dict) -> dict:
        body = {"task": task, "input": request["input"],
                "schema": RESPONSE_SCHEMAS[task]}
        last_error: Exception | None = None
        for _ in range(2):  # one retry on parse failure
            raw = self.transport(body)
            try:
                data = json.loads(raw)
                if isinstance(data, dict) and "content" in data:
                    return parse_fenced_json(data["content"])
                if isinstance(data, dict):
                    return data
                raise errors.ProviderError("response is not a JSON object")
            except (json.JSONDecodeError, errors.ProviderError) as e:
                last_error = e
        raise errors.ProviderError(f"remote response unusable: {last_error}")


# ---------------------------------------------------------------------------
# Stage operations
# ---------------------------------------------------------------------------

def _call(provider: ModelProvider, task: str, request_input: dict,
          gold: dict | None) -> dict:
    request = {"task": task, "input": request_input}
    if gold is not None:
        request["gold"] = gold
    try:
        response = provider.handle(task, request)
    except errors.DynaSlideError:
        raise
    except Exception as e:  # provider bugs surface as ProviderError
        raise errors.ProviderError(f"{task}: {e}") from e
    return validate_response(task, response)


def extract_data_source(slide_ctx: dict, provider: ModelProvider,
                        known_tables: list[str],
                        gold: dict | None = None) -> tuple[str, dict]:
    """Schema-aligned slot filling: table name plus the nine slots."""
    resp = _call(provider, "data_source_extract", slide_ctx, gold)
    slots_in = resp["slots"]
    if sorted(slots_in) != sorted(core.SCHEMA_FIELDS):
        raise errors.SchemaViolation(
            f"expected 9 slots, got {len(slots_in)}")
    slots = {k: core._slot_value_from_json(v) for k, v in slots_in.items()}
    table = resp["table_name"]
    if table not in known_tables:
        raise errors.UnknownTable(table)
    return table, slots


def extract_logic_closed(table_ctx: dict, provider: ModelProvider,
                         gold: dict | None = None) -> ClosedCall:
    resp = _call(provider, "logic_closed", table_ctx, gold)
    fn = stats.get_function(resp["function_id"])
    args = dict(resp["params"])
    stats.validate_args(fn, args)
    return ClosedCall(function_id=fn.id, params=args)


def extract_logic_open(table_ctx: dict, provider: ModelProvider,
                       gold: dict | None = None) -> OpenLogic:
    resp = _call(provider, "logic_open", table_ctx, gold)
    return core.open_logic_from_dict(resp)


def parse_instruction(instruction: str, current: ParameterState,
                      provider: ModelProvider,
                      gold: dict | None = None) -> ParameterState:
    """State-update step: the returned JSON must preserve the schema exactly."""
    core.validate_state(current)
    request_input = {"instruction": instruction,
                     "state": core.state_to_dict(current)}
    resp = _call(provider, "instruction_parse", request_input, gold)
    return core.state_from_dict(resp)


def recompute(state: ParameterState, store: datastore.InMemoryStore
              ) -> tuple[list[dict], AnalyticalTable]:
    """Compile, retrieve, and re-execute the computation logic."""
    rows = datastore.execute_query(store, datastore.state_to_query(state))
    table = stats.run_logic(state.logic, rows)
    return rows, table


def rewrite_summary(old_summary: str, old_table, new_table: AnalyticalTable,
                    metrics: dict | None, provider: ModelProvider,
                    instruction: str = "", gold: dict | None = None) -> str:
    request_input = {
        "old_summary": old_summary,
        "instruction": instruction,
        "old_table": core.table_to_dict(old_table) if old_table is not None else None,
        "new_table": core.table_to_dict(new_table),
        "metrics": ({mid: stats.format_metric(mid, val) for mid, val in metrics.items()}
                    if metrics else {}),
    }
    resp = _call(provider, "summary_rewrite", request_input, gold)
    return resp["summary"]


def substitute_values(text: str, mapping: dict) -> str:
    """Single-pass simultaneous replacement of old scope values by new ones."""
    mapping = {old: new for old, new in mapping.items() if old != new}
    if not mapping:
        return text
    pattern = "|".join(re.escape(k) for k in sorted(mapping, key=len, reverse=True))
    return re.sub(pattern, lambda m: mapping[m.group(0)], text)


# ---------------------------------------------------------------------------
# Traces and the full pipeline
# ---------------------------------------------------------------------------

@dataclass
class StageTrace:
    stage: str
    provider_id: str
    input_digest: str | None = None
    output_digest: str | None = None
    expected_digest: str | None = None
    ok: bool = False
    gold_match: bool | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "provider_id": self.provider_id,
            "input_digest": self.input_digest,
            "output_digest": self.output_digest,
            "expected_digest": self.expected_digest,
            "ok": self.ok,
            "gold_match": self.gold_match,
            "error": self.error,
        }


def trace_from_dict(d: dict) -> StageTrace:
    return StageTrace(
        stage=d["stage"], provider_id=d.get("provider_id", "?"),
        input_digest=d.get("input_digest"), output_digest=d.get("output_digest"),
        expected_digest=d.get("expected_digest"), ok=bool(d.get("ok")),
        gold_match=d.get("gold_match"), error=d.get("error"),
    )


@dataclass
class PipelineResult:
    output: SlideDocument | None
    traces: list[StageTrace]
    state: ParameterState | None = None
    table: AnalyticalTable | None = None
    summary: str | None = None

    @property
    def ok(self) -> bool:
        return self.output is not None


def _state_in_mode(state: ParameterState, mode: str) -> ParameterState:
    if mode == "open" and isinstance(state.logic, ClosedCall):
        return ParameterState(
            table_name=state.table_name, slots=dict(state.slots),
            logic=stats.closed_to_open(state.logic.function_id, state.logic.params))
    return state


def _rows_digest(rows: list[dict]) -> str:
    return digest([{k: datastore._sql_value(v) for k, v in row.items()}
                   for row in rows])


@dataclass
class _Gold:
    """Ground-truth intermediates derived from metadata, one per stage."""

    roles: dict
    source_state: ParameterState
    update_state: ParameterState
    logic_closed: dict
    logic_open: dict
    rows: list[dict]
    table: AnalyticalTable
    contents: bench.SlideContents
    summary_template_id: str
    variables: dict


def _build_gold(source_slide: SlideDocument, metadata: core.SlideMetadata,
                store: datastore.InMemoryStore, pk: packmod.TemplatePack,
                mode: str) -> _Gold:
    if metadata.update_filters is None:
        raise errors.DynaSlideError("metadata lacks update_filters")
    source_state = bench.filters_to_state(metadata.slide_filters)
    update_state = _state_in_mode(bench.filters_to_state(metadata.update_filters), mode)
    closed = bench.filters_to_state(metadata.slide_filters).logic
    open_equiv = stats.closed_to_open(closed.function_id, closed.params)
    rows = datastore.execute_query(store, datastore.state_to_query(update_state))
    table = stats.run_logic(update_state.logic, rows)
    template_ids = {s.role: s.template_id for s in metadata.template_slide}
    aliases = {}
    for s in metadata.template_slide:
        if s.aliases:
            aliases = dict(s.aliases)
            break
    st = render.get_subtemplate(source_slide.subtemplate_id)
    contents = bench.compute_contents(metadata.update_filters, template_ids,
                                      aliases, store, pk, st.chart_type)
    fid = metadata.update_filters.function_id
    resolved = packmod.resolve_variables(
        list(pk.function_variables[fid]), metadata.update_filters.variables, pk)
    return _Gold(
        roles={e.id: e.role for e in source_slide.elements},
        source_state=_state_in_mode(source_state, mode),
        update_state=update_state,
        logic_closed={"function_id": closed.function_id,
                      "params": dict(sorted(closed.params.items()))},
        logic_open=core.open_logic_to_dict(open_equiv),
        rows=rows,
        table=table,
        contents=contents,
        summary_template_id=template_ids["summary"],
        variables={k: str(v) for k, v in resolved.items()},
    )


def _slide_context(source_slide: SlideDocument,
                   aligned: list[AlignedElement]) -> dict:
    """Schema cues for extraction: captions plus table/chart headers."""
    by_id = {e.id: e for e in source_slide.elements}
    ctx: dict = {"title": "", "captions": [], "table": None, "chart_series": [],
                 "schema_fields": list(core.SCHEMA_FIELDS)}
    for a in aligned:
        el = by_id[a.id]
        if a.role == "title":
            ctx["title"] = el.text
        elif a.role == "caption":
            ctx["captions"].append(el.text)
        elif a.role == "table_body" and isinstance(el.payload, AnalyticalTable):
            ctx["table"] = {
                "structure": el.payload.structure,
                "row_headers": list(el.payload.row_headers),
                "col_headers": list(el.payload.col_headers),
            }
        elif a.role == "chart_body" and isinstance(el.payload, core.ChartSpec):
            ctx["chart_series"] = [s.name for s in el.payload.series]
            ctx["chart_categories"] = list(el.payload.categories)
    return ctx


def _recover_aliases(source_slide: SlideDocument,
                     new_table: AnalyticalTable) -> dict:
    """Map canonical metric headers to the source slide's display aliases.

    Prefers the source table's canon bookkeeping; falls back to positional
    chart-series names for chart-only slides.
    """
    table_el = source_slide.find("table_body")
    if table_el is not None and isinstance(table_el.payload, AnalyticalTable):
        src = table_el.payload
        out = {}
        for canon_list, headers in ((src.row_header_canon, src.row_headers),
                                    (src.col_header_canon, src.col_headers)):
            if canon_list:
                for canon, display in zip(canon_list, headers):
                    if canon is not None:
                        out[canon] = display
        return out
    chart_el = source_slide.find("chart_body")
    if chart_el is None or not isinstance(chart_el.payload, core.ChartSpec):
        return {}
    names = [s.name for s in chart_el.payload.series]
    if new_table.structure == "CF":
        metric_axis = list(new_table.col_headers)
    elif new_table.structure == "FC":
        metric_axis = list(new_table.row_headers)
    else:
        return {}  # XC series are data labels, not metric headers
    if len(names) != len(metric_axis):
        return {}
    return {canon: name for canon, name in zip(metric_axis, names)
            if canon in stats.METRIC_KINDS or canon in packmod.CANONICAL_METRICS}


def run_pipeline(source_slide: SlideDocument,
                 metadata: core.SlideMetadata | None,
                 instruction: str,
                 store: datastore.InMemoryStore,
                 provider: ModelProvider,
                 mode: str = "closed",
                 pk: packmod.TemplatePack | None = None) -> PipelineResult:
    """Run all seven stages; a failure at stage i leaves traces i+1.. not-ok."""
    if mode not in ("closed", "open"):
        raise errors.DynaSlideError(f"unknown mode: {mode}")
    gold: _Gold | None = None
    if metadata is not None:
        if pk is None:
            raise errors.DynaSlideError("metadata given but no template pack")
        gold = _build_gold(source_slide, metadata, store, pk, mode)

    traces = [StageTrace(stage=s, provider_id=provider.provider_id) for s in STAGES]
    result = PipelineResult(output=None, traces=traces)
    failed = False

    def fail(idx: int, e: Exception) -> None:
        nonlocal failed
        traces[idx].ok = False
        traces[idx].error = f"{type(e).__name__}: {e}"
        if traces[idx].expected_digest is not None:
            traces[idx].gold_match = False
        failed = True

    # 1. layout parsing + IoU alignment
    aligned: list[AlignedElement] = []
    layout_input = {
        "canvas": list(render.CANVAS),
        "elements": [{"id": e.id, "bbox": [e.layout.x, e.layout.y,
                                           e.layout.width, e.layout.height]}
                     for e in source_slide.elements],
    }
    traces[0].input_digest = request_digest("layout_parse", layout_input)
    if gold is not None:
        traces[0].expected_digest = digest(gold.roles)
    try:
        resp = _call(provider, "layout_parse", layout_input,
                     {"roles": gold.roles} if gold else None)
        predictions = [
            LayoutPrediction(label=p["label"], bbox=tuple(p["bbox"]),
                             confidence=p.get("confidence", 1.0))
            for p in resp["predictions"]
        ]
        aligned = match_elements(predictions, list(source_slide.elements))
        roles_out = {a.id: a.role for a in aligned}
        traces[0].output_digest = digest(roles_out)
        traces[0].ok = True
        if gold is not None:
            traces[0].gold_match = traces[0].output_digest == traces[0].expected_digest
    except errors.DynaSlideError as e:
        fail(0, e)

    # 2. data source extraction
    state: ParameterState | None = None
    table_name: str | None = None
    slots: dict | None = None
    if not failed:
        ctx = _slide_context(source_slide, aligned)
        traces[1].input_digest = request_digest("data_source_extract", ctx)
        if gold is not None:
            gold_ds = core.state_to_dict(gold.source_state)
            traces[1].expected_digest = digest(
                {"table_name": gold_ds["table_name"], "slots": gold_ds["slots"]})
        try:
            gold_req = None
            if gold is not None:
                gold_req = {"state": core.state_to_dict(gold.source_state)}
            table_name, slots = extract_data_source(
                ctx, provider, list(store.table_names), gold_req)
            traces[1].output_digest = digest(
                {"table_name": table_name,
                 "slots": {k: core._slot_value_to_json(v) for k, v in sorted(slots.items())}})
            traces[1].ok = True
            if gold is not None:
                gold_ds = core.state_to_dict(gold.source_state)
                traces[1].gold_match = traces[1].output_digest == digest(
                    {"table_name": gold_ds["table_name"],
                     "slots": gold_ds["slots"]})
        except errors.DynaSlideError as e:
            fail(1, e)

    # 3. function logic extraction
    if not failed:
        table_ctx = _slide_context(source_slide, aligned)
        table_ctx["mode"] = mode
        if mode == "closed":
            table_ctx["functions"] = [
                {"id": fn.id, "name": fn.name, "structure": fn.structure,
                 "span_args": list(fn.span_args),
                 "params": list(fn.candidate_params)}
                for fn in stats.FUNCTIONS.values()
            ]
        task = "logic_closed" if mode == "closed" else "logic_open"
        traces[2].input_digest = request_digest(task, table_ctx)
        if gold is not None:
            traces[2].expected_digest = digest(
                gold.logic_closed if mode == "closed" else gold.logic_open)
        try:
            if mode == "closed":
                gold_req = {"logic": gold.logic_closed} if gold else None
                logic = extract_logic_closed(table_ctx, provider, gold_req)
                out = {"function_id": logic.function_id,
                       "params": dict(sorted(logic.params.items()))}
            else:
                gold_req = {"logic_open": gold.logic_open} if gold else None
                logic = extract_logic_open(table_ctx, provider, gold_req)
                out = core.open_logic_to_dict(logic)
            state = core.validate_state(ParameterState(
                table_name=table_name, slots=slots, logic=logic))
            traces[2].output_digest = digest(out)
            traces[2].ok = True
            if gold is not None:
                traces[2].gold_match = \
                    traces[2].output_digest == traces[2].expected_digest
        except errors.DynaSlideError as e:
            fail(2, e)

    # 4. instruction parsing (state update)
    new_state: ParameterState | None = None
    if not failed:
        traces[3].input_digest = digest(
            {"instruction": instruction, "state": core.state_to_dict(state)})
        if gold is not None:
            traces[3].expected_digest = digest(core.state_to_dict(gold.update_state))
        try:
            gold_req = None
            if gold is not None:
                gold_req = {"state": core.state_to_dict(gold.update_state)}
            new_state = parse_instruction(instruction, state, provider, gold_req)
            traces[3].output_digest = digest(core.state_to_dict(new_state))
            traces[3].ok = True
            if gold is not None:
                traces[3].gold_match = \
                    traces[3].output_digest == traces[3].expected_digest
        except errors.DynaSlideError as e:
            fail(3, e)

    # 5. SQL generation + retrieval (deterministic compiler path)
    rows: list[dict] | None = None
    if not failed:
        try:
            sql, params = datastore.compile_sql(new_state, set(store.table_names))
            traces[4].input_digest = digest(
                {"state": core.state_to_dict(new_state)})
            if gold is not None:
                traces[4].expected_digest = _rows_digest(gold.rows)
            rows = datastore.execute_query(store, datastore.state_to_query(new_state))
            traces[4].output_digest = _rows_digest(rows)
            traces[4].ok = True
            if gold is not None:
                traces[4].gold_match = \
                    traces[4].output_digest == traces[4].expected_digest
        except errors.DynaSlideError as e:
            fail(4, e)

    # 6. tool invocation (re-computation)
    table: AnalyticalTable | None = None
    if not failed:
        traces[5].input_digest = traces[4].output_digest
        if gold is not None:
            traces[5].expected_digest = digest(core.table_to_dict(gold.table))
        try:
            table = stats.run_logic(new_state.logic, rows)
            traces[5].output_digest = digest(core.table_to_dict(table))
            traces[5].ok = True
            if gold is not None:
                traces[5].gold_match = \
                    traces[5].output_digest == traces[5].expected_digest
        except errors.DynaSlideError as e:
            fail(5, e)

    # 7. summary update + final rendering
    if not failed:
        if gold is not None:
            traces[6].expected_digest = digest(
                normalize_whitespace(gold.contents.summary))
        try:
            old_summary_el = source_slide.find("summary")
            old_summary = old_summary_el.text if old_summary_el else ""
            old_table_el = source_slide.find("table_body")
            old_table = old_table_el.payload if old_table_el else None
            fid = None
            if isinstance(new_state.logic, ClosedCall):
                fid = new_state.logic.function_id
            elif metadata is not None:
                fid = metadata.slide_filters.function_id
            metrics = stats.extract_summary_metrics(table, fid) if fid else None
            gold_req = None
            if gold is not None:
                gold_req = {"template_id": gold.summary_template_id,
                            "variables": gold.variables}
            summary = rewrite_summary(old_summary, old_table, table, metrics,
                                      provider, instruction, gold_req)
            traces[6].input_digest = digest(
                {"old": normalize_whitespace(old_summary), "instruction": instruction})
            traces[6].output_digest = digest(normalize_whitespace(summary))
            traces[6].ok = True
            if gold is not None:
                traces[6].gold_match = \
                    traces[6].output_digest == traces[6].expected_digest

            result.output = _final_render(source_slide, state, new_state,
                                          table, summary)
            result.state = new_state
            result.table = table
            result.summary = summary
        except errors.DynaSlideError as e:
            fail(6, e)

    return result


def _final_render(source_slide: SlideDocument, old_state: ParameterState,
                  new_state: ParameterState, table: AnalyticalTable,
                  summary: str) -> SlideDocument:
    """Repopulate the source layout with updated contents."""
    aliases = _recover_aliases(source_slide, table)
    display = render.alias_table(table, aliases)
    mapping = {}
    old_values = bench.state_scope_values(old_state)
    new_values = bench.state_scope_values(new_state)
    for key, old in old_values.items():
        if key in new_values:
            mapping[old] = new_values[key]
    contents: dict = {"summary": summary}
    title_el = source_slide.find("title")
    if title_el is not None:
        contents["title"] = substitute_values(title_el.text, mapping)
    caption_el = source_slide.find("caption")
    if caption_el is not None:
        contents["caption"] = substitute_values(caption_el.text, mapping)
    if source_slide.find("table_body") is not None:
        contents["table_body"] = display
    chart_el = source_slide.find("chart_body")
    if chart_el is not None and isinstance(chart_el.payload, core.ChartSpec):
        contents["chart_body"] = render.chart_from_table(
            display, chart_el.payload.chart_type)
    return render.repopulate(source_slide, contents)


def save_traces(traces_by_case: dict, path: str | Path) -> None:
    """JSONL trace log: one object per stage, tagged with its case id."""
    with open(path, "w", encoding="utf-8") as fh:
        for case_id, traces in traces_by_case.items():
            for t in traces:
                fh.write(core.canonical_json({"case_id": case_id, **t.to_dict()}) + "\n")


def load_traces(path: str | Path) -> dict:
    out: dict[str, list[StageTrace]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.setdefault(d["case_id"], []).append(trace_from_dict(d))
    return out
