"""Benchmark factory: source slides, instructions, target slides, splits.

Every triple is grounded in one shared store; ``update_filters`` is always
the key-wise merge of the source slide's ``slide_filters`` with the
instruction's ``query_filters``, and the target slide is recomputed from it
while preserving the source layout.
"""
from __future__ import annotations

import calendar
import datetime as dt
import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from . import core, datastore, errors, pack as packmod, render, stats
from .core import ClosedCall, FilterSet, ParameterState, SlideDocument, SlideMetadata, TemplateSlot

YEAR_RANGE = (2020, 2024)


# ---------------------------------------------------------------------------
# Filter grounding
# ---------------------------------------------------------------------------

def _month_bounds(start_month: str, end_month: str) -> tuple[dt.date, dt.date]:
    sy, sm = int(start_month[:4]), int(start_month[5:7])
    ey, em = int(end_month[:4]), int(end_month[5:7])
    return dt.date(sy, sm, 1), dt.date(ey, em, calendar.monthrange(ey, em)[1])


def filters_to_state(fs: FilterSet) -> ParameterState:
    """Ground a FilterSet into the executable ParameterState."""
    fn = stats.get_function(fs.function_id)
    slots = {f: None for f in core.SCHEMA_FIELDS}
    v = fs.variables
    for name in ("city", "block", "project"):
        if name in v:
            slots[name] = v[name]
    if "start_year" in v and "end_year" in v:
        slots["date_code"] = (dt.date(int(v["start_year"]), 1, 1),
                              dt.date(int(v["end_year"]), 12, 31))
    elif "start_month" in v and "end_month" in v:
        slots["date_code"] = _month_bounds(str(v["start_month"]), str(v["end_month"]))
    args = dict(fs.params)
    for a in fn.span_args:
        if a not in v:
            raise errors.UnboundVariable(f"{fs.function_id} needs variable {a}")
        args[a] = v[a]
    state = ParameterState(table_name=fs.table_name, slots=slots,
                           logic=ClosedCall(fs.function_id, args))
    return core.validate_state(state)


def state_scope_values(state: ParameterState) -> dict:
    """Display values of the scope variables encoded in a state.

    Used for substitution-based title/caption updates: every value here
    appears verbatim in generated title/caption texts.
    """
    out = {}
    for name in ("city", "block", "project"):
        if state.slots.get(name):
            out[name] = str(state.slots[name])
    span = state.slots.get("date_code")
    monthly = False
    if isinstance(state.logic, ClosedCall):
        monthly = "start_month" in stats.get_function(state.logic.function_id).span_args
    elif any(c.k == "month" for c in state.logic.C):
        monthly = True
    if isinstance(span, tuple):
        lo, hi = span
        if monthly:
            out["start_month"] = f"{lo.year:04d}-{lo.month:02d}"
            out["end_month"] = f"{hi.year:04d}-{hi.month:02d}"
        else:
            out["start_year"] = str(lo.year)
            out["end_year"] = str(hi.year)
    return out


def merge_filters(slide_filters: FilterSet, query_filters: dict) -> FilterSet:
    """Key-wise override merge of instruction deltas into the slide filters."""
    q_vars = dict(query_filters.get("variables", {}))
    q_params = dict(query_filters.get("params", {}))
    variables = {**slide_filters.variables, **q_vars}
    params = {**slide_filters.params, **q_params}
    market, _ = datastore.parse_table_name(slide_filters.table_name)
    derived_table = datastore.table_name(market, variables["city"])
    explicit = query_filters.get("table_name")
    if explicit is not None and explicit != derived_table:
        raise errors.ConflictingTable(
            f"query names table {explicit!r}; scope implies {derived_table!r}")
    fn = stats.get_function(slide_filters.function_id)
    for p in q_params:
        if p not in fn.candidate_params:
            raise errors.InvalidParam(f"{slide_filters.function_id} has no parameter {p}")
        if q_params[p] not in stats.PARAMETER_CANDIDATES[p]:
            raise errors.InvalidParam(f"{p}={q_params[p]!r} not in candidate set")
    return FilterSet(table_name=derived_table, variables=variables,
                     function_id=slide_filters.function_id, params=params)


# ---------------------------------------------------------------------------
# Content computation shared by source and target generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlideContents:
    title: str
    caption: str
    summary: str
    table: core.AnalyticalTable  # display (aliased) table
    chart: core.ChartSpec | None
    metrics: dict


def compute_contents(filters: FilterSet, template_ids: dict, aliases: dict,
                     store: datastore.InMemoryStore, pk: packmod.TemplatePack,
                     chart_type: str | None) -> SlideContents:
    """Execute the data pipeline for a FilterSet and instantiate all texts."""
    fn = stats.get_function(filters.function_id)
    state = filters_to_state(filters)
    rows = datastore.execute_query(store, datastore.state_to_query(state))
    table = stats.run_statistical_function(filters.function_id, rows, state.logic.params)
    metrics = stats.extract_summary_metrics(table, filters.function_id)
    resolved = packmod.resolve_variables(
        list(pk.function_variables[filters.function_id]), filters.variables, pk)
    text_map = {**resolved,
                **{mid: stats.format_metric(mid, val) for mid, val in metrics.items()}}
    title = packmod.instantiate_text(pk.template(template_ids["title"]), text_map)
    caption = packmod.instantiate_text(pk.template(template_ids["caption"]), text_map)
    summary = packmod.instantiate_text(pk.template(template_ids["summary"]), text_map)
    display = render.alias_table(table, aliases)
    chart = render.chart_from_table(display, chart_type) if chart_type else None
    return SlideContents(title=title, caption=caption, summary=summary,
                         table=display, chart=chart, metrics=metrics)


# ---------------------------------------------------------------------------
# Source slide generation
# ---------------------------------------------------------------------------

def _sample_years(rng: random.Random) -> tuple[int, int]:
    start = rng.randint(YEAR_RANGE[0], YEAR_RANGE[1] - 1)
    end = rng.randint(start + 1, YEAR_RANGE[1])
    return start, end


def _sample_months(rng: random.Random) -> tuple[str, str]:
    year = rng.randint(YEAR_RANGE[0], YEAR_RANGE[1])
    sm = rng.randint(1, 11)
    em = rng.randint(sm + 1, 12)
    return f"{year:04d}-{sm:02d}", f"{year:04d}-{em:02d}"


def _sample_variables(fn: stats.StatFunction, table: str, rng: random.Random,
                      store: datastore.InMemoryStore, pk: packmod.TemplatePack) -> dict:
    names = pk.function_variables[fn.id]
    _, city = datastore.parse_table_name(table)
    v: dict = {}
    for name in names:
        if name == "city":
            v["city"] = city
        elif name == "block":
            v["block"] = rng.choice(store.blocks(table))
        elif name == "project":
            v["project"] = rng.choice(sorted({r.project for r in store.table(table)}))
    if "start_year" in names:
        v["start_year"], v["end_year"] = _sample_years(rng)
    if "start_month" in names:
        v["start_month"], v["end_month"] = _sample_months(rng)
    return v


def generate_source_slide(theme_id: int, subtemplate_id: int, rng: random.Random,
                          store: datastore.InMemoryStore,
                          pk: packmod.TemplatePack) -> tuple[SlideDocument, SlideMetadata]:
    """Instantiate one sub-template into a fully rendered source slide."""
    st = render.get_subtemplate(subtemplate_id)
    if st.theme_id != theme_id:
        raise errors.UnknownSubtemplate(
            f"sub-template {subtemplate_id} not in theme {theme_id}")
    theme = pk.theme(theme_id)
    function_id = rng.choice(list(theme.functions))
    fn = stats.get_function(function_id)
    market = theme.market or rng.choice(list(datastore.MARKET_TYPES))
    cities = sorted({datastore.parse_table_name(t)[1] for t in store.table_names
                     if t.startswith(market + "-")})
    table = datastore.table_name(market, rng.choice(cities))
    variables = _sample_variables(fn, table, rng, store, pk)
    params = packmod.sample_parameters(function_id, rng, pk)
    slide_filters = FilterSet(table_name=table, variables=variables,
                              function_id=function_id, params=params)
    template_ids = {
        "title": rng.choice(pk.titles_for(theme_id)).id,
        "caption": rng.choice(pk.captions_for(function_id)).id,
        "summary": rng.choice(pk.summaries_for(function_id)).id,
    }
    aliases = {m: packmod.select_header_alias(m, rng, pk) for m in fn.metric_headers}
    contents = compute_contents(slide_filters, template_ids, aliases, store, pk,
                                st.chart_type)
    doc = _assemble(theme_id, subtemplate_id, contents)
    slots = []
    for e in doc.elements:
        template_id = {
            "title": template_ids["title"],
            "caption": template_ids["caption"],
            "summary": template_ids["summary"],
            "table_body": function_id,
            "chart_body": function_id,
        }[e.role]
        slot_aliases = aliases if e.role in ("table_body", "chart_body") else None
        slots.append(TemplateSlot(role=e.role, layout=e.layout,
                                  template_id=template_id, aliases=slot_aliases))
    metadata = SlideMetadata(slide_filters=slide_filters, template_slide=tuple(slots))
    return doc, metadata


def _assemble(theme_id: int, subtemplate_id: int,
              contents: SlideContents) -> SlideDocument:
    st = render.get_subtemplate(subtemplate_id)
    doc = render.create_slide(theme_id, subtemplate_id)
    doc = render.add_title(doc, contents.title)
    doc = render.add_text(doc, contents.caption, "caption")
    if st.kind in ("table", "table_chart"):
        doc = render.add_table(doc, contents.table)
    if st.kind in ("chart", "table_chart"):
        if st.chart_type == "bar":
            doc = render.add_bar_chart(doc, contents.chart)
        else:
            doc = render.add_line_chart(doc, contents.chart)
    doc = render.add_text(doc, contents.summary, "summary")
    return core.validate_slide(doc)


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------

def _applicable_instructions(pk: packmod.TemplatePack, fn: stats.StatFunction,
                             scenario: str) -> list[packmod.TextTemplate]:
    allowed = set(pk.function_variables[fn.id]) | set(fn.candidate_params)
    out = []
    for t in pk.instructions:
        if t.scenario != scenario:
            continue
        if not set(t.changes) <= allowed:
            continue
        # a city move must restate the block when the function is block-scoped
        if "city" in t.changes and "block" in pk.function_variables[fn.id] \
                and "block" not in t.changes:
            continue
        out.append(t)
    return out


def _sample_changes(template: packmod.TextTemplate, metadata: SlideMetadata,
                    rng: random.Random, store: datastore.InMemoryStore) -> dict:
    """Sample new values for every variable/parameter the template changes."""
    fs = metadata.slide_filters
    market, old_city = datastore.parse_table_name(fs.table_name)
    variables: dict = {}
    params: dict = {}
    changes = set(template.changes)
    table = fs.table_name
    if "city" in changes:
        cities = sorted({datastore.parse_table_name(t)[1] for t in store.table_names
                         if t.startswith(market + "-")})
        options = [c for c in cities if c != old_city] or cities
        variables["city"] = rng.choice(options)
        table = datastore.table_name(market, variables["city"])
    if "block" in changes:
        blocks = store.blocks(table)
        old = fs.variables.get("block")
        options = [b for b in blocks if b != old] or blocks
        variables["block"] = rng.choice(options)
    if "start_year" in changes:
        old = (fs.variables.get("start_year"), fs.variables.get("end_year"))
        for _ in range(8):
            pair = _sample_years(rng)
            if pair != old:
                break
        variables["start_year"], variables["end_year"] = pair
    if "start_month" in changes:
        old = (fs.variables.get("start_month"), fs.variables.get("end_month"))
        for _ in range(8):
            pair = _sample_months(rng)
            if pair != old:
                break
        variables["start_month"], variables["end_month"] = pair
    for p in ("area_bin_step", "price_bin_step"):
        if p in changes:
            candidates = [c for c in stats.PARAMETER_CANDIDATES[p]
                          if c != fs.params.get(p)]
            params[p] = rng.choice(candidates)
    query: dict = {}
    if variables:
        query["variables"] = variables
    if params:
        query["params"] = params
    return query


def generate_instruction(metadata: SlideMetadata, scenario: str,
                         rng: random.Random, store: datastore.InMemoryStore,
                         pk: packmod.TemplatePack) -> tuple[str, dict]:
    """Sample an instruction template and synchronized query_filters."""
    if scenario not in ("basic", "customized"):
        raise errors.NoApplicableTemplate(f"unknown scenario: {scenario}")
    fn = stats.get_function(metadata.slide_filters.function_id)
    candidates = _applicable_instructions(pk, fn, scenario)
    if not candidates:
        raise errors.NoApplicableTemplate(
            f"no {scenario} template applies to {fn.id}")
    template = rng.choice(candidates)
    query = _sample_changes(template, metadata, rng, store)
    fill = {**query.get("variables", {}), **query.get("params", {})}
    text = packmod.instantiate_text(template, fill)
    return text, query


# ---------------------------------------------------------------------------
# Target slides
# ---------------------------------------------------------------------------

def generate_target_slide(source_doc: SlideDocument, metadata: SlideMetadata,
                          store: datastore.InMemoryStore,
                          pk: packmod.TemplatePack,
                          output_slide: str | None = None
                          ) -> tuple[SlideDocument, SlideMetadata]:
    """Recompute content from update_filters and repopulate the source layout."""
    if metadata.update_filters is None:
        raise errors.DynaSlideError("metadata lacks update_filters")
    st = render.get_subtemplate(source_doc.subtemplate_id)
    template_ids = {s.role: s.template_id for s in metadata.template_slide}
    aliases = {}
    for s in metadata.template_slide:
        if s.aliases:
            aliases = dict(s.aliases)
            break
    contents = compute_contents(metadata.update_filters, template_ids, aliases,
                                store, pk, st.chart_type)
    new_contents: dict = {
        "title": contents.title,
        "caption": contents.caption,
        "summary": contents.summary,
    }
    if st.kind in ("table", "table_chart"):
        new_contents["table_body"] = contents.table
    if st.kind in ("chart", "table_chart"):
        new_contents["chart_body"] = contents.chart
    target = render.repopulate(source_doc, new_contents)
    out_meta = replace(metadata, output_slide=output_slide)
    return core.validate_slide(target), out_meta


# ---------------------------------------------------------------------------
# Dataset build and splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Triple:
    id: str
    theme_id: int
    subtemplate_id: int
    function_id: str
    scenario: str
    instruction: str
    source: SlideDocument
    target: SlideDocument
    metadata: SlideMetadata


@dataclass(frozen=True)
class Dataset:
    triples: tuple[Triple, ...]
    manifest: dict

    def split_ids(self, split: str) -> list[str]:
        return list(self.manifest["splits"][split])

    def by_id(self, triple_id: str) -> Triple:
        for t in self.triples:
            if t.id == triple_id:
                return t
        raise KeyError(triple_id)


# probability that a parameter-capable slide receives a customized
# instruction; with the shipped theme mix this lands near the 65/35 default
CUSTOMIZED_PROB = 0.95


def build_dataset(n_triples: int, store: datastore.InMemoryStore,
                  pk: packmod.TemplatePack, seed: int = 0,
                  ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> Dataset:
    """Generate n instruction-execution triples plus splits and a manifest."""
    if n_triples < 3:
        raise errors.InsufficientSubtemplates(
            "need at least 3 triples to form splits")
    rng = random.Random(datastore._derived_seed(seed, "bench"))
    subtemplate_ids = sorted(render.SUBTEMPLATES)
    triples: list[Triple] = []
    source_idx = 0
    while len(triples) < n_triples:
        st_id = subtemplate_ids[source_idx % len(subtemplate_ids)]
        theme_id = render.SUBTEMPLATES[st_id].theme_id
        source_idx += 1
        source_doc, source_meta = generate_source_slide(theme_id, st_id, rng, store, pk)
        fn = stats.get_function(source_meta.slide_filters.function_id)
        # per-slide instruction count: uniform 2-3 (recorded in the manifest)
        k = min(rng.randint(2, 3), n_triples - len(triples))
        for _ in range(k):
            if fn.candidate_params and rng.random() < CUSTOMIZED_PROB:
                scenario = "customized"
            else:
                scenario = "basic"
            triple = None
            for _attempt in range(20):
                try:
                    text, query = generate_instruction(source_meta, scenario, rng, store, pk)
                    update = merge_filters(source_meta.slide_filters, query)
                    tid = f"t{len(triples) + 1:05d}"
                    meta = replace(source_meta, query_filters=query, update_filters=update)
                    target_doc, meta = generate_target_slide(
                        source_doc, meta, store, pk, output_slide=f"{tid}_target")
                    triple = Triple(
                        id=tid, theme_id=theme_id, subtemplate_id=st_id,
                        function_id=fn.id, scenario=scenario, instruction=text,
                        source=source_doc, target=target_doc, metadata=meta)
                    break
                except errors.DynaSlideError:
                    continue
            if triple is None:
                raise errors.DynaSlideError(
                    f"could not generate a valid {scenario} instruction for {fn.id}")
            triples.append(triple)
            if len(triples) >= n_triples:
                break
    split_lists = split_dataset(triples, ratios)
    manifest = _build_manifest(triples, split_lists, seed, pk, ratios)
    return Dataset(triples=tuple(triples), manifest=manifest)


def split_dataset(triples: list, ratios: tuple[float, float, float]
                  ) -> tuple[list[str], list[str], list[str]]:
    """Assign whole sub-template groups to train/validation/test.

    Proportional-fill greedy over groups sorted by size, then a single-move
    refinement pass; sub-templates never straddle splits.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise errors.DynaSlideError("split ratios must sum to 1")
    groups: dict[int, list[str]] = {}
    for t in triples:
        groups.setdefault(t.subtemplate_id, []).append(t.id)
    if len(groups) < 3:
        raise errors.TooFewSubtemplates(f"{len(groups)} sub-templates present")
    n = sum(len(v) for v in groups.values())
    targets = [r * n for r in ratios]
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    assignment: dict[int, int] = {}
    sizes = [0.0, 0.0, 0.0]
    for st_id, ids in ordered:
        fill = [sizes[i] / targets[i] if targets[i] else float("inf") for i in range(3)]
        bin_idx = fill.index(min(fill))
        assignment[st_id] = bin_idx
        sizes[bin_idx] += len(ids)

    def deviation() -> float:
        return sum(abs(sizes[i] - targets[i]) for i in range(3))

    improved = True
    while improved:
        improved = False
        for st_id, ids in ordered:
            current = assignment[st_id]
            if len([s for s in assignment.values() if s == current]) <= 1:
                continue  # never empty a split
            best = (deviation(), current)
            for alt in range(3):
                if alt == current:
                    continue
                sizes[current] -= len(ids)
                sizes[alt] += len(ids)
                d = deviation()
                if d < best[0] - 1e-9:
                    best = (d, alt)
                sizes[alt] -= len(ids)
                sizes[current] += len(ids)
            if best[1] != current:
                sizes[current] -= len(ids)
                sizes[best[1]] += len(ids)
                assignment[st_id] = best[1]
                improved = True
    out: tuple[list[str], list[str], list[str]] = ([], [], [])
    for t in triples:
        out[assignment[t.subtemplate_id]].append(t.id)
    return out


def _build_manifest(triples, split_lists, seed, pk, ratios) -> dict:
    per_theme: dict[str, int] = {}
    per_function: dict[str, int] = {}
    per_scenario: dict[str, int] = {}
    for t in triples:
        per_theme[str(t.theme_id)] = per_theme.get(str(t.theme_id), 0) + 1
        per_function[t.function_id] = per_function.get(t.function_id, 0) + 1
        per_scenario[t.scenario] = per_scenario.get(t.scenario, 0) + 1
    return {
        "format_version": core.FORMAT_VERSION,
        "seed": seed,
        "pack_version": pk.pack_version,
        "n_triples": len(triples),
        "ratios": list(ratios),
        "counts": {
            "per_theme": dict(sorted(per_theme.items())),
            "per_function": dict(sorted(per_function.items())),
            "per_scenario": dict(sorted(per_scenario.items())),
        },
        "splits": {
            "train": split_lists[0],
            "validation": split_lists[1],
            "test": split_lists[2],
        },
        "split_sizes": [len(s) for s in split_lists],
        "decisions": {
            "instructions_per_slide": "uniform 2-3 per source slide",
            "scenario_rule": "customized whenever the sampled function has "
                             f"tunable parameters (p={CUSTOMIZED_PROB}), basic otherwise",
        },
        "triples": [
            {
                "id": t.id,
                "theme_id": t.theme_id,
                "subtemplate_id": t.subtemplate_id,
                "function_id": t.function_id,
                "scenario": t.scenario,
                "instruction": t.instruction,
                "source_slide": f"slides/{t.id}_source.json",
                "target_slide": f"slides/{t.id}_target.json",
                "metadata": f"metadata/{t.id}.yaml",
            }
            for t in triples
        ],
    }


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write slides/, charts/, metadata/, and manifest.json."""
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    (out / "charts").mkdir(exist_ok=True)
    (out / "metadata").mkdir(exist_ok=True)
    for t in dataset.triples:
        (out / "slides" / f"{t.id}_source.json").write_text(
            core.pretty_json(core.slide_to_dict(t.source)), encoding="utf-8")
        (out / "slides" / f"{t.id}_target.json").write_text(
            core.pretty_json(core.slide_to_dict(t.target)), encoding="utf-8")
        for kind, doc in (("source", t.source), ("target", t.target)):
            chart_el = doc.find("chart_body")
            if chart_el is not None and chart_el.payload is not None:
                svg = render.render_chart_svg(chart_el.payload, chart_el.layout)
                (out / "charts" / f"{t.id}_{kind}.svg").write_text(svg, encoding="utf-8")
        meta = core.metadata_to_dict(t.metadata)
        (out / "metadata" / f"{t.id}.yaml").write_text(
            yaml.safe_dump(meta, sort_keys=True, allow_unicode=True), encoding="utf-8")
    (out / "manifest.json").write_text(core.pretty_json(dataset.manifest),
                                       encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    triples = []
    for entry in manifest["triples"]:
        source = core.slide_from_dict(json.loads(
            (root / entry["source_slide"]).read_text(encoding="utf-8")))
        target = core.slide_from_dict(json.loads(
            (root / entry["target_slide"]).read_text(encoding="utf-8")))
        meta = core.metadata_from_dict(yaml.safe_load(
            (root / entry["metadata"]).read_text(encoding="utf-8")))
        triples.append(Triple(
            id=entry["id"], theme_id=entry["theme_id"],
            subtemplate_id=entry["subtemplate_id"],
            function_id=entry["function_id"], scenario=entry["scenario"],
            instruction=entry["instruction"], source=source, target=target,
            metadata=meta))
    return Dataset(triples=tuple(triples), manifest=manifest)
