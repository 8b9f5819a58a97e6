"""Template pack: the three dictionaries plus all text templates.

A pack is a directory holding ``dictionaries.(json|yaml)`` and
``templates.(json|yaml)``; the default pack ships inside the package.  Packs
are validated on load and immutable afterwards.
"""
from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import errors, stats
from .core import SCHEMA_FIELDS

PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

REQUIRED_VARIABLES = ("start_year", "end_year", "month", "city", "block", "project")
DERIVATIONS = ("direct", "year-of-date", "month-of-date")
CANONICAL_METRICS = (
    "supply volume", "trade volume", "area range counts", "price range counts",
    "total supply area", "total trade area", "avg price", "unit price",
    "area_range", "price_range",
)


@dataclass(frozen=True)
class TextTemplate:
    id: str
    kind: str  # title | caption | summary | instruction
    body: str
    function_id: str | None = None
    theme_id: int | None = None
    scenario: str | None = None  # basic | customized (instructions only)
    changes: tuple[str, ...] = ()

    def placeholders(self) -> list[str]:
        return PLACEHOLDER_RE.findall(self.body)


@dataclass(frozen=True)
class Theme:
    id: int
    name: str
    pack_defined: bool
    functions: tuple[str, ...]
    market: str | None = None


@dataclass(frozen=True)
class TemplatePack:
    pack_version: str
    field_mapping: dict  # variable -> {source_column, derivation}
    parameter_candidates: dict  # param -> tuple of candidates
    header_aliases: dict  # canonical metric -> tuple of alias strings
    themes: tuple[Theme, ...]
    function_variables: dict  # function id -> tuple of variable names
    titles: tuple[TextTemplate, ...]
    captions: tuple[TextTemplate, ...]
    summaries: tuple[TextTemplate, ...]
    instructions: tuple[TextTemplate, ...]

    def theme(self, theme_id: int) -> Theme:
        for t in self.themes:
            if t.id == theme_id:
                return t
        raise errors.PackError(f"unknown theme id: {theme_id}")

    def titles_for(self, theme_id: int) -> list[TextTemplate]:
        return [t for t in self.titles if t.theme_id == theme_id]

    def captions_for(self, function_id: str) -> list[TextTemplate]:
        return [t for t in self.captions if t.function_id == function_id]

    def summaries_for(self, function_id: str) -> list[TextTemplate]:
        return [t for t in self.summaries if t.function_id == function_id]

    def template(self, template_id: str) -> TextTemplate:
        for group in (self.titles, self.captions, self.summaries, self.instructions):
            for t in group:
                if t.id == template_id:
                    return t
        raise errors.PackError(f"unknown template id: {template_id}")


def _read_data_file(directory: Path, stem: str) -> dict:
    for suffix in (".json", ".yaml", ".yml"):
        p = directory / (stem + suffix)
        if p.exists():
            if suffix == ".json":
                return json.loads(p.read_text(encoding="utf-8"))
            import yaml

            return yaml.safe_load(p.read_text(encoding="utf-8"))
    raise errors.PackError(f"pack is missing {stem}.(json|yaml) in {directory}")


def load_pack(path: str | Path | None = None) -> TemplatePack:
    """Load and validate a template pack directory (default: shipped pack)."""
    if path is None:
        directory = Path(str(resources.files("dynaslide").joinpath("packdata/default")))
    else:
        directory = Path(path)
    dicts = _read_data_file(directory, "dictionaries")
    tmpl = _read_data_file(directory, "templates")

    themes = tuple(
        Theme(
            id=int(t["id"]),
            name=t["name"],
            pack_defined=bool(t.get("pack_defined", True)),
            functions=tuple(t["functions"]),
            market=t.get("market"),
        )
        for t in tmpl["themes"]
    )

    def load_group(kind: str) -> tuple[TextTemplate, ...]:
        key = {"title": "titles", "caption": "captions",
               "summary": "summaries", "instruction": "instructions"}[kind]
        out = []
        for t in tmpl[key]:
            out.append(TextTemplate(
                id=t["id"],
                kind=kind,
                body=t["body"],
                function_id=t.get("function_id"),
                theme_id=t.get("theme_id"),
                scenario=t.get("scenario"),
                changes=tuple(t.get("changes", ())),
            ))
        return tuple(out)

    pack = TemplatePack(
        pack_version=tmpl.get("pack_version", "unversioned"),
        field_mapping={k: dict(v) for k, v in dicts["field_mapping"].items()},
        parameter_candidates={k: tuple(v) for k, v in dicts["parameter_candidates"].items()},
        header_aliases={k: tuple(v) for k, v in dicts["header_aliases"].items()},
        themes=themes,
        function_variables={k: tuple(v["variables"]) for k, v in tmpl["functions"].items()},
        titles=load_group("title"),
        captions=load_group("caption"),
        summaries=load_group("summary"),
        instructions=load_group("instruction"),
    )
    validate_pack(pack)
    return pack


def validate_pack(pack: TemplatePack) -> TemplatePack:
    for var in REQUIRED_VARIABLES:
        if var not in pack.field_mapping:
            raise errors.PackError(f"field mapping missing required variable: {var}")
    for var, entry in pack.field_mapping.items():
        if entry.get("source_column") not in SCHEMA_FIELDS:
            raise errors.PackError(f"variable {var}: unknown source column")
        if entry.get("derivation") not in DERIVATIONS:
            raise errors.PackError(f"variable {var}: unknown derivation")
    for param, candidates in stats.PARAMETER_CANDIDATES.items():
        if tuple(pack.parameter_candidates.get(param, ())) != tuple(candidates):
            raise errors.PackError(f"candidate set for {param} must be {candidates}")
    for metric in CANONICAL_METRICS:
        aliases = pack.header_aliases.get(metric)
        if not aliases:
            raise errors.PackError(f"header aliases missing metric: {metric}")
    theme_ids = [t.id for t in pack.themes]
    if len(set(theme_ids)) != len(theme_ids):
        raise errors.PackError("duplicate theme ids")
    for theme in pack.themes:
        for fid in theme.functions:
            if fid not in stats.FUNCTIONS:
                raise errors.PackError(f"theme {theme.id} references unknown {fid}")
    known_placeholders = (
        set(pack.field_mapping)
        | set(stats.METRIC_KINDS)
        | set(pack.parameter_candidates)
    )
    for group in (pack.titles, pack.captions, pack.summaries, pack.instructions):
        for t in group:
            for name in t.placeholders():
                if name not in known_placeholders:
                    raise errors.PackError(f"template {t.id}: unresolvable placeholder {{{name}}}")
            if t.kind == "instruction" and t.scenario not in ("basic", "customized"):
                raise errors.PackError(f"instruction {t.id}: scenario must be basic|customized")
            if t.kind in ("caption", "summary") and t.function_id not in stats.FUNCTIONS:
                raise errors.PackError(f"template {t.id}: unknown function binding")
            if t.kind == "title" and t.theme_id not in theme_ids:
                raise errors.PackError(f"title {t.id}: unknown theme binding")
    for fid, variables in pack.function_variables.items():
        if fid not in stats.FUNCTIONS:
            raise errors.PackError(f"function variables for unknown {fid}")
        for var in variables:
            if var not in pack.field_mapping:
                raise errors.PackError(f"{fid}: variable {var} not in field mapping")
    return pack


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def resolve_variables(template_vars: list[str], bindings: dict,
                      pack: TemplatePack) -> dict:
    """Resolve template variables to concrete values via the field mapping.

    Date-typed bindings are reduced per the variable's derivation (year or
    month of the bound date); direct variables pass through.
    """
    resolved = {}
    for var in template_vars:
        if var not in pack.field_mapping:
            raise errors.UnknownVariable(var)
        if var not in bindings:
            raise errors.UnboundVariable(var)
        value = bindings[var]
        derivation = pack.field_mapping[var]["derivation"]
        if isinstance(value, dt.date):
            if derivation == "year-of-date":
                value = value.year
            elif derivation == "month-of-date":
                value = f"{value.year:04d}-{value.month:02d}"
        resolved[var] = value
    return resolved


def sample_parameters(function_id: str, rng, pack: TemplatePack | None = None) -> dict:
    """Draw the function's sampled parameters from their candidate sets."""
    fn = stats.get_function(function_id)
    candidates = pack.parameter_candidates if pack else stats.PARAMETER_CANDIDATES
    return {p: rng.choice(list(candidates[p])) for p in fn.candidate_params}


def select_header_alias(metric: str, rng, pack: TemplatePack) -> str:
    if metric not in pack.header_aliases:
        raise errors.UnknownMetric(metric)
    return rng.choice(list(pack.header_aliases[metric]))


def instantiate_text(template: TextTemplate | str, resolved: dict) -> str:
    """Substitute every placeholder; purely textual, no residual braces."""
    body = template.body if isinstance(template, TextTemplate) else template

    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in resolved:
            raise errors.UnboundPlaceholder(name)
        return str(resolved[name])

    return PLACEHOLDER_RE.sub(repl, body)
