"""Transaction corpus: synthetic generation, cleaning, storage, and queries.

The in-memory store is the reference engine; ``compile_sql`` emits an ANSI
subset (SELECT / WHERE / = / BETWEEN / AND) whose execution against a real
relational backend must agree with the in-memory results.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
import os
import random
from dataclasses import dataclass

from . import core, errors
from .core import SCHEMA_FIELDS, TransactionRecord

DEFAULT_CITIES = ("Beijing", "Guangzhou", "Shenzhen")
MARKET_TYPES = ("new", "resale")

# per-city unit price base (CNY/m^2) and yearly drift applied by the
# synthetic price model; drift keeps trend-direction metrics non-degenerate
CITY_UNIT_PRICE_BASE = {"Beijing": 62000.0, "Guangzhou": 34000.0, "Shenzhen": 58000.0}
DEFAULT_UNIT_PRICE_BASE = 30000.0

BLOCK_NAME_POOL = (
    "Liangxiang", "Changyang", "Dongcheng", "Haidian", "Chaoyang", "Fangshan",
    "Tianhe", "Yuexiu", "Panyu", "Haizhu", "Nanshan", "Futian", "Baoan",
    "Longgang", "Luohu", "Xicheng",
)

MIN_BLOCK_RECORDS = 500  # cleaning threshold: blocks below this are dropped


def table_name(market: str, city: str) -> str:
    return f"{market}-{city}"


def parse_table_name(name: str) -> tuple[str, str]:
    market, sep, city = name.partition("-")
    if not sep or market not in MARKET_TYPES or not city:
        raise errors.UnknownTable(name)
    return market, city


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    cities: tuple[str, ...] = DEFAULT_CITIES
    blocks_per_city: int = 4
    records_per_block: int = 600
    date_window: tuple[dt.date, dt.date] = core.DEFAULT_DATE_WINDOW
    market_types: tuple[str, ...] = MARKET_TYPES


def validate_config(cfg: CorpusConfig) -> CorpusConfig:
    if not cfg.cities:
        raise errors.InvalidConfig("cities must be non-empty")
    if cfg.records_per_block < 1:
        raise errors.InvalidConfig("records_per_block must be >= 1")
    if cfg.blocks_per_city < 1:
        raise errors.InvalidConfig("blocks_per_city must be >= 1")
    if cfg.date_window[0] > cfg.date_window[1]:
        raise errors.InvalidConfig("empty date window")
    for m in cfg.market_types:
        if m not in MARKET_TYPES:
            raise errors.InvalidConfig(f"unknown market type: {m}")
    return cfg


def _derived_seed(seed: int, *tags) -> int:
    raw = ":".join([str(seed)] + [str(t) for t in tags]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "big")


def _city_blocks(city: str, n: int) -> list[str]:
    # rotate the shared pool per city so block names differ between cities
    offset = sum(city.encode("utf-8")) % len(BLOCK_NAME_POOL)
    names = []
    for i in range(n):
        base = BLOCK_NAME_POOL[(offset + i) % len(BLOCK_NAME_POOL)]
        suffix = "" if (offset + i) < len(BLOCK_NAME_POOL) else " II"
        names.append(base + suffix)
    return names


def generate_synthetic_records(cfg: CorpusConfig) -> list[tuple[str, TransactionRecord]]:
    """Generate the full corpus as (table_name, record) pairs.

    Deterministic for a fixed seed; every record passes validate_record.
    """
    validate_config(cfg)
    lo, hi = cfg.date_window
    span_days = (hi - lo).days
    out: list[tuple[str, TransactionRecord]] = []
    for ci, city in enumerate(cfg.cities):
        blocks = _city_blocks(city, cfg.blocks_per_city)
        base_price = CITY_UNIT_PRICE_BASE.get(city, DEFAULT_UNIT_PRICE_BASE)
        for mi, market in enumerate(cfg.market_types):
            for bi, block in enumerate(blocks):
                rng = random.Random(_derived_seed(cfg.seed, ci, mi, bi))
                # block-level price posture: log-normal factor and drift slope
                block_factor = rng.lognormvariate(0.0, 0.18)
                drift = rng.uniform(-0.06, 0.10)  # yearly relative drift
                n_projects = rng.randint(3, 6)
                projects = [f"{block} Project {chr(65 + p)}" for p in range(n_projects)]
                for _ in range(cfg.records_per_block):
                    day = rng.randint(0, span_days)
                    date_code = lo + dt.timedelta(days=day)
                    years_in = date_code.year - lo.year
                    area = min(200.0, max(40.0, rng.lognormvariate(math.log(88.0), 0.30)))
                    unit = base_price * block_factor * (1.0 + drift * years_in)
                    unit *= rng.lognormvariate(0.0, 0.08)
                    unit = max(8000.0, unit)
                    price = area * unit / 1e4 * rng.uniform(0.995, 1.005)
                    rec = TransactionRecord(
                        city=city,
                        block=block,
                        project=projects[rng.randrange(n_projects)],
                        date_code=date_code,
                        supply_sets=rng.randint(0, 5),
                        trade_sets=rng.randint(0, 4),
                        dim_area=round(area, 2),
                        dim_price=round(price, 2),
                        dim_unit_price=round(unit, 2),
                    )
                    out.append((table_name(market, city),
                                core.validate_record(rec, cfg.date_window)))
    return out


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

def _normalize_name(name: str) -> str:
    return " ".join(name.split()).title()


def clean_and_filter(
    records: list[TransactionRecord],
    window: tuple[dt.date, dt.date] = core.DEFAULT_DATE_WINDOW,
    min_block_records: int = MIN_BLOCK_RECORDS,
) -> list[TransactionRecord]:
    """Drop invalid records, normalize names, drop sparse blocks (< threshold)."""
    kept: list[TransactionRecord] = []
    for r in records:
        try:
            normalized = TransactionRecord(
                city=_normalize_name(r.city or ""),
                block=_normalize_name(r.block or ""),
                project=" ".join((r.project or "").split()),
                date_code=r.date_code,
                supply_sets=r.supply_sets,
                trade_sets=r.trade_sets,
                dim_area=r.dim_area,
                dim_price=r.dim_price,
                dim_unit_price=r.dim_unit_price,
            )
            core.validate_record(normalized, window)
        except errors.DynaSlideError:
            continue
        kept.append(normalized)
    counts: dict[tuple[str, str], int] = {}
    for r in kept:
        key = (r.city, r.block)
        counts[key] = counts.get(key, 0) + 1
    return [r for r in kept if counts[(r.city, r.block)] >= min_block_records]


# ---------------------------------------------------------------------------
# In-memory store
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Predicate:
    field: str
    op: str  # "=" | "between"
    value: object  # scalar for "=", (lo, hi) for "between"


@dataclass(frozen=True)
class QuerySpec:
    table_name: str
    predicates: tuple[Predicate, ...]
    projection: tuple[str, ...]


def validate_query(spec: QuerySpec) -> QuerySpec:
    for p in spec.predicates:
        if p.field not in SCHEMA_FIELDS:
            raise errors.UnknownField(p.field)
        if p.op not in ("=", "between"):
            raise errors.UnknownOp(p.op)
    for f in spec.projection:
        if f not in SCHEMA_FIELDS:
            raise errors.UnknownField(f)
    return spec


class InMemoryStore:
    """Write-once table store with deterministic query results."""

    def __init__(self):
        self._tables: dict[str, list[TransactionRecord]] = {}
        self._index: dict[str, dict[tuple[str, str], list[TransactionRecord]]] = {}
        self._loaded = False

    def load(self, pairs: list[tuple[str, TransactionRecord]]) -> "InMemoryStore":
        if self._loaded:
            raise errors.DynaSlideError("store is write-once; already loaded")
        for name, rec in pairs:
            self._tables.setdefault(name, []).append(rec)
        for name, rows in self._tables.items():
            rows.sort(key=lambda r: (r.date_code, r.block, r.project))
            idx: dict[tuple[str, str], list[TransactionRecord]] = {}
            for r in rows:
                idx.setdefault((r.city, r.block), []).append(r)
            self._index[name] = idx
        self._loaded = True
        return self

    @property
    def table_names(self) -> list[str]:
        return sorted(self._tables)

    def table(self, name: str) -> list[TransactionRecord]:
        if name not in self._tables:
            raise errors.UnknownTable(name)
        return self._tables[name]

    def cities(self) -> list[str]:
        return sorted({r.city for rows in self._tables.values() for r in rows})

    def blocks(self, name: str) -> list[str]:
        return sorted({r.block for r in self.table(name)})


def build_store(cfg: CorpusConfig) -> InMemoryStore:
    """Generate, clean per table, and load a corpus in one step."""
    pairs = generate_synthetic_records(cfg)
    by_table: dict[str, list[TransactionRecord]] = {}
    for name, rec in pairs:
        by_table.setdefault(name, []).append(rec)
    cleaned = []
    for name in sorted(by_table):
        for rec in clean_and_filter(by_table[name], cfg.date_window):
            cleaned.append((name, rec))
    return InMemoryStore().load(cleaned)


def _matches(record: TransactionRecord, p: Predicate) -> bool:
    value = record.get(p.field)
    if p.op == "=":
        return value == p.value
    lo, hi = p.value
    return lo <= value <= hi


def execute_query(store: InMemoryStore, spec: QuerySpec) -> list[dict]:
    """Run a QuerySpec and return projected rows in deterministic order."""
    validate_query(spec)
    rows = store.table(spec.table_name)
    # equality on city/block can use the load-time hash index
    eq = {p.field: p.value for p in spec.predicates if p.op == "="}
    if "city" in eq and "block" in eq:
        rows = store._index[spec.table_name].get((eq["city"], eq["block"]), [])
    selected = [r for r in rows if all(_matches(r, p) for p in spec.predicates)]
    selected.sort(key=lambda r: (r.date_code, r.block, r.project))
    out = []
    for r in selected:
        row = {}
        for f in spec.projection:
            v = r.get(f)
            row[f] = v
        out.append(row)
    return out


def scan_oracle(records: list[TransactionRecord], spec: QuerySpec) -> list[dict]:
    """Independent linear-scan evaluation of a QuerySpec over raw records."""
    picked = []
    for r in records:
        ok = True
        for p in spec.predicates:
            v = r.get(p.field)
            if p.op == "=":
                ok = v == p.value
            elif p.op == "between":
                lo, hi = p.value
                ok = lo <= v <= hi
            else:
                raise errors.UnknownOp(p.op)
            if not ok:
                break
        if ok:
            picked.append(r)
    picked.sort(key=lambda r: (r.date_code, r.block, r.project))
    return [{f: r.get(f) for f in spec.projection} for r in picked]


# ---------------------------------------------------------------------------
# SQL compilation
# ---------------------------------------------------------------------------

def _logic_projection(logic) -> list[str]:
    """Columns a logic needs: source fields (derived measures expanded to
    base columns), constraint fields, then grouping-key base columns."""
    cols: list[str] = []

    def push(name: str):
        if name in core.DERIVED_MEASURE_FIELDS:
            for base in core.DERIVED_MEASURE_FIELDS[name]:
                push(base)
            return
        if name in ("year", "month"):
            name = "date_code"
        if name.endswith("_range"):
            # bin-label keys resolve to the binned base column
            stem = name[: -len("_range")]
            name = {"area": "dim_area", "price": "dim_price",
                    "unit_price": "dim_unit_price"}.get(stem, stem)
        if name not in SCHEMA_FIELDS:
            raise errors.UnknownField(name)
        if name not in cols:
            cols.append(name)

    if isinstance(logic, core.OpenLogic):
        for f in logic.F:
            push(f)
        for c in logic.C:
            push(c.k)
        group_axes = {
            "XC": list(logic.H_row) + list(logic.H_col),
            "CF": list(logic.H_row),
            "FC": list(logic.H_col),
        }[logic.S]
        for key in group_axes:
            push(key)
    else:
        # closed call: resolve through the function registry lazily to keep
        # datastore importable without the stats engine
        from . import stats

        return _logic_projection(stats.closed_to_open(logic.function_id, logic.params))
    return cols


def compile_sql(state: core.ParameterState,
                known_tables: set[str] | None = None) -> tuple[str, list]:
    """Compile a ParameterState into parameterized ANSI SQL.

    One SELECT over the state's table; one WHERE clause per non-null slot
    (= for scalars, BETWEEN for ranges); projection covers exactly what the
    logic needs.  Text is deterministic for identical states.
    """
    core.validate_state(state)
    if known_tables is not None and state.table_name not in known_tables:
        raise errors.UnknownTable(state.table_name)
    for name in state.slots:
        if name not in SCHEMA_FIELDS:
            raise errors.UnknownField(name)
    projection = _logic_projection(state.logic)
    if not projection:
        raise errors.EmptyProjection("logic projects no columns")
    clauses = []
    params: list = []
    for name in SCHEMA_FIELDS:
        v = state.slots.get(name)
        if v is None:
            continue
        if isinstance(v, tuple):
            clauses.append(f"{name} BETWEEN ? AND ?")
            params.extend([_sql_value(v[0]), _sql_value(v[1])])
        else:
            clauses.append(f"{name} = ?")
            params.append(_sql_value(v))
    sql = f'SELECT {", ".join(projection)} FROM "{state.table_name}"'
    if clauses:
        sql += " WHERE " + " AND ".join(clauses)
    return sql, params


def _sql_value(v):
    if isinstance(v, dt.date):
        return v.isoformat()
    return v


def state_to_query(state: core.ParameterState) -> QuerySpec:
    """The QuerySpec equivalent of compile_sql for the in-memory engine."""
    predicates = []
    for name in SCHEMA_FIELDS:
        v = state.slots.get(name)
        if v is None:
            continue
        if isinstance(v, tuple):
            predicates.append(Predicate(field=name, op="between", value=v))
        else:
            predicates.append(Predicate(field=name, op="=", value=v))
    return QuerySpec(
        table_name=state.table_name,
        predicates=tuple(predicates),
        projection=tuple(_logic_projection(state.logic)),
    )


# ---------------------------------------------------------------------------
# Dump / load and the external backend
# ---------------------------------------------------------------------------

def dump_ndjson(pairs: list[tuple[str, TransactionRecord]], path: str) -> None:
    """Write the corpus as newline-delimited JSON, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, rec in pairs:
            row = {"table": name, **core.record_to_dict(rec)}
            fh.write(core.canonical_json(row) + "\n")


def load_ndjson(path: str) -> list[tuple[str, TransactionRecord]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            pairs.append((row["table"], core.record_from_dict(row)))
    return pairs


DDL_COLUMNS = (
    "city TEXT NOT NULL",
    "block TEXT NOT NULL",
    "project TEXT NOT NULL",
    "date_code TEXT NOT NULL",
    "supply_sets INTEGER NOT NULL",
    "trade_sets INTEGER NOT NULL",
    "dim_area REAL NOT NULL",
    "dim_price REAL NOT NULL",
    "dim_unit_price REAL NOT NULL",
)


def dump_sql_script(pairs: list[tuple[str, TransactionRecord]], path: str) -> None:
    """Emit a DDL + COPY script for loading the corpus into a SQL server."""
    by_table: dict[str, list[TransactionRecord]] = {}
    for name, rec in pairs:
        by_table.setdefault(name, []).append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(by_table):
            fh.write(f'CREATE TABLE "{name}" ({", ".join(DDL_COLUMNS)});\n')
        for name in sorted(by_table):
            fh.write(f'COPY "{name}" ({", ".join(SCHEMA_FIELDS)}) FROM stdin;\n')
            for rec in by_table[name]:
                d = core.record_to_dict(rec)
                fh.write("\t".join(str(d[f]) for f in SCHEMA_FIELDS) + "\n")
            fh.write("\\.\n")


class ExternalBackend:
    """Thin SQL-over-wire client for parity checks against a real server.

    ``sqlite://:memory:`` (or ``sqlite:///path``) uses the stdlib driver;
    ``postgres://...`` URLs use psycopg2 when installed.  The in-memory
    engine stays the reference and default.
    """

    def __init__(self, url: str):
        self.url = url
        if url.startswith("sqlite:"):
            import sqlite3

            target = url[len("sqlite:"):].lstrip("/") or ":memory:"
            if url == "sqlite://:memory:":
                target = ":memory:"
            self._conn = sqlite3.connect(target)
            self._paramstyle = "?"
        elif url.startswith(("postgres://", "postgresql://")):
            try:
                import psycopg2  # type: ignore
            except ImportError as e:  # pragma: no cover - optional driver
                raise errors.InvalidConfig("psycopg2 required for postgres URLs") from e
            self._conn = psycopg2.connect(url)
            self._paramstyle = "%s"
        else:
            raise errors.InvalidConfig(f"unsupported database URL: {url}")

    def load(self, pairs: list[tuple[str, TransactionRecord]]) -> "ExternalBackend":
        cur = self._conn.cursor()
        tables = sorted({name for name, _ in pairs})
        for name in tables:
            cur.execute(f'CREATE TABLE "{name}" ({", ".join(DDL_COLUMNS)})')
        placeholders = ", ".join([self._paramstyle] * len(SCHEMA_FIELDS))
        for name, rec in pairs:
            d = core.record_to_dict(rec)
            cur.execute(
                f'INSERT INTO "{name}" ({", ".join(SCHEMA_FIELDS)}) VALUES ({placeholders})',
                [d[f] for f in SCHEMA_FIELDS],
            )
        self._conn.commit()
        return self

    def execute(self, sql: str, params: list) -> list[tuple]:
        if self._paramstyle != "?":
            sql = sql.replace("?", self._paramstyle)
        cur = self._conn.cursor()
        cur.execute(sql, params)
        return cur.fetchall()

    def close(self):
        self._conn.close()


def external_backend_from_env() -> ExternalBackend | None:
    url = os.environ.get("DYNASLIDE_DB_URL")
    return ExternalBackend(url) if url else None
