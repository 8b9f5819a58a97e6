"""Command-line entry point: gen-data, build-bench, run-agent, evaluate,
validate.

Exit codes: 0 success, 1 validation failure, 2 usage error.  With --json,
errors are also emitted as one JSON object on stderr.  A flat
``dynaslide.toml``-style config file (``key = value`` lines, optional
``[command]`` sections) supplies defaults that explicit flags override.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import agent, bench, core, datastore, errors, evaluate, pack as packmod


def _fail(code: int, message: str, as_json: bool) -> int:
    if as_json:
        sys.stderr.write(json.dumps({"error": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"error: {message}\n")
    return code


# ---------------------------------------------------------------------------
# Config file
# ---------------------------------------------------------------------------

def parse_config(path: str | Path) -> dict:
    """Flat key = value config with optional [command] sections."""
    values: dict[str, dict] = {"": {}}
    section = ""
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            values.setdefault(section, {})
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise errors.InvalidConfig(f"malformed config line: {raw!r}")
        values[section][key.strip().replace("-", "_")] = _coerce(value.strip())
    return values


def _coerce(token: str):
    if token.startswith(("'", '"')) and token.endswith(token[0]) and len(token) >= 2:
        return token[1:-1]
    if token.lower() in ("true", "false"):
        return token.lower() == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def apply_config(args: argparse.Namespace, command: str) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    conf = parse_config(args.config)
    merged = {**conf.get("", {}), **conf.get(command, {})}
    for key, value in merged.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = datastore.CorpusConfig(
        seed=args.seed if args.seed is not None else 0,
        cities=tuple(args.cities.split(",")) if args.cities else datastore.DEFAULT_CITIES,
        blocks_per_city=args.blocks_per_city or 4,
        records_per_block=args.records_per_block or 600,
    )
    pairs = datastore.generate_synthetic_records(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datastore.dump_ndjson(pairs, str(out))
    if args.sql_script:
        datastore.dump_sql_script(pairs, args.sql_script)
    print(f"wrote {len(pairs)} records to {out}")
    return 0


def _load_store(data_path: str) -> datastore.InMemoryStore:
    pairs = datastore.load_ndjson(data_path)
    by_table: dict[str, list] = {}
    for name, rec in pairs:
        by_table.setdefault(name, []).append(rec)
    cleaned = []
    for name in sorted(by_table):
        for rec in datastore.clean_and_filter(by_table[name]):
            cleaned.append((name, rec))
    return datastore.InMemoryStore().load(cleaned)


def cmd_build_bench(args) -> int:
    store = _load_store(args.data)
    pk = packmod.load_pack(args.pack)
    dataset = bench.build_dataset(
        args.count if args.count is not None else 200, store, pk,
        seed=args.seed if args.seed is not None else 0)
    bench.save_dataset(dataset, args.out)
    sizes = dataset.manifest["split_sizes"]
    print(f"wrote {len(dataset.triples)} triples to {args.out} "
          f"(splits {sizes[0]}/{sizes[1]}/{sizes[2]})")
    return 0


def _make_provider(args, pk) -> agent.ModelProvider:
    if args.provider == "oracle":
        return agent.OracleProvider(pk)
    if args.provider == "replay":
        if not args.fixtures:
            raise errors.InvalidConfig("--fixtures is required for the replay provider")
        return agent.ReplayProvider(args.fixtures)
    if args.provider == "remote":
        return agent.RemoteProvider()
    raise errors.InvalidConfig(f"unknown provider: {args.provider}")


def cmd_run_agent(args) -> int:
    dataset = bench.load_dataset(args.bench)
    store = _load_store(args.data)
    pk = packmod.load_pack(args.pack)
    provider = _make_provider(args, pk)
    split = args.split or "test"
    ids = set(dataset.manifest["splits"][split])
    cases = [t for t in dataset.triples if t.id in ids]
    mode = args.mode or "closed"

    def run_one(triple):
        return triple.id, agent.run_pipeline(
            triple.source, triple.metadata, triple.instruction, store,
            provider, mode=mode, pk=pk)

    jobs = args.jobs or 1
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, cases))
    else:
        results = [run_one(t) for t in cases]

    out = Path(args.out)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    traces_by_case = {}
    for case_id, result in results:
        traces_by_case[case_id] = result.traces
        if result.output is not None:
            (out / "predictions" / f"{case_id}.json").write_text(
                core.pretty_json(core.slide_to_dict(result.output)), encoding="utf-8")
    agent.save_traces(traces_by_case, out / "traces.jsonl")
    (out / "run.json").write_text(core.pretty_json({
        "format_version": core.FORMAT_VERSION,
        "bench": str(args.bench),
        "split": split,
        "mode": mode,
        "provider": provider.provider_id,
        "cases": sorted(t.id for t in cases),
    }), encoding="utf-8")
    done = sum(1 for _, r in results if r.output is not None)
    print(f"ran {len(cases)} cases ({done} produced slides) -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = bench.load_dataset(args.gold)
    pred_dir = Path(args.pred)
    run_info = json.loads((pred_dir / "run.json").read_text(encoding="utf-8"))
    case_ids = run_info["cases"]
    mode = run_info["mode"]
    triples = [dataset.by_id(cid) for cid in case_ids]
    outputs = {}
    for cid in case_ids:
        p = pred_dir / "predictions" / f"{cid}.json"
        if p.exists():
            outputs[cid] = core.slide_from_dict(json.loads(p.read_text(encoding="utf-8")))
    traces = agent.load_traces(pred_dir / "traces.jsonl")
    scores = evaluate.score_cases(triples, outputs, mode)
    rep = evaluate.report(scores, {mode: traces})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(core.pretty_json(rep), encoding="utf-8")
    (out / "report.txt").write_text(evaluate.render_report_text(rep), encoding="utf-8")
    sr = rep["task_success_rate"][mode]["average"]
    print(f"task success rate ({mode}): {sr}")
    return 0


def cmd_validate(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise errors.DynaSlideError(f"no such file: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".ndjson" or path.name.endswith(".jsonl"):
        for i, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            row = json.loads(line)
            row = dict(row)
            row.pop("table", None)
            core.validate_record(core.record_from_dict(row))
        print(f"{path}: valid corpus dump")
        return 0
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if isinstance(data, dict) and "elements" in data:
        core.validate_slide(core.slide_from_dict(data))
        print(f"{path}: valid slide document")
        return 0
    if isinstance(data, dict) and "slide_filters" in data:
        meta = core.metadata_from_dict(data)
        if meta.update_filters is not None:
            merged = bench.merge_filters(meta.slide_filters, meta.query_filters or {})
            if merged != meta.update_filters:
                raise errors.DynaSlideError(
                    "update_filters is not merge(slide_filters, query_filters)")
        print(f"{path}: valid metadata document")
        return 0
    if isinstance(data, dict) and "triples" in data:
        if data.get("format_version") != core.FORMAT_VERSION:
            raise errors.DynaSlideError("manifest has wrong format_version")
        split_ids = [set(v) for v in data["splits"].values()]
        for i in range(len(split_ids)):
            for j in range(i + 1, len(split_ids)):
                if split_ids[i] & split_ids[j]:
                    raise errors.DynaSlideError("splits overlap")
        print(f"{path}: valid manifest")
        return 0
    raise errors.DynaSlideError("unrecognized artifact type")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynaslide")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable error JSON on stderr")
    parser.add_argument("--config", help="flat key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--cities", help="comma-separated city names")
    p.add_argument("--blocks-per-city", type=int, dest="blocks_per_city")
    p.add_argument("--records-per-block", type=int, dest="records_per_block")
    p.add_argument("--out", required=True)
    p.add_argument("--sql-script", dest="sql_script",
                   help="also emit a DDL+COPY script for external databases")

    p = sub.add_parser("build-bench", help="build an instruction-execution benchmark")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pack", help="template pack directory (default: shipped)")
    p.add_argument("--data", required=True, help="corpus ndjson from gen-data")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run-agent", help="run the update pipeline over a split")
    p.add_argument("--bench", required=True)
    p.add_argument("--data", required=True, help="corpus ndjson from gen-data")
    p.add_argument("--split", choices=["train", "validation", "test"])
    p.add_argument("--mode", choices=["closed", "open"])
    p.add_argument("--provider", default="oracle",
                   choices=["oracle", "replay", "remote"])
    p.add_argument("--fixtures", help="fixtures dir for the replay provider")
    p.add_argument("--pack")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", help="check an artifact file against its schema")
    p.add_argument("--path", required=True)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-bench": cmd_build_bench,
    "run-agent": cmd_run_agent,
    "evaluate": cmd_evaluate,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    args = apply_config(args, args.command)
    try:
        return COMMANDS[args.command](args)
    except errors.DynaSlideError as e:
        return _fail(1, str(e), args.json)
    except (OSError, json.JSONDecodeError, yaml.YAMLError, KeyError) as e:
        return _fail(1, f"{type(e).__name__}: {e}", args.json)


if __name__ == "__main__":
    sys.exit(main())
