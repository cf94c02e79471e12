"""Command-line entry point: ingest, exclude, split, synth, run, eval, compare, subgroup, report."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .backends import Backend, BackendConfig, BackendError, ResponseCache
from .corpus import (
    Cohort,
    CorpusError,
    SplitAssignment,
    apply_exclusions,
    ingest_corpus,
    stratified_split,
    summarize_demographics,
    write_corpus,
)
from .features import FeatureEncoder, extract_features, train_svr
from .pipeline import EngineSpec, PromptTemplate, RunLockedError, default_template, load_manifest, load_predictions, run_cohort
from .report import forest_svg, metrics_row, metrics_table_csv, metrics_table_json
from .stats import (
    AXIS_ALIASES,
    METRIC_ALIASES,
    PairedOutcomes,
    align_arms,
    compare,
    covariates_from_cohort,
    forest_csv,
    forest_json,
    metric_report,
    subgroup_report,
)
from .synth import SynthConfig, generate_corpus
from .util import atomic_write_text, dump_json

logger = logging.getLogger("cope")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND, EXIT_PARTIAL = 0, 2, 3, 4, 5

DEFAULT_CONFIG: dict[str, Any] = {
    "paths": {"corpus": None, "split": None, "run_root": "runs", "cache_dir": ".cope-cache", "templates": {}},
    "backends": {"mock": {"kind": "mock", "model_name": "mock-oracle"}},
    "engine": {"concurrency": 4, "cache": True},
    "split": {"fraction": 0.2, "seed": 0},
    "stats": {"B": 10_000, "seed": 0, "q": 0.05},
    "subgroup": {"axes": ["sex", "evt", "note_length_quartile", "age_band"]},
    "svr": {"C": 1.0, "epsilon": 0.5, "epochs": 4000, "seed": 0},
    "synth": {"n": 200, "seed": 0, "noise_level": 0, "note_length_target": 400},
}

TEMPLATE_NAMES = ("reasoning", "extraction", "single_step")


class ConfigError(Exception):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(config: dict[str, Any], assignment: str) -> None:
    """Apply one ``section.key=value`` override; the value is read as a TOML literal, else as a string."""
    if "=" not in assignment:
        raise ConfigError([f"override {assignment!r} is not of the form key.path=value"])
    path, raw = assignment.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError([f"override {assignment!r} has an empty key"])
    node = config
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {assignment!r} descends into a non-table value"])
    node[keys[-1]] = _parse_value(raw.strip())


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict[str, Any]:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path, "rb") as fh:
                _merge(config, tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError([f"config file {path} does not exist"]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid TOML: {exc}"]) from None
    for item in overrides:
        apply_override(config, item)
    return config


def config_problems(config: Mapping[str, Any]) -> list[str]:
    """Every problem with ``config`` at once (an empty list means valid)."""
    problems = []
    unknown = set(config) - set(DEFAULT_CONFIG)
    if unknown:
        problems.append(f"unknown config sections: {sorted(unknown)}")

    def number(section: str, key: str, kind: type, lo: float | None = None, lo_open: bool = False, hi: float | None = None) -> None:
        value = config.get(section, {}).get(key)
        if isinstance(value, bool) or not isinstance(value, (int, float) if kind is float else int):
            problems.append(f"{section}.{key} must be {'a number' if kind is float else 'an integer'}, got {value!r}")
            return
        if lo is not None and (value <= lo if lo_open else value < lo):
            problems.append(f"{section}.{key} must be {'>' if lo_open else '>='} {lo}, got {value!r}")
        if hi is not None and value >= hi:
            problems.append(f"{section}.{key} must be < {hi}, got {value!r}")

    number("split", "fraction", float, 0, True, 1)
    number("split", "seed", int, 0)
    number("stats", "B", int, 100)
    number("stats", "seed", int, 0)
    number("stats", "q", float, 0, True, 1)
    number("engine", "concurrency", int, 1)
    number("svr", "C", float, 0, True)
    number("svr", "epsilon", float, 0)
    number("svr", "epochs", int, 1)
    number("svr", "seed", int, 0)
    number("synth", "n", int, 1)
    number("synth", "seed", int, 0)
    number("synth", "note_length_target", int, 1)
    if config.get("synth", {}).get("noise_level") not in (0, 1, 2):
        problems.append("synth.noise_level must be 0, 1 or 2")

    axes = config.get("subgroup", {}).get("axes")
    if not isinstance(axes, list) or not axes:
        problems.append("subgroup.axes must be a non-empty list")
    else:
        problems.extend(f"subgroup.axes: unknown axis {a!r}" for a in axes if a not in AXIS_ALIASES)

    backends = config.get("backends", {})
    if not isinstance(backends, Mapping):
        problems.append("backends must be a table of named backend configs")
    else:
        for name, spec in backends.items():
            if not isinstance(spec, Mapping):
                problems.append(f"backends.{name} must be a table")
                continue
            try:
                bc = BackendConfig.from_mapping(spec)
            except (TypeError, ValueError) as exc:
                problems.append(f"backends.{name}: {exc}")
                continue
            problems.extend(f"backends.{name}: {p}" for p in bc.problems())

    templates = config.get("paths", {}).get("templates", {}) or {}
    for name, path in templates.items():
        if name not in TEMPLATE_NAMES:
            problems.append(f"paths.templates: unknown template {name!r}")
        elif not Path(path).is_file():
            problems.append(f"paths.templates.{name}: file {path} does not exist")
    return problems


def _checked_config(args: argparse.Namespace, extra: Callable[[dict[str, Any]], list[str]] | None = None) -> dict[str, Any]:
    """Load and validate the config; ``extra`` adds command-specific checks to the same report."""
    config = load_config(args.config, args.set or [])
    problems = config_problems(config)
    if extra is not None:
        problems += extra(config)
    if problems:
        raise ConfigError(problems)
    return config


def _require_file(label: str, path: str | None, problems: list[str]) -> Path | None:
    if not path:
        problems.append(f"{label} is required")
        return None
    p = Path(path)
    if not p.is_file():
        problems.append(f"{label}: file {p} does not exist")
        return None
    return p


def _template(config: Mapping[str, Any], name: str) -> PromptTemplate:
    path = (config["paths"].get("templates") or {}).get(name)
    return PromptTemplate.from_file(path, name=name) if path else default_template(name)


# ---------------------------------------------------------------------------
# output helpers


def _emit(payload: Any) -> None:
    sys.stdout.write(dump_json(payload))


def _load_cohort(path: Path) -> Cohort:
    return ingest_corpus(path)


def _load_split(path: Path) -> SplitAssignment:
    try:
        return SplitAssignment.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"split file {path} is unreadable: {exc}") from None


def _run_dir(config: Mapping[str, Any], ref: str) -> Path:
    """A run reference is either a directory or a run name under ``paths.run_root``."""
    p = Path(ref)
    if p.is_dir():
        return p
    candidate = Path(config["paths"]["run_root"]) / ref
    if candidate.is_dir():
        return candidate
    raise DataError(f"no run directory found for {ref!r}")


def _outcomes(run_dir: Path) -> PairedOutcomes:
    if not (run_dir / "predictions.jsonl").exists():
        raise DataError(f"{run_dir} has no predictions.jsonl")
    outcomes = PairedOutcomes.from_predictions(load_predictions(run_dir))
    if len(outcomes) == 0:
        raise DataError(f"{run_dir} has no scored predictions with labels")
    return outcomes


def _covariates(run_dir: Path) -> dict[str, dict[str, Any]]:
    path = run_dir / "covariates.jsonl"
    if not path.exists():
        raise DataError(f"{run_dir} has no covariates.jsonl")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            out[row.pop("id")] = row
    return out


def _run_name(run_dir: Path) -> str:
    try:
        manifest = load_manifest(run_dir)
        return f"{run_dir.name} ({manifest.engine})" if manifest.engine != run_dir.name else run_dir.name
    except FileNotFoundError:
        return run_dir.name


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args: argparse.Namespace) -> int:
    cohort = ingest_corpus(args.corpus, format=args.format)
    if args.out:
        write_corpus(cohort, args.out)
    _emit({"n": len(cohort), "content_hash": cohort.content_hash, "out": args.out})
    return EXIT_OK


def cmd_exclude(args: argparse.Namespace) -> int:
    cohort = ingest_corpus(args.corpus)
    kept, report = apply_exclusions(cohort)
    write_corpus(kept, args.out)
    if args.report:
        atomic_write_text(args.report, report.to_json())
    _emit(report.to_dict())
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    config = _checked_config(args)
    fraction = args.fraction if args.fraction is not None else config["split"]["fraction"]
    seed = args.seed if args.seed is not None else config["split"]["seed"]
    cohort = ingest_corpus(args.corpus)
    try:
        split = stratified_split(cohort, fraction, seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    atomic_write_text(args.out, dump_json(split.to_dict()))
    table = summarize_demographics(cohort, split)
    if args.demographics:
        atomic_write_text(args.demographics, table.to_json())
    _emit({"exploration": len(split.exploration_ids), "test": len(split.test_ids), "seed": seed, "fraction": str(split.fraction)})
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = _checked_config(args)
    sc = config["synth"]
    cfg = SynthConfig(
        n=args.n if args.n is not None else sc["n"],
        seed=args.seed if args.seed is not None else sc["seed"],
        noise_level=args.noise if args.noise is not None else sc["noise_level"],
        note_length_target=sc["note_length_target"],
    )
    corpus = generate_corpus(cfg)
    corpus_path, ledger_path = corpus.write(args.out)
    _emit({"n": len(corpus.cohort), "corpus": str(corpus_path), "profiles": str(ledger_path), "content_hash": corpus.cohort.content_hash})
    return EXIT_OK


def _train_clinical_ml(config: Mapping[str, Any], train: Sequence[Any]) -> tuple[FeatureEncoder, Any]:
    labelled = [r for r in train if r.mrs_90d is not None]
    if len(labelled) < 2:
        raise DataError("clinical_ml needs at least 2 labelled training records")
    feats = [extract_features(r.note_text, r.structured_overrides) for r in labelled]
    encoder = FeatureEncoder().fit(feats)
    matrix = encoder.transform(feats)
    svr = config["svr"]
    model = train_svr(matrix, [r.mrs_90d for r in labelled], C=svr["C"], epsilon=svr["epsilon"], epochs=svr["epochs"], seed=svr["seed"])
    return encoder, model


def _run_problems(args: argparse.Namespace, config: Mapping[str, Any]) -> list[str]:
    problems: list[str] = []
    _require_file("corpus (--corpus or paths.corpus)", args.corpus or config["paths"]["corpus"], problems)
    if args.subset or args.engine == "clinical_ml":
        _require_file("split (--split or paths.split)", args.split or config["paths"]["split"], problems)
        if args.engine == "clinical_ml" and not args.subset:
            problems.append("clinical_ml needs --subset so that it trains on the other arm")
    if args.engine != "clinical_ml" and args.backend not in config["backends"]:
        problems.append(f"unknown backend {args.backend!r}; configured: {sorted(config['backends'])}")
    if args.concurrency is not None and args.concurrency < 1:
        problems.append("--concurrency must be >= 1")
    return problems


def cmd_run(args: argparse.Namespace) -> int:
    config = _checked_config(args, lambda c: _run_problems(args, c))
    corpus_path = Path(args.corpus or config["paths"]["corpus"])
    split_path = None
    if args.subset or args.engine == "clinical_ml":
        split_path = Path(args.split or config["paths"]["split"])
    backend = None
    backend_name = args.backend

    if args.engine != "clinical_ml":
        bc = BackendConfig.from_mapping(config["backends"][backend_name])
        if bc.kind == "http_chat" and bc.auth_token_env and not os.environ.get(bc.auth_token_env):
            logger.warning("environment variable %s is not set; requests go out without a bearer token", bc.auth_token_env)
        cache = ResponseCache(config["paths"]["cache_dir"]) if config["engine"].get("cache", True) else None
        backend = Backend(bc, cache=cache)

    cohort = _load_cohort(corpus_path)
    records = list(cohort)
    split = None
    if split_path is not None:
        split = _load_split(split_path)
        known = set(cohort.ids)
        stray = (split.exploration_ids | split.test_ids) - known
        if stray:
            raise DataError(f"split references {len(stray)} id(s) absent from the corpus, e.g. {sorted(stray)[0]!r}")
        if args.subset:
            records = list(cohort.subset(sorted(split.arm(args.subset))))

    run_dir = Path(args.out) if args.out else Path(config["paths"]["run_root"]) / args.engine
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.engine == "cope":
        spec = EngineSpec.cope(reasoning_template=_template(config, "reasoning"), extraction_template=_template(config, "extraction"))
    elif args.engine == "single_step":
        spec = EngineSpec.single_step(_template(config, "single_step"))
    else:
        other = "exploration" if args.subset == "test" else "test"
        train = list(cohort.subset(sorted(split.arm(other))))
        encoder, model = _train_clinical_ml(config, train)
        atomic_write_text(run_dir / "model.json", model.to_json())
        spec = EngineSpec(
            "clinical_ml",
            svr_model=model,
            encoder=encoder,
            model_info={"train_arm": other, "svr": dict(config["svr"]), "final_objective": model.final_objective},
        )

    covariates = covariates_from_cohort(records)
    atomic_write_text(
        run_dir / "covariates.jsonl",
        "".join(json.dumps({"id": k, **covariates[k]}, sort_keys=True) + "\n" for k in sorted(covariates)),
    )
    manifest = run_cohort(
        records,
        spec,
        backend,
        run_dir,
        concurrency=args.concurrency or config["engine"]["concurrency"],
        split_seed=split.seed if split else None,
        subset=args.subset,
        corpus={"path": str(corpus_path), "content_hash": cohort.content_hash},
    )
    _emit({"run_dir": str(run_dir), "run_id": manifest.run_id, "counts": manifest.counts, "lenient_parses": manifest.lenient_parses})
    counts = manifest.counts
    if counts["ok"] == manifest.n_records:
        return EXIT_OK
    if manifest.n_records and counts["backend_failed"] == manifest.n_records:
        return EXIT_BACKEND
    return EXIT_PARTIAL


def cmd_eval(args: argparse.Namespace) -> int:
    config = _checked_config(args)
    run_dir = _run_dir(config, args.run)
    outcomes = _outcomes(run_dir)
    report = metric_report(outcomes, B=config["stats"]["B"], seed=config["stats"]["seed"])
    payload = {"run": run_dir.name, **report.to_dict()}
    atomic_write_text(Path(args.out) if args.out else run_dir / "eval.json", dump_json(payload))
    _emit(payload)
    return EXIT_OK


def _family(text: str | None) -> list[str]:
    if not text:
        return ["mae", "acc", "within1_acc"]
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n.lower() not in METRIC_ALIASES]
    if bad:
        raise ConfigError([f"unknown metric {b!r} in --family" for b in bad])
    return names


def cmd_compare(args: argparse.Namespace) -> int:
    config = _checked_config(args)
    family = _family(args.family)
    dir_a, dir_b = _run_dir(config, args.a), _run_dir(config, args.b)
    a, b = _outcomes(dir_a), _outcomes(dir_b)
    a, b = align_arms(a, b)
    if len(a) < 2:
        raise DataError("the two runs share fewer than 2 scored patients")
    try:
        result = compare(
            a, b, family, B=config["stats"]["B"], seed=config["stats"]["seed"], q=config["stats"]["q"],
            model_a=_run_name(dir_a), model_b=_run_name(dir_b),
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    payload = {**result.to_dict(), "n_excluded_a": a.n_excluded, "n_excluded_b": b.n_excluded}
    if args.out:
        atomic_write_text(args.out, dump_json(payload))
    _emit(payload)
    return EXIT_OK


def _axes(config: Mapping[str, Any], text: str | None) -> list[str]:
    axes = [t.strip() for t in text.split(",") if t.strip()] if text else list(config["subgroup"]["axes"])
    bad = [a for a in axes if a not in AXIS_ALIASES]
    if bad:
        raise ConfigError([f"unknown subgroup axis {a!r}; choose from {sorted(AXIS_ALIASES)}" for a in bad])
    return [AXIS_ALIASES[a] for a in axes]


def cmd_subgroup(args: argparse.Namespace) -> int:
    config = _checked_config(args)
    axes = _axes(config, args.axes)
    run_dir = _run_dir(config, args.run)
    outcomes = _outcomes(run_dir)
    try:
        rows = subgroup_report(outcomes, _covariates(run_dir), axes, B=config["stats"]["B"], seed=config["stats"]["seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "forest.csv", forest_csv(rows))
    atomic_write_text(out / "forest.json", forest_json(rows))
    sys.stdout.write(forest_csv(rows))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = _checked_config(args)
    formats = {f.strip() for f in args.format.split(",") if f.strip()}
    bad = formats - {"csv", "json", "svg"}
    if bad:
        raise ConfigError([f"unknown report format {f!r}" for f in sorted(bad)])
    B, seed = config["stats"]["B"], config["stats"]["seed"]
    run_dirs = [_run_dir(config, r) for r in args.run]
    out = Path(args.out) if args.out else run_dirs[0] / "report"
    out.mkdir(parents=True, exist_ok=True)

    rows, written = [], []
    for run_dir in run_dirs:
        outcomes = _outcomes(run_dir)
        report = metric_report(outcomes, B=B, seed=seed)
        rows.append(metrics_row(_run_name(run_dir), report))
    # tabular outputs are always produced; svg is opt-in
    atomic_write_text(out / "metrics.csv", metrics_table_csv(rows))
    atomic_write_text(out / "metrics.json", metrics_table_json(rows, {"B": B, "seed": seed}))
    written += ["metrics.csv", "metrics.json"]

    axes = list(config["subgroup"]["axes"])
    for run_dir in run_dirs:
        suffix = "" if len(run_dirs) == 1 else f"_{run_dir.name}"
        outcomes = _outcomes(run_dir)
        try:
            forest = subgroup_report(outcomes, _covariates(run_dir), [AXIS_ALIASES[a] for a in axes], B=B, seed=seed)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        atomic_write_text(out / f"forest{suffix}.csv", forest_csv(forest))
        atomic_write_text(out / f"forest{suffix}.json", forest_json(forest))
        written += [f"forest{suffix}.csv", f"forest{suffix}.json"]
        if "svg" in formats:
            overall = float(abs(outcomes.y_pred - outcomes.y_true).mean())
            atomic_write_text(out / f"forest{suffix}.svg", forest_svg(forest, title=f"MAE by subgroup: {_run_name(run_dir)}", overall=overall))
            written.append(f"forest{suffix}.svg")
    _emit({"out": str(out), "files": written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cope", description="Two-step LLM outcome prediction and evaluation workbench.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. stats.B=2000")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate a corpus and optionally write it as normalized JSONL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("exclude", parents=[common], help="drop unlabeled records, then in-hospital deaths")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the exclusion report JSON here")
    p.set_defaults(func=cmd_exclude)

    p = sub.add_parser("split", parents=[common], help="stratified exploration/test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--demographics", help="write the per-arm demographics table JSON here")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=int, choices=[0, 1, 2])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="predict a cohort with one engine")
    p.add_argument("--engine", required=True, choices=["cope", "single_step", "clinical_ml"])
    p.add_argument("--backend", default="mock")
    p.add_argument("--subset", choices=["exploration", "test"])
    p.add_argument("--corpus")
    p.add_argument("--split")
    p.add_argument("--out", help="run directory (default: <run_root>/<engine>)")
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="metrics with bootstrap CIs for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="paired bootstrap tests between two runs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--family", help="comma-separated metrics forming the BH family (default mae,acc,within1_acc)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("subgroup", parents=[common], help="forest-plot table for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--axes", help="comma-separated: sex, evt, length, age")
    p.add_argument("--out", help="directory for forest.csv/json (default: the run directory)")
    p.set_defaults(func=cmd_subgroup)

    p = sub.add_parser("report", parents=[common], help="metric table and forest outputs from persisted runs")
    p.add_argument("--run", required=True, action="append", help="run directory or name; repeat for several models")
    p.add_argument("--format", default="csv,json", help="csv, json and/or svg (csv and json are always written)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(code: int, kind: str, message: str, problems: Sequence[str] = ()) -> int:
    payload: dict[str, Any] = {"error": kind, "message": message}
    if problems:
        payload["problems"] = list(problems)
    sys.stderr.write(json.dumps(payload, ensure_ascii=False) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config_error", str(exc), exc.problems)
    except RunLockedError as exc:
        return _fail(EXIT_CONFIG, "run_locked", str(exc))
    except BackendError as exc:
        return _fail(EXIT_BACKEND, "backend_error", str(exc))
    except CorpusError as exc:
        return _fail(EXIT_DATA, "data_error", str(exc), getattr(exc, "problems", ()))
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, "data_error", str(exc))
    except ValueError as exc:
        # remaining validation failures come from input content (bad ids, labels, sizes)
        return _fail(EXIT_DATA, "data_error", str(exc))


if __name__ == "__main__":
    sys.exit(main())
