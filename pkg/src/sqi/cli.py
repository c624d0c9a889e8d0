"""Command line entry point: ``sqi ask``, ``sqi eval`` and ``sqi cache``.

Settings resolve as flags > environment (``SQI_<NAME>``) > config file >
built-in defaults. Exit codes: 0 success, 1 error, 2 unparseable verdict
(``ask`` only).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backend import (
    Backend,
    CacheStore,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
)
from .constraints import default_constraints, load_constraint_spec
from .core import IllusionQuery, ImageRef, ParseStatus, SqiError
from .dispatch import default_rules, load_rules
from .evaluation import load_manifest, run_eval
from .pipeline import Mode, PipelineConfig, run_sqi, write_traces
from .tables import parse_tables

log = logging.getLogger("sqi")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNPARSEABLE = 2
ENV_PREFIX = "SQI_"
CACHE_MODES = ("off", "record", "replay")


class ConfigError(SqiError):
    pass


@dataclass(frozen=True)
class RunConfig:
    backend: str = "http"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "SQI_API_KEY"
    timeout: float = 60.0
    max_transport_retries: int = 3
    constraints: str | None = None
    dispatch_rules: str | None = None
    mode: str = Mode.SINGLE_PASS.value
    max_parse_retries: int = 1
    temperature: float = 0.0
    seed: int | None = None
    axioms_in_system: bool = False
    fallback_window: int = 200
    concurrency: int = 4
    cache_dir: str = ".sqi-cache"
    cache_mode: str = "off"
    out: str | None = None
    trace_dir: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = {
    "timeout": float,
    "temperature": float,
    "max_transport_retries": int,
    "max_parse_retries": int,
    "fallback_window": int,
    "concurrency": int,
    "seed": int,
    "axioms_in_system": bool,
}


def _coerce(name: str, value):
    if value is None:
        return None
    kind = _TYPES.get(name, str)
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(value, str) and value.strip().lower() in ("", "none", "null") and kind is not str:
        return None
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}") from None


def read_config_file(path: str | Path) -> dict:
    """Load a config file: JSON (e.g. an echoed effective-config.json) or table syntax."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    else:
        raw = {}
        for table in parse_tables(text, source=str(path)):
            if table.name != "run":
                raise ConfigError(f"{path}:{table.line}: unknown section [{table.name}]")
            raw.update(table.values)
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s) {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in raw.items()}


def read_env(environ: dict[str, str]) -> dict:
    values = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = _coerce(name, environ[key])
    return values


def resolve_config(
    flags: dict, environ: dict[str, str] | None = None, config_path: str | None = None
) -> RunConfig:
    environ = dict(os.environ if environ is None else environ)
    merged: dict = {}
    if config_path:
        merged.update(read_config_file(config_path))
    merged.update(read_env(environ))
    merged.update({k: _coerce(k, v) for k, v in flags.items() if k in _FIELDS})
    cfg = RunConfig(**merged)
    if cfg.cache_mode not in CACHE_MODES:
        raise ConfigError(f"cache_mode must be one of {', '.join(CACHE_MODES)}")
    Mode.parse(cfg.mode)
    return cfg


def pipeline_config(cfg: RunConfig, backend: Backend) -> PipelineConfig:
    return PipelineConfig(
        mode=Mode.parse(cfg.mode),
        max_parse_retries=cfg.max_parse_retries,
        backend_id=f"{backend_source_kind(cfg)}/{backend.model_name}",
        temperature=cfg.temperature,
        seed=cfg.seed,
        axioms_in_system=cfg.axioms_in_system,
        fallback_window=cfg.fallback_window,
    )


def backend_source_kind(cfg: RunConfig) -> str:
    return cfg.backend.partition(":")[0]


def build_backend(cfg: RunConfig) -> Backend:
    kind, _, arg = cfg.backend.partition(":")
    if kind == "scripted":
        model = cfg.model or "scripted"
        if cfg.cache_mode == "replay":
            return ReplayBackend(CacheStore(cfg.cache_dir), kind, model)
        if not arg:
            raise ConfigError("scripted backend needs a table: --backend scripted:<path.json>")
        live: Backend = ScriptedBackend.from_json(arg, model_name=model)
    elif kind == "http":
        model = arg or cfg.model
        if not model:
            raise ConfigError("http backend needs a model: --backend http:<model> or SQI_MODEL")
        if cfg.cache_mode == "replay":
            return ReplayBackend(CacheStore(cfg.cache_dir), kind, model)
        if not cfg.endpoint:
            raise ConfigError("http backend needs an endpoint (SQI_ENDPOINT or config 'endpoint')")
        live = HttpBackend(
            cfg.endpoint,
            model,
            api_key_env=cfg.api_key_env,
            timeout=cfg.timeout,
            max_transport_retries=cfg.max_transport_retries,
        )
    else:
        raise ConfigError(f"unknown backend {cfg.backend!r} (use http[:model] or scripted:<table>)")
    if cfg.cache_mode == "record":
        return RecordingBackend(live, CacheStore(cfg.cache_dir))
    return live


def _load_inputs(cfg: RunConfig):
    cs = load_constraint_spec(cfg.constraints) if cfg.constraints else default_constraints()
    rules = load_rules(cfg.dispatch_rules) if cfg.dispatch_rules else default_rules()
    return cs, rules


def _write_effective_config(cfg: RunConfig, out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective-config.json").write_text(cfg.to_json(), encoding="utf-8")


# --- commands ---------------------------------------------------------------


def cmd_ask(args: argparse.Namespace, cfg: RunConfig) -> int:
    image_path = Path(args.image)
    if not image_path.is_file():
        print(f"error: image not found: {image_path}", file=sys.stderr)
        return EXIT_ERROR
    query = IllusionQuery("ask", ImageRef.from_path(image_path), args.question)
    cs, rules = _load_inputs(cfg)
    backend = build_backend(cfg)
    try:
        result = run_sqi(query, cs, pipeline_config(cfg, backend), backend, rules)
    finally:
        backend.close()
    if cfg.out:
        _write_effective_config(cfg, cfg.out)
    if cfg.trace_dir:
        write_traces([result], cfg.trace_dir)
    trace = result.trace
    if args.show_trace:
        print(f"DECOMPOSITION: {trace.decomposition}")
        print(f"INITIAL: {trace.initial_judgment}")
        print(f"COUNTERFACTUAL: {trace.counterfactual}")
    verdict = result.verdict
    if verdict.parse_status is ParseStatus.UNPARSEABLE:
        print("FINAL: UNPARSEABLE")
        print("error: no yes/no verdict could be read from the model output", file=sys.stderr)
        return EXIT_UNPARSEABLE
    print(f"FINAL: {verdict.answer.value.upper()}")
    if verdict.parse_status is ParseStatus.RECOVERED:
        print("note: verdict recovered from malformed output", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    cs, rules = _load_inputs(cfg)
    backend = build_backend(cfg)
    out = cfg.out or "sqi-out"
    try:
        report = run_eval(
            manifest,
            cs,
            pipeline_config(cfg, backend),
            backend,
            rules,
            concurrency=cfg.concurrency,
            trace_dir=cfg.trace_dir,
        )
    finally:
        backend.close()
    report.write(out)
    _write_effective_config(cfg, out)
    print(f"wrote {out}/report.json, {out}/report.csv, {out}/summary.txt")
    print(report.summary_line())
    return EXIT_OK


def cmd_cache(args: argparse.Namespace, cfg: RunConfig) -> int:
    store = CacheStore(cfg.cache_dir)
    if not store.root.is_dir():
        print(f"error: cache directory not found: {store.root}", file=sys.stderr)
        return EXIT_ERROR
    if args.action == "ls":
        keys = store.keys()
        for key in keys:
            print(key)
        print(f"{len(keys)} entries")
        return EXIT_OK
    if args.action == "verify":
        bad = store.verify()
        if bad:
            for key, problem in bad:
                print(f"corrupt {key}: {problem}")
            return EXIT_ERROR
        print(f"ok, {len(store.keys())} entries")
        return EXIT_OK
    removed = store.gc()
    print(f"removed {len(removed)}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("run options")
    g.add_argument("--config", metavar="PATH", help="config file (table syntax or JSON)")
    g.add_argument(
        "--backend",
        metavar="SPEC",
        help="http[:MODEL] or scripted:TABLE.json (default: http)",
    )
    g.add_argument("--constraints", metavar="PATH", help="constraint spec file (default: bundled)")
    g.add_argument("--dispatch-rules", metavar="PATH", help="keyword rule file (default: bundled)")
    g.add_argument("--mode", metavar="MODE", help="single-pass (default) or multi-turn")
    g.add_argument("--concurrency", metavar="N", type=int, help="items in flight (default: 4)")
    g.add_argument("--cache-dir", metavar="DIR", help="record/replay cache (default: .sqi-cache)")
    cache = g.add_mutually_exclusive_group()
    cache.add_argument(
        "--record", dest="cache_mode", action="store_const", const="record",
        help="read through the cache, storing new responses",
    )
    cache.add_argument(
        "--replay", dest="cache_mode", action="store_const", const="replay",
        help="answer only from the cache; never touch the network",
    )
    g.add_argument("--out", metavar="DIR", help="output directory (eval default: sqi-out)")
    g.add_argument("--trace-dir", metavar="DIR", help="write per-item traces as JSON lines")
    g.add_argument("--temperature", metavar="T", type=float, help="sampling temperature (default: 0)")
    g.add_argument("--seed", metavar="N", type=int, help="backend sampling seed")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="sqi",
        description="Structured qualitative inference over a frozen vision-language model.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    ask = sub.add_parser("ask", parents=[common], help="answer one question about one image")
    ask.add_argument("image", help="png, jpeg or webp file")
    ask.add_argument("question")
    ask.add_argument("--show-trace", action="store_true", help="(ask) print the reasoning sections")

    ev = sub.add_parser("eval", parents=[common], help="score a JSON-lines manifest")
    ev.add_argument("manifest")

    cache = sub.add_parser("cache", parents=[common], help="inspect the record/replay cache")
    cache.add_argument("action", choices=("ls", "verify", "gc"))

    lines = ["flags:"]
    for flag, text in flag_registry(parser).items():
        lines.append(f"  {flag:<18} {text}")
    lines += [
        "",
        "environment: SQI_API_KEY (bearer token), SQI_ENDPOINT, and SQI_<SETTING> for any setting",
        "exit codes: 0 ok, 1 error, 2 unparseable verdict (ask)",
    ]
    parser.epilog = "\n".join(lines)
    return parser


def flag_registry(parser: argparse.ArgumentParser) -> dict[str, str]:
    """Every optional flag accepted by any subcommand, with its help text."""
    flags: dict[str, str] = {}
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        for sub in action.choices.values():
            for opt in sub._actions:  # noqa: SLF001
                for s in opt.option_strings:
                    if s.startswith("--") and s != "--help":
                        flags.setdefault(s, opt.help or "")
    return flags


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k in _FIELDS}
    try:
        cfg = resolve_config(flags, config_path=getattr(args, "config", None))
        handler = {"ask": cmd_ask, "eval": cmd_eval, "cache": cmd_cache}[args.command]
        return handler(args, cfg)
    except (SqiError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
