"""Command-line entry point: ``generate``, ``validate``, ``agreement``, ``report``.

Exit codes: 0 success, 1 domain failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import analytics as an
from .agents import GenerationSpec, load_templates
from .backend import HttpChatBackend, HttpImageBackend, StubImageBackend
from .mock import MockBackend, MockScript
from .pipeline import Backends, IoError, PipelineConfig, run_batch, validate_bundle
from .schema import ParseError, SchemaError, StageMismatch, deserialize_bundle

log = logging.getLogger("ecdmas")

# fixed timestamp for mock runs so repeated runs are byte-identical
MOCK_EPOCH = "1970-01-01T00:00:00Z"

_ALLOWED_KEYS: dict[str, set[str]] = {
    "": {"backend", "image", "pipeline", "prompts_dir", "rubric"},
    "backend": {"kind", "endpoint", "model", "request_template", "response_path", "temperature",
                "timeout_s", "mock_mode", "mock_seed"},
    "image": {"kind", "endpoint", "request_template", "timeout_s"},
    "pipeline": {"max_attempts", "seed", "output_dir", "workers", "created_at"},
}


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    backend: dict[str, Any] = field(default_factory=lambda: {"kind": "mock"})
    image: dict[str, Any] = field(default_factory=lambda: {"kind": "stub"})
    pipeline: dict[str, Any] = field(default_factory=dict)
    prompts_dir: Path | None = None
    rubric: Path | None = None


def _find_secret(node: Any, path: str = "") -> str | None:
    if isinstance(node, dict):
        for k, v in node.items():
            here = f"{path}.{k}" if path else k
            if k.lower() in ("api_key", "apikey", "api-key"):
                return here
            hit = _find_secret(v, here)
            if hit:
                return hit
    elif isinstance(node, list):
        for i, v in enumerate(node):
            hit = _find_secret(v, f"{path}[{i}]")
            if hit:
                return hit
    return None


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    secret = _find_secret(data)
    if secret:
        raise ConfigError(f"config key {secret!r} is not allowed: pass secrets through the "
                          f"ECD_LLM_API_KEY / ECD_IMAGE_API_KEY environment variables")
    for section, allowed in _ALLOWED_KEYS.items():
        node = data if not section else data.get(section, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(node) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys in {section or 'top level'}: {sorted(unknown)}")
    base = path.parent
    cfg = AppConfig(
        backend={"kind": "mock", **data.get("backend", {})},
        image={"kind": "stub", **data.get("image", {})},
        pipeline=dict(data.get("pipeline", {})),
    )
    for key in ("prompts_dir", "rubric"):
        if key in data:
            p = Path(data[key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ConfigError(f"{key} path {p} does not exist")
            setattr(cfg, key, p)
    if "output_dir" in cfg.pipeline and not Path(cfg.pipeline["output_dir"]).is_absolute():
        cfg.pipeline["output_dir"] = str(base / cfg.pipeline["output_dir"])
    return cfg


def build_backends(cfg: AppConfig) -> Backends:
    b = cfg.backend
    if b["kind"] == "mock":
        script = MockScript.parse(str(b.get("mock_mode", "pass_all")), int(b.get("mock_seed", 0)))
        text = MockBackend(script)
    elif b["kind"] == "http":
        if "endpoint" not in b or "model" not in b:
            raise ConfigError("backend.kind=http needs backend.endpoint and backend.model")
        kwargs: dict[str, Any] = {"timeout": float(b.get("timeout_s", 60))}
        if "request_template" in b:
            kwargs["request_template"] = b["request_template"]
        if "response_path" in b:
            kwargs["response_path"] = b["response_path"]
        text = HttpChatBackend(b["endpoint"], b["model"], **kwargs)
    else:
        raise ConfigError(f"backend.kind must be mock or http, got {b['kind']!r}")
    im = cfg.image
    if im["kind"] == "stub":
        image = StubImageBackend()
    elif im["kind"] == "http":
        if "endpoint" not in im:
            raise ConfigError("image.kind=http needs image.endpoint")
        image = HttpImageBackend(im["endpoint"], request_template=im.get("request_template"),
                                 timeout=float(im.get("timeout_s", 120)))
    else:
        raise ConfigError(f"image.kind must be stub or http, got {im['kind']!r}")
    return Backends(text, image)


def _created_at(cfg: AppConfig) -> str | None:
    if "created_at" in cfg.pipeline:
        return cfg.pipeline["created_at"]
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    if cfg.backend["kind"] == "mock":
        return MOCK_EPOCH
    return None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
        if args.mock_mode:
            cfg.backend["mock_mode"] = args.mock_mode
        backends = build_backends(cfg)
        p = cfg.pipeline
        seed = args.seed if args.seed is not None else int(p.get("seed", 0))
        out = args.out if args.out is not None else Path(p.get("output_dir", "out"))
        config = PipelineConfig(
            max_attempts=args.max_attempts or int(p.get("max_attempts", 3)),
            seed=seed,
            output_dir=Path(out),
            workers=args.workers or int(p.get("workers", 4)),
            created_at=_created_at(cfg),
            templates=load_templates(cfg.prompts_dir) if cfg.prompts_dir else None,
            temperature=float(cfg.backend.get("temperature", 0.7)),
        )
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.count_per_pe < 1:
        print("error: --count-per-pe must be >= 1", file=sys.stderr)
        return 2

    specs = [GenerationSpec(pe, args.grade, args.domain or "", args.knowledge_range or "")
             for pe in args.pe for _ in range(args.count_per_pe)]
    try:
        report = run_batch(specs, config, backends)
    except IoError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {report.bundles_written} bundle(s) to {config.output_dir}; "
          f"{len(report.failures)} failure(s)")
    for pe, err in report.failures:
        print(f"  FAILED {pe}: {err}")
    return 0 if not report.failures else 1


def _expand(patterns: Sequence[str]) -> list[str]:
    paths = []
    for pat in patterns:
        if glob.has_magic(pat):
            hits = sorted(glob.glob(pat))
            paths.extend(hits or [pat])
        else:
            paths.append(pat)
    return paths


def cmd_validate(args: argparse.Namespace) -> int:
    status = 0
    for path in _expand(args.bundle):
        try:
            raw = Path(path).read_bytes()
            bundle = deserialize_bundle(raw)
        except OSError as exc:
            print(f"{path}: unreadable: {exc.strerror or exc}")
            status = 2
            continue
        except ParseError as exc:
            print(f"{path}: unreadable: malformed JSON: {exc}")
            status = 2
            continue
        except (SchemaError, StageMismatch) as exc:
            print(f"{path}: 1 violation(s)")
            print(f"  SCHEMA {getattr(exc, 'path', '/')}: {getattr(exc, 'message', exc)}")
            status = max(status, 1)
            continue
        violations = validate_bundle(bundle)
        if not violations:
            print(f"{path}: OK")
            continue
        print(f"{path}: {len(violations)} violation(s)")
        for v in violations:
            print(f"  {v}")
        status = max(status, 1)
    return status


def _load_table(args) -> tuple[an.RubricDefinition, an.RatingTable]:
    rubric = an.load_rubric(args.rubric)
    return rubric, an.read_ratings_csv(args.ratings, rubric)


def _fmt_ac(label: str, r: an.AgreementResult) -> tuple[str, ...]:
    return (label, r.coefficient, f"{r.estimate:.2f}", f"{r.standard_error:.3f}",
            f"[{r.ci95[0]:.2f}, {r.ci95[1]:.2f}]", str(r.n_units))


def cmd_agreement(args: argparse.Namespace) -> int:
    try:
        rubric, table = _load_table(args)
        results = an.component_agreement(table, rubric)
        pooled = None
        if args.pool_ordinal:
            ids = rubric.ids_with_scale("ordinal3")
            pooled = (f"ordinal3 pooled ({len(ids)} components)",
                      an.pooled_agreement(table, rubric, ids))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (an.AnalyticsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    rows = [("Component", "Coef", "Estimate", "SE", "95% CI", "n")]
    rows += [_fmt_ac(rubric.component(cid).label, r) for cid, r in results.items()]
    if pooled:
        rows.append(_fmt_ac(*pooled))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for i, r in enumerate(rows):
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            print("-" * (sum(widths) + 2 * (len(widths) - 1)))

    doc = {"raters": table.rater_ids(),
           "components": {cid: r.to_dict() for cid, r in results.items()}}
    if pooled:
        doc["pooled"] = {"label": pooled[0], **pooled[1].to_dict()}
    out = Path(args.json_out) if args.json_out else Path(args.ratings).with_suffix(".agreement.json")
    try:
        out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    try:
        rubric, table = _load_table(args)
        rows = an.distribution_report(table, rubric)
        comps = an.compare_sources(table, rubric)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (an.AnalyticsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.format == "json":
        sys.stdout.write(an.report_json(rows, comps))
    else:
        sys.stdout.write(an.format_distribution(rows))
        sys.stdout.write("\n")
        sys.stdout.write(an.format_comparison(comps, rubric))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecdmas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate item bundles")
    g.add_argument("--config", type=Path)
    g.add_argument("--pe", action="append", required=True, help="performance expectation (repeatable)")
    g.add_argument("--grade", default="6-8")
    g.add_argument("--domain")
    g.add_argument("--knowledge-range")
    g.add_argument("--count-per-pe", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", type=Path)
    g.add_argument("--max-attempts", type=int, choices=(1, 2, 3))
    g.add_argument("--workers", type=int)
    g.add_argument("--mock-mode", help="pass_all | fail_always | fail_first_n:<n>")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="check bundles against the structural constraints")
    v.add_argument("--bundle", action="append", required=True, help="bundle path or glob (repeatable)")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("agreement", help="two-rater Gwet AC1/AC2 per rubric component")
    a.add_argument("--ratings", required=True, type=Path)
    a.add_argument("--rubric", type=Path)
    a.add_argument("--pool-ordinal", action="store_true")
    a.add_argument("--json-out", type=Path)
    a.set_defaults(func=cmd_agreement)

    r = sub.add_parser("report", help="rating distribution by source")
    r.add_argument("--ratings", required=True, type=Path)
    r.add_argument("--rubric", type=Path)
    r.add_argument("--format", choices=("text", "json"), default="text")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
