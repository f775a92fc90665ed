"""Item orchestration, the evaluation-regeneration loop, and bundle validation."""

from __future__ import annotations

import json
import logging
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Mapping, Sequence

from ._fs import atomic_write
from .agents import (
    DEFAULT_TEMPERATURE,
    GenerationSpec,
    PromptTemplate,
    run_domain_agent,
    run_evaluation_agent,
    run_evidence_agent,
    run_item_agent,
    run_scenario_agent,
)
from .backend import ImageBackend, StubImageBackend, TextBackend
from .schema import (
    MAX_ATTEMPTS,
    U64_MAX,
    AssessmentTask,
    Attempt,
    EvaluationVerdict,
    ImageRecord,
    ItemBundle,
    ScenarioSpec,
    bundle_filename,
    is_rfc3339,
    record_problems,
    serialize_bundle,
)

log = logging.getLogger(__name__)

FEEDBACK_LIMIT = 2000

IMAGE_DIRECTIVES = """Visual generation directives:
- Flat vector-illustration style with a plain light background.
- Every axis, column and row label must be legible and spelled exactly as in the data.
- No decorative text, captions or extra annotations beyond the data labels.
- No watermark, logo or signature."""

VIOLATION_CODES = ("FLOW", "KSA_SOURCE", "EVIDENCE_FIRST", "REF_INTEGRITY", "SCHEMA")


class IoError(OSError):
    """Output directory or bundle file could not be written."""


class BundleInvalid(RuntimeError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(f"{v.code} {v.path}: {v.message}" for v in violations))


@dataclass(frozen=True)
class PipelineConfig:
    max_attempts: int = MAX_ATTEMPTS
    regenerate_scope: Literal["task_only"] = "task_only"
    seed: int = 0
    output_dir: Path = Path("out")
    workers: int = 4
    created_at: str | None = None  # fixed timestamp for reproducible runs
    temperature: float = DEFAULT_TEMPERATURE
    templates: Mapping[str, PromptTemplate] | None = None

    def __post_init__(self):
        if not 1 <= self.max_attempts <= MAX_ATTEMPTS:
            raise ValueError(f"max_attempts must be in [1, {MAX_ATTEMPTS}]")
        if self.regenerate_scope != "task_only":
            raise ValueError("only regenerate_scope='task_only' is supported")
        if not 0 <= self.seed <= U64_MAX:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.created_at is not None and not is_rfc3339(self.created_at):
            raise ValueError(f"created_at {self.created_at!r} is not an RFC 3339 timestamp")


@dataclass(frozen=True)
class Backends:
    text: TextBackend
    image: ImageBackend = field(default_factory=StubImageBackend)


@dataclass(frozen=True)
class Violation:
    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} {self.path}: {self.message}"


class _IdStream:
    def __init__(self, seed: int):
        self._rng = random.Random(seed)
        self._seen: set[str] = set()

    def hex12(self) -> str:
        while True:
            h = f"{self._rng.getrandbits(48):012x}"
            if h not in self._seen:
                self._seen.add(h)
                return h

    def stage_id(self) -> str:
        return "stg-" + self.hex12()


def _now_rfc3339() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def build_feedback(verdicts: Sequence[EvaluationVerdict]) -> str | None:
    """Failed-criterion rationales, newest round first, capped in length."""
    lines = []
    for round_no in range(len(verdicts), 0, -1):
        for text in verdicts[round_no - 1].failed_rationales():
            lines.append(f"Round {round_no} {text}")
    if not lines:
        return None
    return "\n".join(lines)[:FEEDBACK_LIMIT]


def compose_image_prompt(task: AssessmentTask, scenario: ScenarioSpec) -> str:
    """Scene description from the scenario plus the fixed directive block."""
    if task.parent_id != scenario.id:
        raise ValueError(f"task {task.id} does not belong to scenario {scenario.id}")
    scene = f"Scene description: {scenario.context}"
    if task.data_representations:
        dr = task.data_representations[0]
        scene += (f"\nShow the {dr.kind} titled \"{dr.title}\" as the central element, "
                  f"drawn from this data:\n{dr.content}")
    return f"{scene}\n\n{IMAGE_DIRECTIVES}"


def _ensure_output_dir(path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=path):
            pass
    except OSError as exc:
        raise IoError(f"output directory {path} is not writable: {exc}") from exc
    return path


def run_pipeline(spec: GenerationSpec, config: PipelineConfig, backends: Backends) -> ItemBundle:
    """Generate, check and write one item bundle."""
    spec.validate()
    out = _ensure_output_dir(config.output_dir)
    ids = _IdStream(config.seed)
    bundle_id = f"{spec.pe_code.lower()}-{ids.hex12()}"
    text = backends.text
    kw = {"templates": config.templates, "temperature": config.temperature}

    dm = run_domain_agent(spec, text, record_id=ids.stage_id(), **kw)
    em = run_evidence_agent(dm, text, record_id=ids.stage_id(), **kw)
    sc = run_scenario_agent(em, text, record_id=ids.stage_id(), **kw)

    attempts: list[Attempt] = []
    for k in range(1, config.max_attempts + 1):
        feedback = build_feedback([a.verdict for a in attempts])
        task = run_item_agent(sc, em, text, feedback, record_id=ids.stage_id(), **kw)
        verdict = run_evaluation_agent(task, dm, text, attempt=k, record_id=ids.stage_id(), **kw)
        attempts.append(Attempt(k, task, verdict))
        log.info("%s attempt %d: %s", bundle_id, k, "pass" if verdict.passed else "fail")
        if verdict.passed:
            break

    final = attempts[-1]
    image_prompt = compose_image_prompt(final.task, sc)
    bundle = ItemBundle(
        bundle_id=bundle_id,
        created_at=config.created_at or _now_rfc3339(),
        pe_code=spec.pe_code,
        seed=config.seed,
        backend_label=text.label,
        attempts=tuple(attempts),
        domain_model=dm,
        evidence_model=em,
        scenario=sc,
        final_attempt_index=len(attempts),
        quality_passed=final.verdict.passed,
        image=ImageRecord(prompt=image_prompt),
    )
    violations = validate_bundle(bundle)
    if violations:
        raise BundleInvalid(violations)

    try:
        img = backends.image.generate_image(image_prompt, bundle_id=bundle_id, output_dir=out)
        if img.asset_path is not None:
            bundle = replace(bundle, image=ImageRecord(image_prompt, Path(img.asset_path).name))
        atomic_write(out / bundle_filename(bundle_id), serialize_bundle(bundle))
    except OSError as exc:
        raise IoError(f"could not write bundle {bundle_id}: {exc}") from exc
    return bundle


# --------------------------------------------------------------------------
# batch
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchReport:
    bundles_written: int
    failures: tuple[tuple[str, str], ...]
    bundle_ids: tuple[str, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "bundles_written": self.bundles_written,
            "bundle_ids": list(self.bundle_ids),
            "failures": [{"pe_code": pe, "error": err} for pe, err in self.failures],
        }, indent=2) + "\n"


def run_batch(specs: Sequence[GenerationSpec], config: PipelineConfig,
              backends: Backends) -> BatchReport:
    """Run every spec as an independent item; item ``i`` uses seed ``seed + i``."""
    if not specs:
        raise ValueError("run_batch needs at least one spec")
    out = _ensure_output_dir(config.output_dir)

    def one(i: int) -> ItemBundle | Exception:
        cfg = replace(config, seed=(config.seed + i) & U64_MAX)
        try:
            return run_pipeline(specs[i], cfg, backends)
        except Exception as exc:  # noqa: BLE001 - isolate item failures
            log.warning("item %d (%s) failed: %s", i, specs[i].pe_code, exc)
            return exc

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(one, range(len(specs))))

    ids, failures = [], []
    for spec, res in zip(specs, results):
        if isinstance(res, Exception):
            failures.append((spec.pe_code, f"{type(res).__name__}: {res}"))
        else:
            ids.append(res.bundle_id)
    report = BatchReport(len(ids), tuple(failures), tuple(ids))
    try:
        atomic_write(out / "batch-report.json", report.to_json().encode("utf-8"))
    except OSError as exc:
        raise IoError(f"could not write batch report: {exc}") from exc
    return report


# --------------------------------------------------------------------------
# structural validation
# --------------------------------------------------------------------------


def validate_bundle(bundle: ItemBundle) -> list[Violation]:
    """Every structural-constraint breach in ``bundle``; empty means clean."""
    out: list[Violation] = []
    add = lambda code, path, msg: out.append(Violation(code, path, msg))  # noqa: E731

    # bundle-level shape
    n = len(bundle.attempts)
    if not 1 <= n <= MAX_ATTEMPTS:
        add("SCHEMA", "/attempts", f"expected 1..{MAX_ATTEMPTS} attempts, found {n}")
    if bundle.final_attempt_index != n:
        add("SCHEMA", "/final_attempt_index",
            f"final_attempt_index {bundle.final_attempt_index} != number of attempts {n}")
    if n and bundle.quality_passed != bundle.final_attempt.verdict.passed:
        add("SCHEMA", "/quality_passed", "quality_passed disagrees with the final verdict")
    for i, a in enumerate(bundle.attempts):
        if a.index != i + 1:
            add("SCHEMA", f"/attempts/{i}/index", f"attempt index {a.index}, expected {i + 1}")
        if i < n - 1 and a.verdict.passed:
            add("SCHEMA", f"/attempts/{i}/verdict/passed",
                "a passing attempt must be the last attempt")
    if not 0 <= bundle.seed <= U64_MAX:
        add("SCHEMA", "/seed", "seed is not an unsigned 64-bit integer")
    if not is_rfc3339(bundle.created_at):
        add("SCHEMA", "/created_at", f"{bundle.created_at!r} is not an RFC 3339 timestamp")
    if not bundle.bundle_id.strip():
        add("SCHEMA", "/bundle_id", "must be non-empty")
    if bundle.pe_code != bundle.domain_model.pe_code:
        add("SCHEMA", "/pe_code", "bundle pe_code differs from the domain model's")
    if not bundle.image.prompt.strip():
        add("SCHEMA", "/image/prompt", "must be non-empty")

    # per-record invariants
    records = [("/domain_model", bundle.domain_model), ("/evidence_model", bundle.evidence_model),
               ("/scenario", bundle.scenario)]
    for i, a in enumerate(bundle.attempts):
        records += [(f"/attempts/{i}/task", a.task), (f"/attempts/{i}/verdict", a.verdict)]
    for base, rec in records:
        for p in record_problems(rec, base):
            add(p.code, p.path, p.message)

    seen: dict[str, str] = {}
    for base, rec in records:
        if rec.id in seen:
            add("SCHEMA", f"{base}/id", f"stage id {rec.id} already used at {seen[rec.id]}")
        else:
            seen[rec.id] = base

    # parent chain: each record must point at its immediate upstream record
    order = {rec.id: base for base, rec in reversed(records)}
    rank = {base: r for r, (base, _) in enumerate(records)}

    def link(base: str, child, parent, parent_base: str) -> None:
        if child.parent_id == parent.id:
            return
        target = order.get(child.parent_id)
        if target is not None and rank[target] >= rank[base]:
            msg = f"parent_id points downstream to {target}"
        elif target is not None:
            msg = f"parent_id points to {target}, expected {parent_base}"
        else:
            msg = f"parent_id {child.parent_id} does not match {parent_base}/id"
        add("FLOW", f"{base}/parent_id", msg)

    dm, em, sc = bundle.domain_model, bundle.evidence_model, bundle.scenario
    link("/evidence_model", em, dm, "/domain_model")
    link("/scenario", sc, em, "/evidence_model")
    for i, a in enumerate(bundle.attempts):
        link(f"/attempts/{i}/task", a.task, sc, "/scenario")
        link(f"/attempts/{i}/verdict", a.verdict, a.task, f"/attempts/{i}/task")

    allowed = dm.codes()
    for i, k in enumerate(em.ksas):
        if k.source_code not in allowed:
            add("KSA_SOURCE", f"/evidence_model/ksas/{i}/source_code",
                f"source_code {k.source_code!r} is not a DCI/SEP/CCC code of the domain model")

    evidence_ids = {ev.id for ev in em.evidence_statements}
    for i, b in enumerate(sc.expected_evidence_behaviors):
        if b.evidence_id not in evidence_ids:
            add("REF_INTEGRITY", f"/scenario/expected_evidence_behaviors/{i}/evidence_id",
                f"unknown evidence id {b.evidence_id!r}")

    for i, a in enumerate(bundle.attempts):
        reps = a.task.data_representations
        if reps and not any(dr.id in a.task.task_prompt or (dr.title and dr.title in a.task.task_prompt)
                            for dr in reps):
            add("EVIDENCE_FIRST", f"/attempts/{i}/task/task_prompt",
                "task prompt refers to none of its data representations")
    return out
