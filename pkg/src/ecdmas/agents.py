"""The five agent stages.

Each agent renders its prompt template from the upstream records it is
given (and nothing else), calls the text backend, and turns the reply
into a typed stage record. Replies go through :func:`repair_structured_output`:
direct parse, then extraction of an embedded JSON object, then a single
re-prompt quoting the error. Cross-record violations (a KSA citing a code
the domain model never listed, a scenario pointing at a missing evidence
statement) earn one corrective re-prompt before :class:`UpstreamViolation`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

from .backend import GenerationRequest, TextBackend
from .schema import (
    PE_CODE_RE,
    AssessmentTask,
    DomainModel,
    EvaluationVerdict,
    EvidenceModel,
    ParseError,
    ScenarioSpec,
    SchemaError,
    StageMismatch,
    StageRecord,
    dumps,
    extract_json_object,
    stage_from_dict,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7

REQUIRED_PLACEHOLDERS: dict[str, tuple[str, ...]] = {
    "domain_model": ("fixed_fields", "pe_code", "grade_band", "domain", "knowledge_range"),
    "evidence_model": ("fixed_fields", "domain_model_json", "allowed_codes"),
    "scenario": ("fixed_fields", "evidence_model_json"),
    "assessment_task": ("fixed_fields", "scenario_json", "evidence_model_json", "feedback"),
    "evaluation": ("fixed_fields", "task_json", "domain_model_json", "attempt"),
}

_DOMAINS = {
    "LS": "life science",
    "PS": "physical science",
    "ESS": "earth and space science",
    "ETS": "engineering, technology, and applications of science",
}


class SpecError(ValueError):
    pass


class StageParseFailure(RuntimeError):
    """A stage reply could not be turned into a valid record."""

    def __init__(self, stage: str, diagnostics: list[str]):
        self.stage = stage
        self.diagnostics = list(diagnostics)
        joined = "; ".join(f"[{i + 1}] {d}" for i, d in enumerate(self.diagnostics))
        super().__init__(f"{stage}: no valid record after {len(self.diagnostics)} completion(s): {joined}")


class UpstreamViolation(RuntimeError):
    """A reply contradicts the upstream records it was built from."""

    def __init__(self, stage: str, problems: list[str]):
        self.stage = stage
        self.problems = list(problems)
        super().__init__(f"{stage}: " + "; ".join(self.problems))


def domain_for_pe(pe_code: str) -> str:
    m = re.match(r"[A-Z0-9]+-([A-Z]+)", pe_code)
    return _DOMAINS.get(m.group(1), "science") if m else "science"


@dataclass(frozen=True)
class GenerationSpec:
    pe_code: str
    grade_band: str = "6-8"
    domain: str = ""
    knowledge_range: str = ""

    def validate(self) -> None:
        if not PE_CODE_RE.fullmatch(self.pe_code):
            raise SpecError(f"malformed performance expectation code {self.pe_code!r}")
        if not self.grade_band.strip():
            raise SpecError("grade_band must be non-empty")

    def resolved_domain(self) -> str:
        return self.domain or domain_for_pe(self.pe_code)


# --------------------------------------------------------------------------
# prompt templates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    stage: str
    system_text: str
    user_text_template: str
    placeholders: tuple[str, ...]

    def __post_init__(self):
        found = _placeholders_in(self.user_text_template)
        for name in self.placeholders:
            n = found.count(name)
            if n != 1:
                raise ValueError(f"{self.stage}: placeholder ${name} appears {n} times, expected once")
        extra = set(found) - set(self.placeholders)
        if extra:
            raise ValueError(f"{self.stage}: undeclared placeholders {sorted(extra)}")

    def render(self, values: Mapping[str, str]) -> str:
        return string.Template(self.user_text_template).substitute(values)


def _placeholders_in(text: str) -> list[str]:
    names = []
    for m in string.Template.pattern.finditer(text):
        if m.group("invalid") is not None:
            raise ValueError(f"bad '$' at offset {m.start()} in template")
        name = m.group("named") or m.group("braced")
        if name:
            names.append(name)
    return names


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Read ``<stage>.system.txt`` / ``<stage>.user.txt`` for every stage."""
    root = Path(directory) if directory is not None else resources.files("ecdmas") / "prompts"
    out = {}
    for stage, required in REQUIRED_PLACEHOLDERS.items():
        system = (root / f"{stage}.system.txt").read_text(encoding="utf-8")
        user = (root / f"{stage}.user.txt").read_text(encoding="utf-8")
        out[stage] = PromptTemplate(stage, system.strip(), user, required)
    return out


_default_templates: dict[str, PromptTemplate] | None = None


def default_templates() -> dict[str, PromptTemplate]:
    global _default_templates
    if _default_templates is None:
        _default_templates = load_templates()
    return _default_templates


def derive_stage_id(*parts: str) -> str:
    """Content-derived id for callers that do not supply one."""
    digest = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=6).hexdigest()
    return f"stg-{digest}"


def _as_json(record: StageRecord) -> str:
    return dumps(record).rstrip("\n")


# --------------------------------------------------------------------------
# structured output repair
# --------------------------------------------------------------------------


def _try_parse(raw: str, stage: str, stamp: Mapping[str, str],
               check: Callable[[StageRecord], list[str]] | None) -> tuple[StageRecord | None, str]:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        data = extract_json_object(raw)
        if data is None:
            return None, f"{ParseError.__name__}: no JSON object found ({exc.msg})"
    if isinstance(data, dict):
        data = {**data, **stamp}
    try:
        record = stage_from_dict(data, stage)
    except (SchemaError, StageMismatch) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    if check is not None:
        problems = check(record)
        if problems:
            return None, "SemanticError: " + "; ".join(problems)
    return record, ""


def repair_structured_output(
    raw: str,
    expected_stage: str,
    backend: TextBackend,
    *,
    request: GenerationRequest | None = None,
    stamp: Mapping[str, str] | None = None,
    check: Callable[[StageRecord], list[str]] | None = None,
) -> StageRecord:
    """Turn a completion into a stage record, re-prompting at most once.

    ``stamp`` overwrites provenance fields (``id``, ``parent_id``) that the
    pipeline owns. ``check`` adds stage-specific rules on top of the schema.
    Without ``request`` there is nothing to re-prompt with, so only the
    local parse and extraction steps run.
    """
    stamp = stamp or {}
    record, diag = _try_parse(raw, expected_stage, stamp, check)
    if record is not None:
        return record
    diagnostics = [diag]
    if request is not None:
        log.info("%s: reply rejected, re-prompting once: %s", expected_stage, diag)
        retry = replace(request, user_prompt=(
            f"{request.user_prompt}\n\nYour previous reply was rejected: {diag}\n"
            f"Reply with only the corrected JSON object for stage \"{expected_stage}\"."
        ))
        record, diag = _try_parse(backend.generate(retry).text, expected_stage, stamp, check)
        if record is not None:
            return record
        diagnostics.append(diag)
    raise StageParseFailure(expected_stage, diagnostics)


def _run_stage(
    stage: str,
    values: dict[str, str],
    fixed: dict[str, object],
    backend: TextBackend,
    templates: Mapping[str, PromptTemplate] | None,
    temperature: float,
    check: Callable[[StageRecord], list[str]] | None = None,
    upstream_check: Callable[[StageRecord], list[str]] | None = None,
) -> StageRecord:
    tpl = (templates or default_templates())[stage]
    stamp = {k: v for k, v in fixed.items() if k in ("id", "parent_id")}
    user = tpl.render({"fixed_fields": json.dumps(fixed, ensure_ascii=False), **values})
    request = GenerationRequest(tpl.system_text, user, stage, temperature)
    record = repair_structured_output(backend.generate(request).text, stage, backend,
                                      request=request, stamp=stamp, check=check)
    if upstream_check is None:
        return record
    problems = upstream_check(record)
    if not problems:
        return record
    log.info("%s: upstream violation, one corrective re-prompt: %s", stage, problems)
    corrective = replace(request, user_prompt=(
        f"{user}\n\nYour previous reply was rejected because it contradicts the upstream "
        f"records: {'; '.join(problems)}\nReturn the full corrected JSON object."
    ))
    record = repair_structured_output(backend.generate(corrective).text, stage, backend,
                                      request=corrective, stamp=stamp, check=check)
    problems = upstream_check(record)
    if problems:
        raise UpstreamViolation(stage, problems)
    return record


# --------------------------------------------------------------------------
# agents
# --------------------------------------------------------------------------


def run_domain_agent(spec: GenerationSpec, backend: TextBackend, *, record_id: str | None = None,
                     templates: Mapping[str, PromptTemplate] | None = None,
                     temperature: float = DEFAULT_TEMPERATURE) -> DomainModel:
    """Agent 1: map a performance expectation to its DCI/SEP/CCC and components."""
    spec.validate()
    domain = spec.resolved_domain()
    record_id = record_id or derive_stage_id("domain_model", spec.pe_code, spec.grade_band, domain)
    fixed = {"stage": "domain_model", "id": record_id, "pe_code": spec.pe_code,
             "grade_band": spec.grade_band, "domain": domain}

    def check(rec: StageRecord) -> list[str]:
        if rec.pe_code != spec.pe_code:
            return [f"pe_code must be {spec.pe_code!r}, got {rec.pe_code!r}"]
        return []

    values = {"pe_code": spec.pe_code, "grade_band": spec.grade_band, "domain": domain,
              "knowledge_range": spec.knowledge_range or "(unrestricted within the PE)"}
    return _run_stage("domain_model", values, fixed, backend, templates, temperature, check=check)


def ksa_source_problems(em: EvidenceModel, dm: DomainModel) -> list[str]:
    allowed = dm.codes()
    return [f"KSA {k.id!r} cites source_code {k.source_code!r} which the domain model does not list"
            for k in em.ksas if k.source_code not in allowed]


def run_evidence_agent(dm: DomainModel, backend: TextBackend, *, record_id: str | None = None,
                       templates: Mapping[str, PromptTemplate] | None = None,
                       temperature: float = DEFAULT_TEMPERATURE) -> EvidenceModel:
    """Agent 2: expand the domain model into KSAs and evidence statements."""
    record_id = record_id or derive_stage_id("evidence_model", dm.id)
    fixed = {"stage": "evidence_model", "id": record_id, "parent_id": dm.id}
    codes = [f"{dim.upper()} {e.code}" for dim in ("dci", "sep", "ccc") for e in getattr(dm, dim)]
    values = {"domain_model_json": _as_json(dm), "allowed_codes": ", ".join(codes)}
    return _run_stage("evidence_model", values, fixed, backend, templates, temperature,
                      upstream_check=lambda em: ksa_source_problems(em, dm))


def dangling_evidence_ids(sc: ScenarioSpec, em: EvidenceModel) -> list[str]:
    known = {ev.id for ev in em.evidence_statements}
    return [f"expected behavior cites unknown evidence_id {b.evidence_id!r}"
            for b in sc.expected_evidence_behaviors if b.evidence_id not in known]


def run_scenario_agent(em: EvidenceModel, backend: TextBackend, *, record_id: str | None = None,
                       templates: Mapping[str, PromptTemplate] | None = None,
                       temperature: float = DEFAULT_TEMPERATURE) -> ScenarioSpec:
    """Agent 3: one daily-life scenario that can elicit the evidence behaviors."""
    record_id = record_id or derive_stage_id("scenario", em.id)
    fixed = {"stage": "scenario", "id": record_id, "parent_id": em.id}
    values = {"evidence_model_json": _as_json(em)}
    return _run_stage("scenario", values, fixed, backend, templates, temperature,
                      upstream_check=lambda sc: dangling_evidence_ids(sc, em))


def unreferenced_representations(task: AssessmentTask) -> list[str]:
    if not task.data_representations:
        return ["data_representations must contain at least one table, graph, chart or diagram"]
    for dr in task.data_representations:
        if dr.id in task.task_prompt or (dr.title and dr.title in task.task_prompt):
            return []
    return ["task_prompt must refer to at least one data representation by id or title"]


def run_item_agent(sc: ScenarioSpec, em: EvidenceModel, backend: TextBackend,
                   feedback: str | None = None, *, record_id: str | None = None,
                   templates: Mapping[str, PromptTemplate] | None = None,
                   temperature: float = DEFAULT_TEMPERATURE) -> AssessmentTask:
    """Agent 4: turn the scenario into a task grounded in data representations."""
    if sc.parent_id != em.id:
        raise ValueError(f"scenario {sc.id} was not built from evidence model {em.id}")
    record_id = record_id or derive_stage_id("assessment_task", sc.id, feedback or "")
    fixed = {"stage": "assessment_task", "id": record_id, "parent_id": sc.id}
    if feedback:
        fb = ("A reviewer rejected the previous version. Address every point below:\n" + feedback)
    else:
        fb = "No reviewer feedback; this is the first version."
    values = {"scenario_json": _as_json(sc), "evidence_model_json": _as_json(em), "feedback": fb}
    return _run_stage("assessment_task", values, fixed, backend, templates, temperature,
                      check=unreferenced_representations)


def run_evaluation_agent(task: AssessmentTask, dm: DomainModel, backend: TextBackend, *,
                         attempt: int = 1, record_id: str | None = None,
                         templates: Mapping[str, PromptTemplate] | None = None,
                         temperature: float = DEFAULT_TEMPERATURE) -> EvaluationVerdict:
    """Agent 5: pass/fail on the four quality criteria."""
    record_id = record_id or derive_stage_id("evaluation", task.id)
    fixed = {"stage": "evaluation", "id": record_id, "parent_id": task.id}
    values = {"task_json": _as_json(task), "domain_model_json": _as_json(dm), "attempt": str(attempt)}
    return _run_stage("evaluation", values, fixed, backend, templates, temperature)
