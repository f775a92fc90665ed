"""Stage records, the item bundle, and their JSON wire format.

Every agent emits one stage record as a JSON object. Records are frozen
dataclasses whose field order *is* the serialized key order, so
``serialize_*`` output is byte-stable. Decoding is strict: unknown keys,
missing keys and wrong JSON types are all rejected with the offending
JSON pointer attached to the error.

Record-level invariants (non-empty lists, id formats, referential closure
inside a record) are reported by :func:`record_problems`. The stage
decoder raises on the first problem; the bundle decoder only enforces
types and leaves invariant checks to the bundle validator so that a
damaged bundle can still be inspected.
"""

from __future__ import annotations

import dataclasses
import json
import re
import types
import typing
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Iterator, Literal, NamedTuple, Union

STAGE_ID_RE = re.compile(r"stg-[0-9a-f]{12}")
PE_CODE_RE = re.compile(r"[A-Z0-9]+-[A-Z]+[0-9]+-[0-9]+")

StageName = Literal["domain_model", "evidence_model", "scenario", "assessment_task", "evaluation"]
STAGES: tuple[str, ...] = typing.get_args(StageName)

CRITERIA: tuple[str, ...] = (
    "three_dimensional_alignment",
    "cognitive_demand",
    "language_clarity",
    "cross_agent_consistency",
)
MAX_ATTEMPTS = 3
U64_MAX = 2**64 - 1


class ParseError(ValueError):
    """Input text is not well-formed JSON."""


class SchemaError(ValueError):
    """A JSON value does not match the record schema."""

    def __init__(self, path: str, message: str):
        self.path = path or "/"
        self.message = message
        super().__init__(f"{self.path}: {message}")


class StageMismatch(ValueError):
    """The ``stage`` field names a different stage than the caller expected."""

    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"expected stage {expected!r}, got {found!r}")


class Problem(NamedTuple):
    code: str  # SCHEMA | REF_INTEGRITY | EVIDENCE_FIRST
    path: str
    message: str


def pointer(*parts: object) -> str:
    """Build a JSON pointer from path segments (RFC 6901 escaping)."""
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


# --------------------------------------------------------------------------
# record types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DimensionEntry:
    code: str
    description: str


@dataclass(frozen=True)
class DomainModel:
    stage: Literal["domain_model"]
    id: str
    pe_code: str
    grade_band: str
    domain: str
    dci: tuple[DimensionEntry, ...]
    sep: tuple[DimensionEntry, ...]
    ccc: tuple[DimensionEntry, ...]
    knowledge_components: tuple[str, ...]
    skill_components: tuple[str, ...]

    def codes(self) -> set[str]:
        return {e.code for e in (*self.dci, *self.sep, *self.ccc)}


@dataclass(frozen=True)
class Ksa:
    id: str
    kind: Literal["knowledge", "skill", "ability"]
    statement: str
    source_dimension: Literal["DCI", "SEP", "CCC"]
    source_code: str


@dataclass(frozen=True)
class EvidenceStatement:
    id: str
    ksa_ids: tuple[str, ...]
    observable_behavior: str
    partial_understandings: tuple[str, ...]
    misconceptions: tuple[str, ...]


@dataclass(frozen=True)
class EvidenceModel:
    stage: Literal["evidence_model"]
    id: str
    parent_id: str
    ksas: tuple[Ksa, ...]
    evidence_statements: tuple[EvidenceStatement, ...]


@dataclass(frozen=True)
class ExpectedBehavior:
    evidence_id: str
    description: str


@dataclass(frozen=True)
class ScenarioSpec:
    stage: Literal["scenario"]
    id: str
    parent_id: str
    context: str
    task_conditions: tuple[str, ...]
    expected_evidence_behaviors: tuple[ExpectedBehavior, ...]


@dataclass(frozen=True)
class ScoringLevel:
    level: int
    descriptor: str


@dataclass(frozen=True)
class DataRepresentation:
    id: str
    kind: Literal["table", "graph", "chart", "diagram"]
    title: str
    content: str


@dataclass(frozen=True)
class AssessmentTask:
    stage: Literal["assessment_task"]
    id: str
    parent_id: str
    task_prompt: str
    expected_student_response: str
    scoring_rubric: tuple[ScoringLevel, ...]
    task_features: tuple[str, ...]
    fairness_considerations: tuple[str, ...]
    data_representations: tuple[DataRepresentation, ...]


@dataclass(frozen=True)
class CriterionResult:
    name: Literal[
        "three_dimensional_alignment",
        "cognitive_demand",
        "language_clarity",
        "cross_agent_consistency",
    ]
    passed: bool
    rationale: str


@dataclass(frozen=True)
class EvaluationVerdict:
    stage: Literal["evaluation"]
    id: str
    parent_id: str
    passed: bool
    criteria: tuple[CriterionResult, ...]

    def failed_rationales(self) -> list[str]:
        return [f"{c.name}: {c.rationale}" for c in self.criteria if not c.passed]


StageRecord = Union[DomainModel, EvidenceModel, ScenarioSpec, AssessmentTask, EvaluationVerdict]

STAGE_TYPES: dict[str, type] = {
    "domain_model": DomainModel,
    "evidence_model": EvidenceModel,
    "scenario": ScenarioSpec,
    "assessment_task": AssessmentTask,
    "evaluation": EvaluationVerdict,
}


@dataclass(frozen=True)
class Attempt:
    index: int
    task: AssessmentTask
    verdict: EvaluationVerdict


@dataclass(frozen=True)
class ImageRecord:
    prompt: str
    asset_path: str | None = None


@dataclass(frozen=True)
class ItemBundle:
    bundle_id: str
    created_at: str
    pe_code: str
    seed: int
    backend_label: str
    attempts: tuple[Attempt, ...]
    domain_model: DomainModel
    evidence_model: EvidenceModel
    scenario: ScenarioSpec
    final_attempt_index: int
    quality_passed: bool
    image: ImageRecord

    @property
    def final_attempt(self) -> Attempt:
        return self.attempts[-1]


# --------------------------------------------------------------------------
# strict decoding
# --------------------------------------------------------------------------

_JSON_TYPE_NAMES = {dict: "object", list: "array", str: "string", bool: "boolean", int: "integer",
                    float: "number", type(None): "null"}


def _type_name(value: Any) -> str:
    return _JSON_TYPE_NAMES.get(type(value), type(value).__name__)


def _decode(tp: Any, value: Any, path: str) -> Any:
    if dataclasses.is_dataclass(tp):
        return _decode_object(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is Literal:
        allowed = typing.get_args(tp)
        if not isinstance(value, str) or value not in allowed:
            raise SchemaError(path, f"expected one of {list(allowed)}, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise SchemaError(path, f"expected array, got {_type_name(value)}")
        (item_tp, _) = typing.get_args(tp)
        return tuple(_decode(item_tp, v, f"{path}/{i}") for i, v in enumerate(value))
    if origin in (Union, types.UnionType):
        (inner,) = [a for a in typing.get_args(tp) if a is not type(None)]
        return _decode(inner, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise SchemaError(path, f"expected boolean, got {_type_name(value)}")
        return value
    if tp is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise SchemaError(path, f"expected integer, got {_type_name(value)}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise SchemaError(path, f"expected string, got {_type_name(value)}")
        return value
    raise TypeError(f"unsupported schema type {tp!r}")  # pragma: no cover


def _decode_object(cls: type, value: Any, path: str) -> Any:
    if not isinstance(value, dict):
        raise SchemaError(path, f"expected object, got {_type_name(value)}")
    hints = typing.get_type_hints(cls)
    declared = {f.name: f for f in dataclasses.fields(cls)}
    for key in value:
        if key not in declared:
            raise SchemaError(pointer(*_split(path), key), "unknown field")
    kwargs = {}
    for name, f in declared.items():
        if name not in value:
            if f.default is dataclasses.MISSING:
                raise SchemaError(pointer(*_split(path), name), "missing field")
            continue
        if value[name] is None and f.default is None:
            raise SchemaError(pointer(*_split(path), name), "null is not allowed; omit the field")
        kwargs[name] = _decode(hints[name], value[name], pointer(*_split(path), name))
    return cls(**kwargs)


def _split(path: str) -> list[str]:
    if not path or path == "/":
        return []
    return [p.replace("~1", "/").replace("~0", "~") for p in path.split("/")[1:]]


def _load(text: str | bytes) -> Any:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc


def stage_from_dict(data: Any, expected_stage: str) -> StageRecord:
    """Decode an already-parsed JSON value as a stage record, strictly."""
    if expected_stage not in STAGE_TYPES:
        raise ValueError(f"unknown stage {expected_stage!r}")
    if not isinstance(data, dict):
        raise SchemaError("/", f"expected object, got {_type_name(data)}")
    if "stage" not in data:
        raise SchemaError("/stage", "missing field")
    if not isinstance(data["stage"], str):
        raise SchemaError("/stage", f"expected string, got {_type_name(data['stage'])}")
    if data["stage"] != expected_stage:
        raise StageMismatch(expected_stage, data["stage"])
    record = _decode_object(STAGE_TYPES[expected_stage], data, "")
    problems = record_problems(record)
    if problems:
        first = problems[0]
        raise SchemaError(first.path, first.message)
    return record


def deserialize_stage(text: str | bytes, expected_stage: str) -> StageRecord:
    """Parse JSON text into the typed stage record for ``expected_stage``."""
    return stage_from_dict(_load(text), expected_stage)


def deserialize_bundle(text: str | bytes) -> ItemBundle:
    """Parse a bundle file. Only types are enforced; see :func:`record_problems`."""
    data = _load(text)
    return _decode_object(ItemBundle, data, "")


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def to_jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        out = {}
        for f in dataclasses.fields(value):
            v = getattr(value, f.name)
            if v is None and f.default is None:
                continue
            out[f.name] = to_jsonable(v)
        return out
    if isinstance(value, (tuple, list)):
        return [to_jsonable(v) for v in value]
    return value


def dumps(value: Any) -> str:
    return json.dumps(to_jsonable(value), indent=2, ensure_ascii=False) + "\n"


def serialize_stage(record: StageRecord) -> bytes:
    return dumps(record).encode("utf-8")


def serialize_bundle(bundle: ItemBundle) -> bytes:
    """UTF-8 JSON, keys in declaration order, 2-space indent, trailing newline."""
    return dumps(bundle).encode("utf-8")


def bundle_filename(bundle_id: str) -> str:
    return f"{bundle_id}.bundle.json"


# --------------------------------------------------------------------------
# JSON extraction from prose
# --------------------------------------------------------------------------


def iter_json_objects(text: str) -> Iterator[dict]:
    """Yield every balanced top-level JSON object embedded in ``text``."""
    decoder = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, end = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            yield obj
        i = text.find("{", end)


def extract_json_object(text: str) -> dict | None:
    return next(iter_json_objects(text), None)


# --------------------------------------------------------------------------
# record invariants
# --------------------------------------------------------------------------


def _blank(s: str) -> bool:
    return not s.strip()


def _check_id(value: str, path: str) -> list[Problem]:
    if STAGE_ID_RE.fullmatch(value):
        return []
    return [Problem("SCHEMA", path, f"stage id {value!r} does not match stg-<12 hex>")]


def _non_empty(items: tuple, path: str, what: str = "list") -> list[Problem]:
    return [] if items else [Problem("SCHEMA", path, f"{what} must be non-empty")]


def _domain_problems(r: DomainModel, base: str) -> list[Problem]:
    out = _check_id(r.id, base + "/id")
    if not PE_CODE_RE.fullmatch(r.pe_code):
        out.append(Problem("SCHEMA", base + "/pe_code", f"malformed PE code {r.pe_code!r}"))
    if _blank(r.grade_band):
        out.append(Problem("SCHEMA", base + "/grade_band", "must be non-empty"))
    for dim in ("dci", "sep", "ccc"):
        entries = getattr(r, dim)
        out += _non_empty(entries, f"{base}/{dim}")
        for i, e in enumerate(entries):
            if _blank(e.code):
                out.append(Problem("SCHEMA", f"{base}/{dim}/{i}/code", "must be non-empty"))
    out += _non_empty(r.knowledge_components, base + "/knowledge_components")
    out += _non_empty(r.skill_components, base + "/skill_components")
    return out


def _evidence_problems(r: EvidenceModel, base: str) -> list[Problem]:
    out = _check_id(r.id, base + "/id") + _check_id(r.parent_id, base + "/parent_id")
    out += _non_empty(r.ksas, base + "/ksas")
    out += _non_empty(r.evidence_statements, base + "/evidence_statements")
    ksa_ids: set[str] = set()
    for i, k in enumerate(r.ksas):
        if k.id in ksa_ids:
            out.append(Problem("SCHEMA", f"{base}/ksas/{i}/id", f"duplicate KSA id {k.id!r}"))
        ksa_ids.add(k.id)
    seen: set[str] = set()
    for i, ev in enumerate(r.evidence_statements):
        if ev.id in seen:
            out.append(Problem("SCHEMA", f"{base}/evidence_statements/{i}/id",
                               f"duplicate evidence id {ev.id!r}"))
        seen.add(ev.id)
        for j, kid in enumerate(ev.ksa_ids):
            if kid not in ksa_ids:
                out.append(Problem("REF_INTEGRITY", f"{base}/evidence_statements/{i}/ksa_ids/{j}",
                                   f"unknown KSA id {kid!r}"))
    return out


def _scenario_problems(r: ScenarioSpec, base: str) -> list[Problem]:
    out = _check_id(r.id, base + "/id") + _check_id(r.parent_id, base + "/parent_id")
    if _blank(r.context):
        out.append(Problem("SCHEMA", base + "/context", "must be non-empty"))
    out += _non_empty(r.expected_evidence_behaviors, base + "/expected_evidence_behaviors")
    return out


def _task_problems(r: AssessmentTask, base: str) -> list[Problem]:
    out = _check_id(r.id, base + "/id") + _check_id(r.parent_id, base + "/parent_id")
    for name in ("task_prompt", "expected_student_response"):
        if _blank(getattr(r, name)):
            out.append(Problem("SCHEMA", f"{base}/{name}", "must be non-empty"))
    if len(r.scoring_rubric) < 2:
        out.append(Problem("SCHEMA", base + "/scoring_rubric", "needs at least 2 levels"))
    prev = None
    for i, lvl in enumerate(r.scoring_rubric):
        if lvl.level < 0:
            out.append(Problem("SCHEMA", f"{base}/scoring_rubric/{i}/level", "level must be >= 0"))
        elif prev is not None and lvl.level <= prev:
            out.append(Problem("SCHEMA", f"{base}/scoring_rubric/{i}/level",
                               "levels must be strictly increasing"))
        prev = lvl.level
    if not r.data_representations:
        out.append(Problem("EVIDENCE_FIRST", base + "/data_representations",
                           "task carries no data representation"))
    return out


def _verdict_problems(r: EvaluationVerdict, base: str) -> list[Problem]:
    out = _check_id(r.id, base + "/id") + _check_id(r.parent_id, base + "/parent_id")
    names = [c.name for c in r.criteria]
    for name in CRITERIA:
        n = names.count(name)
        if n == 0:
            out.append(Problem("SCHEMA", base + "/criteria", f"missing criterion {name!r}"))
        elif n > 1:
            out.append(Problem("SCHEMA", base + "/criteria", f"criterion {name!r} repeated"))
    if r.passed != all(c.passed for c in r.criteria):
        out.append(Problem("SCHEMA", base + "/passed",
                           "passed must equal the conjunction of criterion results"))
    return out


_PROBLEM_FNS = {
    DomainModel: _domain_problems,
    EvidenceModel: _evidence_problems,
    ScenarioSpec: _scenario_problems,
    AssessmentTask: _task_problems,
    EvaluationVerdict: _verdict_problems,
}


def record_problems(record: StageRecord, base: str = "") -> list[Problem]:
    """All single-record invariant breaches, with pointers prefixed by ``base``."""
    return _PROBLEM_FNS[type(record)](record, base)


def is_rfc3339(text: str) -> bool:
    if not re.fullmatch(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})", text):
        return False
    try:
        datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        return False
    return True
