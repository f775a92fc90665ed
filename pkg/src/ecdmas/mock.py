"""Deterministic offline text backend.

Replies are built from fixed content pools. Which pool entries are used
depends only on (stage, script seed, 64-bit hash of the user prompt), so
equal requests always get byte-identical replies. The mock reads the
upstream records and the fixed-field object out of the user prompt, which
is how its output stays consistent with the records it was given.

Failure modes only affect the evaluation stage: ``fail_always`` rejects
every task, ``fail_first_n`` rejects evaluation rounds ``1..n``.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass

from .backend import GenerationRequest, GenerationResponse
from .schema import (
    CRITERIA,
    AssessmentTask,
    CriterionResult,
    DataRepresentation,
    DimensionEntry,
    DomainModel,
    EvaluationVerdict,
    EvidenceModel,
    EvidenceStatement,
    ExpectedBehavior,
    Ksa,
    ScenarioSpec,
    ScoringLevel,
    dumps,
    iter_json_objects,
    stage_from_dict,
)

MOCK_MODES = ("pass_all", "fail_always", "fail_first_n")


@dataclass(frozen=True)
class MockScript:
    mode: str = "pass_all"
    n: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MOCK_MODES:
            raise ValueError(f"unknown mock mode {self.mode!r}")
        if not 0 <= self.n <= 10:
            raise ValueError("fail_first_n needs 0 <= n <= 10")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> MockScript:
        """``pass_all``, ``fail_always`` or ``fail_first_n:<n>``."""
        mode, _, arg = text.partition(":")
        if mode == "fail_first_n":
            return cls(mode, int(arg or 0), seed)
        if arg:
            raise ValueError(f"mode {mode!r} takes no argument")
        return cls(mode, 0, seed)

    def fails_round(self, round_no: int) -> bool:
        if self.mode == "fail_always":
            return True
        if self.mode == "fail_first_n":
            return round_no <= self.n
        return False


def prompt_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


# --------------------------------------------------------------------------
# content pools, keyed by NGSS topic family (PS1, LS2, ...)
# --------------------------------------------------------------------------

SEPS = {
    "SEP1": "Asking questions and defining problems",
    "SEP2": "Developing and using models",
    "SEP3": "Planning and carrying out investigations",
    "SEP4": "Analyzing and interpreting data",
    "SEP5": "Using mathematics and computational thinking",
    "SEP6": "Constructing explanations and designing solutions",
    "SEP7": "Engaging in argument from evidence",
    "SEP8": "Obtaining, evaluating, and communicating information",
}
CCCS = {
    "CCC1": "Patterns",
    "CCC2": "Cause and effect",
    "CCC3": "Scale, proportion, and quantity",
    "CCC4": "Systems and system models",
    "CCC5": "Energy and matter: flows, cycles, and conservation",
    "CCC6": "Structure and function",
    "CCC7": "Stability and change",
}

_FAMILIES: dict[str, dict] = {
    "LS1": {
        "dci": [("LS1.A", "Structure and function: living things are made of cells that work together"),
                ("LS1.C", "Organization for matter and energy flow in organisms")],
        "sep": ["SEP3", "SEP4", "SEP6"], "ccc": ["CCC4", "CCC5", "CCC6"],
        "knowledge": ["Cells use energy released from food molecules",
                      "Plants make sugars from carbon dioxide and water using light energy",
                      "Body systems are made of interacting subsystems"],
        "misconceptions": ["Plants get their food from the soil",
                           "Cells are the same in every part of an organism"],
        "contexts": [
            "A school garden club grows bean plants on two windowsills, one sunny and one shaded, "
            "and measures how tall the plants grow over three weeks.",
            "Students set up sealed jars with water plants and snails and track the amount of "
            "dissolved oxygen in the water during the day and at night.",
        ],
        "quantity": ("Day", "Average plant height (cm)"),
    },
    "LS2": {
        "dci": [("LS2.A", "Interdependent relationships in ecosystems"),
                ("LS2.B", "Cycles of matter and energy transfer in ecosystems")],
        "sep": ["SEP2", "SEP4", "SEP7"], "ccc": ["CCC1", "CCC2", "CCC5"],
        "knowledge": ["Organisms compete for limited resources",
                      "Matter cycles between living and nonliving parts of an ecosystem",
                      "Predator and prey populations affect one another"],
        "misconceptions": ["Energy is recycled in a food web like matter",
                           "Removing a predator always helps the prey population"],
        "contexts": [
            "A community pond group counts the number of frogs and insects around a local pond "
            "every spring for several years after a new walking path was built nearby.",
            "A class studies a patch of grass in the schoolyard where fungi have started growing "
            "and records how the grass and the fungi change over a season.",
        ],
        "quantity": ("Year", "Frog count"),
    },
    "PS1": {
        "dci": [("PS1.A", "Structure and properties of matter"),
                ("PS1.B", "Chemical reactions")],
        "sep": ["SEP2", "SEP3", "SEP4"], "ccc": ["CCC1", "CCC2", "CCC5"],
        "knowledge": ["Particles move faster when thermal energy is added",
                      "Substances have characteristic properties",
                      "Atoms are rearranged but conserved in a chemical reaction"],
        "misconceptions": ["Particles themselves expand when heated",
                           "Mass is lost when a substance changes state"],
        "contexts": [
            "A student heats a pot of water on a stove, recording the temperature every minute "
            "while watching what happens to the water as it starts to steam.",
            "Two friends leave ice cubes in cups on a kitchen counter and a sunny windowsill and "
            "compare how quickly the ice melts.",
        ],
        "quantity": ("Time (min)", "Temperature (°C)"),
    },
    "PS2": {
        "dci": [("PS2.A", "Forces and motion"),
                ("PS2.B", "Types of interactions")],
        "sep": ["SEP1", "SEP3", "SEP6"], "ccc": ["CCC2", "CCC4", "CCC7"],
        "knowledge": ["The motion of an object depends on the sum of the forces on it",
                      "A larger mass needs a larger force for the same change in motion",
                      "Magnetic forces can act at a distance"],
        "misconceptions": ["A moving object needs a constant force to keep moving",
                           "Heavier objects always fall faster"],
        "contexts": [
            "Students roll toy carts carrying different loads down the same ramp in the hallway "
            "and time how far each cart travels across the floor.",
            "A group plays tug-of-war with a rope toy and a dog, noticing when the toy moves and "
            "when it stays still.",
        ],
        "quantity": ("Load (g)", "Distance travelled (cm)"),
    },
    "PS3": {
        "dci": [("PS3.A", "Definitions of energy"),
                ("PS3.B", "Conservation of energy and energy transfer")],
        "sep": ["SEP3", "SEP4", "SEP6"], "ccc": ["CCC3", "CCC5", "CCC7"],
        "knowledge": ["Temperature measures the average kinetic energy of particles",
                      "Energy transfers from hotter objects to colder objects",
                      "Kinetic energy depends on mass and speed"],
        "misconceptions": ["Cold flows into warm objects",
                           "Temperature and thermal energy are the same thing"],
        "contexts": [
            "A family packs drinks into an insulated cooler for a picnic, and a student checks the "
            "temperature inside the cooler every hour during the afternoon.",
            "Students place metal, wooden and plastic spoons into the same cup of warm water and "
            "feel which handles warm up first.",
        ],
        "quantity": ("Time (h)", "Temperature (°C)"),
    },
}
_GENERIC = {
    "dci": [("GEN.A", "Core disciplinary idea named by the performance expectation")],
    "sep": ["SEP4", "SEP6"], "ccc": ["CCC1", "CCC2"],
    "knowledge": ["Key ideas stated in the performance expectation",
                  "Relationships between the variables involved"],
    "misconceptions": ["Correlation always means causation"],
    "contexts": ["A class collects measurements during a week-long investigation near the school "
                 "and looks for a pattern in what they recorded."],
    "quantity": ("Trial", "Measurement"),
}
_SKILLS = {code: f"Apply the practice of {name.lower()}" for code, name in SEPS.items()}


def _family_from_pe(pe_code: str) -> dict:
    m = re.match(r"[A-Z0-9]+-([A-Z]+[0-9]+)-", pe_code)
    return _FAMILIES.get(m.group(1), _GENERIC) if m else _GENERIC


def _family_from_codes(codes: list[str]) -> dict:
    for code in codes:
        fam = code.split(".")[0]
        if fam in _FAMILIES:
            return _FAMILIES[fam]
    return _GENERIC


# --------------------------------------------------------------------------
# backend
# --------------------------------------------------------------------------


class MockBackend:
    """Pure function of (stage label, seed, prompt) rendered as an LLM backend."""

    label = "mock"

    def __init__(self, script: MockScript | None = None):
        self.script = script or MockScript()

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        stage = request.stage_label
        h = prompt_hash(request.user_prompt)
        key = hashlib.blake2b(f"{stage}|{self.script.seed}|{h:016x}".encode(), digest_size=8).digest()
        rng = random.Random(int.from_bytes(key, "big"))
        objs = list(iter_json_objects(request.user_prompt))
        fixed = next((o for o in objs if o.get("stage") == stage), {})
        builder = _BUILDERS.get(stage)
        if builder is None:
            raise ValueError(f"mock backend has no template for stage {stage!r}")
        record = builder(rng, fixed, objs, request, self.script)
        return GenerationResponse(text=dumps(record), backend_label=self.label, latency_ms=0)


def _upstream(objs: list[dict], stage: str):
    for o in objs:
        if o.get("stage") == stage:
            try:
                return stage_from_dict(o, stage)
            except ValueError:
                continue
    raise ValueError(f"mock backend found no {stage} record in the prompt")


def _entries(rng: random.Random, codes: list[str], names: dict[str, str], k: int) -> tuple:
    picked = sorted(rng.sample(codes, k))
    return tuple(DimensionEntry(c, names[c]) for c in picked)


def _build_domain(rng, fixed, objs, request, script) -> DomainModel:
    pe = fixed["pe_code"]
    fam = _family_from_pe(pe)
    dci = fam["dci"][: rng.randint(1, len(fam["dci"]))]
    sep = _entries(rng, fam["sep"], SEPS, rng.randint(1, 2))
    ccc = _entries(rng, fam["ccc"], CCCS, 1)
    knowledge = rng.sample(fam["knowledge"], 2)
    return DomainModel(
        stage="domain_model",
        id=fixed["id"],
        pe_code=pe,
        grade_band=fixed["grade_band"],
        domain=fixed["domain"],
        dci=tuple(DimensionEntry(c, d) for c, d in dci),
        sep=sep,
        ccc=ccc,
        knowledge_components=tuple(knowledge),
        skill_components=tuple(_SKILLS[e.code] for e in sep),
    )


def _build_evidence(rng, fixed, objs, request, script) -> EvidenceModel:
    dm: DomainModel = _upstream(objs, "domain_model")
    fam = _family_from_codes([e.code for e in dm.dci])
    ksas = []
    for i, e in enumerate(dm.dci, 1):
        ksas.append(Ksa(f"K{i}", "knowledge", f"Knowledge of {e.description[0].lower()}{e.description[1:]}",
                        "DCI", e.code))
    for i, e in enumerate(dm.sep, 1):
        ksas.append(Ksa(f"S{i}", "skill", f"Skill in {e.description.lower()}", "SEP", e.code))
    for i, e in enumerate(dm.ccc, 1):
        ksas.append(Ksa(f"A{i}", "ability", f"Ability to reason about {e.description.lower()}",
                        "CCC", e.code))
    knowledge = ksas[: len(dm.dci)]
    practices = [k for k in ksas if k.kind != "knowledge"]
    statements = []
    for i in range(1, rng.randint(2, 3) + 1):
        k = knowledge[(i - 1) % len(knowledge)]
        s = rng.choice(practices)
        statements.append(EvidenceStatement(
            id=f"E{i}",
            ksa_ids=(k.id, s.id),
            observable_behavior=(f"Student identifies a pattern in the data and explains it with "
                                 f"{k.source_code} ({k.statement[13:]}), showing {s.statement[0].lower()}"
                                 f"{s.statement[1:]}"),
            partial_understandings=(f"Describes the pattern without linking it to {k.source_code}",),
            misconceptions=(rng.choice(fam["misconceptions"]),),
        ))
    return EvidenceModel(stage="evidence_model", id=fixed["id"], parent_id=fixed["parent_id"],
                         ksas=tuple(ksas), evidence_statements=tuple(statements))


def _build_scenario(rng, fixed, objs, request, script) -> ScenarioSpec:
    em: EvidenceModel = _upstream(objs, "evidence_model")
    fam = _family_from_codes([k.source_code for k in em.ksas])
    ids = [ev.id for ev in em.evidence_statements]
    chosen = [i for i in ids if rng.random() < 0.7] or [ids[0]]
    by_id = {ev.id: ev for ev in em.evidence_statements}
    return ScenarioSpec(
        stage="scenario",
        id=fixed["id"],
        parent_id=fixed["parent_id"],
        context=rng.choice(fam["contexts"]),
        task_conditions=(
            "Students work individually with the recorded data",
            "No outside resources are needed",
            rng.choice(["About 20 minutes", "About 15 minutes", "One class period"]),
        ),
        expected_evidence_behaviors=tuple(
            ExpectedBehavior(i, by_id[i].observable_behavior) for i in chosen),
    )


def _series(rng: random.Random, n: int) -> list[tuple[int, int]]:
    start = rng.randint(5, 25)
    step = rng.randint(2, 9)
    return [(x, start + step * x + rng.randint(-1, 1)) for x in range(n)]


def _build_task(rng, fixed, objs, request, script) -> AssessmentTask:
    em: EvidenceModel = _upstream(objs, "evidence_model")
    sc: ScenarioSpec = _upstream(objs, "scenario")
    fam = _family_from_codes([k.source_code for k in em.ksas])
    xname, yname = fam["quantity"]
    kind = rng.choice(["table", "graph"])
    points = _series(rng, rng.randint(4, 6))
    if kind == "table":
        title = f"{yname} by {xname.split(' (')[0].lower()}"
        content = "\n".join([f"{xname} | {yname}"] + [f"{x} | {y}" for x, y in points])
    else:
        title = f"{yname.split(' (')[0]} vs. {xname.split(' (')[0]}"
        content = (f"x-axis: {xname}\ny-axis: {yname}\npoints: "
                   + ", ".join(f"({x}, {y})" for x, y in points))
    ev_ids = ", ".join(b.evidence_id for b in sc.expected_evidence_behaviors)
    prompt = (f"{sc.context} Use the {kind} \"{title}\" (D1) to describe the pattern in the data. "
              f"Then explain what is happening to cause this pattern and support your explanation "
              f"with at least two values from the {kind}.")
    return AssessmentTask(
        stage="assessment_task",
        id=fixed["id"],
        parent_id=fixed["parent_id"],
        task_prompt=prompt,
        expected_student_response=(f"The student states that {yname[0].lower()}{yname[1:]} increases as "
                                   f"{xname.lower()} increases, cites values from {title}, and "
                                   f"explains the cause (evidence {ev_ids})."),
        scoring_rubric=(
            ScoringLevel(0, "No pattern identified or explanation unrelated to the data"),
            ScoringLevel(1, "Pattern identified but explanation missing or not tied to the data"),
            ScoringLevel(2, "Pattern identified and explained using values from the data"),
        ),
        task_features=(f"Data presented as a {kind}", "Constructed response",
                       rng.choice(["Single prompt", "Two-part prompt"])),
        fairness_considerations=("Context does not presume particular home resources",
                                 "Plain vocabulary with units stated"),
        data_representations=(DataRepresentation("D1", kind, title, content),),
    )


_FAIL_RATIONALES = {
    "three_dimensional_alignment": "The prompt asks for a description only; add a request to use "
                                   "the crosscutting concept when explaining the cause.",
    "cognitive_demand": "The task can be answered by reading one value; require students to "
                        "compare values across the data.",
    "language_clarity": "The prompt repeats the same label twice; remove the repetition and "
                        "state the question in one sentence.",
    "cross_agent_consistency": "The expected response mentions evidence the data representation "
                               "does not show; align the data with the scenario.",
}


def _build_verdict(rng, fixed, objs, request, script) -> EvaluationVerdict:
    m = re.search(r"Evaluation round: (\d+)", request.user_prompt)
    round_no = int(m.group(1)) if m else 1
    failing: set[str] = set()
    if script.fails_round(round_no):
        failing = set(rng.sample(CRITERIA, rng.randint(1, 2)))
    criteria = tuple(
        CriterionResult(name, name not in failing,
                        _FAIL_RATIONALES[name] if name in failing else "Criterion met.")
        for name in CRITERIA)
    return EvaluationVerdict(stage="evaluation", id=fixed["id"], parent_id=fixed["parent_id"],
                             passed=not failing, criteria=criteria)


_BUILDERS = {
    "domain_model": _build_domain,
    "evidence_model": _build_evidence,
    "scenario": _build_scenario,
    "assessment_task": _build_task,
    "evaluation": _build_verdict,
}
