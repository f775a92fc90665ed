"""Exit criteria. Each test carries an ``acceptance`` marker; the terminal
summary prints one PASS/FAIL line per criterion."""

import copy
import json
import random
import time

import pytest

from ecdmas.agents import GenerationSpec
from ecdmas.analytics import (
    RatingRecord,
    component_agreement,
    gwet_ac,
    identity_weights,
    load_rubric,
    observed_and_chance,
    pooled_agreement,
    quadratic_weights,
    read_ratings_csv,
    write_ratings_csv,
)
from ecdmas.backend import GenerationRequest, HttpChatBackend, RemoteError
from ecdmas.cli import main
from ecdmas.mock import MockBackend, MockScript
from ecdmas.pipeline import Backends, PipelineConfig, run_pipeline, validate_bundle
from ecdmas.schema import SchemaError, deserialize_bundle, deserialize_stage, serialize_bundle, serialize_stage

import oracles
from conftest import FIXED_TIME, SleepRecorder, StubServer, chat_reply, make_bundle
from consensus_counts import CONSENSUS_COUNTS, consensus_records

LS_PES = ["MS-LS1-1", "MS-LS1-2", "MS-LS1-3", "MS-LS1-4", "MS-LS1-5", "MS-LS1-6", "MS-LS1-7",
          "MS-LS1-8", "MS-LS2-1", "MS-LS2-2", "MS-LS2-3", "MS-LS2-4", "MS-LS2-5", "MS-LS3-1",
          "MS-LS3-2"]
PS_PES = ["MS-PS1-1", "MS-PS1-2", "MS-PS1-3", "MS-PS1-4", "MS-PS1-5", "MS-PS1-6", "MS-PS2-1",
          "MS-PS2-2", "MS-PS2-3", "MS-PS2-4", "MS-PS2-5", "MS-PS3-1", "MS-PS3-2", "MS-PS3-3",
          "MS-PS3-4"]


# --------------------------------------------------------------------------
# 1. deterministic pipeline
# --------------------------------------------------------------------------


def _generate(out):
    argv = ["generate", "--seed", "2024", "--out", str(out)]
    for pe in LS_PES + PS_PES:
        argv += ["--pe", pe]
    return main(argv)


@pytest.mark.acceptance("1 deterministic 30-spec mock run")
def test_deterministic_pipeline(tmp_path, capsys):
    assert len(set(LS_PES)) == 15 and len(set(PS_PES)) == 15
    start = time.perf_counter()
    assert _generate(tmp_path / "run1") == 0
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, elapsed
    assert _generate(tmp_path / "run2") == 0
    first = sorted(p.name for p in (tmp_path / "run1").glob("*.bundle.json"))
    second = sorted(p.name for p in (tmp_path / "run2").glob("*.bundle.json"))
    assert len(first) == 30 and first == second
    for name in first:
        assert (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    capsys.readouterr()


# --------------------------------------------------------------------------
# 2. regeneration loop
# --------------------------------------------------------------------------


@pytest.mark.acceptance("2 regeneration loop attempts and final version")
@pytest.mark.parametrize("n", [0, 1, 2, 3])
def test_regeneration_loop(tmp_path, n):
    bundle = make_bundle(tmp_path, mode=f"fail_first_n:{n}")
    assert len(bundle.attempts) == min(n + 1, 3)
    assert bundle.quality_passed == (n <= 2)
    assert bundle.final_attempt_index == len(bundle.attempts)
    written = deserialize_bundle((tmp_path / f"{bundle.bundle_id}.bundle.json").read_bytes())
    assert written.final_attempt.task == bundle.attempts[-1].task


# --------------------------------------------------------------------------
# 3. structural constraints
# --------------------------------------------------------------------------


def _task_id(d, i=0):
    return d["attempts"][i]["task"]["id"]


CORRUPTIONS = [
    ("scenario parent points downstream",
     lambda d: d["scenario"].update(parent_id=_task_id(d)), "FLOW", "/scenario/parent_id"),
    ("evidence model parent unknown",
     lambda d: d["evidence_model"].update(parent_id="stg-000000000000"), "FLOW", "/evidence_model/parent_id"),
    ("verdict parent skips the task",
     lambda d: d["attempts"][1]["verdict"].update(parent_id=d["scenario"]["id"]),
     "FLOW", "/attempts/1/verdict/parent_id"),
    ("ksa cites foreign code",
     lambda d: d["evidence_model"]["ksas"][0].update(source_code="ZZ-0"),
     "KSA_SOURCE", "/evidence_model/ksas/0/source_code"),
    ("ksa cites unknown PE",
     lambda d: d["evidence_model"]["ksas"][1].update(source_code="XX-999"),
     "KSA_SOURCE", "/evidence_model/ksas/1/source_code"),
    ("task without data representations",
     lambda d: d["attempts"][1]["task"].update(data_representations=[]),
     "EVIDENCE_FIRST", "/attempts/1/task/data_representations"),
    ("task prompt ignores its data",
     lambda d: d["attempts"][0]["task"].update(task_prompt="Explain what you would expect to observe and why."),
     "EVIDENCE_FIRST", "/attempts/0/task/task_prompt"),
    ("behavior cites missing evidence",
     lambda d: d["scenario"]["expected_evidence_behaviors"][0].update(evidence_id="E99"),
     "REF_INTEGRITY", "/scenario/expected_evidence_behaviors/0/evidence_id"),
    ("evidence cites missing ksa",
     lambda d: d["evidence_model"]["evidence_statements"][0].update(ksa_ids=["K99"]),
     "REF_INTEGRITY", "/evidence_model/evidence_statements/0/ksa_ids/0"),
    ("final index not last", lambda d: d.update(final_attempt_index=1), "SCHEMA", "/final_attempt_index"),
    ("quality flag contradicts verdict", lambda d: d.update(quality_passed=False), "SCHEMA", "/quality_passed"),
    ("attempt index out of order", lambda d: d["attempts"][1].update(index=3), "SCHEMA", "/attempts/1/index"),
    ("verdict missing a criterion",
     lambda d: d["attempts"][0]["verdict"].update(criteria=d["attempts"][0]["verdict"]["criteria"][:3]),
     "SCHEMA", "/attempts/0/verdict/criteria"),
    ("timestamp not RFC 3339", lambda d: d.update(created_at="yesterday"), "SCHEMA", "/created_at"),
]


@pytest.fixture(scope="module")
def two_attempt_bundle(tmp_path_factory):
    bundle = make_bundle(tmp_path_factory.mktemp("corpus"), mode="fail_first_n:1")
    assert len(bundle.attempts) == 2
    return json.loads(serialize_bundle(bundle))


def test_corruption_corpus_shape():
    codes = [c[2] for c in CORRUPTIONS]
    assert len(CORRUPTIONS) >= 12
    for code in ("FLOW", "KSA_SOURCE", "EVIDENCE_FIRST", "REF_INTEGRITY", "SCHEMA"):
        assert codes.count(code) >= 2, code


@pytest.mark.acceptance("3 structural violations detected with code and pointer")
@pytest.mark.parametrize("name, corrupt, code, path", CORRUPTIONS, ids=[c[0] for c in CORRUPTIONS])
def test_corrupted_bundle_detected(two_attempt_bundle, name, corrupt, code, path):
    data = copy.deepcopy(two_attempt_bundle)
    corrupt(data)
    found = [(v.code, v.path) for v in validate_bundle(deserialize_bundle(json.dumps(data)))]
    assert found == [(code, path)]


@pytest.mark.acceptance("3 structural violations detected with code and pointer")
@pytest.mark.parametrize("mode", ["pass_all", "fail_first_n:1", "fail_first_n:2", "fail_always"])
def test_pipeline_bundles_validate_clean(tmp_path, mode):
    for pe in ("MS-PS1-4", "MS-LS2-2", "MS-PS3-4", "MS-LS1-6", "MS-ESS2-4"):
        assert validate_bundle(make_bundle(tmp_path, mode=mode, pe=pe)) == []


# --------------------------------------------------------------------------
# 4. agreement correctness
# --------------------------------------------------------------------------


@pytest.mark.acceptance("4 agreement coefficients")
def test_ac1_binary_worked_example():
    r1 = [1] * 8 + [0, 0]
    r2 = [1] * 7 + [0, 0, 0]
    res = gwet_ac(list(zip(r1, r2)), identity_weights(2))
    assert abs(res.estimate - 0.84) <= 1e-10
    assert abs(res.estimate - oracles.brute_ac(r1, r2, oracles.identity(2))) <= 1e-10


@pytest.mark.acceptance("4 agreement coefficients")
def test_ac2_quadratic_worked_example():
    r1 = [2, 2, 2, 1, 1, 2, 2, 2, 1, 0]
    r2 = [2, 2, 2, 1, 1, 2, 2, 1, 1, 0]
    res = gwet_ac(list(zip(r1, r2)), quadratic_weights(3))
    assert abs(res.estimate - (0.975 - 0.565) / 0.435) <= 1e-10
    assert abs(res.estimate - oracles.brute_ac(r1, r2, oracles.quadratic(3))) <= 1e-10


def _random_tables(seed, count=1000):
    rng = random.Random(seed)
    for _ in range(count):
        k = rng.randint(2, 5)
        n = rng.randint(2, 80)
        r1 = [rng.randrange(k) for _ in range(n)]
        r2 = [a if rng.random() < 0.5 else rng.randrange(k) for a in r1]
        yield k, r1, r2


@pytest.mark.acceptance("4 agreement coefficients")
def test_identity_ac2_equals_ac1():
    for k, r1, r2 in _random_tables(11):
        weighted = gwet_ac(list(zip(r1, r2)), identity_weights(k)).estimate
        n = len(r1)
        pa = sum(a == b for a, b in zip(r1, r2)) / n
        pe = sum(p * (1 - p) for p in ((r1.count(c) + r2.count(c)) / (2 * n) for c in range(k))) / (k - 1)
        assert abs(weighted - (pa - pe) / (1 - pe)) <= 1e-12


@pytest.mark.acceptance("4 agreement coefficients")
@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_perfect_agreement_exactly_one(k):
    rng = random.Random(k)
    r = [rng.randrange(k) for _ in range(30)]
    assert gwet_ac(list(zip(r, r)), identity_weights(k)).estimate == 1.0
    assert gwet_ac(list(zip(r, r)), quadratic_weights(k)).estimate == 1.0


@pytest.mark.acceptance("4 agreement coefficients")
def test_pa_pe_match_brute_force():
    for i, (k, r1, r2) in enumerate(_random_tables(12)):
        w = oracles.quadratic(k) if i % 2 else oracles.identity(k)
        matrix = quadratic_weights(k) if i % 2 else identity_weights(k)
        pa, pe = observed_and_chance(list(zip(r1, r2)), matrix)
        assert abs(pa - oracles.brute_pa(r1, r2, w)) <= 1e-12
        assert abs(pe - oracles.brute_pe(r1, r2, w)) <= 1e-12


# --------------------------------------------------------------------------
# 5. distribution table as data
# --------------------------------------------------------------------------

EXPECTED_ROWS = [
    ("C1. NGSS 3D Alignment", "Performance Expectation", "30 / 0", "30 / 0"),
    ("", "Science and Engineering Practice", "30 / 0", "30 / 0"),
    ("", "Disciplinary Core Ideas", "30 / 0", "30 / 0"),
    ("", "Cross-Cutting Concepts", "30 / 0", "30 / 0"),
    ("", "Evidence Collectability", "25 / 5 / 0", "16 / 8 / 6"),
    ("C2. Cognitive Demand", "Depth of Knowledge", "29 / 1 / 0", "30 / 0 / 0"),
    ("C3. Engagement", "Relevance - Interest", "16 / 14 / 0", "6 / 24 / 0"),
    ("", "Relevance - Inclusivity", "27 / 3 / 0", "30 / 0 / 0"),
    ("C4. Language", "Clarity", "29 / 1 / 0", "2 / 25 / 3"),
    ("", "Conciseness", "28 / 2 / 0", "20 / 10 / 0"),
    ("", "Appropriateness", "30 / 0 / 0", "30 / 0 / 0"),
    ("C5. Multimodal Design", "Coherence", "30 / 0 / 0", "2 / 13 / 15"),
    ("", "Signaling", "27 / 3 / 0", "9 / 16 / 5"),
    ("", "Spatial contiguity", "30 / 0 / 0", "24 / 6 / 0"),
]


@pytest.mark.acceptance("5 consensus distribution rows reproduced")
def test_report_reproduces_distribution(tmp_path, capsys):
    rubric = load_rubric()
    csv_path = tmp_path / "consensus.csv"
    write_ratings_csv(csv_path, consensus_records(rubric))
    assert main(["report", "--ratings", str(csv_path)]) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    header = lines[0]
    cols = [header.index(h) for h in ("Criterion", "Component", "Human (counts)", "MAS (counts)")]
    rows = []
    for line in lines[2:2 + len(EXPECTED_ROWS)]:
        cells = [line[a:b].strip() for a, b in zip(cols, cols[1:] + [None])]
        rows.append(tuple(cells))
    assert rows == EXPECTED_ROWS
    assert len(CONSENSUS_COUNTS) == 14


@pytest.mark.acceptance("5 consensus distribution rows reproduced")
def test_checked_in_csv_matches_encoding(tmp_path, capsys):
    from pathlib import Path

    data = Path(__file__).parent / "data" / "consensus_counts.csv"
    rubric = load_rubric()
    assert sorted(read_ratings_csv(data, rubric).records, key=repr) == sorted(consensus_records(rubric), key=repr)
    assert main(["report", "--ratings", str(data), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    got = [(r["human_text"], r["mas_text"]) for r in doc["distribution"]]
    assert got == [(h, m) for _, _, h, m in EXPECTED_ROWS]


# --------------------------------------------------------------------------
# 6. perfect two-rater agreement
# --------------------------------------------------------------------------


@pytest.mark.acceptance("6 perfect two-rater agreement")
def test_perfect_two_rater_agreement(tmp_path, capsys):
    rubric = load_rubric()
    rng = random.Random(20)
    recs = []
    for i in range(20):
        for comp in rubric.components:
            v = rng.choice(comp.categories)
            for rater in ("rater-a", "rater-b"):
                recs.append(RatingRecord(f"item-{i:02d}", "mas", rater, comp.id, v))
    csv_path = tmp_path / "round2.csv"
    write_ratings_csv(csv_path, recs)
    assert main(["agreement", "--ratings", str(csv_path), "--pool-ordinal"]) == 0
    out = capsys.readouterr().out
    body = [ln for ln in out.splitlines()[2:] if ln.strip()]
    assert len(body) == 15 and all(" 1.00 " in ln for ln in body)

    table = read_ratings_csv(csv_path, rubric)
    results = component_agreement(table, rubric)
    assert len(results) == 14
    for cid, res in results.items():
        assert res.estimate == 1.0, cid
        assert res.coefficient == ("AC2" if rubric.component(cid).scale == "ordinal3" else "AC1")
    assert pooled_agreement(table, rubric, rubric.ids_with_scale("ordinal3")).estimate == 1.0


# --------------------------------------------------------------------------
# 7. schema robustness
# --------------------------------------------------------------------------


def _paths(node, prefix=""):
    yield prefix, node
    if isinstance(node, dict):
        for k, v in node.items():
            yield from _paths(v, f"{prefix}/{k}")
    elif isinstance(node, list):
        for i, v in enumerate(node):
            yield from _paths(v, f"{prefix}/{i}")


def _resolve(root, path):
    parts = [p for p in path.split("/")[1:]]
    node = root
    for p in parts[:-1]:
        node = node[int(p)] if isinstance(node, list) else node[p]
    return node, parts[-1]


def _flip(value):
    if isinstance(value, bool):
        return "true"
    if isinstance(value, (int, float)):
        return str(value)
    if isinstance(value, str):
        return 7
    if isinstance(value, list):
        return {"items": value}
    return [value]


def _mutate(rng, data):
    """Apply one mutation; return the JSON pointer it targets."""
    kind = rng.choice(["delete", "flip", "extra"])
    if kind == "extra":
        objects = [p for p, v in _paths(data) if isinstance(v, dict)]
        target = rng.choice(objects)
        node = data
        for p in [x for x in target.split("/")[1:]]:
            node = node[int(p)] if isinstance(node, list) else node[p]
        node["unexpected_field"] = 1
        return f"{target}/unexpected_field"
    if kind == "delete":
        keys = [p for p, _ in _paths(data) if p and isinstance(_resolve(data, p)[0], dict)]
        target = rng.choice(keys)
        parent, key = _resolve(data, target)
        del parent[key]
        return target
    target = rng.choice([p for p, _ in _paths(data) if p])
    parent, key = _resolve(data, target)
    if isinstance(parent, list):
        parent[int(key)] = _flip(parent[int(key)])
    else:
        parent[key] = _flip(parent[key])
    return target


@pytest.mark.acceptance("7 fuzzed stage JSON rejected with field path")
def test_fuzzed_mutations_rejected(chain):
    rng = random.Random(7)
    stages = [(rec.stage, json.loads(serialize_stage(rec))) for rec in chain]
    rejected = 0
    for _ in range(100):
        stage, original = rng.choice(stages)
        data = copy.deepcopy(original)
        path = _mutate(rng, data)
        with pytest.raises(SchemaError) as err:
            deserialize_stage(json.dumps(data), stage)
        assert err.value.path == path, (stage, path, str(err.value))
        rejected += 1
    assert rejected == 100


# --------------------------------------------------------------------------
# 8. live-backend contract
# --------------------------------------------------------------------------

TEMPLATE = {
    "model_name": "{{model}}",
    "prompt": {"system": "{{system_prompt}}", "user": "{{user_prompt}}"},
    "sampling": {"temperature": "{{temperature}}"},
    "tag": "stage={{stage_label}}",
}


def _request():
    return GenerationRequest("be precise", "describe the graph", "scenario", temperature=0.4)


@pytest.mark.acceptance("8 HTTP client contract")
def test_request_template_honored():
    with StubServer([("json", 200, {"out": {"text": "done"}})]) as srv:
        client = HttpChatBackend(srv.url, "model-x", request_template=TEMPLATE,
                                 response_path=("out", "text"), sleep=SleepRecorder())
        assert client.generate(_request()).text == "done"
    assert srv.calls == 1
    assert srv.bodies[0] == {
        "model_name": "model-x",
        "prompt": {"system": "be precise", "user": "describe the graph"},
        "sampling": {"temperature": 0.4},
        "tag": "stage=scenario",
    }


@pytest.mark.acceptance("8 HTTP client contract")
def test_two_timeouts_then_success():
    sleep = SleepRecorder()
    with StubServer([("sleep", 0.4), ("sleep", 0.4), ("json", 200, chat_reply("third time"))]) as srv:
        client = HttpChatBackend(srv.url, "m", timeout=0.1, sleep=sleep)
        assert client.generate(_request()).text == "third time"
    assert srv.calls == 3
    assert sleep.waits == [0.25, 1.0]


@pytest.mark.acceptance("8 HTTP client contract")
def test_server_error_surfaces_after_retries():
    sleep = SleepRecorder()
    with StubServer([("json", 500, {"error": "internal"})]) as srv:
        client = HttpChatBackend(srv.url, "m", sleep=sleep)
        with pytest.raises(RemoteError) as err:
            client.generate(_request())
    assert err.value.status == 500
    assert srv.calls == 3
    assert sleep.waits == [0.25, 1.0]


def test_pipeline_config_fixed_time(tmp_path):
    # guard for criterion 1: mock runs never read the wall clock
    cfg = PipelineConfig(output_dir=tmp_path, created_at=FIXED_TIME)
    bundle = run_pipeline(GenerationSpec("MS-PS1-4"), cfg, Backends(MockBackend(MockScript())))
    assert bundle.created_at == FIXED_TIME
