"""Rubric ratings: inter-rater agreement and distribution reports.

Agreement uses Gwet's two-rater coefficients. With weights ``w`` over
``K`` categories, ``p[k][l]`` the share of units rated ``k`` by rater 1
and ``l`` by rater 2, and ``pi[k]`` the mean of the two raters' marginals:

    pa = sum_kl w[k][l] * p[k][l]
    pe = T_w / (K * (K - 1)) * sum_k pi[k] * (1 - pi[k]),   T_w = sum_kl w[k][l]
    AC = (pa - pe) / (1 - pe)

Identity weights give AC1; quadratic weights give AC2. Standard errors
come from a leave-one-unit-out jackknife.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

SCALES: dict[str, tuple[int, ...]] = {
    "dichotomous": (1, 0),
    "ordinal3": (2, 1, 0),
    "dok3": (2, 1, 0),
}  # category codes, highest first
SCALE_LABELS: dict[str, dict[int, str]] = {
    "dichotomous": {1: "Satisfies", 0: "Does Not Satisfy"},
    "ordinal3": {2: "Evident", 1: "Partially Evident", 0: "Not Evident"},
    "dok3": {2: "DOK 3-4", 1: "DOK 2", 0: "DOK 1"},
}
CRITERIA: dict[str, str] = {
    "C1_alignment": "C1. NGSS 3D Alignment",
    "C2_cognitive_demand": "C2. Cognitive Demand",
    "C3_engagement": "C3. Engagement",
    "C4_language": "C4. Language",
    "C5_multimodal": "C5. Multimodal Design",
}
SOURCES = ("human", "mas")
CSV_HEADER = ("item_id", "source", "rater_id", "component_id", "value")
Z95 = 1.96


class AnalyticsError(ValueError):
    pass


class RatingError(AnalyticsError):
    pass


class DuplicateRating(AnalyticsError):
    pass


class MissingComponent(AnalyticsError):
    pass


class MissingSource(AnalyticsError):
    pass


class MixedScales(AnalyticsError):
    pass


class RaterCountError(AnalyticsError):
    pass


class TooFewUnits(AnalyticsError):
    pass


class DegenerateData(AnalyticsError):
    pass


# --------------------------------------------------------------------------
# rubric
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RubricComponent:
    id: str
    criterion: str
    label: str
    scale: str

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise RatingError(f"component {self.id!r}: unknown criterion {self.criterion!r}")
        if self.scale not in SCALES:
            raise RatingError(f"component {self.id!r}: unknown scale {self.scale!r}")

    @property
    def categories(self) -> tuple[int, ...]:
        """Category codes in ascending order (the weight-matrix index order)."""
        return tuple(sorted(SCALES[self.scale]))


@dataclass(frozen=True)
class RubricDefinition:
    name: str
    components: tuple[RubricComponent, ...]

    def __post_init__(self):
        ids = [c.id for c in self.components]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise RatingError(f"duplicate rubric component ids: {dupes}")

    def component(self, component_id: str) -> RubricComponent:
        for c in self.components:
            if c.id == component_id:
                return c
        raise MissingComponent(f"rubric has no component {component_id!r}")

    def ids_with_scale(self, scale: str) -> list[str]:
        return [c.id for c in self.components if c.scale == scale]

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "components": [asdict(c) for c in self.components]},
                          indent=2) + "\n"


def rubric_from_json(text: str) -> RubricDefinition:
    data = json.loads(text)
    if not isinstance(data, dict) or set(data) != {"name", "components"}:
        raise RatingError("rubric must be an object with exactly 'name' and 'components'")
    comps = []
    for i, c in enumerate(data["components"]):
        if not isinstance(c, dict) or set(c) != {"id", "criterion", "label", "scale"}:
            raise RatingError(f"rubric component {i} needs exactly id, criterion, label, scale")
        comps.append(RubricComponent(**{k: str(v) for k, v in c.items()}))
    return RubricDefinition(str(data["name"]), tuple(comps))


def load_rubric(path: str | Path | None = None) -> RubricDefinition:
    """Load a rubric file; ``None`` gives the canonical 14-component rubric."""
    if path is None:
        text = (resources.files("ecdmas") / "rubric.canonical.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return rubric_from_json(text)


# --------------------------------------------------------------------------
# ratings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RatingRecord:
    item_id: str
    source: str
    rater_id: str
    component_id: str
    value: int


class RatingTable:
    """Validated collection of ratings, unique per (item, rater, component)."""

    def __init__(self, records: Iterable[RatingRecord], rubric: RubricDefinition):
        self.rubric = rubric
        self.records: tuple[RatingRecord, ...] = tuple(records)
        seen: set[tuple[str, str, str]] = set()
        item_source: dict[str, str] = {}
        for r in self.records:
            comp = rubric.component(r.component_id)
            if r.value not in comp.categories:
                raise RatingError(f"{r.item_id}/{r.component_id}: value {r.value} not in "
                                  f"{list(comp.categories)} ({comp.scale})")
            if r.source not in SOURCES:
                raise RatingError(f"{r.item_id}: source must be one of {SOURCES}, got {r.source!r}")
            if item_source.setdefault(r.item_id, r.source) != r.source:
                raise RatingError(f"item {r.item_id!r} appears under two sources")
            key = (r.item_id, r.rater_id, r.component_id)
            if key in seen:
                raise DuplicateRating(f"rater {r.rater_id!r} rated {r.item_id}/{r.component_id} twice")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.records)

    def rater_ids(self) -> list[str]:
        return sorted({r.rater_id for r in self.records})

    def sources(self) -> set[str]:
        return {r.source for r in self.records}


def read_ratings_csv(path: str | Path, rubric: RubricDefinition) -> RatingTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise RatingError(f"ratings CSV header must be {','.join(CSV_HEADER)}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise RatingError(f"line {line_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            item, source, rater, comp, value = (c.strip() for c in row)
            try:
                v = int(value)
            except ValueError:
                raise RatingError(f"line {line_no}: value {value!r} is not an integer") from None
            records.append(RatingRecord(item, source, rater, comp, v))
    return RatingTable(records, rubric)


def write_ratings_csv(path: str | Path, records: Iterable[RatingRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.item_id, r.source, r.rater_id, r.component_id, r.value])


# --------------------------------------------------------------------------
# agreement
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightMatrix:
    weights: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        k = len(self.weights)
        if k < 2 or any(len(row) != k for row in self.weights):
            raise ValueError("weight matrix must be square with size >= 2")
        for i in range(k):
            if self.weights[i][i] != 1.0:
                raise ValueError("weight matrix diagonal must be 1")
            for j in range(k):
                if not 0.0 <= self.weights[i][j] <= 1.0:
                    raise ValueError("weights must lie in [0, 1]")
                if self.weights[i][j] != self.weights[j][i]:
                    raise ValueError("weight matrix must be symmetric")

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def is_identity(self) -> bool:
        return all(self.weights[i][j] == (1.0 if i == j else 0.0)
                   for i in range(self.size) for j in range(self.size))

    def total(self) -> float:
        return sum(sum(row) for row in self.weights)


def identity_weights(k: int) -> WeightMatrix:
    if k < 2:
        raise ValueError("need at least 2 categories")
    return WeightMatrix(tuple(tuple(1.0 if i == j else 0.0 for j in range(k)) for i in range(k)))


def quadratic_weights(k: int) -> WeightMatrix:
    """w[i][j] = 1 - (i - j)^2 / (k - 1)^2."""
    if k < 2:
        raise ValueError("need at least 2 categories")
    d = (k - 1) ** 2
    return WeightMatrix(tuple(tuple(1.0 - (i - j) ** 2 / d for j in range(k)) for i in range(k)))


@dataclass(frozen=True)
class AgreementResult:
    coefficient: str  # AC1 | AC2
    estimate: float
    pa: float
    pe: float
    standard_error: float
    ci95: tuple[float, float]
    n_units: int
    n_dropped: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def _counts(pairs: Sequence[tuple[int, int]], k: int) -> list[list[int]]:
    table = [[0] * k for _ in range(k)]
    for a, b in pairs:
        table[a][b] += 1
    return table


def _pa_pe(table: list[list[int]], n: int, w: WeightMatrix) -> tuple[float, float]:
    k = w.size
    agree = 0.0
    row = [0] * k
    col = [0] * k
    for i in range(k):
        for j in range(k):
            c = table[i][j]
            if c:
                agree += w.weights[i][j] * c
                row[i] += c
                col[j] += c
    pa = agree / n
    spread = 0.0
    for i in range(k):
        pi = (row[i] + col[i]) / (2 * n)
        spread += pi * (1.0 - pi)
    pe = w.total() / (k * (k - 1)) * spread
    return pa, pe


def _coefficient(pa: float, pe: float) -> float:
    if pe >= 1.0:
        raise DegenerateData(f"chance agreement pe={pe} leaves nothing to correct")
    return (pa - pe) / (1.0 - pe)


def _index_pairs(ratings, categories) -> tuple[list[tuple[int, int]], int]:
    index = {c: i for i, c in enumerate(categories)}
    pairs, dropped = [], 0
    for a, b in ratings:
        if a is None or b is None:
            dropped += 1
            continue
        try:
            pairs.append((index[a], index[b]))
        except KeyError as exc:
            raise RatingError(f"rating {exc.args[0]!r} outside categories {list(categories)}") from None
    return pairs, dropped


def observed_and_chance(ratings: Sequence[tuple[int, int]], weights: WeightMatrix,
                        categories: Sequence[int] | None = None) -> tuple[float, float]:
    """(pa, pe) from a single pass over the contingency counts."""
    categories = tuple(range(weights.size)) if categories is None else tuple(categories)
    pairs, _ = _index_pairs(ratings, categories)
    if not pairs:
        raise TooFewUnits("no complete rating pairs")
    return _pa_pe(_counts(pairs, weights.size), len(pairs), weights)


def gwet_ac(ratings: Sequence[tuple[int | None, int | None]], weights: WeightMatrix,
            categories: Sequence[int] | None = None) -> AgreementResult:
    """Gwet's AC1/AC2 for two raters.

    ``ratings`` holds one (rater 1, rater 2) pair per unit; ``None`` marks a
    missing rating and drops the unit. ``categories`` lists the category
    codes in weight-matrix order (default ``0..K-1``).
    """
    categories = tuple(range(weights.size)) if categories is None else tuple(categories)
    if len(categories) != weights.size:
        raise ValueError("categories and weight matrix disagree on K")
    pairs, dropped = _index_pairs(ratings, categories)
    n = len(pairs)
    if n < 2:
        raise TooFewUnits(f"need at least 2 complete units, have {n}")
    k = weights.size
    table = _counts(pairs, k)
    pa, pe = _pa_pe(table, n, weights)
    estimate = _coefficient(pa, pe)

    # jackknife: a left-out unit only matters through its cell, so group by cell
    loo: list[tuple[float, int]] = []
    for i in range(k):
        for j in range(k):
            c = table[i][j]
            if not c:
                continue
            table[i][j] -= 1
            loo.append((_coefficient(*_pa_pe(table, n - 1, weights)), c))
            table[i][j] += 1
    mean = sum(v * c for v, c in loo) / n
    ss = sum(c * (v - mean) ** 2 for v, c in loo)
    se = math.sqrt((n - 1) / n * ss)
    ci = (max(-1.0, estimate - Z95 * se), min(1.0, estimate + Z95 * se))
    return AgreementResult(
        coefficient="AC1" if weights.is_identity else "AC2",
        estimate=estimate, pa=pa, pe=pe, standard_error=se, ci95=ci,
        n_units=n, n_dropped=dropped,
    )


def weights_for(component: RubricComponent) -> WeightMatrix:
    """Quadratic weights for three-point ordinal components, identity otherwise."""
    k = len(component.categories)
    return quadratic_weights(k) if component.scale == "ordinal3" else identity_weights(k)


def _two_raters(table: RatingTable) -> tuple[str, str]:
    raters = table.rater_ids()
    if len(raters) != 2:
        raise RaterCountError(f"exactly 2 raters required, found {len(raters)}: {raters}")
    return raters[0], raters[1]


def _unit_pairs(table: RatingTable, component_ids: Sequence[str], r1: str, r2: str):
    wanted = set(component_ids)
    cells: dict[tuple[str, str], dict[str, int]] = defaultdict(dict)
    for r in table.records:
        if r.component_id in wanted:
            cells[(r.item_id, r.component_id)][r.rater_id] = r.value
    return [(cells[u].get(r1), cells[u].get(r2)) for u in sorted(cells)]


def component_agreement(table: RatingTable, rubric: RubricDefinition) -> dict[str, AgreementResult]:
    """Per-component coefficient, in rubric order."""
    r1, r2 = _two_raters(table)
    present = {r.component_id for r in table.records}
    out = {}
    for comp in rubric.components:
        if comp.id not in present:
            raise MissingComponent(f"no ratings for rubric component {comp.id!r}")
        pairs = _unit_pairs(table, [comp.id], r1, r2)
        out[comp.id] = gwet_ac(pairs, weights_for(comp), comp.categories)
    return out


def pooled_agreement(table: RatingTable, rubric: RubricDefinition,
                     component_ids: Sequence[str]) -> AgreementResult:
    """One coefficient over all (item, component) units of the listed components."""
    comps = [rubric.component(c) for c in component_ids]
    if not comps:
        raise ValueError("no components to pool")
    scales = {c.scale for c in comps}
    if len(scales) > 1:
        raise MixedScales(f"cannot pool components with scales {sorted(scales)}")
    r1, r2 = _two_raters(table)
    pairs = _unit_pairs(table, component_ids, r1, r2)
    return gwet_ac(pairs, weights_for(comps[0]), comps[0].categories)


# --------------------------------------------------------------------------
# distribution reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DistributionRow:
    criterion: str
    component_id: str
    label: str
    scale: str
    human: tuple[int, ...]  # counts, highest category first
    mas: tuple[int, ...]

    @staticmethod
    def fmt(counts: Sequence[int]) -> str:
        return " / ".join(str(c) for c in counts)


def _consensus_counts(table: RatingTable, rubric: RubricDefinition):
    seen: set[tuple[str, str]] = set()
    counts: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for r in table.records:
        key = (r.item_id, r.component_id)
        if key in seen:
            raise DuplicateRating(f"more than one rating for {r.item_id}/{r.component_id}")
        seen.add(key)
        counts[(r.source, r.component_id)][r.value] += 1
    return counts


def distribution_report(consensus: RatingTable, rubric: RubricDefinition) -> list[DistributionRow]:
    counts = _consensus_counts(consensus, rubric)
    rows = []
    for crit in CRITERIA:
        for comp in (c for c in rubric.components if c.criterion == crit):
            order = SCALES[comp.scale]
            per = {s: tuple(counts[(s, comp.id)][v] for v in order) for s in SOURCES}
            rows.append(DistributionRow(crit, comp.id, comp.label, comp.scale, per["human"], per["mas"]))
    return rows


@dataclass(frozen=True)
class SourceComparison:
    component_id: str
    human: tuple[int, ...]
    mas: tuple[int, ...]
    human_top: float | None  # share of items in the highest category
    mas_top: float | None
    top_delta: float | None  # mas_top - human_top


def compare_sources(consensus: RatingTable, rubric: RubricDefinition) -> list[SourceComparison]:
    present = consensus.sources()
    for s in SOURCES:
        if s not in present:
            raise MissingSource(f"no {s!r} ratings in the consensus table")
    out = []
    for row in distribution_report(consensus, rubric):
        h = row.human[0] / sum(row.human) if sum(row.human) else None
        m = row.mas[0] / sum(row.mas) if sum(row.mas) else None
        delta = m - h if h is not None and m is not None else None
        out.append(SourceComparison(row.component_id, row.human, row.mas, h, m, delta))
    return out


def format_distribution(rows: Sequence[DistributionRow]) -> str:
    header = ("Criterion", "Component", "Human (counts)", "MAS (counts)")
    body = []
    last = None
    for r in rows:
        crit = CRITERIA[r.criterion] if r.criterion != last else ""
        last = r.criterion
        body.append((crit, r.label, r.fmt(r.human), r.fmt(r.mas)))
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(4)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    rule = "-" * (sum(widths) + 6)
    return "\n".join([line(header), rule, *(line(b) for b in body)]) + "\n"


def format_comparison(comps: Sequence[SourceComparison], rubric: RubricDefinition) -> str:
    def pct(x: float | None) -> str:
        return "n/a" if x is None else f"{x:.3f}"

    def signed(x: float | None) -> str:
        return "n/a" if x is None else f"{x:+.3f}"

    header = ("Component", "Human top", "MAS top", "Delta")
    body = [(rubric.component(c.component_id).label, pct(c.human_top), pct(c.mas_top),
             signed(c.top_delta)) for c in comps]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(4)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header), "-" * (sum(widths) + 6), *(line(b) for b in body)]) + "\n"


def report_json(rows: Sequence[DistributionRow], comps: Sequence[SourceComparison]) -> str:
    doc = {
        "distribution": [
            {"criterion": r.criterion, "component_id": r.component_id, "label": r.label,
             "scale": r.scale, "categories": list(SCALES[r.scale]),
             "human": list(r.human), "mas": list(r.mas),
             "human_text": r.fmt(r.human), "mas_text": r.fmt(r.mas)}
            for r in rows
        ],
        "comparison": [
            {"component_id": c.component_id, "human": list(c.human), "mas": list(c.mas),
             "human_top": c.human_top, "mas_top": c.mas_top, "top_delta": c.top_delta}
            for c in comps
        ],
    }
    return json.dumps(doc, indent=2) + "\n"
