"""Case scoring and benchmark aggregation.

Free-text answers score ``1 - NED``; single-choice answers score 1 or 0 after
letter extraction. The benchmark score is the plain mean over all cases, and
the report also breaks it down by (reasoning level, visual level) cell.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .kernels import levenshtein

if TYPE_CHECKING:
    from .tasks import TaskCase

R_LEVELS = ("R0", "R1", "R2")
V_LEVELS = ("V0", "V1", "V2")

_WS = re.compile(r"\s+")


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs over Unicode scalar values."""
    return levenshtein(a, b)


def ned(prediction: str, ground_truth: str, normalize_whitespace: bool = False) -> float:
    """Normalized edit distance in [0, 1]; two empty strings give 0."""
    if normalize_whitespace:
        prediction = _WS.sub(" ", prediction).strip()
        ground_truth = _WS.sub(" ", ground_truth).strip()
    longest = max(len(prediction), len(ground_truth))
    if longest == 0:
        return 0.0
    return levenshtein(prediction, ground_truth) / longest


def parse_choice(prediction: str, options: Sequence[str] = "ABCD") -> str | None:
    """First standalone option letter in ``prediction``, scanning left to right.

    A letter counts only when it is not adjacent to another letter or digit,
    so ``"cabbage"`` yields nothing while ``"The answer is C."`` yields ``C``.
    Matching is case-insensitive but restricted to ``options``.
    """
    allowed = {o.upper() for o in options}
    for match in re.finditer(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9])", prediction):
        letter = match.group(1).upper()
        if letter in allowed:
            return letter
    return None


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    score: float
    kind: str  # "ned", "choice" or "parse_failure"
    ned: float | None = None
    correct: bool | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")
        if self.kind == "choice" and self.score not in (0.0, 1.0):
            raise ValueError("choice scores must be 0 or 1")


def case_score(prediction: str | None, case: TaskCase, normalize_whitespace: bool = False) -> CaseScore:
    if prediction is None:
        return CaseScore(case.case_id, 0.0, "parse_failure")
    if case.answer_kind == "choice":
        letter = parse_choice(prediction, case.options)
        if letter is None:
            return CaseScore(case.case_id, 0.0, "parse_failure")
        ok = letter == case.ground_truth.upper()
        return CaseScore(case.case_id, 1.0 if ok else 0.0, "choice", correct=ok)
    d = ned(prediction, case.ground_truth, normalize_whitespace)
    return CaseScore(case.case_id, 1.0 - d, "ned", ned=d)


@dataclass
class BenchReport:
    overall: float
    n: int
    grid: dict[tuple[str, str], tuple[float, int]] = field(default_factory=dict)
    scores: list[CaseScore] = field(default_factory=list)

    def cell(self, r: str, v: str) -> float | None:
        entry = self.grid.get((r, v))
        return None if entry is None else entry[0]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "n": self.n,
            "grid": {f"{r}{v}": {"mean": m, "count": c} for (r, v), (m, c) in sorted(self.grid.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Rows R0-R2, columns V0-V2 plus the overall score."""
        lines = ["      " + "".join(f"{v:>8}" for v in V_LEVELS)]
        for r in R_LEVELS:
            cells = []
            for v in V_LEVELS:
                value = self.cell(r, v)
                cells.append(f"{'-':>8}" if value is None else f"{value:8.3f}")
            lines.append(f"{r:<6}" + "".join(cells))
        lines.append(f"Overall {self.overall:.3f}  (N={self.n})")
        return "\n".join(lines)


def aggregate(scores: Iterable[CaseScore], cases: Sequence[TaskCase]) -> BenchReport:
    """Mean score over ``cases``; a case without a score counts as a failure."""
    if not cases:
        raise ValueError("cannot aggregate an empty suite")
    by_id = {s.case_id: s for s in scores}
    ordered: list[CaseScore] = []
    cells: dict[tuple[str, str], list[float]] = {}
    for case in cases:
        s = by_id.get(case.case_id) or CaseScore(case.case_id, 0.0, "parse_failure")
        ordered.append(s)
        cells.setdefault((case.r_level, case.v_level), []).append(s.score)
    overall = sum(s.score for s in ordered) / len(ordered)
    grid = {key: (sum(vals) / len(vals), len(vals)) for key, vals in cells.items()}
    return BenchReport(overall=overall, n=len(ordered), grid=grid, scores=ordered)


def score_predictions(
    predictions: Mapping[str, str], cases: Sequence[TaskCase], normalize_whitespace: bool = False
) -> BenchReport:
    scores = [case_score(predictions.get(c.case_id), c, normalize_whitespace) for c in cases]
    return aggregate(scores, cases)


def read_predictions(path) -> dict[str, str]:
    """Read ``{"case_id": ..., "prediction": ...}`` JSON lines."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                out[str(rec["case_id"])] = str(rec["prediction"])
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
    return out


def write_predictions(path, predictions: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cid, pred in predictions.items():
            fh.write(json.dumps({"case_id": cid, "prediction": pred}, ensure_ascii=False) + "\n")
