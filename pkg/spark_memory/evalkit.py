"""
Evaluation kit
Aggregates LLM-judge score records (code quality 1-5, helpfulness bands) and renders the judge prompts
"""

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, localcontext
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import JudgeParseError, ValidationError
from .gateway import Gateway, GenerationRequest
from .models import Recommendation
from .retrieval import format_recommendation
from .templates import render_template

SCORES = (1, 2, 3, 4, 5)
MODES = ("quality", "helpfulness")


class Condition(str, Enum):
    NO_SPARK = "no_spark"
    WITH_SPARK = "with_spark"
    HUMAN_REFERENCE = "human_reference"

    @classmethod
    def parse(cls, raw: Any) -> "Condition":
        try:
            return cls(str(raw).strip().lower())
        except ValueError:
            raise ValidationError(f"unknown condition {raw!r}") from None


CONDITION_ORDER = {c: i for i, c in enumerate(Condition)}


class Band(str, Enum):
    EXTREMELY_HELPFUL = "EXTREMELY_HELPFUL"
    GOOD = "GOOD"
    NEUTRAL = "NEUTRAL"
    POOR = "POOR"
    EXTREMELY_UNHELPFUL = "EXTREMELY_UNHELPFUL"

    @classmethod
    def parse(cls, raw: Any) -> "Band":
        name = re.sub(r"[\s\-]+", "_", str(raw).strip()).upper()
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(f"unknown band {raw!r}") from None


def round_half_up(value: Union[Fraction, Decimal, int], places: int) -> Decimal:
    """Display rounding; the exact value stays with the caller"""
    with localcontext() as ctx:
        ctx.prec = 60
        if isinstance(value, Fraction):
            value = Decimal(value.numerator) / Decimal(value.denominator)
        return Decimal(value).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


# ============================================================================
# RECORDS
# ============================================================================

@dataclass(frozen=True)
class ScoreRecord:
    problem_id: str
    condition: Condition
    model_tag: str
    score: int
    rationale: Optional[str] = None

    def validate(self) -> "ScoreRecord":
        if isinstance(self.score, bool) or not isinstance(self.score, int) or self.score not in SCORES:
            raise ValidationError(
                f"score record {self.problem_id!r} ({self.model_tag}/{self.condition.value}): "
                f"score must be an integer 1-5, got {self.score!r}"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "condition": self.condition.value,
            "model_tag": self.model_tag,
            "score": self.score,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScoreRecord":
        try:
            record = cls(
                problem_id=str(data["problem_id"]),
                condition=Condition.parse(data["condition"]),
                model_tag=str(data.get("model_tag", "")),
                score=data["score"],
                rationale=data.get("rationale"),
            )
        except KeyError as e:
            raise ValidationError(f"score record is missing {e.args[0]!r}") from None
        return record.validate()


@dataclass(frozen=True)
class BandRecord:
    problem_id: str
    band: Band
    rationale: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"problem_id": self.problem_id, "band": self.band.value, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BandRecord":
        if "problem_id" not in data or "band" not in data:
            raise ValidationError("band record needs problem_id and band")
        return cls(str(data["problem_id"]), Band.parse(data["band"]), data.get("rationale"))


def records_from_histogram(model_tag: str, condition: Union[Condition, str],
                           histogram: Union[Mapping[int, int], Sequence[int]]) -> List[ScoreRecord]:
    """Expand a published score histogram (scores 1..5) into individual records"""
    condition = condition if isinstance(condition, Condition) else Condition.parse(condition)
    if not isinstance(histogram, Mapping):
        if len(histogram) != len(SCORES):
            raise ValidationError("histogram needs exactly five counts")
        histogram = dict(zip(SCORES, histogram))
    records = []
    for score in SCORES:
        for _ in range(int(histogram.get(score, 0))):
            problem_id = f"{model_tag}-{condition.value}-{len(records):05d}"
            records.append(ScoreRecord(problem_id, condition, model_tag, score))
    return records


# ============================================================================
# QUALITY
# ============================================================================

@dataclass(frozen=True)
class QualityCell:
    model_tag: str
    condition: Condition
    count: int
    histogram: Tuple[int, int, int, int, int]
    mean: Fraction
    stddev: float
    stderr: float

    @property
    def display_mean(self) -> Decimal:
        return round_half_up(self.mean, 2)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model_tag": self.model_tag,
            "condition": self.condition.value,
            "count": self.count,
            "histogram": {str(s): c for s, c in zip(SCORES, self.histogram)},
            "mean": float(self.display_mean),
            "mean_exact": f"{self.mean.numerator}/{self.mean.denominator}",
            "stddev": self.stddev,
            "stderr": self.stderr,
        }


@dataclass
class QualityReport:
    cells: List[QualityCell]
    changes: Dict[str, Decimal] = field(default_factory=dict)

    def cell(self, model_tag: str, condition: Union[Condition, str]) -> QualityCell:
        condition = condition if isinstance(condition, Condition) else Condition.parse(condition)
        for cell in self.cells:
            if cell.model_tag == model_tag and cell.condition == condition:
                return cell
        raise KeyError((model_tag, condition.value))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cells": [cell.to_dict() for cell in self.cells],
            "changes": {tag: float(delta) for tag, delta in self.changes.items()},
        }


def _quality_cell(model_tag: str, condition: Condition, scores: List[int]) -> QualityCell:
    counts = Counter(scores)
    n = len(scores)
    mean = Fraction(sum(scores), n)
    variance = sum((Fraction(s) - mean) ** 2 * c for s, c in counts.items()) / n
    stddev = math.sqrt(variance)
    return QualityCell(
        model_tag=model_tag,
        condition=condition,
        count=n,
        histogram=tuple(counts.get(s, 0) for s in SCORES),
        mean=mean,
        stddev=stddev,
        stderr=stddev / math.sqrt(n),
    )


def aggregate_quality(records: Iterable[ScoreRecord]) -> QualityReport:
    """Per (model_tag, condition): count, histogram, exact mean, population stddev and stderr"""
    groups: Dict[Tuple[str, Condition], List[int]] = {}
    for record in records:
        record.validate()
        groups.setdefault((record.model_tag, record.condition), []).append(record.score)
    if not groups:
        raise ValidationError("aggregate_quality needs at least one record")

    keys = sorted(groups, key=lambda k: (k[0], CONDITION_ORDER[k[1]]))
    cells = [_quality_cell(tag, condition, groups[(tag, condition)]) for tag, condition in keys]

    # change is reported between the displayed means
    changes: Dict[str, Decimal] = {}
    for tag in sorted({tag for tag, _ in keys}):
        if (tag, Condition.NO_SPARK) in groups and (tag, Condition.WITH_SPARK) in groups:
            before = next(c for c in cells if c.model_tag == tag and c.condition == Condition.NO_SPARK)
            after = next(c for c in cells if c.model_tag == tag and c.condition == Condition.WITH_SPARK)
            changes[tag] = after.display_mean - before.display_mean
    return QualityReport(cells=cells, changes=changes)


# ============================================================================
# HELPFULNESS
# ============================================================================

@dataclass(frozen=True)
class HelpfulnessReport:
    counts: Dict[Band, int]
    total: int

    @property
    def top_share(self) -> Fraction:
        return Fraction(self.counts[Band.EXTREMELY_HELPFUL], self.total)

    @property
    def top_two_share(self) -> Fraction:
        return Fraction(self.counts[Band.EXTREMELY_HELPFUL] + self.counts[Band.GOOD], self.total)

    @staticmethod
    def percent(share: Fraction) -> Decimal:
        return round_half_up(share * 100, 1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "counts": {band.value: self.counts[band] for band in Band},
            "top_share_percent": float(self.percent(self.top_share)),
            "top_two_share_percent": float(self.percent(self.top_two_share)),
        }


def aggregate_helpfulness(records: Iterable[BandRecord]) -> HelpfulnessReport:
    counts = Counter(record.band for record in records)
    total = sum(counts.values())
    if not total:
        raise ValidationError("aggregate_helpfulness needs at least one record")
    return HelpfulnessReport(counts={band: counts.get(band, 0) for band in Band}, total=total)


# ============================================================================
# JUDGE PROMPTS
# ============================================================================

JUDGE_TEMPLATES = {"quality": "code_quality_judge", "helpfulness": "helpfulness_judge"}
JUDGE_SYSTEM_TEMPLATES = {"helpfulness": "helpfulness_judge_system"}

SCORE_RE = re.compile(r"""["'*_]*\bscore\b["'*_]*\s*[:=]\s*["'*]*\s*(-?\d+)""", re.IGNORECASE)
RATIONALE_RE = re.compile(r"""\b(?:brief_)?rationale\b["'*]*\s*[:=]\s*(.+)""", re.IGNORECASE)
BAND_LINE_RE = re.compile(r"band\s+name\s*[:=]\s*(.*)", re.IGNORECASE)
BAND_NAMES = r"\b(EXTREMELY[_ ]HELPFUL|EXTREMELY[_ ]UNHELPFUL|GOOD|NEUTRAL|POOR)\b"
BAND_MENTION_RE = re.compile(BAND_NAMES)
BAND_VALUE_RE = re.compile(BAND_NAMES, re.IGNORECASE)


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    return mode


def render_judge_prompt(mode: str, inputs: Mapping[str, str]) -> str:
    """quality needs problem_description + generated_code; helpfulness needs coding_problem,
    accepted_solution and recommendation"""
    return render_template(JUDGE_TEMPLATES[_check_mode(mode)], inputs)


def render_codegen_prompt(problem: str, recommendation: Optional[Recommendation] = None) -> str:
    formatted = format_recommendation(recommendation) if recommendation is not None else ""
    return render_template("codegen", {"problem_description": problem, "formatted_recommendation": formatted})


def _clean(value: str) -> str:
    return value.strip().strip("\"',*{}").strip()


def _rationale(text: str) -> Optional[str]:
    match = RATIONALE_RE.search(text)
    return _clean(match.group(1)) if match else None


def parse_judge_output(mode: str, text: str) -> Dict[str, Any]:
    """Score (quality) or band (helpfulness) plus rationale; two distinct answers is an error, not a guess"""
    if _check_mode(mode) == "quality":
        values = {int(v) for v in SCORE_RE.findall(text)}
        if not values:
            raise JudgeParseError("no score found in judge output", raw_text=text)
        if len(values) > 1:
            raise JudgeParseError(f"ambiguous judge output: scores {sorted(values)}", raw_text=text)
        score = values.pop()
        if score not in SCORES:
            raise JudgeParseError(f"score {score} is outside 1-5", raw_text=text)
        return {"score": score, "rationale": _rationale(text)}

    named = BAND_LINE_RE.findall(text)
    if named:
        bands = set()
        for value in named:
            match = BAND_VALUE_RE.search(value)
            if match is None:
                raise JudgeParseError(f"unknown band {_clean(value)!r}", raw_text=text)
            bands.add(Band.parse(match.group(1)))
    else:
        bands = {Band.parse(m) for m in BAND_MENTION_RE.findall(text)}
    if not bands:
        raise JudgeParseError("no helpfulness band found in judge output", raw_text=text)
    if len(bands) > 1:
        raise JudgeParseError(
            f"ambiguous judge output: bands {sorted(b.value for b in bands)}", raw_text=text
        )
    band = bands.pop()
    rationale = _rationale(text)
    if rationale is None:
        tail = re.split(band.value.replace("_", "[_ ]"), text, maxsplit=1)[-1]
        rationale = _clean(tail.lstrip(" -:—–")) or None
    return {"band": band, "rationale": rationale}


def judge(mode: str, inputs: Mapping[str, str], gateway: Gateway, problem_id: str = "",
          condition: Union[Condition, str] = Condition.WITH_SPARK,
          model_tag: str = "") -> Union[ScoreRecord, BandRecord]:
    """Render the judge prompt, ask the configured provider, parse the verdict into a record"""
    request = GenerationRequest(
        template_id=JUDGE_TEMPLATES[_check_mode(mode)],
        variables=dict(inputs),
        system_template_id=JUDGE_SYSTEM_TEMPLATES.get(mode),
    )
    verdict = parse_judge_output(mode, gateway.generate(request).text)
    if mode == "quality":
        condition = condition if isinstance(condition, Condition) else Condition.parse(condition)
        return ScoreRecord(problem_id, condition, model_tag, verdict["score"], verdict["rationale"])
    return BandRecord(problem_id, verdict["band"], verdict["rationale"])


# ============================================================================
# SCORE FILES
# ============================================================================

def load_score_file(path: Union[str, Path], mode: str) -> List[Union[ScoreRecord, BandRecord]]:
    """JSON Lines of ScoreRecord (quality) or BandRecord (helpfulness); blank lines are skipped"""
    parse = ScoreRecord.from_dict if _check_mode(mode) == "quality" else BandRecord.from_dict
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                if not isinstance(data, dict):
                    raise ValidationError("line is not a JSON object")
                records.append(parse(data))
            except ValueError as e:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({e})") from None
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e.message}") from None
    return records


def evaluate_file(path: Union[str, Path], mode: str) -> Dict[str, Any]:
    records = load_score_file(path, mode)
    if mode == "quality":
        return aggregate_quality(records).to_dict()
    return aggregate_helpfulness(records).to_dict()
