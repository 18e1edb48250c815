"""Transcript and diagnosis scoring: readability, coherence, judge, accuracy.

Counting rules are pinned so scores reproduce bit-for-bit:

* sentences: maximal segments ending in ``.!?`` (or end of text) that
  contain at least one word;
* words: whitespace tokens stripped of leading/trailing non-alphanumerics,
  kept if anything alphanumeric remains;
* syllables: vowel groups (``aeiouy``) minus a silent trailing "e"
  (unless a consonant+"le" ending), minimum one per word;
* complex words: three or more syllables, excluding capitalized
  mid-sentence words (proper-noun approximation) and words whose stem
  without an ``-es``/``-ed`` suffix falls under three syllables.

Coherence here is the mean cosine of adjacent-turn embeddings (metric id
``coherence.embed_cosine``) with consecutive duplicate turns collapsed;
it is a provider-embedding stand-in, not token-level BERTScore.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .diagnosis import DiagnosisReport
from .dialogue import Transcript
from .instruments import DisorderLabel
from .retrieval import EmbedFn, l2_normalize, vector_values

COHERENCE_METRIC_ID = "coherence.embed_cosine"
UNKNOWN = "Unknown"

RUBRIC_KEYS = ("coverage", "relevance", "flow", "justification", "empathy")


class EvaluationError(Exception):
    pass


class EmptyText(EvaluationError):
    pass


class RubricParseError(EvaluationError):
    pass


class OutOfRangeScore(EvaluationError):
    pass


class EmptyMatrix(EvaluationError):
    pass


# --- text statistics ------------------------------------------------------

_VOWELS = frozenset("aeiouy")
_VOWEL_GROUPS = re.compile(r"[aeiouy]+")
_SENTENCE_SPLIT = re.compile(r"[.!?]+")


@dataclass(frozen=True)
class TextStats:
    sentences: int
    words: int
    syllables: int
    complex_words: int


@dataclass(frozen=True)
class ReadabilityScores:
    fre: float
    fkg: float
    gfi: float


def _strip_token(token: str) -> str:
    start, end = 0, len(token)
    while start < end and not token[start].isalnum():
        start += 1
    while end > start and not token[end - 1].isalnum():
        end -= 1
    return token[start:end]


def syllable_count(word: str) -> int:
    """Vowel-group heuristic; silent trailing "e" unless consonant+"le"."""
    w = word.lower()
    groups = len(_VOWEL_GROUPS.findall(w))
    if groups == 0:
        return 1
    if (
        w.endswith("e")
        and not (len(w) >= 3 and w.endswith("le") and w[-3] not in _VOWELS)
        and len(w) >= 2
        and w[-2] not in _VOWELS
    ):
        groups -= 1
    return max(groups, 1)


def _is_complex(word: str, sentence_initial: bool) -> bool:
    if syllable_count(word) < 3:
        return False
    if not sentence_initial and word[:1].isupper():
        return False
    lowered = word.lower()
    if lowered.endswith(("es", "ed")) and syllable_count(lowered[:-2]) < 3:
        return False
    return True


def count_text_stats(text: str) -> TextStats:
    if not text.strip():
        raise EmptyText("text is empty after trimming")
    sentences = words = syllables = complex_words = 0
    for segment in _SENTENCE_SPLIT.split(text):
        tokens = [_strip_token(t) for t in segment.split()]
        tokens = [t for t in tokens if any(c.isalnum() for c in t)]
        if not tokens:
            continue
        sentences += 1
        for position, token in enumerate(tokens):
            words += 1
            syllables += syllable_count(token)
            if _is_complex(token, sentence_initial=position == 0):
                complex_words += 1
    if sentences == 0:
        raise EmptyText("no sentences with words found")
    return TextStats(sentences, words, syllables, complex_words)


def flesch_reading_ease(stats: TextStats) -> float:
    return 206.835 - 1.015 * (stats.words / stats.sentences) - 84.6 * (stats.syllables / stats.words)


def flesch_kincaid_grade(stats: TextStats) -> float:
    return 0.39 * (stats.words / stats.sentences) + 11.8 * (stats.syllables / stats.words) - 15.59


def gunning_fog(stats: TextStats) -> float:
    return 0.4 * ((stats.words / stats.sentences) + 100.0 * (stats.complex_words / stats.words))


def readability_scores(text: str) -> ReadabilityScores:
    stats = count_text_stats(text)
    return ReadabilityScores(
        fre=flesch_reading_ease(stats),
        fkg=flesch_kincaid_grade(stats),
        gfi=gunning_fog(stats),
    )


# --- coherence ------------------------------------------------------------

def coherence_score(transcript: Transcript | list[str], embed_fn: EmbedFn) -> float:
    """Mean adjacent-turn embedding cosine in [-1, 1].

    Consecutive turns with identical content are collapsed first, so
    duplicating turns in place never moves the score; a transcript that
    collapses to a single distinct turn scores 1.0.
    """
    texts = [t.content for t in transcript.turns] if isinstance(transcript, Transcript) else list(transcript)
    if len(texts) < 2:
        raise ValueError("coherence needs at least 2 turns")
    collapsed = [texts[0]]
    for text in texts[1:]:
        if text != collapsed[-1]:
            collapsed.append(text)
    if len(collapsed) < 2:
        return 1.0
    vectors = [l2_normalize(vector_values(embed_fn(text))) for text in collapsed]
    cosines = [float(np.dot(a, b)) for a, b in zip(vectors, vectors[1:])]
    return float(np.mean(cosines))


# --- rubric judge ---------------------------------------------------------

RUBRIC_CRITERIA: tuple[tuple[str, str, dict[int, str]], ...] = (
    (
        "coverage",
        "Completeness of DSM-5 Dimension Coverage",
        {
            1: "DSM-5 dimensions are barely addressed or completely ignored.",
            2: "Few DSM-5 dimensions are explored, leading to significant gaps.",
            3: "Some DSM-5 dimensions are missing or only superficially covered.",
            4: "Most DSM-5 dimensions are addressed, with minor omissions.",
            5: "All relevant DSM-5 Level 1 dimensions are thoroughly explored.",
        },
    ),
    (
        "relevance",
        "Clinical Relevance and Accuracy of Questions",
        {
            1: "Questions are unrelated or inappropriate for clinical assessment.",
            2: "Questions poorly reflect DSM-5 criteria; most clinically irrelevant.",
            3: "Questions somewhat reflect DSM-5 criteria but several inaccuracies exist.",
            4: "Questions generally align with DSM-5 criteria with slight inaccuracies.",
            5: "Questions precisely reflect DSM-5 criteria, clearly targeting symptoms.",
        },
    ),
    (
        "flow",
        "Consistency and Logical Flow",
        {
            1: "Dialogue appears random or highly disconnected, lacking progression.",
            2: "Frequent inconsistencies severely impact coherence.",
            3: "Noticeable inconsistencies occasionally disrupt understanding.",
            4: "Minor inconsistencies exist but do not significantly disrupt flow.",
            5: "Dialogue flows logically; each question naturally follows responses.",
        },
    ),
    (
        "justification",
        "Diagnostic Justification and Explainability",
        {
            1: "Diagnoses have no clear connection to content or lack justification.",
            2: "Diagnoses rarely align with responses; justifications are superficial or unclear.",
            3: "Diagnoses somewhat align but have partially flawed justifications.",
            4: "Diagnoses generally align with responses, minor ambiguity in rationale.",
            5: "Diagnoses clearly align with DSM-5 responses, reasoning explicitly stated.",
        },
    ),
    (
        "empathy",
        "Empathy, Naturalness, and Professionalism",
        {
            1: "Completely lacking empathy, professional tone, or natural flow.",
            2: "Rarely empathetic; responses generally impersonal, abrupt, or inappropriate.",
            3: "Occasional empathy; interactions are sometimes robotic or impersonal.",
            4: "Mostly empathetic and professional, with minor unnatural moments.",
            5: "Consistently empathetic, natural conversational style, and professional tone.",
        },
    ),
)


@dataclass
class RubricScores:
    coverage: int
    relevance: int
    flow: int
    justification: int
    empathy: int
    judge_model: str = ""
    raw_judgment: str = ""
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, int]:
        return {key: getattr(self, key) for key in RUBRIC_KEYS}

    def to_json_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = dict(self.as_dict())
        payload["judge_model"] = self.judge_model
        payload["raw_judgment"] = self.raw_judgment
        if self.warnings:
            payload["warnings"] = list(self.warnings)
        return payload


def _rubric_text() -> str:
    blocks = []
    for _key, title, anchors in RUBRIC_CRITERIA:
        lines = [title] + [f"{score} - {anchors[score]}" for score in sorted(anchors)]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def build_judge_prompt(transcript: Transcript, report: DiagnosisReport | None) -> str:
    from .dialogue import serialize_history

    diagnosis_part = ""
    if report is not None:
        diagnosis_part = f"\n\nDiagnostic assessment produced afterwards:\n{report.raw_text}"
    return (
        "Score the following therapist-client conversation against each rubric "
        "criterion, from 1 (worst) to 5 (best).\n\n"
        f"RUBRIC:\n{_rubric_text()}\n\n"
        f"CONVERSATION:\n{serialize_history(transcript.turns)}"
        f"{diagnosis_part}\n\n"
        "Reply with a single JSON object and nothing else, exactly in this shape: "
        '{"coverage":n,"relevance":n,"flow":n,"justification":n,"empathy":n}'
    )


def _parse_judgment(text: str) -> dict[str, Any] | None:
    start = text.find("{")
    end = text.rfind("}")
    if start == -1 or end <= start:
        return None
    try:
        data = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict) or not all(k in data for k in RUBRIC_KEYS):
        return None
    return data


def rubric_evaluate(
    provider,
    transcript: Transcript,
    report: DiagnosisReport | None = None,
    judge_model: str | None = None,
    strict: bool = False,
) -> RubricScores:
    """Score one session with the five-criterion rubric via a judge call.

    A judgment that will not parse triggers exactly one reformat request
    before :class:`RubricParseError`. Out-of-range values raise in strict
    mode; lenient mode clamps to [1, 5] and records a warning.
    """
    prompt = build_judge_prompt(transcript, report)
    raw = provider.chat([{"role": "user", "content": prompt}], temperature=0.0)
    data = _parse_judgment(raw)
    if data is None:
        retry_prompt = (
            f"{prompt}\n\n"
            "Your previous reply could not be parsed. Reply again with ONLY the JSON object "
            '{"coverage":n,"relevance":n,"flow":n,"justification":n,"empathy":n}.'
        )
        raw = provider.chat([{"role": "user", "content": retry_prompt}], temperature=0.0)
        data = _parse_judgment(raw)
    if data is None:
        raise RubricParseError("judge output had no parsable score block")

    values: dict[str, int] = {}
    warnings: list[str] = []
    for key in RUBRIC_KEYS:
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RubricParseError(f"{key} score {value!r} is not numeric")
        rounded = int(round(float(value)))
        if rounded != value:
            warnings.append(f"{key}: rounded {value} to {rounded}")
        if not 1 <= rounded <= 5:
            if strict:
                raise OutOfRangeScore(f"{key} score {value!r} outside [1, 5]")
            clamped = min(max(rounded, 1), 5)
            warnings.append(f"{key}: clamped {rounded} to {clamped}")
            rounded = clamped
        values[key] = rounded

    return RubricScores(
        judge_model=judge_model or getattr(provider, "model_id", ""),
        raw_judgment=raw,
        warnings=warnings,
        **values,
    )


# --- diagnostic accuracy ---------------------------------------------------

CANONICAL_LABEL_VALUES: tuple[str, ...] = tuple(label.value for label in DisorderLabel)


@dataclass(frozen=True)
class PredictionRecord:
    truth: str
    predicted_primary: str
    predicted_set: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.truth not in CANONICAL_LABEL_VALUES:
            raise ValueError(f"truth {self.truth!r} is not canonical")


@dataclass
class ConfusionMatrix:
    """Rows are truth labels; columns are the labels plus an Unknown bucket."""

    labels: tuple[str, ...]
    counts: list[list[int]]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.labels + (UNKNOWN,)

    def cell(self, truth: str, predicted: str) -> int:
        return self.counts[self.labels.index(truth)][self.columns.index(predicted)]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    @property
    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.labels)))

    def to_csv(self) -> str:
        lines = ["truth\\predicted," + ",".join(self.columns)]
        for label, row in zip(self.labels, self.counts):
            lines.append(label + "," + ",".join(str(c) for c in row))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict[str, Any]:
        return {"labels": list(self.labels), "counts": [list(r) for r in self.counts]}


def compute_confusion(
    records: list[PredictionRecord],
    match_policy: str = "primary",
    labels: tuple[str, ...] = CANONICAL_LABEL_VALUES,
) -> ConfusionMatrix:
    """Tally predictions against truths under the strict-match rule.

    ``primary`` credits only the primary prediction; ``set`` credits the
    truth cell whenever the truth appears anywhere in the predicted set,
    and otherwise falls back to the primary prediction's cell.
    """
    if match_policy not in ("primary", "set"):
        raise ValueError(f"unknown match policy {match_policy!r}")
    matrix = ConfusionMatrix(labels, [[0] * (len(labels) + 1) for _ in labels])
    columns = matrix.columns
    for record in records:
        row = labels.index(record.truth)
        if match_policy == "set" and record.truth in record.predicted_set:
            predicted = record.truth
        else:
            predicted = record.predicted_primary
        col = columns.index(predicted) if predicted in columns else columns.index(UNKNOWN)
        matrix.counts[row][col] += 1
    return matrix


@dataclass(frozen=True)
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    undefined: bool  # a zero denominator was substituted with 0.0


@dataclass
class MetricsReport:
    per_label: dict[str, LabelMetrics]
    micro_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    total: int

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "per_label": {
                label: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                    "undefined": m.undefined,
                }
                for label, m in self.per_label.items()
            },
            "micro_accuracy": self.micro_accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "total": self.total,
        }


def compute_metrics(matrix: ConfusionMatrix) -> MetricsReport:
    """Per-label precision/recall/F1 plus micro accuracy and macro means.

    Zero denominators yield 0.0 with the label flagged ``undefined``
    rather than NaN, so aggregates stay finite.
    """
    total = matrix.total
    if total == 0:
        raise EmptyMatrix("no records tallied")
    per_label: dict[str, LabelMetrics] = {}
    for i, label in enumerate(matrix.labels):
        tp = matrix.counts[i][i]
        fn = sum(matrix.counts[i]) - tp
        fp = sum(matrix.counts[r][i] for r in range(len(matrix.labels))) - tp
        undefined = False
        if tp + fp == 0:
            precision, undefined = 0.0, True
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall, undefined = 0.0, True
        else:
            recall = tp / (tp + fn)
        if precision + recall == 0:
            f1 = 0.0
        else:
            f1 = 2 * precision * recall / (precision + recall)
        per_label[label] = LabelMetrics(precision, recall, f1, tp + fn, undefined)
    n = len(matrix.labels)
    return MetricsReport(
        per_label=per_label,
        micro_accuracy=matrix.trace / total,
        macro_precision=sum(m.precision for m in per_label.values()) / n,
        macro_recall=sum(m.recall for m in per_label.values()) / n,
        macro_f1=sum(m.f1 for m in per_label.values()) / n,
        total=total,
    )


# --- per-session evaluation payload ----------------------------------------

def evaluate_session(
    transcript: Transcript,
    report: DiagnosisReport | None,
    truth: str,
    embed_fn: EmbedFn | None = None,
    judge=None,
    judge_model: str | None = None,
) -> dict[str, Any]:
    """Assemble the evaluation JSON payload for one session."""
    conversation_text = "\n".join(t.content for t in transcript.turns)
    conv = readability_scores(conversation_text)
    payload: dict[str, Any] = {
        "readability": {
            "conversation": {"fre": conv.fre, "fkg": conv.fkg, "gfi": conv.gfi},
            "rationale": {},
        },
        "coherence": None,
        "coherence_metric": COHERENCE_METRIC_ID,
        "rubric": None,
        "accuracy": None,
    }
    if report is not None and report.rationale.strip():
        payload["readability"]["rationale"] = {
            "gfi": gunning_fog(count_text_stats(report.rationale))
        }
    if embed_fn is not None and len(transcript.turns) >= 2:
        payload["coherence"] = coherence_score(transcript, embed_fn)
    if judge is not None:
        payload["rubric"] = rubric_evaluate(judge, transcript, report, judge_model).to_json_dict()
    if report is not None:
        predicted_primary = report.predicted_primary
        predicted_set = report.predicted_set
        payload["accuracy"] = {
            "truth": truth,
            "predicted_primary": predicted_primary,
            "predicted_set": predicted_set,
            "match_primary": predicted_primary == truth,
            "match_set": truth in predicted_set,
        }
    return payload
