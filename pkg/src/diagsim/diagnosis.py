"""Assessment generation and structured extraction from its raw text.

The assessor's output contract is four parts: a summary paragraph, then
Diagnosis / Reasoning / Recommended Next Steps sections under headings,
with ``<med>``, ``<sym>`` and ``<quote>`` tags linking claims to terms,
symptoms, and client utterances. Extraction is deliberately lenient:
real model output decorates headings inconsistently and drops tags, so
every extractor keeps the raw text intact and degrades instead of
discarding.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

from .dialogue import Transcript, serialize_history
from .instruments import DisorderLabel, canonicalize, default_alias_table, find_disorder_mentions
from .retrieval import RetrievedPassage

UNKNOWN = "Unknown"

TAG_KINDS = ("sym", "quote", "med")


class DiagnosisError(Exception):
    pass


class EmptyDiagnosis(DiagnosisError):
    pass


class UnstructuredOutput(DiagnosisError):
    pass


class NoDisorderFound(DiagnosisError):
    pass


class MalformedTags(DiagnosisError):
    pass


@dataclass(frozen=True)
class EvidenceTag:
    kind: str
    text: str
    span: tuple[int, int]


@dataclass(frozen=True)
class ExplainabilitySignals:
    sym_count: int
    quote_count: int
    med_count: int
    dsm_clauses: frozenset[str]
    has_step_list: bool
    grounded_quote_fraction: float

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "sym": self.sym_count,
            "quote": self.quote_count,
            "med": self.med_count,
            "clauses": sorted(self.dsm_clauses),
            "step_list": self.has_step_list,
            "grounded_fraction": self.grounded_quote_fraction,
        }


@dataclass(frozen=True)
class DisorderMention:
    raw: str
    canonical: str  # canonical label value, or "Unknown"
    provisional: bool = False

    @property
    def label(self) -> DisorderLabel | None:
        return None if self.canonical == UNKNOWN else DisorderLabel(self.canonical)


@dataclass(frozen=True)
class DiagnosisSections:
    summary: str
    diagnosis_block: str
    reasoning: str
    treatment: str
    fallback: bool


@dataclass
class DiagnosisReport:
    summary: str
    disorders: list[DisorderMention]
    rationale: str
    treatment: str
    raw_text: str
    passages_used: list[int] = field(default_factory=list)
    signals: ExplainabilitySignals | None = None
    fallback: bool = False
    warnings: int = 0

    @property
    def predicted_primary(self) -> str:
        for mention in self.disorders:
            if mention.canonical != UNKNOWN:
                return mention.canonical
        return UNKNOWN

    @property
    def predicted_set(self) -> list[str]:
        seen: list[str] = []
        for mention in self.disorders:
            if mention.canonical != UNKNOWN and mention.canonical not in seen:
                seen.append(mention.canonical)
        return seen

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary,
            "disorders": [
                {"raw": m.raw, "canonical": m.canonical, "provisional": m.provisional}
                for m in self.disorders
            ],
            "rationale": self.rationale,
            "treatment": self.treatment,
            "signals": self.signals.to_json_dict() if self.signals else None,
            "passages": list(self.passages_used),
            "fallback": self.fallback,
            "warnings": self.warnings,
            "raw": self.raw_text,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> DiagnosisReport:
        signals = None
        if data.get("signals"):
            s = data["signals"]
            signals = ExplainabilitySignals(
                s["sym"], s["quote"], s["med"], frozenset(s["clauses"]),
                s["step_list"], s["grounded_fraction"],
            )
        return cls(
            summary=data["summary"],
            disorders=[
                DisorderMention(d["raw"], d["canonical"], d.get("provisional", False))
                for d in data["disorders"]
            ],
            rationale=data["rationale"],
            treatment=data["treatment"],
            raw_text=data.get("raw", ""),
            passages_used=list(data.get("passages", [])),
            signals=signals,
            fallback=data.get("fallback", False),
            warnings=data.get("warnings", 0),
        )


DIAGNOSIS_OUTPUT_CONTRACT = """Return your assessment in exactly four parts:
(1) A compassionate summary paragraph (no heading).
(2) Diagnosis: the heading followed directly by your diagnostic impression.
(3) Reasoning: the heading followed by your step-by-step rationale.
(4) Recommended Next Steps: the heading followed by numbered recommendations.

Consider multiple possible diagnoses, avoid assumptions, and mark the impression as provisional if needed. Wrap medical terms in <med> tags, symptoms in <sym> tags, and direct client quotes in <quote> tags. Cite the specific diagnostic criteria your reasoning relies on (e.g. criterion A). Do not include meta-commentary."""


def build_diagnosis_prompt(transcript: Transcript, passages: list[RetrievedPassage]) -> str:
    """Grounded assessor prompt: Q/A pairs + numbered reference passages."""
    history = serialize_history(transcript.turns)
    if passages:
        blocks = [f"[{i}] {p.chunk.text}" for i, p in enumerate(passages, start=1)]
        context = "Reference passages from the diagnostic manual:\n\n" + "\n\n".join(blocks)
    else:
        context = "No reference passages available; rely on established diagnostic criteria."
    parts = [
        "Based on the questionnaire responses below, provide a comprehensive mental health assessment.",
        f"Questionnaire responses:\n{history}",
        context,
        DIAGNOSIS_OUTPUT_CONTRACT,
    ]
    if not transcript.complete:
        parts.insert(1, "Note: the interview is partial; some items were not covered.")
    return "\n\n".join(parts)


def generate_diagnosis(provider, prompt: str) -> str:
    raw = provider.chat([
        {"role": "system", "content": "You are a careful clinical diagnostician."},
        {"role": "user", "content": prompt},
    ])
    if not raw.strip():
        raise EmptyDiagnosis("model returned no assessment text")
    return raw


_HEADING_DECOR = r"\s{0,3}(?:#{1,6}\s*)?(?:\*\*|__)?\s*(?:\d+[.)]\s*)?"
_HEADING_CLOSE = r"\s*(?:\*\*|__)?\s*(?P<colon>:)?\s*(?P<rest>.*)$"

_SECTION_PATTERNS = {
    "diagnosis": re.compile(
        _HEADING_DECOR + r"(?:diagnosis|diagnostic impression)" + _HEADING_CLOSE, re.IGNORECASE
    ),
    "reasoning": re.compile(
        _HEADING_DECOR + r"(?:reasoning|rationale|clinical reasoning)" + _HEADING_CLOSE, re.IGNORECASE
    ),
    "treatment": re.compile(
        _HEADING_DECOR
        + r"(?:recommended next steps(?:\s*/\s*treatment options)?|treatment options?|"
        + r"treatment|next steps|recommendations)"
        + _HEADING_CLOSE,
        re.IGNORECASE,
    ),
}

_STEP_LINE = re.compile(r"^\s*(?:\d+\.|[-•])\s+\S")


def _split_paragraphs(text: str) -> list[str]:
    return [p.strip() for p in re.split(r"\n\s*\n", text) if p.strip()]


def extract_sections(raw: str) -> DiagnosisSections:
    """Split raw assessment text into its four parts.

    The primary pass keys on heading lines (any case, ``#``/``**``
    decoration, optional inline content after the colon). When no
    diagnosis heading exists, a fallback pass treats the first paragraph
    as the summary and hunts for a paragraph carrying a disorder name or
    ``<med>`` tag; the result is then flagged ``fallback=True``.
    """
    if not raw.strip():
        raise UnstructuredOutput("empty assessment text")

    lines = raw.splitlines()
    found: dict[str, tuple[int, str]] = {}
    for idx, line in enumerate(lines):
        for name, pattern in _SECTION_PATTERNS.items():
            if name in found:
                continue
            m = pattern.match(line)
            # a heading with inline content still counts, but a prose line
            # that merely opens with the word must not: content on the same
            # line requires the keyword's own colon or decorated markup
            if m:
                rest = m.group("rest").strip().strip("*_ ")
                decorated = line.strip().startswith(("#", "**", "__"))
                if rest and not (m.group("colon") or decorated):
                    continue
                found[name] = (idx, rest)
                break

    if "diagnosis" in found:
        starts = [pos for pos, _ in found.values()]
        summary = "\n".join(lines[: min(starts)]).strip()

        def section(name: str) -> str:
            if name not in found:
                return ""
            pos, rest = found[name]
            later = [p for p, _ in found.values() if p > pos]
            end = min(later) if later else len(lines)
            body = "\n".join(lines[pos + 1 : end]).strip()
            return f"{rest}\n{body}".strip() if rest else body

        return DiagnosisSections(
            summary=summary,
            diagnosis_block=section("diagnosis"),
            reasoning=section("reasoning"),
            treatment=section("treatment"),
            fallback=False,
        )

    # fallback: no recognizable headings
    paragraphs = _split_paragraphs(raw)
    summary = paragraphs[0] if paragraphs else ""
    diag_idx = None
    for i, para in enumerate(paragraphs):
        if "<med>" in para.lower() or find_disorder_mentions(para):
            diag_idx = i
            break
    if diag_idx is None:
        raise UnstructuredOutput("no diagnosis heading and no paragraph names a disorder")
    remainder = paragraphs[diag_idx + 1 :]
    treatment = ""
    if remainder and all(_STEP_LINE.match(l) for l in remainder[-1].splitlines()):
        treatment = remainder[-1]
        remainder = remainder[:-1]
    return DiagnosisSections(
        summary=summary,
        diagnosis_block=paragraphs[diag_idx],
        reasoning="\n\n".join(remainder),
        treatment=treatment,
        fallback=True,
    )


_SPLIT_MENTIONS = re.compile(r"\s*(?:,|;|/| and | or )\s*", re.IGNORECASE)
_PROVISIONAL_WINDOW = 80


def extract_disorders(diagnosis_block: str, table=None) -> list[DisorderMention]:
    """Ordered, deduplicated disorder candidates from a diagnosis block.

    Candidates come from ``<med>`` tag contents (split on commas and
    connectives) plus alias-table hits in the surrounding text. Each is
    canonicalized or kept as ``Unknown``; a nearby "provisional"
    qualifier is preserved as a flag.
    """
    table = table or default_alias_table()
    candidates: list[tuple[int, str]] = []

    tags, _ = parse_evidence_tags(diagnosis_block)
    for tag in tags:
        if tag.kind != "med":
            continue
        offset = tag.span[0]
        for piece in _SPLIT_MENTIONS.split(tag.text):
            piece = piece.strip(" .")
            if piece:
                candidates.append((offset + tag.text.find(piece), piece))

    for pos, raw, _label in find_disorder_mentions(diagnosis_block, table):
        candidates.append((pos, raw))

    candidates.sort(key=lambda c: c[0])
    lowered = diagnosis_block.lower()
    mentions: list[DisorderMention] = []
    seen: set[str] = set()
    for pos, raw in candidates:
        label = canonicalize(raw, table)
        if label is None:
            inner = find_disorder_mentions(raw, table)
            label = inner[0][2] if inner else None
        canonical = label.value if label else UNKNOWN
        key = canonical if canonical != UNKNOWN else f"?{raw.lower()}"
        if key in seen:
            continue
        seen.add(key)
        window = lowered[max(0, pos - _PROVISIONAL_WINDOW) : pos + len(raw)]
        mentions.append(DisorderMention(raw, canonical, provisional="provisional" in window))
    if not mentions:
        raise NoDisorderFound("no medical terms or known disorder names in block")
    return mentions


_TAG_TOKEN = re.compile(r"<(/?)(sym|quote|med)>")


def parse_evidence_tags(text: str, strict: bool = False) -> tuple[list[EvidenceTag], int]:
    """Extract well-formed ``<kind>...</kind>`` pairs in order.

    Lenient by construction: unclosed or stray tags are skipped and
    tallied as warnings, and nested tag tokens are kept as literal text
    (depth 1 only). Spans index the inner content within ``text``, so
    results are stable under appending a suffix. ``strict=True`` raises
    :class:`MalformedTags` instead of tallying.
    """
    tags: list[EvidenceTag] = []
    warnings = 0
    open_kind: str | None = None
    open_end = 0
    for match in _TAG_TOKEN.finditer(text):
        closing, kind = match.group(1) == "/", match.group(2)
        if open_kind is None:
            if closing:
                warnings += 1  # stray close
            else:
                open_kind, open_end = kind, match.end()
        elif closing and kind == open_kind:
            tags.append(EvidenceTag(open_kind, text[open_end : match.start()], (open_end, match.start())))
            open_kind = None
        # any other token inside an open tag is literal content
    if open_kind is not None:
        warnings += 1  # unclosed at end of text
    if strict and warnings:
        raise MalformedTags(f"{warnings} malformed evidence tags")
    return tags, warnings


_CLAUSE = re.compile(
    r"\bcriteri(?:on|a)\s+([A-Za-z])(\d*)(?:\s*(?:[-–—]|to)\s*([A-Za-z])(\d*))?\b",
    re.IGNORECASE,
)

_QUOTE_EDGE = "\"'“”‘’`"


def extract_dsm_clauses(text: str) -> frozenset[str]:
    """Clause letters cited as ``criterion X``; ranges like A-E expand."""
    letters: set[str] = set()
    for m in _CLAUSE.finditer(text):
        first = m.group(1).upper()
        if m.group(3):
            last = m.group(3).upper()
            lo, hi = sorted((first, last))
            letters.update(chr(c) for c in range(ord(lo), ord(hi) + 1))
        else:
            letters.add(first)
    return frozenset(letters)


def _fold(text: str) -> str:
    return " ".join(text.strip(_QUOTE_EDGE + " \t\n").lower().split())


def has_step_list(text: str) -> bool:
    """True when at least two lines start like a numbered or bulleted step."""
    return sum(1 for line in text.splitlines() if _STEP_LINE.match(line)) >= 2


def extract_explainability_signals(raw: str, transcript: Transcript | None = None) -> ExplainabilitySignals:
    """Countable transparency features of one assessment."""
    if not raw.strip():
        raise ValueError("raw assessment text must be non-empty")
    tags, _ = parse_evidence_tags(raw)
    counts = {kind: 0 for kind in TAG_KINDS}
    for tag in tags:
        counts[tag.kind] += 1

    try:
        reasoning = extract_sections(raw).reasoning
    except UnstructuredOutput:
        reasoning = ""
    step_source = reasoning if reasoning.strip() else raw

    quotes = [tag.text for tag in tags if tag.kind == "quote"]
    if quotes and transcript is not None:
        client_texts = [_fold(t.content) for t in transcript.client_turns()]
        grounded = sum(
            1 for q in quotes if any(_fold(q) in text for text in client_texts)
        )
        fraction = grounded / len(quotes)
    elif quotes:
        fraction = 0.0
    else:
        fraction = 1.0  # vacuously grounded: nothing was quoted

    return ExplainabilitySignals(
        sym_count=counts["sym"],
        quote_count=counts["quote"],
        med_count=counts["med"],
        dsm_clauses=extract_dsm_clauses(raw),
        has_step_list=has_step_list(step_source),
        grounded_quote_fraction=fraction,
    )


def compile_report(
    raw: str,
    transcript: Transcript | None = None,
    passages: list[RetrievedPassage] | None = None,
    table=None,
) -> DiagnosisReport:
    """Full extraction pipeline over one raw assessment."""
    sections = extract_sections(raw)
    disorders = extract_disorders(sections.diagnosis_block or raw, table)
    _, warnings = parse_evidence_tags(raw)
    signals = extract_explainability_signals(raw, transcript)
    return DiagnosisReport(
        summary=sections.summary,
        disorders=disorders,
        rationale=sections.reasoning,
        treatment=sections.treatment,
        raw_text=raw,
        passages_used=[p.chunk.id for p in passages] if passages else [],
        signals=signals,
        fallback=sections.fallback,
        warnings=warnings,
    )
