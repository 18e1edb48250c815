"""Questionnaire and client-profile parsing, plus item-coverage tracking.

Instruments are plain text or markdown loaded at run time: headings
introduce symptom domains and lines shaped like ``N. text`` are items.
Profiles are compact key-value files with a free-text context block.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

DATA_DIR = Path(__file__).parent / "data"

DEFAULT_QUESTIONNAIRE_PATH = DATA_DIR / "dsm5_level1_adult.md"
DEFAULT_ALIAS_PATH = DATA_DIR / "disorder_aliases.txt"
DEFAULT_PROFILES_DIR = DATA_DIR / "profiles"


class InstrumentError(Exception):
    pass


class NoItemsFound(InstrumentError):
    pass


class DuplicateItemNumber(InstrumentError):
    pass


class NonContiguousItemNumbers(InstrumentError):
    pass


class UnknownDisorder(InstrumentError):
    pass


class Exhausted(InstrumentError):
    pass


class NotPending(InstrumentError):
    pass


class DisorderLabel(str, Enum):
    """Closed set of canonical primary-disorder categories."""

    ADJUSTMENT = "Adjustment Disorder"
    ANXIETY = "Anxiety"
    BIPOLAR = "Bipolar Disorder"
    DEPRESSION = "Depression"
    OCD = "OCD"
    PANIC = "Panic Disorder"
    PTSD = "PTSD"
    SCHIZOPHRENIA = "Schizophrenia"
    SOCIAL_ANXIETY = "Social Anxiety Disorder"
    SUBSTANCE = "Substance Abuse"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


CANONICAL_LABELS: tuple[DisorderLabel, ...] = tuple(DisorderLabel)

_CANONICAL_BY_LOWER = {label.value.lower(): label for label in DisorderLabel}


def load_alias_table(path: str | Path | None = None) -> dict[str, DisorderLabel]:
    """Read an ``alias => canonical`` table; '#' starts a comment line.

    The canonical names themselves are always included as aliases, so
    canonicalization is idempotent even with a sparse table.
    """
    table: dict[str, DisorderLabel] = dict(_CANONICAL_BY_LOWER)
    text = Path(path or DEFAULT_ALIAS_PATH).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=>" not in line:
            raise InstrumentError(f"alias table line {lineno}: missing '=>'")
        alias, _, canonical = line.partition("=>")
        alias = alias.strip().lower()
        canonical = canonical.strip()
        label = _CANONICAL_BY_LOWER.get(canonical.lower())
        if label is None:
            raise UnknownDisorder(f"alias table line {lineno}: {canonical!r} is not canonical")
        table[alias] = label
    return table


_DEFAULT_TABLE: dict[str, DisorderLabel] | None = None


def default_alias_table() -> dict[str, DisorderLabel]:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_alias_table()
    return _DEFAULT_TABLE


def canonicalize(name: str, table: dict[str, DisorderLabel] | None = None) -> DisorderLabel | None:
    """Map a disorder name or alias to its canonical label, or None."""
    key = " ".join(name.lower().split())
    return (table or default_alias_table()).get(key)


def find_disorder_mentions(
    text: str, table: dict[str, DisorderLabel] | None = None
) -> list[tuple[int, str, DisorderLabel]]:
    """All alias occurrences in document order as (offset, raw, label).

    Longer aliases win at the same position ("social anxiety disorder"
    beats "anxiety"); matches never overlap.
    """
    table = table or default_alias_table()
    aliases = sorted(table, key=len, reverse=True)
    pattern = re.compile(
        r"(?<![A-Za-z0-9])(" + "|".join(re.escape(a) for a in aliases) + r")(?![A-Za-z0-9])",
        re.IGNORECASE,
    )
    hits = []
    for match in pattern.finditer(text):
        raw = match.group(1)
        hits.append((match.start(1), raw, table[" ".join(raw.lower().split())]))
    return hits


@dataclass(frozen=True)
class QuestionnaireItem:
    id: int
    domain: str
    text: str


@dataclass(frozen=True)
class QuestionnaireDoc:
    name: str
    items: tuple[QuestionnaireItem, ...]
    domains: tuple[str, ...]
    raw_text: str

    def item(self, item_id: int) -> QuestionnaireItem:
        return self.items[item_id - 1]


_ITEM_RE = re.compile(r"^\s*(\d+)[.)]\s+(.+?)\s*$")
_MD_HEADING_RE = re.compile(r"^\s{0,3}(#{1,6})\s+(.+?)\s*#*\s*$")

FALLBACK_DOMAIN = "General"


def _txt_heading(line: str) -> str | None:
    stripped = line.strip()
    if not stripped or _ITEM_RE.match(stripped):
        return None
    if stripped.endswith(":"):
        return stripped[:-1].strip()
    if len(stripped) <= 60 and stripped == stripped.upper() and any(c.isalpha() for c in stripped):
        return stripped.title()
    return None


def parse_questionnaire(source_text: str, format_hint: str = "markdown") -> QuestionnaireDoc:
    """Parse an instrument from markdown or plain text.

    The document title is the first heading (or first non-blank line);
    each item takes its domain from the nearest preceding heading.
    """
    if format_hint not in ("txt", "markdown"):
        raise ValueError(f"unknown format hint {format_hint!r}")
    if not source_text.strip():
        raise NoItemsFound("empty source")

    title: str | None = None
    domain = FALLBACK_DOMAIN
    items: list[QuestionnaireItem] = []
    domains: list[str] = []
    seen_ids: set[int] = set()

    for line in source_text.splitlines():
        heading = None
        if format_hint == "markdown":
            md = _MD_HEADING_RE.match(line)
            if md:
                heading = md.group(2).strip()
        else:
            heading = _txt_heading(line)
        if heading is not None:
            if title is None:
                title = heading
            else:
                domain = heading
            continue
        item_match = _ITEM_RE.match(line)
        if item_match:
            item_id = int(item_match.group(1))
            if item_id in seen_ids:
                raise DuplicateItemNumber(f"item {item_id} appears twice")
            seen_ids.add(item_id)
            if domain not in domains:
                domains.append(domain)
            items.append(QuestionnaireItem(item_id, domain, item_match.group(2)))
            continue
        if title is None and line.strip():
            title = line.strip()

    if not items:
        raise NoItemsFound("no lines matching 'N. text' found")
    expected = list(range(1, len(items) + 1))
    if [i.id for i in items] != expected:
        raise NonContiguousItemNumbers(
            f"item ids {[i.id for i in items]} are not contiguous from 1"
        )
    return QuestionnaireDoc(
        name=title or "Untitled Questionnaire",
        items=tuple(items),
        domains=tuple(domains),
        raw_text=source_text,
    )


def render_questionnaire(doc: QuestionnaireDoc) -> str:
    """Canonical markdown form; parse(render(doc)) preserves structure."""
    lines = [f"# {doc.name}", ""]
    current = None
    for item in doc.items:
        if item.domain != current:
            lines += [f"## {item.domain}", ""]
            current = item.domain
        lines.append(f"{item.id}. {item.text}")
    lines.append("")
    return "\n".join(lines)


def load_questionnaire(path: str | Path | None = None) -> QuestionnaireDoc:
    path = Path(path or DEFAULT_QUESTIONNAIRE_PATH)
    hint = "markdown" if path.suffix.lower() in (".md", ".markdown") else "txt"
    return parse_questionnaire(path.read_text(encoding="utf-8"), hint)


@dataclass(frozen=True)
class ClientProfile:
    name: str
    primary_disorder: DisorderLabel
    comorbidities: tuple[str, ...]
    demographics: dict[str, str]
    context: str
    raw_text: str


_KV_RE = re.compile(r"^([A-Za-z][A-Za-z0-9 _/-]{0,40}):\s*(.*)$")

_DISORDER_KEYS = {"disorder", "primary disorder", "primary_disorder", "diagnosis", "condition"}
_COMORBIDITY_KEYS = {"comorbidities", "comorbid", "comorbidity", "secondary symptoms"}


def parse_profile(
    source_text: str,
    default_name: str = "",
    table: dict[str, DisorderLabel] | None = None,
) -> ClientProfile:
    """Parse a client profile from key-value lines plus free-text context.

    The primary disorder comes from an explicit ``disorder:`` key, or
    failing that from the first recognizable disorder keyword anywhere in
    the text. Lines that don't parse as key-value pairs are preserved
    verbatim in ``context``.
    """
    table = table or default_alias_table()
    name = default_name
    disorder: DisorderLabel | None = None
    disorder_key_seen = False
    comorbidities: list[str] = []
    demographics: dict[str, str] = {}
    context_lines: list[str] = []

    for line in source_text.splitlines():
        kv = _KV_RE.match(line.strip())
        if kv:
            key = kv.group(1).strip().lower()
            value = kv.group(2).strip()
            if key == "name":
                name = value
                continue
            if key in _DISORDER_KEYS:
                disorder_key_seen = True
                disorder = canonicalize(value, table)
                if disorder is None:
                    raise UnknownDisorder(f"unrecognized disorder {value!r}")
                continue
            if key in _COMORBIDITY_KEYS:
                comorbidities.extend(p.strip() for p in re.split(r"[;,]", value) if p.strip())
                continue
            demographics[key] = value
            continue
        if line.strip():
            context_lines.append(line.rstrip())

    if disorder is None and not disorder_key_seen:
        mentions = find_disorder_mentions(source_text, table)
        if mentions:
            disorder = mentions[0][2]
    if disorder is None:
        raise UnknownDisorder("profile names no recognizable disorder")

    return ClientProfile(
        name=name,
        primary_disorder=disorder,
        comorbidities=tuple(comorbidities),
        demographics=demographics,
        context="\n".join(context_lines),
        raw_text=source_text,
    )


def load_profiles(directory: str | Path) -> list[ClientProfile]:
    """Load every ``*.txt`` profile in a directory, sorted by file name."""
    directory = Path(directory)
    profiles = []
    for path in sorted(directory.glob("*.txt")):
        profiles.append(parse_profile(path.read_text(encoding="utf-8"), default_name=path.stem))
    names = [p.name for p in profiles]
    if len(set(names)) != len(names):
        raise InstrumentError(f"duplicate profile names in {directory}")
    return profiles


@dataclass
class ItemTracker:
    """Pending/completed partition over the item ids of one session."""

    pending: list[int] = field(default_factory=list)
    completed: list[int] = field(default_factory=list)

    @classmethod
    def for_doc(cls, doc: QuestionnaireDoc) -> ItemTracker:
        return cls(pending=[item.id for item in doc.items])

    @property
    def all_ids(self) -> set[int]:
        return set(self.pending) | set(self.completed)

    def snapshot(self) -> dict[str, list[int]]:
        return {"completed": list(self.completed), "pending": list(self.pending)}


def select_next_item(tracker: ItemTracker, doc: QuestionnaireDoc) -> QuestionnaireItem:
    """Lowest-id pending item (sequential administration)."""
    if not tracker.pending:
        raise Exhausted("no pending items")
    return doc.item(min(tracker.pending))


def mark_addressed(tracker: ItemTracker, item_id: int) -> ItemTracker:
    if item_id not in tracker.pending:
        raise NotPending(f"item {item_id} is not pending")
    tracker.pending.remove(item_id)
    tracker.completed.append(item_id)
    return tracker


_FIRST_PERSON = {"i", "i'm", "i've", "i'd", "i'll", "me", "my", "mine", "myself", "we", "our"}


def _word_tokens(text: str) -> list[str]:
    return [t for t in re.split(r"\s+", text.strip()) if t]


def is_item_addressed(client_reply: str, item: QuestionnaireItem, mode: str = "heuristic",
                      provider=None) -> bool:
    """Decide whether a client turn substantively answered an item.

    Heuristic mode: at least 3 word tokens and not a pure clarification
    request (a reply ending in '?' with no first-person statement). Judge
    mode asks the provider a yes/no question and falls back to the
    heuristic on any failure.
    """
    if mode == "judge" and provider is not None:
        try:
            verdict = provider.chat(
                [
                    {"role": "system", "content": "You check interview coverage. Answer YES or NO only."},
                    {
                        "role": "user",
                        "content": (
                            f"Question asked: {item.text}\nClient reply: {client_reply}\n"
                            "Did the reply substantively address the question? Answer YES or NO."
                        ),
                    },
                ],
                temperature=0.0,
            )
            head = verdict.strip().lower()
            if head.startswith("yes"):
                return True
            if head.startswith("no"):
                return False
        except Exception:
            pass
    tokens = _word_tokens(client_reply)
    if len(tokens) < 3:
        return False
    if client_reply.strip().endswith("?"):
        lowered = {t.strip(".,!?;:'\"").lower() for t in tokens}
        lowered |= {t.lower() for t in tokens}
        if not (lowered & _FIRST_PERSON or any(t.lower().startswith("i'") for t in tokens)):
            return False
    return True
