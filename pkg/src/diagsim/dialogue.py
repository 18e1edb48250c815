"""Therapist-client interview loop producing item-linked transcripts.

Two generation modes exist. ``turn_by_turn`` runs the interview loop one
model call per turn with item tracking and re-asks; ``one_shot`` asks a
single call to emit the whole labeled dialogue, then parses it. History
is always serialized into prompts as ``Therapist:``/``Client:`` line
prefixes, the same grammar the one-shot parser reads.
"""

from __future__ import annotations

import re
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

from .instruments import (
    ClientProfile,
    ItemTracker,
    QuestionnaireDoc,
    QuestionnaireItem,
    is_item_addressed,
    mark_addressed,
    select_next_item,
)

MODE_TURN_BY_TURN = "turn_by_turn"
MODE_ONE_SHOT = "one_shot"

THERAPIST = "therapist"
CLIENT = "client"


class DialogueError(Exception):
    pass


class TurnBudgetExceeded(DialogueError):
    """Budget ran out with items pending; carries the partial transcript."""

    def __init__(self, transcript: Transcript) -> None:
        pending = len(transcript.coverage.pending)
        super().__init__(f"turn budget exhausted with {pending} items pending")
        self.transcript = transcript


class DialogueParseError(DialogueError):
    pass


@dataclass
class ConversationTurn:
    index: int
    speaker: str
    content: str
    item_id: int | None = None
    ts: float = 0.0


@dataclass
class Transcript:
    profile_name: str
    questionnaire_name: str
    model_id: str
    mode: str
    started: float
    ended: float = 0.0
    turns: list[ConversationTurn] = field(default_factory=list)
    coverage: ItemTracker = field(default_factory=ItemTracker)
    flags: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.coverage.pending

    def client_turns(self) -> list[ConversationTurn]:
        return [t for t in self.turns if t.speaker == CLIENT]

    def append(self, speaker: str, content: str, item_id: int | None, ts: float) -> ConversationTurn:
        turn = ConversationTurn(len(self.turns), speaker, content, item_id, ts)
        self.turns.append(turn)
        return turn

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "meta": {
                "profile": self.profile_name,
                "questionnaire": self.questionnaire_name,
                "model": self.model_id,
                "mode": self.mode,
                "started": _iso(self.started),
                "ended": _iso(self.ended),
            },
            "turns": [
                {"i": t.index, "speaker": t.speaker, "item_id": t.item_id,
                 "content": t.content, "ts": t.ts}
                for t in self.turns
            ],
            "coverage": self.coverage.snapshot(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> Transcript:
        meta = data["meta"]
        transcript = cls(
            profile_name=meta["profile"],
            questionnaire_name=meta["questionnaire"],
            model_id=meta["model"],
            mode=meta["mode"],
            started=_from_iso(meta["started"]),
            ended=_from_iso(meta["ended"]),
            coverage=ItemTracker(
                pending=list(data["coverage"]["pending"]),
                completed=list(data["coverage"]["completed"]),
            ),
            flags=list(data.get("flags", [])),
        )
        for t in data["turns"]:
            transcript.turns.append(
                ConversationTurn(t["i"], t["speaker"], t["content"], t.get("item_id"), t.get("ts", 0.0))
            )
        return transcript


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def _from_iso(text: str) -> float:
    return datetime.fromisoformat(text).timestamp()


def serialize_history(turns: list[ConversationTurn]) -> str:
    lines = []
    for turn in turns:
        prefix = "Therapist" if turn.speaker == THERAPIST else "Client"
        lines.append(f"{prefix}: {turn.content}")
    return "\n".join(lines)


def build_therapist_system_prompt(doc: QuestionnaireDoc) -> str:
    """Therapist role prompt wrapping the full instrument text."""
    return f"""You are a professional mental health clinician about to conduct an assessment using a mental health questionnaire.

Here is the full questionnaire document you will be administering:

{doc.raw_text}

IMPORTANT INSTRUCTIONS:
- Use ONLY the actual name of the questionnaire as shown in the document above ("{doc.name}").
- DO NOT assume what specific condition is being assessed.
- The questionnaire may be a general mental health assessment or focused on various conditions.
- Your role is to administer the questionnaire without making diagnostic assumptions up front.
- Rephrase each item into a natural, empathetic question; never read it out mechanically.
- Do not offer any diagnosis or advice before the assessment is complete.

When you open the session, give a warm, professional introduction that:
(1) Introduces yourself as a mental-health professional.
(2) Identifies the questionnaire by name.
(3) Explains its purpose.
(4) Reassures the client about confidentiality.
(5) Explains that there are {len(doc.items)} questions.
(6) Indicates readiness to begin with the first question.

Keep your tone professional but warm, showing empathy while maintaining clinical objectivity. This is a real-time conversation, so keep every message engaging, natural, and conversational."""


def build_client_system_prompt(profile: ClientProfile) -> str:
    """Client role prompt carrying the symptom/context block, never the label."""
    details = []
    if profile.comorbidities:
        details.append("Symptoms: " + ", ".join(profile.comorbidities))
    for key, value in profile.demographics.items():
        details.append(f"{key.capitalize()}: {value}")
    detail_block = "\n".join(details)
    sections = [
        "You are role-playing as a client with specific symptoms in a mental health assessment.",
        "IMPORTANT: Always respond as the client; never break character or respond as an AI assistant.",
        """Your responses must obey all seven of these constraints:
(1) Always speak in the first person.
(2) Never ask the interviewer questions, except to clarify what was asked.
(3) Never reveal that you are an AI or that you are role-playing.
(4) Never refuse to answer due to AI limitations.
(5) Never name your disorder.
(6) Always express the symptoms listed in your profile.
(7) Always stay consistent with your character's experiences and background.""",
        "Express genuine emotional responses matching your condition, and appear to be seeking help.",
        f"Your profile name: {profile.name}.",
    ]
    if detail_block:
        sections.append(f"Characteristics:\n{detail_block}")
    if profile.context:
        sections.append(f"Background and recent experiences:\n{profile.context}")
    sections.append(
        "Remember that you ARE this person right now. Answer every question as they would, "
        "based on their symptoms and experiences."
    )
    return "\n\n".join(sections)


INTRO_INSTRUCTION = (
    "Begin the session now. Provide your complete introduction and invite the "
    "client to respond before the first question."
)
CLIENT_INSTRUCTION = "Respond to the therapist's last message as the client, in the first person."
CLOSING_TEXT = (
    "Thank you for sharing all of that with me today. That completes the "
    "assessment; I'll review your responses carefully before we discuss any next steps."
)


def _ask_instruction(item: QuestionnaireItem, reask: bool) -> str:
    if reask:
        return (
            f'The client\'s last reply did not address item {item.id} ("{item.text}"). '
            "Acknowledge their reply, rephrase the question more concretely, and ask again."
        )
    return (
        f"Ask the client about item {item.id} now, rephrased conversationally "
        f'and empathetically: "{item.text}"'
    )


def _therapist_messages(system_prompt: str, transcript: Transcript, instruction: str) -> list[dict[str, str]]:
    history = serialize_history(transcript.turns)
    body = f"Conversation so far:\n{history}\n\n{instruction}" if history else instruction
    return [{"role": "system", "content": system_prompt}, {"role": "user", "content": body}]


def _client_messages(system_prompt: str, transcript: Transcript) -> list[dict[str, str]]:
    history = serialize_history(transcript.turns)
    body = f"Conversation so far:\n{history}\n\n{CLIENT_INSTRUCTION}"
    return [{"role": "system", "content": system_prompt}, {"role": "user", "content": body}]


def therapist_turn(
    provider,
    transcript: Transcript,
    item: QuestionnaireItem | None,
    *,
    system_prompt: str,
    reask: bool = False,
    clock: Callable[[], float] = time.time,
) -> ConversationTurn:
    """One therapist message: the introduction when ``item`` is None."""
    if transcript.turns and transcript.turns[-1].speaker == THERAPIST:
        raise DialogueError("not the therapist's turn")
    instruction = INTRO_INSTRUCTION if item is None else _ask_instruction(item, reask)
    content = provider.chat(_therapist_messages(system_prompt, transcript, instruction))
    return transcript.append(THERAPIST, content, None if item is None else item.id, clock())


def scan_leakage(transcript: Transcript, profile: ClientProfile) -> list[str]:
    """Flags for client turns that literally name the canonical disorder.

    Only the literal canonical label is checked; "hinting" is not
    machine-checkable. Violations are reported, never dropped.
    """
    label = profile.primary_disorder.value.lower()
    flags = []
    for turn in transcript.turns:
        if turn.speaker == CLIENT and label in turn.content.lower():
            flags.append(f"leakage:turn_{turn.index}")
    return flags


def client_turn(
    provider,
    transcript: Transcript,
    profile: ClientProfile,
    *,
    system_prompt: str,
    clock: Callable[[], float] = time.time,
) -> ConversationTurn:
    if not transcript.turns or transcript.turns[-1].speaker != THERAPIST:
        raise DialogueError("client can only reply to a therapist turn")
    content = provider.chat(_client_messages(system_prompt, transcript))
    # item linkage: copy from the question this turn answers
    turn = transcript.append(CLIENT, content, transcript.turns[-1].item_id, clock())
    flag = f"leakage:turn_{turn.index}"
    if profile.primary_disorder.value.lower() in content.lower() and flag not in transcript.flags:
        transcript.flags.append(flag)
    return turn


def default_max_turns(doc: QuestionnaireDoc) -> int:
    # one re-ask per item plus introduction and closing headroom
    return 3 * len(doc.items) + 4


def run_session(
    provider,
    profile: ClientProfile,
    doc: QuestionnaireDoc,
    *,
    mode: str = MODE_TURN_BY_TURN,
    max_turns: int | None = None,
    coverage_mode: str = "heuristic",
    clock: Callable[[], float] = time.time,
) -> Transcript:
    """Run one full interview and return the transcript.

    Raises :class:`TurnBudgetExceeded` (carrying the partial transcript,
    flagged incomplete) when the budget runs out with items pending.
    """
    if mode not in (MODE_TURN_BY_TURN, MODE_ONE_SHOT):
        raise ValueError(f"unknown mode {mode!r}")
    budget = max_turns if max_turns is not None else default_max_turns(doc)
    if budget < 2 * len(doc.items) + 2:
        raise ValueError(f"max_turns {budget} cannot cover {len(doc.items)} items")
    if mode == MODE_ONE_SHOT:
        return _run_one_shot(provider, profile, doc, clock=clock)

    transcript = Transcript(
        profile_name=profile.name,
        questionnaire_name=doc.name,
        model_id=getattr(provider, "model_id", "unknown"),
        mode=mode,
        started=clock(),
        coverage=ItemTracker.for_doc(doc),
    )
    therapist_sys = build_therapist_system_prompt(doc)
    client_sys = build_client_system_prompt(profile)

    therapist_turn(provider, transcript, None, system_prompt=therapist_sys, clock=clock)
    client_turn(provider, transcript, profile, system_prompt=client_sys, clock=clock)

    last_item_id: int | None = None
    while transcript.coverage.pending:
        if len(transcript.turns) + 2 > budget:
            transcript.flags.append("turn_budget_exceeded")
            transcript.ended = clock()
            raise TurnBudgetExceeded(transcript)
        item = select_next_item(transcript.coverage, doc)
        reask = item.id == last_item_id
        therapist_turn(provider, transcript, item, system_prompt=therapist_sys,
                       reask=reask, clock=clock)
        reply = client_turn(provider, transcript, profile, system_prompt=client_sys, clock=clock)
        if is_item_addressed(reply.content, item, mode=coverage_mode, provider=provider):
            mark_addressed(transcript.coverage, item.id)
        last_item_id = item.id

    if len(transcript.turns) < budget:
        transcript.append(THERAPIST, CLOSING_TEXT, None, clock())
    transcript.ended = clock()
    return transcript


ONE_SHOT_INSTRUCTION = (
    "Write the complete labeled interview now, covering every item in order."
)


def _one_shot_prompt(profile: ClientProfile, doc: QuestionnaireDoc) -> list[dict[str, str]]:
    system = (
        "You will write a complete simulated assessment interview between a "
        "therapist and a client, in one pass.\n\n"
        f"THERAPIST ROLE:\n{build_therapist_system_prompt(doc)}\n\n"
        f"CLIENT ROLE:\n{build_client_system_prompt(profile)}\n\n"
        "FORMAT: emit the dialogue as alternating lines, each starting with "
        '"Therapist:" or "Client:". Open with the therapist\'s introduction, '
        f"then ask all {len(doc.items)} items in order, one per therapist turn, "
        "with the client answering each. Produce no other text."
    )
    return [{"role": "system", "content": system},
            {"role": "user", "content": ONE_SHOT_INSTRUCTION}]


_SPEAKER_LINE = re.compile(r"^(Therapist|Client)\s*:\s*(.*)$", re.IGNORECASE)


def parse_dialogue_text(text: str) -> list[tuple[str, str]]:
    """Split one-shot output into (speaker, content) pairs.

    Content may span lines until the next speaker prefix; text before the
    first prefix is discarded. Raises :class:`DialogueParseError` if no
    turns are found, the dialogue starts with the client, or speakers
    fail to alternate.
    """
    pairs: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        m = _SPEAKER_LINE.match(line.strip())
        if m:
            pairs.append((m.group(1).lower(), [m.group(2).strip()]))
        elif pairs and line.strip():
            pairs[-1][1].append(line.strip())
    if not pairs:
        raise DialogueParseError("no Therapist:/Client: lines found")
    turns = [(speaker, " ".join(part for part in parts if part)) for speaker, parts in pairs]
    if turns[0][0] != THERAPIST:
        raise DialogueParseError("dialogue must open with the therapist")
    for (a, _), (b, _) in zip(turns, turns[1:]):
        if a == b:
            raise DialogueParseError("speakers do not alternate")
    if any(not content for _, content in turns):
        raise DialogueParseError("empty turn content")
    return turns


def _run_one_shot(provider, profile: ClientProfile, doc: QuestionnaireDoc,
                  *, clock: Callable[[], float]) -> Transcript:
    transcript = Transcript(
        profile_name=profile.name,
        questionnaire_name=doc.name,
        model_id=getattr(provider, "model_id", "unknown"),
        mode=MODE_ONE_SHOT,
        started=clock(),
        coverage=ItemTracker.for_doc(doc),
    )
    raw = provider.chat(_one_shot_prompt(profile, doc))
    turns = parse_dialogue_text(raw)

    n_items = len(doc.items)
    therapist_count = sum(1 for speaker, _ in turns if speaker == THERAPIST)
    # map therapist turns onto items in order; an extra leading turn is the
    # introduction and an extra trailing one the closing
    leading_intro = therapist_count in (n_items + 1, n_items + 2)
    item_iter = iter(range(1, n_items + 1))
    seen_therapist = 0
    current_item: int | None = None
    for speaker, content in turns:
        if speaker == THERAPIST:
            seen_therapist += 1
            if leading_intro and seen_therapist == 1:
                current_item = None
            else:
                current_item = next(item_iter, None)
        transcript.append(speaker, content, current_item, clock())

    for turn in transcript.turns:
        if turn.speaker != CLIENT or turn.item_id is None:
            continue
        item = doc.item(turn.item_id)
        if turn.item_id in transcript.coverage.pending and is_item_addressed(turn.content, item):
            mark_addressed(transcript.coverage, turn.item_id)

    transcript.flags.extend(scan_leakage(transcript, profile))
    if transcript.coverage.pending:
        transcript.flags.append("one_shot_incomplete_coverage")
    transcript.ended = clock()
    return transcript
