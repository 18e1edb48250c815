"""Batch execution: config loading, worker pool, persistence, aggregation.

Every work item (profile x session) runs the full pipeline — interview,
retrieval, diagnosis, evaluation — and persists a session record whatever
happens; one bad item never voids the batch. Aggregation runs once, after
the pool drains, over the successful records only.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import tempfile
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .diagnosis import DiagnosisReport, build_diagnosis_prompt, compile_report, generate_diagnosis
from .dialogue import MODE_ONE_SHOT, MODE_TURN_BY_TURN, Transcript, TurnBudgetExceeded, run_session
from .evaluation import (
    RUBRIC_KEYS,
    ConfusionMatrix,
    MetricsReport,
    PredictionRecord,
    compute_confusion,
    compute_metrics,
    evaluate_session,
)
from .gateway import HttpProvider, MockProvider, ProviderConfig, RetryPolicy
from .instruments import (
    DEFAULT_PROFILES_DIR,
    DEFAULT_QUESTIONNAIRE_PATH,
    DATA_DIR,
    load_profiles,
    load_questionnaire,
)
from .retrieval import build_index, build_retrieval_query, chunk_corpus, retrieve_top_k

log = logging.getLogger(__name__)

DEFAULT_CORPUS_PATH = DATA_DIR / "reference_corpus.txt"

STATUS_OK = "ok"
STATUS_PARTIAL = "partial"
STATUS_FAILED = "failed"


class BatchError(Exception):
    pass


class MissingPath(BatchError):
    pass


class InvalidValue(BatchError):
    pass


class FatalSetup(BatchError):
    pass


class NoSuccessfulSessions(BatchError):
    pass


class IoError(BatchError):
    pass


@dataclass
class RunConfig:
    questionnaire_path: Path
    profiles_dir: Path
    corpus_path: Path
    output_dir: Path
    provider: ProviderConfig | None = None
    judge_provider: ProviderConfig | None = None
    workers: int = 4
    sessions_per_profile: int = 1
    chunk_size: int = 512
    top_k: int = 5
    mode: str = MODE_TURN_BY_TURN
    seed: int = 0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    mock_script: Path | None = None

    def echo_dict(self) -> dict[str, Any]:
        def provider_echo(p: ProviderConfig | None) -> dict[str, Any] | None:
            if p is None:
                return None
            return {
                "base_url": p.base_url,
                "chat_model": p.chat_model,
                "embed_model": p.embed_model,
                "timeout": p.timeout,
                "api_key": "***" if p.api_key else None,
            }

        return {
            "questionnaire": str(self.questionnaire_path),
            "profiles": str(self.profiles_dir),
            "corpus": str(self.corpus_path),
            "output_dir": str(self.output_dir),
            "provider": provider_echo(self.provider),
            "judge_provider": provider_echo(self.judge_provider),
            "workers": self.workers,
            "sessions_per_profile": self.sessions_per_profile,
            "chunk_size": self.chunk_size,
            "top_k": self.top_k,
            "mode": self.mode,
            "seed": self.seed,
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "base_delay": self.retry.base_delay,
                "multiplier": self.retry.multiplier,
                "jitter_fraction": self.retry.jitter_fraction,
            },
            "mock_script": str(self.mock_script) if self.mock_script else None,
        }


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Resolve file values + flag overrides into a validated RunConfig.

    Overrides win over file values; the fully resolved config is echoed
    into the output directory for provenance.
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingPath(f"config file not found: {path}")
        try:
            values.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InvalidValue(f"config file is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    def pick(key: str, default: Any) -> Any:
        return values.get(key, default)

    questionnaire = Path(pick("questionnaire", DEFAULT_QUESTIONNAIRE_PATH))
    profiles = Path(pick("profiles", DEFAULT_PROFILES_DIR))
    corpus = Path(pick("corpus", DEFAULT_CORPUS_PATH))
    output_dir = Path(pick("out", "diagsim_out"))
    for label, p, want_dir in (
        ("questionnaire", questionnaire, False),
        ("profiles", profiles, True),
        ("corpus", corpus, False),
    ):
        if want_dir and not p.is_dir():
            raise MissingPath(f"{label} directory not found: {p}")
        if not want_dir and not p.is_file():
            raise MissingPath(f"{label} file not found: {p}")

    def positive_int(key: str, default: int, minimum: int = 1) -> int:
        raw = pick(key, default)
        try:
            value = int(raw)
        except (TypeError, ValueError) as exc:
            raise InvalidValue(f"{key} must be an integer, got {raw!r}") from exc
        if value < minimum:
            raise InvalidValue(f"{key} must be >= {minimum}, got {value}")
        return value

    workers = positive_int("workers", 4)
    sessions = positive_int("count", 1)
    chunk_size = positive_int("chunk_size", 512)
    top_k = positive_int("top_k", 5)
    seed = int(pick("seed", 0))
    mode = pick("mode", MODE_TURN_BY_TURN)
    if mode not in (MODE_TURN_BY_TURN, MODE_ONE_SHOT):
        raise InvalidValue(f"mode must be {MODE_TURN_BY_TURN} or {MODE_ONE_SHOT}, got {mode!r}")

    retry_values = pick("retry", {})
    try:
        retry = RetryPolicy(
            max_attempts=int(retry_values.get("max_attempts", 6)),
            base_delay=float(retry_values.get("base_delay", 1.0)),
            multiplier=float(retry_values.get("multiplier", 2.0)),
            jitter_fraction=float(retry_values.get("jitter_fraction", 0.1)),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidValue(f"invalid retry policy: {exc}") from exc

    mock_script = pick("mock_script", None)
    if mock_script is not None:
        mock_script = Path(mock_script)
        if not mock_script.is_file():
            raise MissingPath(f"mock script not found: {mock_script}")

    provider = None
    if pick("provider_url", None) or pick("model", None):
        base_url = pick("provider_url", None)
        model = pick("model", None)
        if not base_url or not model:
            raise InvalidValue("provider needs both provider_url and model")
        provider = ProviderConfig(
            base_url=base_url,
            chat_model=model,
            api_key=pick("api_key", None),
            embed_model=pick("embed_model", "nomic-embed-text"),
            timeout=float(pick("timeout", 60.0)),
        )
    if provider is None and mock_script is None:
        raise InvalidValue("either a provider (provider_url + model) or a mock script is required")

    judge_provider = None
    if pick("judge_model", None):
        judge_provider = ProviderConfig(
            base_url=pick("judge_url", provider.base_url if provider else "mock://"),
            chat_model=pick("judge_model"),
            api_key=pick("api_key", None),
            timeout=float(pick("timeout", 60.0)),
        )

    config = RunConfig(
        questionnaire_path=questionnaire,
        profiles_dir=profiles,
        corpus_path=corpus,
        output_dir=output_dir,
        provider=provider,
        judge_provider=judge_provider,
        workers=workers,
        sessions_per_profile=sessions,
        chunk_size=chunk_size,
        top_k=top_k,
        mode=mode,
        seed=seed,
        retry=retry,
        mock_script=mock_script,
    )
    config.output_dir.mkdir(parents=True, exist_ok=True)
    (config.output_dir / "config.resolved.json").write_text(
        json.dumps(config.echo_dict(), indent=2) + "\n", encoding="utf-8"
    )
    return config


def build_providers(config: RunConfig) -> tuple[Any, Any]:
    """(main provider, judge provider or None) per the config."""
    if config.mock_script is not None:
        spec = json.loads(Path(config.mock_script).read_text(encoding="utf-8"))
        provider = MockProvider(
            spec.get("chat", {}),
            default=spec.get("default"),
            model_id=spec.get("model_id", "mock"),
            embed_dim=int(spec.get("embed_dim", 64)),
            seed=config.seed,
            latency=float(spec.get("latency", 0.0)),
        )
        judge = None
        if "judge_chat" in spec:
            judge = MockProvider(
                spec["judge_chat"],
                default=spec.get("judge_default"),
                model_id=spec.get("judge_model_id", "mock-judge"),
                embed_dim=int(spec.get("embed_dim", 64)),
                seed=config.seed,
                latency=float(spec.get("latency", 0.0)),
            )
        return provider, judge
    assert config.provider is not None
    provider = HttpProvider(config.provider, config.retry)
    judge = HttpProvider(config.judge_provider, config.retry) if config.judge_provider else None
    return provider, judge


@dataclass
class SessionRecord:
    profile_name: str
    seq: int
    status: str
    duration: float
    truth: str | None = None
    transcript: Transcript | None = None
    diagnosis: DiagnosisReport | None = None
    evaluation: dict[str, Any] | None = None
    error: str | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile_name,
            "seq": self.seq,
            "status": self.status,
            "duration": self.duration,
            "truth": self.truth,
            "error": self.error,
            "transcript": self.transcript.to_json_dict() if self.transcript else None,
            "diagnosis": self.diagnosis.to_json_dict() if self.diagnosis else None,
            "evaluation": self.evaluation,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> SessionRecord:
        return cls(
            profile_name=data["profile"],
            seq=data["seq"],
            status=data["status"],
            duration=data["duration"],
            truth=data.get("truth"),
            transcript=Transcript.from_json_dict(data["transcript"]) if data.get("transcript") else None,
            diagnosis=DiagnosisReport.from_json_dict(data["diagnosis"]) if data.get("diagnosis") else None,
            evaluation=data.get("evaluation"),
            error=data.get("error"),
        )


_FILENAME_SAFE = re.compile(r"[^A-Za-z0-9._-]+")


def persist_session(record: SessionRecord, output_dir: str | Path) -> Path:
    """Atomically write one session record; returns the file path."""
    output_dir = Path(output_dir)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    safe_profile = _FILENAME_SAFE.sub("-", record.profile_name) or "profile"
    name = f"{safe_profile}_{record.seq:03d}_{stamp}.json"
    payload = json.dumps(record.to_json_dict(), ensure_ascii=False, indent=2) + "\n"
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=output_dir, prefix=".tmp_", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(payload)
        target = output_dir / name
        os.replace(tmp_path, target)
    except OSError as exc:
        raise IoError(f"cannot persist session record: {exc}") from exc
    return target


def load_records(sessions_dir: str | Path) -> list[SessionRecord]:
    sessions_dir = Path(sessions_dir)
    records = []
    for path in sorted(sessions_dir.glob("*.json")):
        records.append(SessionRecord.from_json_dict(json.loads(path.read_text(encoding="utf-8"))))
    return records


def run_one_session(
    provider,
    judge,
    profile,
    seq: int,
    doc,
    index,
    config: RunConfig,
    clock: Callable[[], float] = time.time,
) -> SessionRecord:
    """Full pipeline for one work item; never raises."""
    start = clock()
    transcript: Transcript | None = None
    report: DiagnosisReport | None = None
    evaluation: dict[str, Any] | None = None
    status = STATUS_OK
    error: str | None = None
    try:
        try:
            transcript = run_session(provider, profile, doc, mode=config.mode, clock=clock)
        except TurnBudgetExceeded as exc:
            transcript = exc.transcript
            status = STATUS_PARTIAL
        query = build_retrieval_query(transcript)
        passages = retrieve_top_k(index, query, config.top_k, provider.embed)
        prompt = build_diagnosis_prompt(transcript, passages)
        raw = generate_diagnosis(provider, prompt)
        report = compile_report(raw, transcript, passages)
        evaluation = evaluate_session(
            transcript,
            report,
            truth=profile.primary_disorder.value,
            embed_fn=provider.embed,
            judge=judge,
        )
    except Exception as exc:  # noqa: BLE001 - per-item isolation is the contract
        status = STATUS_FAILED
        error = f"{type(exc).__name__}: {exc}"
        log.warning("session %s/%d failed: %s", profile.name, seq, error)
    return SessionRecord(
        profile_name=profile.name,
        seq=seq,
        status=status,
        duration=clock() - start,
        truth=profile.primary_disorder.value,
        transcript=transcript,
        diagnosis=report,
        evaluation=evaluation,
        error=error,
    )


def run_batch(config: RunConfig, clock: Callable[[], float] = time.time) -> "BatchSummary":
    """Run profiles x sessions_per_profile items over the worker pool."""
    try:
        provider, judge = build_providers(config)
        doc = load_questionnaire(config.questionnaire_path)
        profiles = load_profiles(config.profiles_dir)
        if not profiles:
            raise FatalSetup(f"no profiles found in {config.profiles_dir}")
        corpus = config.corpus_path.read_text(encoding="utf-8")
        chunks = chunk_corpus(corpus, config.chunk_size)
        embed_model = provider.config.embed_model if hasattr(provider, "config") else "mock"
        index = build_index(chunks, provider.embed, embed_model)
    except FatalSetup:
        raise
    except Exception as exc:
        raise FatalSetup(f"batch setup failed: {exc}") from exc

    sessions_dir = config.output_dir / "sessions"
    sessions_dir.mkdir(parents=True, exist_ok=True)
    work = [(profile, seq) for profile in profiles for seq in range(config.sessions_per_profile)]

    def item(args) -> SessionRecord:
        profile, seq = args
        record = run_one_session(provider, judge, profile, seq, doc, index, config, clock)
        persist_session(record, sessions_dir)
        return record

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        records = list(pool.map(item, work))

    summary = aggregate(records, config_echo=config.echo_dict())
    write_summary(summary, config.output_dir)
    return summary


# --- aggregation ------------------------------------------------------------


def _mean_std(values: list[float]) -> dict[str, float | int | None]:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    mean = sum(values) / len(values)
    variance = sum((v - mean) ** 2 for v in values) / len(values)
    return {"mean": mean, "std": math.sqrt(variance), "n": len(values)}


def _collect_quality(records: list[SessionRecord]) -> dict[str, Any]:
    def pull(path: tuple[str, ...]) -> list[float]:
        out = []
        for record in records:
            node: Any = record.evaluation
            for key in path:
                if not isinstance(node, dict) or node.get(key) is None:
                    node = None
                    break
                node = node[key]
            if isinstance(node, (int, float)):
                out.append(float(node))
        return out

    quality: dict[str, Any] = {
        "readability": {
            "conversation": {
                "fre": _mean_std(pull(("readability", "conversation", "fre"))),
                "fkg": _mean_std(pull(("readability", "conversation", "fkg"))),
                "gfi": _mean_std(pull(("readability", "conversation", "gfi"))),
            },
            "rationale": {"gfi": _mean_std(pull(("readability", "rationale", "gfi")))},
        },
        "coherence": _mean_std(pull(("coherence",))),
        "rubric": {key: _mean_std(pull(("rubric", key))) for key in RUBRIC_KEYS},
    }
    return quality


@dataclass
class BatchSummary:
    n_sessions: int
    status_counts: dict[str, int]
    quality: dict[str, Any]
    per_model: dict[str, dict[str, Any]]
    per_profile: dict[str, dict[str, Any]]
    confusion: ConfusionMatrix
    metrics: MetricsReport
    explainability: dict[str, Any]
    failures: list[dict[str, Any]]
    config_echo: dict[str, Any] | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "n_sessions": self.n_sessions,
            "status_counts": self.status_counts,
            "quality": self.quality,
            "per_model": self.per_model,
            "per_profile": self.per_profile,
            "confusion": self.confusion.to_json_dict(),
            "metrics": self.metrics.to_json_dict(),
            "explainability": self.explainability,
            "failures": self.failures,
            "config": self.config_echo,
        }


def aggregate(records: list[SessionRecord], config_echo: dict[str, Any] | None = None) -> BatchSummary:
    """Batch statistics over the ok records; counts cover every record."""
    if not records:
        raise NoSuccessfulSessions("no records to aggregate")
    status_counts = {STATUS_OK: 0, STATUS_PARTIAL: 0, STATUS_FAILED: 0}
    for record in records:
        status_counts[record.status] = status_counts.get(record.status, 0) + 1
    ok = [r for r in records if r.status == STATUS_OK]
    if not ok:
        raise NoSuccessfulSessions(f"all {len(records)} sessions ended partial or failed")

    prediction_records = []
    for record in ok:
        accuracy = (record.evaluation or {}).get("accuracy") or {}
        if record.truth and accuracy:
            prediction_records.append(
                PredictionRecord(
                    truth=record.truth,
                    predicted_primary=accuracy.get("predicted_primary", "Unknown"),
                    predicted_set=tuple(accuracy.get("predicted_set", ())),
                )
            )
    confusion = compute_confusion(prediction_records)
    metrics = compute_metrics(confusion)

    signals = [r.diagnosis.signals for r in ok if r.diagnosis and r.diagnosis.signals]
    explainability = {
        "sym": _mean_std([float(s.sym_count) for s in signals]),
        "quote": _mean_std([float(s.quote_count) for s in signals]),
        "med": _mean_std([float(s.med_count) for s in signals]),
        "clause_citation_rate": (
            sum(1 for s in signals if s.dsm_clauses) / len(signals) if signals else None
        ),
        "step_list_rate": (
            sum(1 for s in signals if s.has_step_list) / len(signals) if signals else None
        ),
        "grounded_quote_fraction": _mean_std([s.grounded_quote_fraction for s in signals]),
    }

    def model_of(record: SessionRecord) -> str:
        return record.transcript.model_id if record.transcript else "unknown"

    per_model = {
        model: _collect_quality([r for r in ok if model_of(r) == model])
        for model in sorted({model_of(r) for r in ok})
    }
    per_profile = {
        name: _collect_quality([r for r in ok if r.profile_name == name])
        for name in sorted({r.profile_name for r in ok})
    }

    failures = [
        {"profile": r.profile_name, "seq": r.seq, "status": r.status, "error": r.error}
        for r in records
        if r.status != STATUS_OK
    ]

    return BatchSummary(
        n_sessions=len(records),
        status_counts=status_counts,
        quality=_collect_quality(ok),
        per_model=per_model,
        per_profile=per_profile,
        confusion=confusion,
        metrics=metrics,
        explainability=explainability,
        failures=failures,
        config_echo=config_echo,
    )


def write_summary(summary: BatchSummary, output_dir: str | Path) -> None:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "summary.json").write_text(
        json.dumps(summary.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    (output_dir / "confusion.csv").write_text(summary.confusion.to_csv(), encoding="utf-8")
    (output_dir / "metrics.json").write_text(
        json.dumps(summary.metrics.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    (output_dir / "report.md").write_text(render_report(summary), encoding="utf-8")


# --- report ------------------------------------------------------------------

REPORT_SECTIONS = (
    "Run",
    "Conversation Quality",
    "Rubric Scores",
    "Per-Label F1",
    "Confusion Matrix",
    "Explainability Signals",
    "Failures",
)


def _fmt(value: float | int | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def render_report(summary: BatchSummary) -> str:
    """Human-readable markdown companion to the summary JSON."""
    lines: list[str] = ["# Batch Report", ""]

    lines += ["## Run", ""]
    lines.append(f"- Sessions: {summary.n_sessions} "
                 f"(ok {summary.status_counts.get(STATUS_OK, 0)}, "
                 f"partial {summary.status_counts.get(STATUS_PARTIAL, 0)}, "
                 f"failed {summary.status_counts.get(STATUS_FAILED, 0)})")
    if summary.config_echo:
        echo = summary.config_echo
        lines.append(f"- Mode: {echo.get('mode')}, seed: {echo.get('seed')}, "
                     f"workers: {echo.get('workers')}")
        lines.append(f"- Questionnaire: {echo.get('questionnaire')}")
        provider = echo.get("provider") or {}
        model = provider.get("chat_model") or ("mock" if echo.get("mock_script") else "?")
        lines.append(f"- Model: {model}")
    lines.append("")

    lines += ["## Conversation Quality", ""]
    lines += ["| Metric | Mean | Std | N |", "| --- | --- | --- | --- |"]
    conv = summary.quality["readability"]["conversation"]
    for key, label in (("fre", "FRE"), ("fkg", "FKG"), ("gfi", "GFI")):
        agg = conv[key]
        lines.append(f"| {label} | {_fmt(agg['mean'])} | {_fmt(agg['std'])} | {agg['n']} |")
    rationale = summary.quality["readability"]["rationale"]["gfi"]
    lines.append(f"| Rationale GFI | {_fmt(rationale['mean'])} | {_fmt(rationale['std'])} | {rationale['n']} |")
    coherence = summary.quality["coherence"]
    lines.append(f"| Coherence (embed cosine) | {_fmt(coherence['mean'])} | {_fmt(coherence['std'])} | {coherence['n']} |")
    lines.append("")

    lines += ["## Rubric Scores", ""]
    lines += ["| Criterion | Mean | Std | N |", "| --- | --- | --- | --- |"]
    for key in RUBRIC_KEYS:
        agg = summary.quality["rubric"][key]
        lines.append(f"| {key} | {_fmt(agg['mean'])} | {_fmt(agg['std'])} | {agg['n']} |")
    lines.append("")

    lines += ["## Per-Label F1", ""]
    lines += ["| Disorder Type | Precision | Recall | F1 | Support |", "| --- | --- | --- | --- | --- |"]
    for label in summary.confusion.labels:
        m = summary.metrics.per_label[label]
        lines.append(
            f"| {label} | {_fmt(m.precision)} | {_fmt(m.recall)} | {_fmt(m.f1)} | {m.support} |"
        )
    lines.append("")
    lines.append(f"Micro accuracy: {_fmt(summary.metrics.micro_accuracy)}; "
                 f"macro F1: {_fmt(summary.metrics.macro_f1)}.")
    lines.append("")

    lines += ["## Confusion Matrix", ""]
    header = "| truth \\ predicted | " + " | ".join(summary.confusion.columns) + " |"
    lines.append(header)
    lines.append("| --- |" + " --- |" * len(summary.confusion.columns))
    for label, row in zip(summary.confusion.labels, summary.confusion.counts):
        lines.append("| " + label + " | " + " | ".join(str(c) for c in row) + " |")
    lines.append("")

    lines += ["## Explainability Signals", ""]
    lines += ["| Signal | Value |", "| --- | --- |"]
    exp = summary.explainability
    lines.append(f"| Mean #sym | {_fmt(exp['sym']['mean'])} |")
    lines.append(f"| Mean #quote | {_fmt(exp['quote']['mean'])} |")
    lines.append(f"| Mean #med | {_fmt(exp['med']['mean'])} |")
    lines.append(f"| Clause citation rate | {_fmt(exp['clause_citation_rate'])} |")
    lines.append(f"| Step-list rate | {_fmt(exp['step_list_rate'])} |")
    lines.append(f"| Grounded quote fraction | {_fmt(exp['grounded_quote_fraction']['mean'])} |")
    lines.append("")

    lines += ["## Failures", ""]
    if summary.failures:
        for failure in summary.failures:
            lines.append(f"- {failure['profile']} #{failure['seq']} [{failure['status']}]: "
                         f"{failure['error'] or 'incomplete coverage'}")
    else:
        lines.append("None.")
    lines.append("")
    return "\n".join(lines)
