"""diagsim: simulate therapist-client questionnaire interviews, produce
retrieval-grounded evidence-tagged diagnoses, and evaluate the results.
"""

from .batch import BatchSummary, RunConfig, SessionRecord, aggregate, load_config, run_batch
from .diagnosis import (
    DiagnosisReport,
    EvidenceTag,
    ExplainabilitySignals,
    build_diagnosis_prompt,
    compile_report,
    extract_disorders,
    extract_explainability_signals,
    extract_sections,
    generate_diagnosis,
    parse_evidence_tags,
)
from .dialogue import (
    ConversationTurn,
    Transcript,
    TurnBudgetExceeded,
    build_client_system_prompt,
    build_therapist_system_prompt,
    run_session,
)
from .evaluation import (
    ConfusionMatrix,
    PredictionRecord,
    RubricScores,
    coherence_score,
    compute_confusion,
    compute_metrics,
    count_text_stats,
    flesch_kincaid_grade,
    flesch_reading_ease,
    gunning_fog,
    rubric_evaluate,
)
from .gateway import (
    ChatMessage,
    EmbeddingVector,
    HttpProvider,
    MockProvider,
    ProviderConfig,
    RetryPolicy,
    chat_complete,
    embed_text,
    with_backoff,
)
from .instruments import (
    ClientProfile,
    DisorderLabel,
    ItemTracker,
    QuestionnaireDoc,
    QuestionnaireItem,
    canonicalize,
    is_item_addressed,
    mark_addressed,
    parse_profile,
    parse_questionnaire,
    select_next_item,
)
from .retrieval import (
    CorpusChunk,
    EmbeddingIndex,
    RetrievedPassage,
    build_index,
    build_retrieval_query,
    chunk_corpus,
    retrieve_top_k,
)

__version__ = "0.1.0"
