from .clients import ChatClient, ClientError, EndpointConfig, MockClient, OpenAICompatClient
from .pipeline import (
    BoundaryScoringError,
    CallCounter,
    JudgeVerdict,
    MementoRecord,
    PipelineClients,
    PipelineError,
    PipelineParams,
    TraceStats,
    corpus_stats,
    load_prompt,
    quantile,
    refine_memento,
    run_corpus,
    run_pipeline,
    score_boundaries,
)

__all__ = [
    "ChatClient",
    "ClientError",
    "EndpointConfig",
    "MockClient",
    "OpenAICompatClient",
    "BoundaryScoringError",
    "CallCounter",
    "JudgeVerdict",
    "MementoRecord",
    "PipelineClients",
    "PipelineError",
    "PipelineParams",
    "TraceStats",
    "corpus_stats",
    "load_prompt",
    "quantile",
    "refine_memento",
    "run_corpus",
    "run_pipeline",
    "score_boundaries",
]
