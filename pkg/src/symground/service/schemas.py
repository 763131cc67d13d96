"""Request/response bodies for the HTTP service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class CompileRequest(BaseModel):
    formula: str
    alphabet: list[str] = Field(min_length=1)
    minimized: bool = True
    state_cap: int = Field(default=10_000, ge=1)


class CompileResponse(BaseModel):
    formula: str  # canonical form
    alphabet: list[str]  # includes the reserved empty symbol
    n_states: int
    initial: int
    finals: list[int]
    deads: list[int]
    output_histogram: dict[int, int]  # verdict -> state count
    structural_hash: str
    machine_b64: str
    dot: str


class ProgressRequest(BaseModel):
    formula: str
    symbol: str
    alphabet: Optional[list[str]] = None


class ProgressResponse(BaseModel):
    formula: str  # canonical progressed form
    verdict: int


class TraceRequest(BaseModel):
    trace: list[str]
    formula: Optional[str] = None
    alphabet: Optional[list[str]] = None
    machine_b64: Optional[str] = None  # alternative to formula+alphabet


class TraceResponse(BaseModel):
    states: list[int]
    outputs: list[int]
    reward: int
    terminated_at: Optional[int]


class GrammarSpec(BaseModel):
    """Grammar parameters without an alphabet of their own; callers that
    embed one (the verify request) supply the alphabet separately."""

    task_class: str
    alphabet: Optional[list[str]] = None
    min_sequences: int = 1
    max_sequences: int = 1
    min_length: int = 1
    max_length: int = 1
    disjunction_prob: float = 0.25


class TaskGrammar(GrammarSpec):
    alphabet: list[str] = Field(min_length=1)


class SampleRequest(TaskGrammar):
    count: int = Field(default=1, ge=1)
    seed: int = 0


class SampleResponse(BaseModel):
    formulas: list[str]


class DatasetBuildRequest(TaskGrammar):
    count: int = Field(default=1, ge=1)
    seed: int = 0
    manifest_path: str
    state_cap: int = Field(default=10_000, ge=1)


class DatasetBuildResponse(BaseModel):
    manifest_path: str
    count: int
    machine_states: list[int]


class VerifyRequest(BaseModel):
    alphabet: list[str] = Field(min_length=1)
    formulas: Optional[list[str]] = None  # explicit formulas to check
    grammar: Optional[GrammarSpec] = None  # or sample from a grammar
    n_formulas: int = Field(default=0, ge=0)
    max_len: int = Field(default=5, ge=1)
    seed: int = 0
    state_cap: int = Field(default=10_000, ge=1)


class VerifyResponse(BaseModel):
    formulas: int
    traces: int
    mismatches: list[str]
    ok: bool


class TrainRequest(BaseModel):
    config_text: str
    out_dir: str


class TrainResponse(BaseModel):
    run_dir: str
    episodes: int
    table_entries: int
    grounder_rounds: int
    mean_return_tail: float
    machine_states: list[int]


class EvalRequest(BaseModel):
    run_dir: str
    splits: list[str] = Field(default=["base", "+dep", "+conj"])


class MetricRow(BaseModel):
    distribution: str
    total_return: float
    discounted_return: float
    episodes: int
    seed: int


class EvalResponse(BaseModel):
    metrics_path: str
    rows: list[MetricRow]
