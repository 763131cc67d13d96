"""HTTP face of the package.

Light operations (compile, progress, trace, sample, verify) return their
results in the response body; heavy operations (dataset build, train, eval)
write artifacts to the server's filesystem and return paths plus summaries.
"""

from __future__ import annotations

import base64
import os
from collections import Counter

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..automata import (
    CompileError,
    MachineFormatError,
    compile_formula,
    deserialize,
    serialize,
    to_dot,
)
from ..experiment import ExperimentConfig, run_eval, run_train, run_verify, verify_formula
from ..ltl import Alphabet, LtlError, canonicalize, parse, progress, verdict
from ..taskgen import (
    DatasetVerificationError,
    TaskConfig,
    TaskGenError,
    build_dataset,
    sample_task,
    save_dataset,
)
from . import schemas

import numpy as np


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}")


def _io_error(exc: Exception) -> HTTPException:
    return HTTPException(status_code=409, detail=f"{type(exc).__name__}: {exc}")


def _task_config(grammar: schemas.GrammarSpec,
                 fallback_alphabet: Alphabet | None = None) -> TaskConfig:
    if grammar.alphabet is not None:
        alphabet = Alphabet(tuple(grammar.alphabet))
    elif fallback_alphabet is not None:
        alphabet = fallback_alphabet
    else:
        raise ValueError("grammar needs an alphabet")
    return TaskConfig(
        task_class=grammar.task_class,
        alphabet=alphabet,
        min_sequences=grammar.min_sequences,
        max_sequences=grammar.max_sequences,
        min_length=grammar.min_length,
        max_length=grammar.max_length,
        disjunction_prob=grammar.disjunction_prob,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="symground", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/compile", response_model=schemas.CompileResponse)
    def compile_endpoint(req: schemas.CompileRequest) -> schemas.CompileResponse:
        try:
            alphabet = Alphabet(tuple(req.alphabet))
            formula = parse(req.formula, alphabet)
            machine = compile_formula(formula, alphabet,
                                      state_cap=req.state_cap,
                                      minimized=req.minimized)
        except (LtlError, CompileError, ValueError) as exc:
            raise _bad_request(exc)
        histogram = Counter(int(machine.output(q)) for q in range(machine.n_states))
        return schemas.CompileResponse(
            formula=str(canonicalize(formula)),
            alphabet=list(alphabet.names),
            n_states=machine.n_states,
            initial=machine.initial,
            finals=sorted(machine.finals),
            deads=sorted(machine.deads),
            output_histogram=dict(histogram),
            structural_hash=machine.structural_hash(),
            machine_b64=base64.b64encode(serialize(machine)).decode("ascii"),
            dot=to_dot(machine),
        )

    @app.post("/progress", response_model=schemas.ProgressResponse)
    def progress_endpoint(req: schemas.ProgressRequest) -> schemas.ProgressResponse:
        try:
            alphabet = Alphabet(tuple(req.alphabet)) if req.alphabet else None
            formula = parse(req.formula, alphabet)
            progressed = progress(formula, req.symbol)
        except (LtlError, ValueError) as exc:
            raise _bad_request(exc)
        return schemas.ProgressResponse(
            formula=str(progressed), verdict=verdict(progressed)
        )

    @app.post("/trace", response_model=schemas.TraceResponse)
    def trace_endpoint(req: schemas.TraceRequest) -> schemas.TraceResponse:
        try:
            if req.machine_b64 is not None:
                machine = deserialize(base64.b64decode(req.machine_b64))
            elif req.formula is not None and req.alphabet is not None:
                alphabet = Alphabet(tuple(req.alphabet))
                machine = compile_formula(parse(req.formula, alphabet), alphabet)
            else:
                raise ValueError("provide machine_b64, or formula with alphabet")
            run = machine.run(req.trace)
        except (LtlError, CompileError, MachineFormatError, ValueError) as exc:
            raise _bad_request(exc)
        return schemas.TraceResponse(
            states=list(run.states),
            outputs=list(run.outputs),
            reward=run.outputs[-1],
            terminated_at=run.terminated_at,
        )

    @app.post("/sample", response_model=schemas.SampleResponse)
    def sample_endpoint(req: schemas.SampleRequest) -> schemas.SampleResponse:
        try:
            config = _task_config(req)
        except (TaskGenError, ValueError) as exc:
            raise _bad_request(exc)
        rng = np.random.default_rng(req.seed)
        return schemas.SampleResponse(
            formulas=[str(sample_task(config, rng)) for _ in range(req.count)]
        )

    @app.post("/dataset/build", response_model=schemas.DatasetBuildResponse)
    def dataset_endpoint(req: schemas.DatasetBuildRequest) -> schemas.DatasetBuildResponse:
        try:
            config = _task_config(req)
        except (TaskGenError, ValueError) as exc:
            raise _bad_request(exc)
        try:
            dataset = build_dataset(config, req.count,
                                    np.random.default_rng(req.seed),
                                    state_cap=req.state_cap)
        except (CompileError, DatasetVerificationError) as exc:
            raise _bad_request(exc)
        try:
            save_dataset(dataset, req.manifest_path)
        except OSError as exc:
            raise _io_error(exc)
        return schemas.DatasetBuildResponse(
            manifest_path=req.manifest_path,
            count=len(dataset),
            machine_states=[e.machine.n_states for e in dataset],
        )

    @app.post("/verify", response_model=schemas.VerifyResponse)
    def verify_endpoint(req: schemas.VerifyRequest) -> schemas.VerifyResponse:
        try:
            alphabet = Alphabet(tuple(req.alphabet))
            mismatches: list[str] = []
            traces = 0
            count = 0
            if req.formulas:
                for text in req.formulas:
                    formula = parse(text, alphabet)
                    checked, mismatch = verify_formula(
                        formula, alphabet, req.max_len, req.state_cap)
                    traces += checked
                    count += 1
                    if mismatch:
                        mismatches.append(mismatch)
            if req.n_formulas > 0:
                if req.grammar is None:
                    raise ValueError("n_formulas > 0 requires a grammar")
                report = run_verify(_task_config(req.grammar, alphabet),
                                    req.n_formulas, req.max_len, req.seed,
                                    req.state_cap)
                traces += report.traces
                count += report.formulas
                mismatches.extend(report.mismatches)
            if count == 0:
                raise ValueError("nothing to verify: give formulas or n_formulas")
        except (LtlError, CompileError, TaskGenError, ValueError) as exc:
            raise _bad_request(exc)
        return schemas.VerifyResponse(
            formulas=count, traces=traces,
            mismatches=mismatches, ok=not mismatches,
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_endpoint(req: schemas.TrainRequest) -> schemas.TrainResponse:
        try:
            config = ExperimentConfig.from_text(req.config_text)
        except (ValueError, TaskGenError) as exc:
            raise _bad_request(exc)
        try:
            summary = run_train(config, req.out_dir)
        except (CompileError, DatasetVerificationError) as exc:
            raise _bad_request(exc)
        except OSError as exc:
            raise _io_error(exc)
        return schemas.TrainResponse(**summary)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_endpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
        try:
            rows = run_eval(req.run_dir, splits=tuple(req.splits))
        except (FileNotFoundError, OSError) as exc:
            raise _io_error(exc)
        except (ValueError, TaskGenError, CompileError) as exc:
            raise _bad_request(exc)
        metrics_path = os.path.join(req.run_dir, "metrics.csv")
        return schemas.EvalResponse(
            metrics_path=metrics_path,
            rows=[schemas.MetricRow(
                distribution=r.distribution,
                total_return=r.total_return,
                discounted_return=r.discounted_return,
                episodes=r.episodes,
                seed=r.seed,
            ) for r in rows],
        )

    return app
