"""Per-turn CPU latency of the full tracking path."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from itertools import cycle
from typing import Sequence

import numpy as np
import torch

from .dst import Dialog, DialogState, ModelScorer, Ontology, enumerate_candidates, predict_turn, update_state
from .encoder import ModelParams
from .errors import TooFewTurns
from .tokenizer import DEFAULT_MAX_LEN, Vocab

MIN_TURNS = 30


@dataclass
class BenchReport:
    model_id: str
    hardware: str
    mean_s: float
    median_s: float
    p95_s: float
    turns: int
    threads: int
    warmup: int
    candidates_per_turn: int
    samples_s: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return asdict(self)


def hardware_description() -> str:
    model = ""
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    model = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{model or platform.processor() or 'unknown cpu'}; {platform.system()} {platform.machine()}"


def benchmark(params: ModelParams, vocab: Vocab, ontology: Ontology, dialogs: Sequence[Dialog], turns: int = 100,
              warmup: int = 5, threads: int = 1, max_len: int = DEFAULT_MAX_LEN, model_id: str = "model",
              threshold: float = 0.5) -> BenchReport:
    """Time ``turns`` complete turns (score every candidate, select, update state).

    Dialogs are replayed in order, cycling when exhausted; the state resets at
    each dialog start. The first ``warmup`` turns are discarded.
    """
    if turns < MIN_TURNS:
        raise TooFewTurns(f"need at least {MIN_TURNS} measured turns, got {turns}")
    if not dialogs or not any(d.turns for d in dialogs):
        raise TooFewTurns("no dialog turns to replay")
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        scorer = ModelScorer(params, vocab, max_len)
        candidates = enumerate_candidates(ontology)
        stream = cycle((i, turn) for d in dialogs for i, turn in enumerate(d.turns))
        samples = []
        state = DialogState()
        for n in range(warmup + turns):
            index, turn = next(stream)
            if index == 0:
                state = DialogState()
            start = time.perf_counter()
            state = update_state(state, predict_turn(scorer, turn, ontology, threshold=threshold,
                                                     candidates=candidates))
            elapsed = time.perf_counter() - start
            if n >= warmup:
                samples.append(elapsed)
    finally:
        torch.set_num_threads(previous_threads)
    return BenchReport(
        model_id=model_id,
        hardware=hardware_description(),
        mean_s=statistics.fmean(samples),
        median_s=statistics.median(samples),
        p95_s=float(np.percentile(samples, 95)),
        turns=len(samples),
        threads=threads,
        warmup=warmup,
        candidates_per_turn=len(candidates),
        samples_s=samples,
    )
