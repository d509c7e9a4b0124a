"""B-cubed evaluation, log-posterior reporting and per-step run traces."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Optional

from .core import Partition, Scorer, ewens_log_posterior


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    log_posterior: Optional[float] = None
    n_clusters: Optional[int] = None

    def as_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def bcubed(pred: Partition, gold: Partition) -> EvalReport:
    """Per-element B-cubed precision and recall, averaged over elements."""
    gold_of = {i: k for k, c in enumerate(gold) for i in c.members}
    pred_ids = {i for c in pred for i in c.members}
    if pred_ids != set(gold_of):
        missing = sorted(set(gold_of) - pred_ids)
        extra = sorted(pred_ids - set(gold_of))
        raise ValueError(f"id covers differ: missing from pred {missing[:10]}, extra {extra[:10]}")
    gold_size = [len(c) for c in gold]
    n = len(gold_of)
    prec = rec = 0.0
    for c in pred:
        overlap: dict[int, int] = {}
        for i in c.members:
            k = gold_of[i]
            overlap[k] = overlap.get(k, 0) + 1
        size = len(c)
        # every element of c sharing gold cluster k contributes ov/size and ov/|gold_k|
        for k, ov in overlap.items():
            prec += ov * ov / size
            rec += ov * ov / gold_size[k]
    prec /= n
    rec /= n
    return EvalReport(prec, rec, _f1(prec, rec), n_clusters=len(pred))


def score_clustering(partition: Partition, alpha: float, model: Scorer) -> float:
    """Reported log posterior of a clustering (unnormalised Ewens score)."""
    return ewens_log_posterior(partition, alpha, model)


def evaluate(pred: Partition, gold: Optional[Partition], alpha: float, model: Scorer) -> EvalReport:
    lp = score_clustering(pred, alpha, model)
    if gold is None:
        return EvalReport(float("nan"), float("nan"), float("nan"), lp, len(pred))
    rep = bcubed(pred, gold)
    rep.log_posterior = lp
    return rep


@dataclass
class TraceRecord:
    step: int
    top_log_posterior: float
    n_subproblems: int = 1
    log_effective_particles: float = 0.0
    n_particles: int = 1
    main_evaluations: int = 0
    wall_time: float = 0.0
    f1: Optional[float] = None
    event: Optional[str] = None

    def as_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class RunTrace:
    """Append-only list of per-step records, optionally mirrored to a JSON-lines sink."""

    records: list[TraceRecord] = field(default_factory=list)
    sink: Optional[IO[str]] = None

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.records.append(rec)
        if self.sink is not None:
            self.sink.write(json.dumps(rec.as_record()) + "\n")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def last(self) -> Optional[TraceRecord]:
        return self.records[-1] if self.records else None

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def read_trace(lines: Iterable[str]) -> list[TraceRecord]:
    return [TraceRecord(**json.loads(line)) for line in lines if line.strip()]
