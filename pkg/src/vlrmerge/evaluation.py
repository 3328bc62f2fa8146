"""Pairwise-preference and best-of-N accuracy from externally supplied rewards.

Aggregation is exact: counts are combined with rational arithmetic and only
converted to float at the boundary, so the overall accuracy equals the
count-weighted mean of the per-domain accuracies by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import DatasetError, VlrmergeError


@dataclass(frozen=True)
class PreferencePair:
    id: str
    domain: str
    chosen_reward: float
    rejected_reward: float


@dataclass(frozen=True)
class BoNInstance:
    id: str
    candidate_rewards: tuple[float, ...]
    candidate_correct: tuple[bool, ...]

    def __post_init__(self):
        if len(self.candidate_rewards) != len(self.candidate_correct):
            raise VlrmergeError(f"instance {self.id!r}: rewards and correct flags differ in length")
        if not self.candidate_rewards:
            raise VlrmergeError(f"instance {self.id!r}: empty candidate list")


@dataclass
class BenchReport:
    per_domain_accuracy: dict[str, float]
    overall_accuracy: float
    macro_average: float
    counts: dict[str, int]
    correct: dict[str, int] = field(default_factory=dict)

    def render(self) -> str:
        domains = list(self.per_domain_accuracy)
        header = [d.capitalize() for d in domains] + ["Overall", "Macro Avg."]
        values = [self.per_domain_accuracy[d] for d in domains] + [
            self.overall_accuracy,
            self.macro_average,
        ]
        cells = [f"{100.0 * v:.1f}" for v in values]
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        head = "  ".join(h.rjust(w) for h, w in zip(header, widths))
        body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return head + "\n" + body

    def to_json(self) -> dict:
        return {
            "per_domain_accuracy": self.per_domain_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "macro_average": self.macro_average,
            "counts": self.counts,
        }


def judge_pair(pair: PreferencePair) -> bool:
    """True iff the chosen response's reward is strictly higher; ties count as wrong."""
    if not math.isfinite(pair.chosen_reward) or not math.isfinite(pair.rejected_reward):
        raise VlrmergeError(f"pair {pair.id!r}: non-finite reward")
    return pair.chosen_reward > pair.rejected_reward


def score_pairwise_bench(pairs: list[PreferencePair]) -> BenchReport:
    """Per-domain, overall (instance-weighted) and macro (unweighted) accuracy."""
    if not pairs:
        raise VlrmergeError("cannot score an empty pair list")
    counts: dict[str, int] = {}
    correct: dict[str, int] = {}
    for pair in pairs:
        counts[pair.domain] = counts.get(pair.domain, 0) + 1
        correct.setdefault(pair.domain, 0)
        if judge_pair(pair):
            correct[pair.domain] += 1
    per_domain = {d: Fraction(correct[d], counts[d]) for d in counts}
    overall = Fraction(sum(correct.values()), sum(counts.values()))
    macro = sum(per_domain.values(), Fraction(0)) / len(per_domain)
    return BenchReport(
        per_domain_accuracy={d: float(v) for d, v in per_domain.items()},
        overall_accuracy=float(overall),
        macro_average=float(macro),
        counts=counts,
        correct=correct,
    )


def score_best_of_n(instances: list[BoNInstance]) -> float:
    """Fraction of instances whose highest-reward candidate is correct.

    Reward ties pick the lowest candidate index.
    """
    if not instances:
        raise VlrmergeError("cannot score an empty instance list")
    hits = 0
    for inst in instances:
        for reward in inst.candidate_rewards:
            if not math.isfinite(reward):
                raise VlrmergeError(f"instance {inst.id!r}: non-finite reward")
        best = max(range(len(inst.candidate_rewards)), key=lambda i: inst.candidate_rewards[i])
        hits += inst.candidate_correct[best]
    return float(Fraction(hits, len(instances)))


# ---------------------------------------------------------------------------
# dataset records and the scorer round trip


@dataclass(frozen=True)
class PairwiseExample:
    id: str
    domain: str
    instruction: str
    chosen_text: str
    rejected_text: str
    image_path: str | None = None


@dataclass(frozen=True)
class BoNExample:
    id: str
    instruction: str
    candidates: tuple[tuple[str, bool], ...]  # (text, correct)
    image_path: str | None = None


def _records(path: str | Path):
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{line_no}: invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise DatasetError(f"{path}:{line_no}: record must be a JSON object")
            yield line_no, record


def _require(record: dict, keys: list[str], path, line_no: int) -> None:
    missing = [k for k in keys if k not in record]
    if missing:
        raise DatasetError(f"{path}:{line_no}: missing field(s) {', '.join(missing)}")


def load_pairwise_dataset(path: str | Path) -> list[PairwiseExample]:
    examples = []
    seen = set()
    for line_no, record in _records(path):
        _require(record, ["id", "domain", "instruction", "chosen_text", "rejected_text"], path, line_no)
        if record["id"] in seen:
            raise DatasetError(f"{path}:{line_no}: duplicate id {record['id']!r}")
        seen.add(record["id"])
        examples.append(
            PairwiseExample(
                id=str(record["id"]),
                domain=str(record["domain"]),
                instruction=str(record["instruction"]),
                chosen_text=str(record["chosen_text"]),
                rejected_text=str(record["rejected_text"]),
                image_path=record.get("image_path"),
            )
        )
    if not examples:
        raise DatasetError(f"{path}: dataset is empty")
    return examples


def load_bon_dataset(path: str | Path) -> list[BoNExample]:
    examples = []
    seen = set()
    for line_no, record in _records(path):
        _require(record, ["id", "instruction", "candidates"], path, line_no)
        if record["id"] in seen:
            raise DatasetError(f"{path}:{line_no}: duplicate id {record['id']!r}")
        seen.add(record["id"])
        candidates = record["candidates"]
        if not isinstance(candidates, list) or not candidates:
            raise DatasetError(f"{path}:{line_no}: candidates must be a non-empty list")
        parsed = []
        for i, cand in enumerate(candidates):
            if not isinstance(cand, dict) or "text" not in cand or "correct" not in cand:
                raise DatasetError(f"{path}:{line_no}: candidate #{i} needs 'text' and 'correct'")
            parsed.append((str(cand["text"]), bool(cand["correct"])))
        examples.append(
            BoNExample(
                id=str(record["id"]),
                instruction=str(record["instruction"]),
                candidates=tuple(parsed),
                image_path=record.get("image_path"),
            )
        )
    if not examples:
        raise DatasetError(f"{path}: dataset is empty")
    return examples


def _check_unique_request_ids(requests: list[dict]) -> list[dict]:
    seen = set()
    for req in requests:
        if req["id"] in seen:
            raise DatasetError(f"composed request id {req['id']!r} is not unique")
        seen.add(req["id"])
    return requests


def pairwise_requests(examples: list[PairwiseExample]) -> list[dict]:
    requests = []
    for ex in examples:
        for side, text in (("chosen", ex.chosen_text), ("rejected", ex.rejected_text)):
            req = {"id": f"{ex.id}#{side}", "instruction": ex.instruction, "response": text}
            if ex.image_path is not None:
                req["image_path"] = ex.image_path
            requests.append(req)
    return _check_unique_request_ids(requests)


def bon_requests(examples: list[BoNExample]) -> list[dict]:
    requests = []
    for ex in examples:
        for i, (text, _) in enumerate(ex.candidates):
            req = {"id": f"{ex.id}#{i}", "instruction": ex.instruction, "response": text}
            if ex.image_path is not None:
                req["image_path"] = ex.image_path
            requests.append(req)
    return _check_unique_request_ids(requests)


def evaluate_pairwise(examples: list[PairwiseExample], scorer) -> BenchReport:
    """Score every response with the scorer and aggregate pairwise accuracy."""
    rewards = scorer.score(pairwise_requests(examples))
    pairs = [
        PreferencePair(
            id=ex.id,
            domain=ex.domain,
            chosen_reward=rewards[f"{ex.id}#chosen"],
            rejected_reward=rewards[f"{ex.id}#rejected"],
        )
        for ex in examples
    ]
    return score_pairwise_bench(pairs)


def evaluate_bon(examples: list[BoNExample], scorer) -> float:
    """Score every candidate with the scorer and compute best-of-N accuracy."""
    rewards = scorer.score(bon_requests(examples))
    instances = [
        BoNInstance(
            id=ex.id,
            candidate_rewards=tuple(rewards[f"{ex.id}#{i}"] for i in range(len(ex.candidates))),
            candidate_correct=tuple(correct for _, correct in ex.candidates),
        )
        for ex in examples
    ]
    return score_best_of_n(instances)
