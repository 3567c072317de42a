"""Top-K metrics and the evaluation protocols.

Frozen mode scores every evaluated step with the intent computed from the
training rows only; auto-regressive mode appends each realized step's
structural representation to the trajectory after scoring it (no parameter
updates), so later steps see newly collected data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, structural_user_rep, temporal_pass
from .pipeline import Dataset


def recall_at_k(ranked, truth, k: int) -> float:
    """|top-k intersect truth| / |truth|."""
    if not truth:
        raise ValueError("recall undefined for empty truth")
    hits = sum(1 for item in ranked[:k] if item in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, truth, k: int) -> float:
    """Binary-relevance NDCG with log2 position discounts."""
    if not truth:
        raise ValueError("ndcg undefined for empty truth")
    dcg = 0.0
    for i, item in enumerate(ranked[:k], start=1):
        if item in truth:
            dcg += 1.0 / math.log2(i + 1)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(len(truth), k) + 1))
    return dcg / ideal


@dataclass
class StepMetrics:
    task: str
    step: int
    k: int
    recall: float
    ndcg: float
    n_users: int


@dataclass
class MetricsReport:
    k: int
    mode: str
    per_step: list[StepMetrics] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    skipped_users: int = 0

    def aggregate(self, task: str, key: str) -> float:
        return self.aggregates[task][key]

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "mode": self.mode,
            "records": [
                {
                    "task": m.task, "step": m.step, "k": m.k,
                    "recall": m.recall, "ndcg": m.ndcg, "n_users": m.n_users,
                }
                for m in self.per_step
            ],
            "aggregates": self.aggregates,
            "skipped_users": self.skipped_users,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def rank_candidates(scores: np.ndarray, ids: np.ndarray) -> list[int]:
    """Descending score, ties broken by ascending id."""
    order = np.lexsort((ids, -scores))
    return [int(ids[i]) for i in order]


def trajectory_rows(store, data: Dataset, cfg: ModelConfig, user: int, steps) -> np.ndarray:
    """Structural representation values for one user over the given steps."""
    tape = ad.Tape()
    rows = [
        structural_user_rep(tape, store, data.subgraphs[(user, step)], cfg).value[0]
        for step in steps
    ]
    return np.array(rows)


def _intent_from_rows(store, cfg: ModelConfig, rows: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    next_reps, _ = temporal_pass(tape, store, tape.constant(rows), cfg.dim)
    return next_reps.value[len(rows) - 1]


def evaluate(
    store,
    data: Dataset,
    model_cfg: ModelConfig,
    k: int,
    mode: str = "frozen",
    region: str = "test",
    dump_path=None,
) -> MetricsReport:
    """Score every (trained user, region step) pair with truth against the
    full candidate set of each task; report per-step and aggregate metrics."""
    if mode not in ("frozen", "autoregressive"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    steps = {
        "val": list(data.seg.val_steps()),
        "test": list(data.seg.test_steps()),
    }.get(region)
    if steps is None:
        raise ValueError(f"unknown evaluation region {region!r}")

    truth = data.ground_truth(steps)
    if not truth:
        raise ValueError(f"no ground truth available in the {region} region")
    trained = set(int(u) for u in data.trained_users())
    truth_users = {u for (u, _, _) in truth}
    skipped = sorted(truth_users - trained)

    emb = store["entity_emb"].value
    candidates = {"product": data.product_ids, "query": data.query_ids}
    train_steps = list(data.seg.train_steps())

    rows_per_user: dict[tuple[int, int, str], tuple[float, float]] = {}
    for user in sorted(truth_users & trained):
        base_rows = trajectory_rows(store, data, model_cfg, user, train_steps)
        if mode == "frozen":
            intent = _intent_from_rows(store, model_cfg, base_rows)
            intents = {step: intent for step in steps}
        else:
            intents = {}
            rows = base_rows
            for step in steps:
                intents[step] = _intent_from_rows(store, model_cfg, rows)
                realized = trajectory_rows(store, data, model_cfg, user, [step])
                rows = np.vstack([rows, realized])
        for step in steps:
            for task, cand in candidates.items():
                items = truth.get((user, step, task))
                if not items:
                    continue
                scores = emb[cand] @ intents[step]
                ranked = rank_candidates(scores, cand)
                rows_per_user[(user, step, task)] = (
                    recall_at_k(ranked, items, k),
                    ndcg_at_k(ranked, items, k),
                )

    report = MetricsReport(k=k, mode=mode, skipped_users=len(skipped))
    totals: dict[str, list] = {}
    for task in ("product", "query"):
        for step in steps:
            pairs = [
                v for (u, s, t), v in rows_per_user.items()
                if s == step and t == task
            ]
            if not pairs:
                continue
            rec = float(np.mean([p[0] for p in pairs]))
            ndcg = float(np.mean([p[1] for p in pairs]))
            report.per_step.append(
                StepMetrics(task, int(step), k, rec, ndcg, len(pairs))
            )
            totals.setdefault(task, []).extend(pairs)
        if task in totals:
            pairs = totals[task]
            report.aggregates[task] = {
                "recall": float(np.mean([p[0] for p in pairs])),
                "ndcg": float(np.mean([p[1] for p in pairs])),
                "n_pairs": len(pairs),
            }

    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as fh:
            fh.write("user,step,task,recall,ndcg\n")
            for (user, step, task), (rec, ndcg) in sorted(rows_per_user.items()):
                fh.write(f"{user},{step},{task},{rec:.17g},{ndcg:.17g}\n")
    return report
