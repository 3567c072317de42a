"""Shared pipeline state: a dataset bundles the filtered log, static
triples, segmentation, snapshots, and the per-(user, step) subgraph cache
that samplers fill once before training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (
    EntityKind,
    EntityRegistry,
    EventLog,
    RelationKind,
    RelationRegistry,
    SnapshotGraph,
    StaticTriple,
    TimeSegmentation,
    build_snapshots,
    to_adjacency,
    triples_to_arrays,
)
from .sampler import EnsembleConfig, ensemble_sample, singleton_subgraph
from .seeding import child_seed


@dataclass
class Dataset:
    log: EventLog
    triples: list[StaticTriple]
    seg: TimeSegmentation
    snapshots: list[SnapshotGraph]
    subgraphs: dict = field(default_factory=dict)  # (user, step) -> [Subgraph]

    def __post_init__(self):
        reg = self.log.entities
        self.user_ids = reg.ids_of_kind(EntityKind.USER)
        self.product_ids = reg.ids_of_kind(EntityKind.PRODUCT)
        self.query_ids = reg.ids_of_kind(EntityKind.QUERY)
        self.n_entities = len(reg)
        heads, rels, tails = triples_to_arrays(self.triples)
        self.triple_heads, self.triple_rels, self.triple_tails = heads, rels, tails
        self.static_relation_ids = self.log.relations.ids_of_kind(RelationKind.STATIC)
        self._positives_cache: dict[int, dict[int, dict[str, np.ndarray]]] = {}

    def positives(self, user: int, step: int) -> dict[str, np.ndarray]:
        """Distinct product/query targets of one user at one step."""
        per_step = self._positives_cache.get(step)
        if per_step is None:
            per_step = {}
            snap = self.snapshots[step]
            kinds = self.log.entities.kinds
            for u, t in zip(snap.users, snap.targets):
                slot = per_step.setdefault(int(u), {"product": set(), "query": set()})
                if kinds[t] == EntityKind.PRODUCT:
                    slot["product"].add(int(t))
                elif kinds[t] == EntityKind.QUERY:
                    slot["query"].add(int(t))
            per_step = {
                u: {k: np.array(sorted(v), dtype=np.int64) for k, v in slots.items()}
                for u, slots in per_step.items()
            }
            self._positives_cache[step] = per_step
        empty = np.empty(0, dtype=np.int64)
        return per_step.get(user, {"product": empty, "query": empty})

    def trained_users(self) -> np.ndarray:
        """Users with at least one interaction event inside the training steps."""
        active = set()
        for step in self.seg.train_steps():
            active.update(int(u) for u in self.snapshots[step].users)
        return np.array(sorted(active), dtype=np.int64)

    def ground_truth(self, steps) -> dict:
        """{(user, step, task): id set}; empty sets are omitted."""
        truth = {}
        for step in steps:
            snap = self.snapshots[step]
            kinds = self.log.entities.kinds
            for u, t in zip(snap.users, snap.targets):
                if kinds[t] == EntityKind.PRODUCT:
                    task = "product"
                elif kinds[t] == EntityKind.QUERY:
                    task = "query"
                else:
                    continue
                truth.setdefault((int(u), int(step), task), set()).add(int(t))
        return truth


def build_dataset(log: EventLog, triples, seg: TimeSegmentation) -> Dataset:
    return Dataset(log, list(triples), seg, build_snapshots(log, seg, triples))


def sample_dataset(
    data: Dataset, ensemble: EnsembleConfig, seed: int, steps=None,
) -> None:
    """Fill the subgraph cache for every user at the requested steps.

    Defaults to every step after the background region (training rows plus
    the realized rows the auto-regressive evaluation appends). A user with
    no edges in a snapshot gets singleton subgraphs instead of a sampler
    error; samplers themselves still reject isolated seeds.
    """
    if steps is None:
        first = data.seg.split[0]
        steps = range(first, data.seg.num_steps)
    size = ensemble.size
    for step in steps:
        adj = to_adjacency(data.snapshots[step])
        cfg = EnsembleConfig(
            samplers=ensemble.samplers, seed=child_seed(seed, f"sample-step-{step}")
        )
        for user in data.user_ids:
            user = int(user)
            if adj.degree(user) == 0:
                data.subgraphs[(user, step)] = [singleton_subgraph(user)] * size
            else:
                data.subgraphs[(user, step)] = ensemble_sample(adj, user, cfg)


STORE_ARRAYS = (
    "log_users", "log_targets", "log_rels", "log_times",
    "triple_heads", "triple_rels", "triple_tails",
)


def save_store(out_dir, log: EventLog, triples, seg: TimeSegmentation) -> None:
    """Persist registries, the event log, triples and the segmentation.

    Individual .npy files rather than an archive: their bytes carry no
    timestamps, so re-running ingestion reproduces identical outputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.entities.write_tsv(out / "entities.tsv")
    log.relations.write_tsv(out / "relations.tsv")
    heads, rels, tails = triples_to_arrays(triples)
    arrays = dict(zip(STORE_ARRAYS, (
        log.users, log.targets, log.rels, log.times, heads, rels, tails,
    )))
    for name, arr in arrays.items():
        np.save(out / f"{name}.npy", arr)
    with open(out / "segmentation.json", "w", encoding="utf-8") as fh:
        json.dump({
            "boundaries": seg.boundaries.tolist(),
            "counts": seg.counts.tolist(),
            "split": list(seg.split),
            "mode": seg.mode,
        }, fh, sort_keys=True, indent=0)
        fh.write("\n")


def load_store(out_dir) -> tuple[EventLog, list[StaticTriple], TimeSegmentation]:
    out = Path(out_dir)
    if not (out / "entities.tsv").exists():
        raise FileNotFoundError(f"no ingested store under {out}")
    entities = EntityRegistry.read_tsv(out / "entities.tsv")
    relations = RelationRegistry.read_tsv(out / "relations.tsv")
    arrays = {name: np.load(out / f"{name}.npy") for name in STORE_ARRAYS}
    log = EventLog(
        entities, relations,
        arrays["log_users"], arrays["log_targets"],
        arrays["log_rels"], arrays["log_times"],
    )
    triples = [
        StaticTriple(int(h), int(r), int(t))
        for h, r, t in zip(
            arrays["triple_heads"], arrays["triple_rels"], arrays["triple_tails"]
        )
    ]
    with open(out / "segmentation.json", encoding="utf-8") as fh:
        raw = json.load(fh)
    seg = TimeSegmentation(
        boundaries=np.array(raw["boundaries"], dtype=np.int64),
        counts=np.array(raw["counts"], dtype=np.int64),
        split=tuple(raw["split"]),
        mode=raw["mode"],
    )
    return log, triples, seg
