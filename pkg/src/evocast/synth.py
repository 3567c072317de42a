"""Planted-preference synthetic datasets.

Users belong to clusters; each user keeps a small set of favorite products
and queries drawn from their cluster's pools and interacts with all of
them every step. Preference phases can flip mid-training (teaching the
temporal module that recent steps matter) and mid-test (the drift the
auto-regressive evaluation should absorb). Timestamps are laid out so that
equal-duration segmentation recovers the planted steps exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import (
    EntityKind,
    EntityRegistry,
    EventLog,
    RelationKind,
    RelationRegistry,
    StaticTriple,
    segment_time,
)
from .pipeline import Dataset, build_dataset
from .seeding import rng_for

STEP_SECONDS = 86_400


@dataclass
class SyntheticConfig:
    n_users: int = 20
    n_products: int = 30
    n_queries: int = 10
    n_clusters: int = 2
    num_steps: int = 28
    split: tuple[int, int, int, int] = (10, 10, 2, 6)
    product_favorites: int = 3
    query_favorites: int = 2
    noise_prob: float = 0.1
    matches_per_query: int = 3
    train_drift: bool = False
    test_drift_step: int | None = None  # 1-based test step where preferences flip
    seed: int = 0


def _cluster_pools(cfg: SyntheticConfig):
    prods = {c: [i for i in range(cfg.n_products) if i % cfg.n_clusters == c]
             for c in range(cfg.n_clusters)}
    queries = {c: [i for i in range(cfg.n_queries) if i % cfg.n_clusters == c]
               for c in range(cfg.n_clusters)}
    return prods, queries


def _phase_boundaries(cfg: SyntheticConfig) -> list[int]:
    """Steps at which every user redraws favorites in the opposite cluster."""
    bounds = []
    bg, train, val, _ = cfg.split
    if cfg.train_drift:
        bounds.append(bg + train // 2)
    if cfg.test_drift_step is not None:
        bounds.append(bg + train + val + cfg.test_drift_step - 1)
    return bounds


def _favorites(cfg: SyntheticConfig, user: int, phase: int):
    prods, queries = _cluster_pools(cfg)
    cluster = (user + phase) % cfg.n_clusters
    rng = rng_for(cfg.seed, f"favorites-{user}-{phase}")
    fav_p = rng.choice(
        prods[cluster], size=min(cfg.product_favorites, len(prods[cluster])),
        replace=False,
    )
    fav_q = rng.choice(
        queries[cluster], size=min(cfg.query_favorites, len(queries[cluster])),
        replace=False,
    )
    return sorted(int(p) for p in fav_p), sorted(int(q) for q in fav_q), cluster


def generate_rows(cfg: SyntheticConfig):
    """Event and triple rows as (names, action, timestamp) tuples."""
    bounds = _phase_boundaries(cfg)
    prods, _ = _cluster_pools(cfg)
    rng_noise = rng_for(cfg.seed, "noise")
    noisy_until = cfg.split[0] + cfg.split[1]

    events = []
    ts = 0
    for step in range(cfg.num_steps):
        ts = step * STEP_SECONDS
        for user in range(cfg.n_users):
            phase = sum(1 for b in bounds if step >= b)
            fav_p, fav_q, cluster = _favorites(cfg, user, phase)
            for p in fav_p:
                events.append((f"u{user}", f"p{p}", "click", ts))
                ts += 1
            for q in fav_q:
                events.append((f"u{user}", f"q{q}", "type_query", ts))
                ts += 1
            if step < noisy_until and rng_noise.random() < cfg.noise_prob:
                extra = int(rng_noise.choice(prods[cluster]))
                events.append((f"u{user}", f"p{extra}", "click", ts))
                ts += 1
    # pin the span to an exact multiple of the step length so that
    # equal-duration segmentation recovers the planted steps
    last = events[-1]
    events[-1] = (last[0], last[1], last[2], cfg.num_steps * STEP_SECONDS - 1)

    # every product also hangs off one shared category hub: random
    # expansion can leak across clusters through it, score-based
    # retrieval keeps it down-weighted
    triples = [
        (f"p{i}", "has_brand", f"brand{i % cfg.n_clusters}")
        for i in range(cfg.n_products)
    ]
    triples += [(f"p{i}", "has_category", "cat_all") for i in range(cfg.n_products)]
    for q in range(cfg.n_queries):
        pool = prods[q % cfg.n_clusters]
        rng = rng_for(cfg.seed, f"match-{q}")
        for p in rng.choice(pool, size=min(cfg.matches_per_query, len(pool)), replace=False):
            triples.append((f"p{int(p)}", "matches", f"q{q}"))
    return events, triples


def write_tsv(cfg: SyntheticConfig, events_path, triples_path) -> None:
    events, triples = generate_rows(cfg)
    with open(events_path, "w", encoding="utf-8") as fh:
        fh.write("# synthetic planted-preference interaction log\n")
        for user, target, action, ts in events:
            fh.write(f"{user}\t{target}\t{action}\t{ts}\n")
    with open(triples_path, "w", encoding="utf-8") as fh:
        for head, rel, tail in triples:
            fh.write(f"{head}\t{rel}\t{tail}\n")


def synthetic_dataset(cfg: SyntheticConfig) -> Dataset:
    """In-memory dataset equivalent to writing the TSVs and re-ingesting."""
    event_rows, triple_rows = generate_rows(cfg)
    entities = EntityRegistry()
    relations = RelationRegistry()
    users, targets, rels, times = [], [], [], []
    for user, target, action, ts in event_rows:
        kind = EntityKind.QUERY if action == "type_query" else EntityKind.PRODUCT
        users.append(entities.intern(user, EntityKind.USER))
        targets.append(entities.intern(target, kind))
        rels.append(relations.intern(action, RelationKind.INTERACTION))
        times.append(ts)
    log = EventLog(
        entities, relations,
        np.array(users, np.int64), np.array(targets, np.int64),
        np.array(rels, np.int64), np.array(times, np.int64),
    )
    triples = []
    seen = set()
    for head, rel, tail in triple_rows:
        hid = entities.intern(head, EntityKind.PRODUCT)
        tid = entities.get(tail)
        if tid is None:
            tid = entities.intern(tail, EntityKind.ATTRIBUTE)
        rid = relations.intern(rel, RelationKind.STATIC)
        key = (hid, rid, tid)
        if key not in seen:
            seen.add(key)
            triples.append(StaticTriple(hid, rid, tid))
    seg = segment_time(log, cfg.num_steps, cfg.split, mode="duration")
    return build_dataset(log, triples, seg)
