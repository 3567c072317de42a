"""Losses and the alternating optimization loop.

Each epoch runs one triple-completion pass over the static product graph,
then one auto-regressive ranking pass over the training steps: per user the
trajectory rows come from the cached subgraphs, the causal temporal pass
turns them into per-step intents, and every observed positive is ranked
against uniformly drawn same-kind negatives under the rank-weighted hinge
loss. Mini-batch Adam updates shared parameters; losses at step t never
read snapshots after t.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape
from .evaluation import evaluate, rank_candidates, trajectory_rows
from .graph import EntityKind
from .model import (
    ModelConfig,
    init_model_params,
    structural_user_rep,
    temporal_pass,
    transr_score,
)
from .pipeline import Dataset
from .seeding import rng_for

# Tuning grids used by the published setup; presets only, never searched
# automatically here.
LEARNING_RATE_GRID = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
REG_WEIGHT_GRID = (0.005, 0.05, 0.5)


@dataclass
class WarpConfig:
    """Rank-weighted pairwise ranking loss settings.

    The drawn negatives double as the candidate set for rank estimation:
    rank = margin-violation count among them, clamped to >= 1.
    """

    margin: float = 1.0
    num_negatives: int = 10

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    reg_weight: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 50
    patience: int = 5
    early_stop_k: int = 20
    early_stop: bool = True
    seed: int = 7
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-2
    kgc_margin: float = 1.0
    kgc_negatives: int = 4
    kgc_batch: int = 128

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")


def harmonic(k: int) -> float:
    return sum(1.0 / i for i in range(1, k + 1))


def warp_rank(gamma_pos: float, gamma_negs, margin: float) -> int:
    """Margin-violation count among the negatives, clamped to >= 1."""
    violations = sum(1 for g in gamma_negs if g + margin > gamma_pos)
    return max(1, violations)


def warp_loss(gamma_pos: float, gamma_negs, cfg: WarpConfig) -> float:
    """L(rank) * sum_neg max(0, margin - pos + neg) / rank.

    Zero exactly when every negative clears the margin.
    """
    negs = list(gamma_negs)
    if not negs:
        raise ValueError("need at least one negative score")
    rank = warp_rank(gamma_pos, negs, cfg.margin)
    hinge_sum = sum(max(0.0, cfg.margin - gamma_pos + g) for g in negs)
    return harmonic(rank) * hinge_sum / rank


def warp_loss_node(tape: Tape, pos: ad.Node, negs: ad.Node, cfg: WarpConfig) -> ad.Node:
    """Tape version of warp_loss: pos is (1,1), negs is (1,n).

    The rank and its weight are treated as constants of the current scores;
    gradients flow through the hinge terms only.
    """
    rank = warp_rank(pos.item(), negs.value[0].tolist(), cfg.margin)
    base = ad.add(tape.constant([[cfg.margin]]), ad.scale(pos, -1.0))
    diffs = ad.add_outer(base, ad.transpose(negs))
    return ad.scale(ad.sum_all(ad.hinge(diffs)), harmonic(rank) / rank)


class NegativeSampler:
    """Uniform same-kind negatives, never an observed positive of the
    (user, step, task) being trained."""

    def __init__(self, rng: np.random.Generator, pools: dict[str, np.ndarray]):
        self.rng = rng
        self.pools = {k: np.sort(np.asarray(v, dtype=np.int64)) for k, v in pools.items()}

    def draw(self, task: str, n: int, exclude=None) -> np.ndarray:
        pool = self.pools[task]
        if exclude is not None and len(exclude):
            pool = pool[~np.isin(pool, exclude)]
        if len(pool) == 0:
            return np.empty(0, dtype=np.int64)
        take = min(n, len(pool))
        picked = self.rng.choice(len(pool), size=take, replace=False)
        return pool[np.sort(picked)]


class AdamState:
    def __init__(self):
        self.t = 0

    def step(self, store: ParameterStore, lr: float, cfg: OptimConfig) -> None:
        self.t += 1
        b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for p in store.params():
            if p.m is None:
                p.m = np.zeros_like(p.value)
                p.v = np.zeros_like(p.value)
            p.m = b1 * p.m + (1 - b1) * p.grad
            p.v = b2 * p.v + (1 - b2) * p.grad * p.grad
            p.value -= lr * (p.m / correct1) / (np.sqrt(p.v / correct2) + eps)
        store.zero_grad()


def _sum_nodes(nodes):
    acc = nodes[0]
    for n in nodes[1:]:
        acc = ad.add(acc, n)
    return acc


def _kgc_pair(tape, store, emb, head, rel, tail, neg_tail, margin) -> ad.Node:
    f_pos = transr_score(tape, store, head, rel, tail, emb)
    f_neg = transr_score(tape, store, head, rel, neg_tail, emb)
    gap = ad.add(ad.add(f_pos, tape.constant([[margin]])), ad.scale(f_neg, -1.0))
    return ad.hinge(gap)


def kgc_loss(
    store: ParameterStore, heads, rels, tails, neg_tails, margin: float = 1.0,
) -> float:
    """Sum of completion hinges over a batch of triples with negatives.

    neg_tails[i] lists the corrupted tails for triple i (same head and
    relation, tail replaced).
    """
    if len(heads) == 0:
        raise ValueError("empty triple batch")
    tape = Tape()
    emb = tape.leaf(store["entity_emb"])
    total = 0.0
    for h, r, t, negs in zip(heads, rels, tails, neg_tails):
        for neg in negs:
            total += _kgc_pair(tape, store, emb, int(h), int(r), int(t), int(neg), margin).item()
    return total


def _kind_pools(data: Dataset) -> dict[int, np.ndarray]:
    kinds = np.array([int(k) for k in data.log.entities.kinds], dtype=np.int64)
    return {
        int(kind): np.flatnonzero(kinds == int(kind)).astype(np.int64)
        for kind in EntityKind
    }


def _observed_tails(heads, rels, tails) -> dict[tuple[int, int], np.ndarray]:
    obs: dict[tuple[int, int], set] = {}
    for h, r, t in zip(heads, rels, tails):
        obs.setdefault((int(h), int(r)), set()).add(int(t))
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in obs.items()}


def pretrain_background(
    data: Dataset,
    dim: int,
    cfg: OptimConfig,
    fixed_negatives: bool = False,
) -> tuple[np.ndarray, dict[str, np.ndarray], list[float]]:
    """Translational pretraining on background interaction edges plus the
    static triples; returns the entity embeddings used as model input, the
    static-relation parameters, and the per-epoch mean loss curve."""
    bg_steps = list(data.seg.background_steps())
    pool: set[tuple[int, int, int]] = set()
    for step in bg_steps:
        snap = data.snapshots[step]
        for u, t, r in zip(snap.users, snap.targets, snap.rels):
            pool.add((int(u), int(r), int(t)))
    pool.update(
        (int(h), int(r), int(t))
        for h, r, t in zip(data.triple_heads, data.triple_rels, data.triple_tails)
    )
    triples = sorted(pool)
    if not triples:
        raise ValueError("background region holds no edges to pretrain on")

    rng_init = rng_for(cfg.seed, "pretrain-init")
    rng_neg = rng_for(cfg.seed, "pretrain-negatives")
    rng_shuffle = rng_for(cfg.seed, "pretrain-shuffle")

    store = ParameterStore()
    n = data.n_entities
    store.create("entity_emb", (n, dim), rng_init)
    rel_ids = sorted({r for _, r, _ in triples})
    for rid in rel_ids:
        store.create(f"transr_proj_{rid}", (dim, dim), rng_init)
        store.create(f"transr_shift_{rid}", (1, dim), rng_init)

    kinds = data.log.entities.kinds
    pools = _kind_pools(data)
    observed = _observed_tails(*zip(*triples)) if triples else {}

    def draw_negs(h, r, t):
        pool_k = pools[int(kinds[t])]
        exclude = observed[(h, r)]
        live = pool_k[~np.isin(pool_k, exclude)]
        if len(live) == 0:
            return np.empty(0, dtype=np.int64)
        take = min(cfg.kgc_negatives, len(live))
        picked = rng_neg.choice(len(live), size=take, replace=False)
        return live[np.sort(picked)]

    frozen_negs = [draw_negs(h, r, t) for h, r, t in triples] if fixed_negatives else None

    adam = AdamState()
    history: list[float] = []
    for _ in range(cfg.pretrain_epochs):
        if fixed_negatives:
            order = np.arange(len(triples))
        else:
            order = rng_shuffle.permutation(len(triples))
        epoch_loss = 0.0
        epoch_pairs = 0
        for start in range(0, len(order), cfg.kgc_batch):
            batch = order[start:start + cfg.kgc_batch]
            tape = Tape()
            emb = tape.leaf(store["entity_emb"])
            terms = []
            for i in batch:
                h, r, t = triples[int(i)]
                negs = frozen_negs[int(i)] if fixed_negatives else draw_negs(h, r, t)
                for neg in negs:
                    terms.append(
                        _kgc_pair(tape, store, emb, h, r, t, int(neg), cfg.kgc_margin)
                    )
            if not terms:
                continue
            total = ad.scale(_sum_nodes(terms), 1.0 / len(terms))
            epoch_loss += total.item() * len(terms)
            epoch_pairs += len(terms)
            tape.backward(total)
            adam.step(store, cfg.pretrain_lr, cfg)
        history.append(epoch_loss / max(epoch_pairs, 1))

    static = {int(r) for r in data.static_relation_ids}
    carried = {
        name: store[name].value.copy()
        for rid in sorted(static)
        for name in (f"transr_proj_{rid}", f"transr_shift_{rid}")
        if name in store
    }
    return store["entity_emb"].value.copy(), carried, history


@dataclass
class TrainResult:
    store: ParameterStore
    history: list[dict] = field(default_factory=list)
    best_val: float = float("nan")
    epochs_run: int = 0


def _user_rank_terms(tape, store, data, user, train_steps, model_cfg, warp_cfg, sampler):
    rows = [
        structural_user_rep(tape, store, data.subgraphs[(user, s)], model_cfg)
        for s in train_steps
    ]
    h_mat = ad.concat_rows(rows)
    next_reps, _ = temporal_pass(tape, store, h_mat, model_cfg.dim)
    emb = tape.leaf(store["entity_emb"])
    terms = {"product": [], "query": []}
    for idx in range(1, len(train_steps)):
        pos = data.positives(user, train_steps[idx])
        if len(pos["product"]) == 0 and len(pos["query"]) == 0:
            continue
        intent = ad.gather_rows(next_reps, [idx - 1])
        for task in ("product", "query"):
            for p in pos[task]:
                negs = sampler.draw(task, warp_cfg.num_negatives, exclude=pos[task])
                if len(negs) == 0:
                    continue
                pos_score = ad.inner(intent, ad.gather_rows(emb, [int(p)]))
                neg_scores = ad.matmul(intent, ad.transpose(ad.gather_rows(emb, negs)))
                terms[task].append(warp_loss_node(tape, pos_score, neg_scores, warp_cfg))
    return terms


def train(
    data: Dataset,
    model_cfg: ModelConfig,
    warp_cfg: WarpConfig,
    optim_cfg: OptimConfig,
) -> TrainResult:
    """Alternating optimization: per epoch one completion pass on the
    product graph, then one ranking pass over the training steps, with
    early stopping on frozen validation recall."""
    train_steps = list(data.seg.train_steps())
    if len(train_steps) < 2:
        raise ValueError("need at least two training steps for supervision")
    for user in data.trained_users():
        for step in train_steps:
            if (int(user), step) not in data.subgraphs:
                raise ValueError(
                    f"subgraph cache missing (user={user}, step={step}); sample first"
                )

    x_init, transr_init, _ = pretrain_background(data, model_cfg.dim, optim_cfg)
    store = ParameterStore()
    init_model_params(
        store, model_cfg, data.n_entities,
        [int(r) for r in data.static_relation_ids],
        rng_for(optim_cfg.seed, "model-init"),
        entity_init=x_init,
    )
    for name, value in transr_init.items():
        store[name].value[:] = value

    rng_neg = rng_for(optim_cfg.seed, "train-negatives")
    rng_kgc_neg = rng_for(optim_cfg.seed, "train-kgc-negatives")
    rng_shuffle = rng_for(optim_cfg.seed, "train-shuffle")
    sampler = NegativeSampler(
        rng_neg, {"product": data.product_ids, "query": data.query_ids}
    )

    kinds = data.log.entities.kinds
    pools = _kind_pools(data)
    observed = _observed_tails(data.triple_heads, data.triple_rels, data.triple_tails)
    n_triples = len(data.triple_heads)

    users = data.trained_users()
    adam = AdamState()
    result = TrainResult(store=store)
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = -1
    non_finite = None

    for epoch in range(optim_cfg.epochs):
        # completion pass on the product graph
        kgc_loss_sum, kgc_pairs = 0.0, 0
        if n_triples:
            order = rng_shuffle.permutation(n_triples)
            for start in range(0, n_triples, optim_cfg.kgc_batch):
                batch = order[start:start + optim_cfg.kgc_batch]
                tape = Tape()
                emb = tape.leaf(store["entity_emb"])
                terms = []
                for i in batch:
                    h = int(data.triple_heads[i])
                    r = int(data.triple_rels[i])
                    t = int(data.triple_tails[i])
                    pool_k = pools[int(kinds[t])]
                    live = pool_k[~np.isin(pool_k, observed[(h, r)])]
                    if len(live) == 0:
                        continue
                    take = min(optim_cfg.kgc_negatives, len(live))
                    picked = rng_kgc_neg.choice(len(live), size=take, replace=False)
                    for neg in live[np.sort(picked)]:
                        terms.append(
                            _kgc_pair(tape, store, emb, h, r, t, int(neg), optim_cfg.kgc_margin)
                        )
                if not terms:
                    continue
                total = ad.scale(_sum_nodes(terms), 1.0 / len(terms))
                kgc_loss_sum += total.item() * len(terms)
                kgc_pairs += len(terms)
                tape.backward(total)
                adam.step(store, optim_cfg.lr, optim_cfg)

        # auto-regressive ranking pass
        lp_sum, lp_count, lq_sum, lq_count = 0.0, 0, 0.0, 0
        for start in range(0, len(users), optim_cfg.batch_size):
            batch_users = users[start:start + optim_cfg.batch_size]
            per_user = []
            for user in batch_users:
                tape = Tape()
                terms = _user_rank_terms(
                    tape, store, data, int(user), train_steps,
                    model_cfg, warp_cfg, sampler,
                )
                per_user.append((tape, terms))
            n_p = sum(len(t["product"]) for _, t in per_user)
            n_q = sum(len(t["query"]) for _, t in per_user)
            for tape, terms in per_user:
                parts = []
                if terms["product"]:
                    s = _sum_nodes(terms["product"])
                    lp_sum += s.item()
                    parts.append(ad.scale(s, 1.0 / n_p))
                if terms["query"]:
                    s = _sum_nodes(terms["query"])
                    lq_sum += s.item()
                    parts.append(ad.scale(s, 1.0 / n_q))
                if parts:
                    tape.backward(_sum_nodes(parts) if len(parts) > 1 else parts[0])
            lp_count += n_p
            lq_count += n_q
            if optim_cfg.reg_weight > 0:
                tape = Tape()
                reg = ad.scale(
                    _sum_nodes([ad.l2_sq(tape.leaf(p)) for p in store.params()]),
                    optim_cfg.reg_weight,
                )
                tape.backward(reg)
            adam.step(store, optim_cfg.lr, optim_cfg)

        l_p = lp_sum / max(lp_count, 1)
        l_q = lq_sum / max(lq_count, 1)
        l_kgc = kgc_loss_sum / max(kgc_pairs, 1)
        l2 = optim_cfg.reg_weight * sum(
            float((p.value * p.value).sum()) for p in store.params()
        )
        total = l_p + l_q + l_kgc + l2
        if not np.isfinite(total):
            non_finite = {"L_p": l_p, "L_q": l_q, "L_KGC": l_kgc, "L2": l2}
            break

        val_recall = float("nan")
        if optim_cfg.early_stop and len(data.seg.val_steps()):
            try:
                report = evaluate(
                    store, data, model_cfg, k=optim_cfg.early_stop_k,
                    mode="frozen", region="val",
                )
                val_recall = report.aggregate("product", "recall")
            except ValueError:
                val_recall = float("nan")

        result.history.append({
            "epoch": epoch, "L_p": l_p, "L_q": l_q, "L_KGC": l_kgc,
            "L2": l2, "total": total, "val_recall": val_recall,
        })
        result.epochs_run = epoch + 1

        if np.isfinite(val_recall):
            if not np.isfinite(result.best_val) or val_recall > result.best_val + 1e-12:
                result.best_val = val_recall
                best_epoch = epoch
                best_state = {nm: store[nm].value.copy() for nm in store.names()}
            elif optim_cfg.early_stop and epoch - best_epoch >= optim_cfg.patience:
                break

    if non_finite is not None:
        worst = max(non_finite, key=lambda k: 0 if np.isfinite(non_finite[k]) else 1)
        raise FloatingPointError(
            f"non-finite loss component {worst} at epoch {len(result.history)}: "
            f"{non_finite}"
        )
    if best_state is not None:
        for name, value in best_state.items():
            store[name].value[:] = value
    return result


def predict_next(
    store: ParameterStore,
    data: Dataset,
    model_cfg: ModelConfig,
    user: int,
    query_rows: int | None = None,
) -> tuple[list[int], list[int]]:
    """Rank every product and query by inner product with the user's
    next-step intent; descending score, ties by ascending id."""
    if user < 0 or user >= data.n_entities or (
        data.log.entities.kind_of(user) != EntityKind.USER
    ):
        raise ValueError(f"unknown user {user}")
    train_steps = list(data.seg.train_steps())
    rows = trajectory_rows(store, data, model_cfg, user, train_steps)
    j = len(rows) if query_rows is None else int(query_rows)
    if not 1 <= j <= len(rows):
        raise ValueError(f"query_rows {j} outside 1..{len(rows)}")
    tape = Tape()
    next_reps, _ = temporal_pass(tape, store, tape.constant(rows[:j]), model_cfg.dim)
    intent = next_reps.value[j - 1]
    emb = store["entity_emb"].value
    ranked_p = rank_candidates(emb[data.product_ids] @ intent, data.product_ids)
    ranked_q = rank_candidates(emb[data.query_ids] @ intent, data.query_ids)
    return ranked_p, ranked_q


def write_loss_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_p", "L_q", "L_KGC", "L2", "total"])
        for row in history:
            writer.writerow([
                row["epoch"],
                f"{row['L_p']:.17g}", f"{row['L_q']:.17g}",
                f"{row['L_KGC']:.17g}", f"{row['L2']:.17g}",
                f"{row['total']:.17g}",
            ])
