"""Forward computations: stacked graph attention over sampled subgraphs,
residual pooling and cross-subgraph fusion, causal temporal self-attention
over per-step user representations, translational triple scoring, and the
infinite-depth aggregation signature diagnostic.

All functions are pure given (inputs, params) and safe to evaluate
concurrently across users; parameters mutate only between forward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ACTIVATIONS, ParameterStore, Tape
from .sampler import Subgraph


@dataclass
class ModelConfig:
    dim: int = 128
    layers: int = 3
    num_subgraphs: int = 2
    score_slope: float = 0.2        # slope of the attention-score nonlinearity
    aggregate_act: str = "tanh"     # nonlinearity around the neighbor sum
    fusion_act: str = "tanh"        # nonlinearity of the subgraph fusion MLP
    pool_mode: str = "literal"      # "literal" or "entity-mean"
    self_loop_fallback: bool = True

    def __post_init__(self):
        if self.pool_mode not in ("literal", "entity-mean"):
            raise ValueError(f"unknown pool mode {self.pool_mode!r}")
        if self.dim < 1 or self.layers < 1 or self.num_subgraphs < 1:
            raise ValueError("dim, layers and num_subgraphs must be >= 1")


def init_model_params(
    store: ParameterStore,
    cfg: ModelConfig,
    n_entities: int,
    static_relation_ids,
    rng: np.random.Generator,
    entity_init: np.ndarray | None = None,
) -> None:
    """Register all trainable tensors; draw order is fixed for determinism."""
    d = cfg.dim
    if entity_init is None:
        entity_init = ad.xavier_uniform((n_entities, d), rng)
    store.add("entity_emb", entity_init)
    for layer in range(cfg.layers):
        store.create(f"gat{layer}_wq", (d, d), rng)
        store.create(f"gat{layer}_wk", (d, d), rng)
        store.create(f"gat{layer}_wv", (d, d), rng)
        store.create(f"gat{layer}_a", (2 * d, 1), rng)
    store.create("fusion_w", (cfg.num_subgraphs * d, d), rng)
    store.create("temp_wq", (d, d), rng)
    store.create("temp_wk", (d, d), rng)
    store.create("temp_wv", (d, d), rng)
    for rid in static_relation_ids:
        store.create(f"transr_proj_{int(rid)}", (d, d), rng)
        store.create(f"transr_shift_{int(rid)}", (1, d), rng)


def gat_layer(
    tape: Tape,
    store: ParameterStore,
    h_in: ad.Node,
    mask: ad.Node,
    layer: int,
    cfg: ModelConfig,
):
    """One attention layer over a subgraph.

    Per node u: h_u = act(sum_v attn[u,v] * (h_v W_v)) where the scores are
    slope-rectified a.[W_q h_u || W_k h_v] softmaxed over u's neighbors
    (previous-layer inputs on both sides). Returns the output and the
    attention weight matrix; each unmasked row sums to 1.
    """
    d = cfg.dim
    wq = tape.leaf(store[f"gat{layer}_wq"])
    wk = tape.leaf(store[f"gat{layer}_wk"])
    wv = tape.leaf(store[f"gat{layer}_wv"])
    a = tape.leaf(store[f"gat{layer}_a"])

    q = ad.matmul(h_in, wq)
    k = ad.matmul(h_in, wk)
    v = ad.matmul(h_in, wv)
    s_self = ad.matmul(q, ad.slice_rows(a, 0, d))
    s_peer = ad.matmul(k, ad.slice_rows(a, d, 2 * d))
    scores = ad.leaky_relu(ad.add_outer(s_self, s_peer), cfg.score_slope)
    try:
        attn = ad.masked_softmax(ad.add(scores, mask))
    except ValueError as exc:
        raise ValueError(f"node with empty neighbor set in layer {layer}: {exc}")
    h_out = ACTIVATIONS[cfg.aggregate_act](ad.matmul(attn, v))
    return h_out, attn.value


def structural_pool(
    center_local: int, layer_outputs, n_entities_in_sub: int, mode: str
) -> ad.Node:
    """Residual pooling across layers.

    "literal" averages the center node's per-layer outputs (the printed
    normalization cancels the entity count); "entity-mean" averages every
    entity's output across layers (graph-level pooling reading).
    """
    num_layers = len(layer_outputs)
    if mode == "literal":
        rows = [ad.gather_rows(h, [center_local]) for h in layer_outputs]
    elif mode == "entity-mean":
        rows = [ad.mean_rows(h) for h in layer_outputs]
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    acc = rows[0]
    for r in rows[1:]:
        acc = ad.add(acc, r)
    return ad.scale(acc, 1.0 / num_layers)


def subgraph_rep(
    tape: Tape, store: ParameterStore, sub: Subgraph, cfg: ModelConfig,
    collect_attention: list | None = None,
) -> ad.Node:
    """Representation of one subgraph's center after all attention layers."""
    emb = tape.leaf(store["entity_emb"])
    h = ad.gather_rows(emb, sub.nodes)
    mask = tape.constant(sub.neighbor_mask(self_loop_isolated=cfg.self_loop_fallback))
    outputs = []
    for layer in range(cfg.layers):
        h, attn = gat_layer(tape, store, h, mask, layer, cfg)
        outputs.append(h)
        if collect_attention is not None:
            collect_attention.append(attn)
    return structural_pool(sub.center_local, outputs, sub.n, cfg.pool_mode)


def fuse_subgraphs(tape: Tape, store: ParameterStore, reps, cfg: ModelConfig) -> ad.Node:
    """One-layer MLP over the concatenated per-subgraph representations."""
    if len(reps) != cfg.num_subgraphs:
        raise ValueError(
            f"expected {cfg.num_subgraphs} subgraph representations, got {len(reps)}"
        )
    cat = reps[0] if len(reps) == 1 else ad.concat_cols(reps)
    fused = ad.matmul(cat, tape.leaf(store["fusion_w"]))
    return ACTIVATIONS[cfg.fusion_act](fused)


def structural_user_rep(
    tape: Tape, store: ParameterStore, subgraphs, cfg: ModelConfig,
    collect_attention: list | None = None,
) -> ad.Node:
    """Per-step user representation fused from the sampler ensemble output."""
    reps = [
        subgraph_rep(tape, store, sub, cfg, collect_attention) for sub in subgraphs
    ]
    return fuse_subgraphs(tape, store, reps, cfg)


def causal_mask(t: int) -> np.ndarray:
    """Additive mask, transposed orientation: row j may attend steps i <= j."""
    mask = np.full((t, t), -np.inf)
    mask[np.tril_indices(t)] = 0.0
    return mask


def temporal_pass(tape: Tape, store: ParameterStore, h_steps: ad.Node, dim: int):
    """Causal self-attention over the trajectory matrix (T, d).

    Returns (next_reps, betas): next_reps[j] is the intent representation
    predicting position j+1 computed from rows 0..j only; betas[j, :j+1]
    are its attention weights (each row sums to 1 over the unmasked span).
    """
    t = h_steps.value.shape[0]
    q = ad.matmul(h_steps, tape.leaf(store["temp_wq"]))
    k = ad.matmul(h_steps, tape.leaf(store["temp_wk"]))
    v = ad.matmul(h_steps, tape.leaf(store["temp_wv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dim))
    betas = ad.masked_softmax(ad.add(ad.transpose(scores), tape.constant(causal_mask(t))))
    next_reps = ad.matmul(betas, v)
    return next_reps, betas


def temporal_attention(
    tape: Tape, store: ParameterStore, h_steps: ad.Node, query_step: int, dim: int,
):
    """Intent after `query_step` (1-based): h after step j uses rows 1..j.

    Returns the (1, d) representation node and the weight vector over the
    attended steps.
    """
    t = h_steps.value.shape[0]
    if not 1 <= query_step <= t:
        raise ValueError(f"query step {query_step} outside 1..{t}")
    next_reps, betas = temporal_pass(tape, store, h_steps, dim)
    rep = ad.gather_rows(next_reps, [query_step - 1])
    weights = betas.value[query_step - 1, :query_step].copy()
    return rep, weights


def transr_score(
    tape: Tape, store: ParameterStore, head: int, relation: int, tail: int,
    emb: ad.Node | None = None,
) -> ad.Node:
    """Squared translation residual || h W_r + r - t W_r ||^2; lower is better."""
    proj_name = f"transr_proj_{int(relation)}"
    if proj_name not in store:
        raise ValueError(f"unknown relation {relation} for triple scoring")
    if emb is None:
        emb = tape.leaf(store["entity_emb"])
    proj = tape.leaf(store[proj_name])
    shift = tape.leaf(store[f"transr_shift_{int(relation)}"])
    h = ad.matmul(ad.gather_rows(emb, [head]), proj)
    t = ad.matmul(ad.gather_rows(emb, [tail]), proj)
    diff = ad.add(ad.add(h, shift), ad.scale(t, -1.0))
    return ad.l2_sq(diff)


def relevance(tape: Tape, user_rep: ad.Node, item_rep: ad.Node) -> ad.Node:
    """Inner-product relevance between a user intent and an item embedding."""
    return ad.inner(user_rep, item_rep)


def infinite_depth_signature(
    sub: Subgraph, embeddings: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000,
) -> np.ndarray:
    """Information retained by unbounded neighbor aggregation on a subgraph.

    sqrt(deg(center) / sum(deg)) times the dominant-eigenvector projection
    of the subgraph's initial embeddings. Distinct subgraphs with generic
    embeddings yield distinct signatures.
    """
    if sub.n_edges == 0:
        raise ValueError("signature undefined for an edgeless subgraph")
    adj = sub.dense_adjacency()
    deg = adj.sum(axis=1)
    n = sub.n
    vec = np.ones(n) / math.sqrt(n)
    for _ in range(max_iter):
        # identity shift keeps the iteration convergent on bipartite subgraphs
        nxt = adj @ vec + vec
        nxt /= np.linalg.norm(nxt)
        if np.abs(nxt - vec).max() < tol:
            vec = nxt
            break
        vec = nxt
    else:
        raise ValueError(f"power iteration did not converge in {max_iter} steps")
    top = int(np.argmax(np.abs(vec)))
    if vec[top] < 0:
        vec = -vec
    local = embeddings[sub.nodes]
    coef = math.sqrt(deg[sub.center_local] / deg.sum())
    return coef * (vec @ local)


def write_attention_csv(path, records) -> None:
    """Temporal-weight export: one (user, step_from, step_to, beta) per row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user,step_from,step_to,beta\n")
        for user, t_from, t_to, beta in records:
            fh.write(f"{user},{t_from},{t_to},{beta:.17g}\n")
