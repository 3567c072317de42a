"""Per-user subgraph retrieval: local-push personalized scoring, randomized
k-hop expansion, and induced-subgraph extraction over a snapshot adjacency.

Samplers are pure functions of (immutable adjacency, config, seed); calls
for different users share no mutable state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .graph import AdjacencyIndex


@dataclass
class PprConfig:
    """Config for the personalized-pagerank sampler.

    eps=None resolves to 1e-4 / n_entities at sample time. The center never
    counts against the budget; ties at the budget or threshold break by
    ascending entity id. Selected entities unreachable from the center in
    the induced edge set are dropped unless keep_disconnected is set.
    """

    budget: int = 50
    alpha: float = 0.15
    eps: float | None = None
    min_score: float = 0.0
    keep_disconnected: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.min_score < 0:
            raise ValueError("min_score must be >= 0")

    def resolve_eps(self, n: int) -> float:
        return self.eps if self.eps is not None else 1e-4 / max(n, 1)


@dataclass
class KhopConfig:
    """Config for the randomized k-hop sampler: per-node branching <= budget."""

    hops: int = 3
    budget: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


@dataclass
class EnsembleConfig:
    """Ordered sampler specs; the default mirrors one PPR plus one 3-hop."""

    samplers: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def default(cls, seed: int = 0, ppr_budget: int = 50, khop_budget: int = 10):
        return cls(
            samplers=[PprConfig(budget=ppr_budget), KhopConfig(hops=3, budget=khop_budget)],
            seed=seed,
        )

    @property
    def size(self) -> int:
        return len(self.samplers)


@dataclass
class Subgraph:
    """User-centered induced subgraph with a local->global id map.

    nodes[0] is the center; the remaining global ids are ascending. Edges
    are local index pairs with u < v, sorted, each carrying the collapsed
    relation id and multiplicity from the snapshot adjacency.
    """

    nodes: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_rel: np.ndarray
    edge_cnt: np.ndarray
    source: str

    @property
    def center(self) -> int:
        return int(self.nodes[0])

    @property
    def center_local(self) -> int:
        return 0

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edge_u)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        np.add.at(deg, self.edge_u, 1)
        np.add.at(deg, self.edge_v, 1)
        return deg

    def neighbor_mask(self, self_loop_isolated: bool = True) -> np.ndarray:
        """Dense additive attention mask: 0 on edges, -inf elsewhere."""
        mask = np.full((self.n, self.n), -np.inf)
        mask[self.edge_u, self.edge_v] = 0.0
        mask[self.edge_v, self.edge_u] = 0.0
        if self_loop_isolated:
            isolated = self.degrees() == 0
            idx = np.flatnonzero(isolated)
            mask[idx, idx] = 0.0
        return mask

    def dense_adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n))
        adj[self.edge_u, self.edge_v] = 1.0
        adj[self.edge_v, self.edge_u] = 1.0
        return adj

    def to_bytes(self) -> bytes:
        """Canonical serialization, also the cache record payload."""
        out = [struct.pack("<B", len(self.source.encode()))]
        out.append(self.source.encode())
        out.append(struct.pack("<I", self.n))
        out.append(self.nodes.astype("<i8").tobytes())
        out.append(struct.pack("<I", self.n_edges))
        packed = np.empty((self.n_edges, 4), dtype="<i8")
        packed[:, 0] = self.edge_u
        packed[:, 1] = self.edge_v
        packed[:, 2] = self.edge_rel
        packed[:, 3] = self.edge_cnt
        out.append(packed.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["Subgraph", int]:
        (slen,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        source = buf[offset:offset + slen].decode()
        offset += slen
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        nodes = np.frombuffer(buf, dtype="<i8", count=n, offset=offset).copy()
        offset += 8 * n
        (m,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        packed = np.frombuffer(buf, dtype="<i8", count=4 * m, offset=offset)
        packed = packed.reshape(m, 4)
        offset += 32 * m
        return cls(
            nodes=nodes,
            edge_u=packed[:, 0].copy(),
            edge_v=packed[:, 1].copy(),
            edge_rel=packed[:, 2].copy(),
            edge_cnt=packed[:, 3].copy(),
            source=source,
        ), offset


def approx_ppr(adj: AdjacencyIndex, seed_entity: int, cfg: PprConfig) -> dict[int, float]:
    """Sparse personalized scores for entities near the seed.

    Local forward push: each score obeys |p[v] - exact[v]| <= eps*degree(v)
    against the exact teleporting-walk distribution, and sum(p) <= 1.
    """
    if seed_entity < 0 or seed_entity >= adj.n:
        raise ValueError(f"entity {seed_entity} out of range")
    if adj.degree(seed_entity) == 0:
        raise ValueError(
            f"entity {seed_entity} is isolated in this snapshot; cannot personalize"
        )
    eps = cfg.resolve_eps(adj.n)
    p = kernels.forward_push(adj.indptr, adj.indices, seed_entity, cfg.alpha, eps)
    nz = np.flatnonzero(p)
    return {int(v): float(p[v]) for v in nz}


def _induced_edges(adj: AdjacencyIndex, nodes: np.ndarray):
    """All snapshot edges between the selected global ids, as local pairs."""
    local = {int(g): i for i, g in enumerate(nodes)}
    eu, ev, er, ec = [], [], [], []
    for g, i in local.items():
        lo, hi = int(adj.indptr[g]), int(adj.indptr[g + 1])
        for k in range(lo, hi):
            h = int(adj.indices[k])
            if h > g and h in local:
                eu.append(i)
                ev.append(local[h])
                er.append(int(adj.relations[k]))
                ec.append(int(adj.counts[k]))
    if not eu:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy(), empty.copy()
    eu = np.array(eu, dtype=np.int64)
    ev = np.array(ev, dtype=np.int64)
    er = np.array(er, dtype=np.int64)
    ec = np.array(ec, dtype=np.int64)
    a = np.minimum(eu, ev)
    b = np.maximum(eu, ev)
    order = np.lexsort((b, a))
    return a[order], b[order], er[order], ec[order]


def _canonical_nodes(center: int, others) -> np.ndarray:
    rest = sorted(int(x) for x in others if int(x) != center)
    return np.array([center] + rest, dtype=np.int64)


def _build_subgraph(adj, center, selected, source, keep_disconnected=False) -> Subgraph:
    nodes = _canonical_nodes(center, selected)
    eu, ev, er, ec = _induced_edges(adj, nodes)
    if not keep_disconnected and len(nodes) > 1:
        reach = _reachable_from(len(nodes), eu, ev, 0)
        if not reach.all():
            keep = np.flatnonzero(reach)
            remap = {int(old): i for i, old in enumerate(keep)}
            nodes = nodes[keep]
            mask = reach[eu] & reach[ev]
            eu = np.array([remap[int(x)] for x in eu[mask]], dtype=np.int64)
            ev = np.array([remap[int(x)] for x in ev[mask]], dtype=np.int64)
            er, ec = er[mask], ec[mask]
    return Subgraph(nodes, eu, ev, er, ec, source)


def _reachable_from(n, eu, ev, start) -> np.ndarray:
    adj_list = [[] for _ in range(n)]
    for a, b in zip(eu, ev):
        adj_list[int(a)].append(int(b))
        adj_list[int(b)].append(int(a))
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        v = stack.pop()
        for w in adj_list[v]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    return seen


def ppr_subgraph(adj: AdjacencyIndex, user: int, cfg: PprConfig) -> Subgraph:
    """Top-budget entities by personalized score above the threshold,
    plus the user, with all snapshot edges among them."""
    scores = approx_ppr(adj, user, cfg)
    candidates = [
        (v, s) for v, s in scores.items() if v != user and s > cfg.min_score
    ]
    candidates.sort(key=lambda vs: (-vs[1], vs[0]))
    selected = [v for v, _ in candidates[: cfg.budget]]
    return _build_subgraph(adj, user, selected, "ppr", cfg.keep_disconnected)


def khop_subgraph(
    adj: AdjacencyIndex, user: int, cfg: KhopConfig,
    rng: np.random.Generator | None = None,
) -> Subgraph:
    """Breadth-first expansion up to cfg.hops, drawing at most cfg.budget
    neighbors per node uniformly without replacement. Deterministic given
    the seed; an isolated user yields a singleton subgraph."""
    if user < 0 or user >= adj.n:
        raise ValueError(f"entity {user} out of range")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, user]))
    selected = {user}
    frontier = [user]
    for _ in range(cfg.hops):
        nxt = []
        for v in frontier:
            nbrs = adj.neighbors(v)
            if len(nbrs) == 0:
                continue
            if len(nbrs) <= cfg.budget:
                chosen = nbrs
            else:
                chosen = nbrs[rng.choice(len(nbrs), size=cfg.budget, replace=False)]
            for w in chosen:
                w = int(w)
                if w not in selected:
                    selected.add(w)
                    nxt.append(w)
        frontier = nxt
        if not frontier:
            break
    return _build_subgraph(adj, user, selected, "khop", keep_disconnected=True)


def singleton_subgraph(user: int) -> Subgraph:
    """Trivial subgraph for a user with no edges in a snapshot."""
    empty = np.empty(0, dtype=np.int64)
    return Subgraph(
        np.array([user], dtype=np.int64),
        empty, empty.copy(), empty.copy(), empty.copy(),
        "inactive",
    )


def ensemble_sample(
    adj: AdjacencyIndex, user: int, cfg: EnsembleConfig
) -> list[Subgraph]:
    """One subgraph per sampler spec, order preserved, with an independent
    RNG stream per randomized sampler."""
    if cfg.size < 1:
        raise ValueError("ensemble needs at least one sampler")
    out = []
    for i, spec in enumerate(cfg.samplers):
        if isinstance(spec, PprConfig):
            out.append(ppr_subgraph(adj, user, spec))
        elif isinstance(spec, KhopConfig):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, i, user, spec.seed])
            )
            out.append(khop_subgraph(adj, user, spec, rng=rng))
        else:
            raise TypeError(f"unknown sampler spec {type(spec).__name__}")
    return out


CACHE_MAGIC = b"EVSG"
CACHE_VERSION = 1


def write_subgraph_cache(path, records) -> None:
    """Persist (user, step, sampler_index, Subgraph) records.

    Binary-framed: magic, version, then one length-prefixed record per
    subgraph. Precomputed once before training, read many times.
    """
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        for user, step, idx, sub in records:
            payload = struct.pack("<qiI", int(user), int(step), int(idx))
            payload += sub.to_bytes()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def read_subgraph_cache(path) -> dict[tuple[int, int], list[Subgraph]]:
    """Load a cache file into {(user, step): [subgraph per sampler]}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a subgraph cache file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    out: dict[tuple[int, int], list[Subgraph]] = {}
    offset = 8
    while offset < len(blob):
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        end = offset + length
        user, step, idx = struct.unpack_from("<qiI", blob, offset)
        sub, _ = Subgraph.from_bytes(blob[:end], offset + 16)
        key = (int(user), int(step))
        lst = out.setdefault(key, [])
        while len(lst) <= idx:
            lst.append(None)
        lst[idx] = sub
        offset = end
    return out
