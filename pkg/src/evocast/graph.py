"""Data model and ingestion for the evolutionary interaction graph.

Entities (users, products, queries, attributes) and relations get dense
integer ids in first-seen order. Interaction events are timestamped
(user, target, relation, time) quadruples; the static product graph is a
set of (head, relation, tail) triples shared by every time step.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np


class EntityKind(IntEnum):
    USER = 0
    PRODUCT = 1
    QUERY = 2
    ATTRIBUTE = 3


class RelationKind(IntEnum):
    INTERACTION = 0
    STATIC = 1


KIND_LABELS = {
    EntityKind.USER: "user",
    EntityKind.PRODUCT: "product",
    EntityKind.QUERY: "query",
    EntityKind.ATTRIBUTE: "attribute",
}
LABEL_KINDS = {v: k for k, v in KIND_LABELS.items()}

# Actions recognised without an explicit declaration. Values are the kind
# of the interaction target.
DEFAULT_ACTIONS = {
    "type_query": EntityKind.QUERY,
    "type-query": EntityKind.QUERY,
    "search": EntityKind.QUERY,
    "click": EntityKind.PRODUCT,
    "add_cart": EntityKind.PRODUCT,
    "add-cart": EntityKind.PRODUCT,
    "purchase": EntityKind.PRODUCT,
    "follow_on_click": EntityKind.PRODUCT,
    "follow-on-click": EntityKind.PRODUCT,
    "review": EntityKind.PRODUCT,
}


class FormatError(ValueError):
    """Malformed input file; carries the offending path and line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class EntityRegistry:
    """Dense entity ids assigned in first-seen order; kinds are immutable."""

    def __init__(self):
        self._by_name: dict[str, int] = {}
        self.names: list[str] = []
        self.kinds: list[EntityKind] = []

    def __len__(self) -> int:
        return len(self.names)

    def intern(self, name: str, kind: EntityKind) -> int:
        eid = self._by_name.get(name)
        if eid is not None:
            if self.kinds[eid] != kind:
                raise ValueError(
                    f"entity {name!r} already registered as "
                    f"{KIND_LABELS[self.kinds[eid]]}, cannot re-register as "
                    f"{KIND_LABELS[kind]}"
                )
            return eid
        eid = len(self.names)
        self._by_name[name] = eid
        self.names.append(name)
        self.kinds.append(kind)
        return eid

    def get(self, name: str) -> int | None:
        return self._by_name.get(name)

    def kind_of(self, eid: int) -> EntityKind:
        return self.kinds[eid]

    def ids_of_kind(self, kind: EntityKind) -> np.ndarray:
        return np.array(
            [i for i, k in enumerate(self.kinds) if k == kind], dtype=np.int64
        )

    def count_of_kind(self, kind: EntityKind) -> int:
        return sum(1 for k in self.kinds if k == kind)

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (name, kind) in enumerate(zip(self.names, self.kinds)):
                fh.write(f"{i}\t{name}\t{KIND_LABELS[kind]}\n")

    @classmethod
    def read_tsv(cls, path) -> "EntityRegistry":
        reg = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                _, name, label = line.rstrip("\n").split("\t")
                reg.intern(name, LABEL_KINDS[label])
        return reg


class RelationRegistry:
    """Dense relation ids; interaction and static relations never mix ids."""

    def __init__(self):
        self._by_name: dict[str, int] = {}
        self.names: list[str] = []
        self.kinds: list[RelationKind] = []

    def __len__(self) -> int:
        return len(self.names)

    def intern(self, name: str, kind: RelationKind) -> int:
        rid = self._by_name.get(name)
        if rid is not None:
            if self.kinds[rid] != kind:
                raise ValueError(
                    f"relation {name!r} already registered with a different kind"
                )
            return rid
        rid = len(self.names)
        self._by_name[name] = rid
        self.names.append(name)
        self.kinds.append(kind)
        return rid

    def get(self, name: str) -> int | None:
        return self._by_name.get(name)

    def kind_of(self, rid: int) -> RelationKind:
        return self.kinds[rid]

    def ids_of_kind(self, kind: RelationKind) -> np.ndarray:
        return np.array(
            [i for i, k in enumerate(self.kinds) if k == kind], dtype=np.int64
        )

    def write_tsv(self, path) -> None:
        labels = {RelationKind.INTERACTION: "interaction", RelationKind.STATIC: "static"}
        with open(path, "w", encoding="utf-8") as fh:
            for i, (name, kind) in enumerate(zip(self.names, self.kinds)):
                fh.write(f"{i}\t{name}\t{labels[kind]}\n")

    @classmethod
    def read_tsv(cls, path) -> "RelationRegistry":
        labels = {"interaction": RelationKind.INTERACTION, "static": RelationKind.STATIC}
        reg = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                _, name, label = line.rstrip("\n").split("\t")
                reg.intern(name, labels[label])
        return reg


@dataclass(frozen=True)
class Event:
    """One timestamped interaction: user acted on a product or query."""

    user: int
    target: int
    relation: int
    timestamp: int


@dataclass(frozen=True)
class StaticTriple:
    """One fact of the static product graph: (product, relation, tail)."""

    head: int
    relation: int
    tail: int


class EventLog:
    """Interaction events sorted by timestamp, plus both registries."""

    def __init__(
        self,
        entities: EntityRegistry,
        relations: RelationRegistry,
        users: np.ndarray,
        targets: np.ndarray,
        rels: np.ndarray,
        times: np.ndarray,
    ):
        order = np.argsort(times, kind="stable")
        self.entities = entities
        self.relations = relations
        self.users = np.asarray(users, dtype=np.int64)[order]
        self.targets = np.asarray(targets, dtype=np.int64)[order]
        self.rels = np.asarray(rels, dtype=np.int64)[order]
        self.times = np.asarray(times, dtype=np.int64)[order]

    def __len__(self) -> int:
        return len(self.times)

    def event(self, i: int) -> Event:
        return Event(
            int(self.users[i]), int(self.targets[i]),
            int(self.rels[i]), int(self.times[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.event(i)

    def interaction_counts(self) -> np.ndarray:
        """Number of events each entity participates in (either side)."""
        n = len(self.entities)
        counts = np.bincount(self.users, minlength=n)
        counts += np.bincount(self.targets, minlength=n)
        return counts


def _parse_action_directive(text: str, path, lineno: int) -> dict[str, EntityKind]:
    mapping = {}
    for item in text.split():
        if "=" not in item:
            raise FormatError(path, lineno, f"bad action declaration {item!r}")
        name, label = item.split("=", 1)
        if label not in ("product", "query"):
            raise FormatError(
                path, lineno, f"action target must be product or query, got {label!r}"
            )
        mapping[name] = LABEL_KINDS[label]
    return mapping


def _split_fields(line: str, n: int) -> list[str] | None:
    fields = line.split("\t")
    if len(fields) != n:
        fields = line.split()
    return fields if len(fields) == n else None


def ingest_events(path, actions: dict[str, EntityKind] | None = None) -> EventLog:
    """Read an event TSV (user, target, action, timestamp) into an EventLog.

    Lines starting with ``#`` are comments; a ``# actions: name=kind ...``
    comment declares action target kinds, extending the built-in defaults.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"events file not found: {path}")
    action_map = dict(DEFAULT_ACTIONS)
    if actions:
        action_map.update(actions)

    entities = EntityRegistry()
    relations = RelationRegistry()
    users, targets, rels, times = [], [], [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("actions:"):
                    action_map.update(
                        _parse_action_directive(body[len("actions:"):], path, lineno)
                    )
                continue
            fields = _split_fields(line, 4)
            if fields is None:
                raise FormatError(path, lineno, f"expected 4 fields, got {line!r}")
            user_name, target_name, action, ts_text = fields
            kind = action_map.get(action)
            if kind is None:
                raise FormatError(path, lineno, f"unknown action {action!r}")
            try:
                ts = int(ts_text)
            except ValueError:
                raise FormatError(path, lineno, f"non-numeric timestamp {ts_text!r}")
            if ts < 0:
                raise FormatError(path, lineno, f"negative timestamp {ts}")
            try:
                uid = entities.intern(user_name, EntityKind.USER)
                tid = entities.intern(target_name, kind)
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc))
            rid = relations.intern(action, RelationKind.INTERACTION)
            users.append(uid)
            targets.append(tid)
            rels.append(rid)
            times.append(ts)

    return EventLog(
        entities, relations,
        np.array(users, dtype=np.int64),
        np.array(targets, dtype=np.int64),
        np.array(rels, dtype=np.int64),
        np.array(times, dtype=np.int64),
    )


def ingest_product_graph(path, log: EventLog) -> list[StaticTriple]:
    """Read a triple TSV (head, relation, tail) against an existing log.

    Heads must be (or become) products; tails become attributes unless the
    name is already a query. Exact duplicate triples are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"triples file not found: {path}")
    seen: dict[tuple[int, int, int], None] = {}
    triples: list[StaticTriple] = []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = _split_fields(line, 3)
            if fields is None:
                raise FormatError(path, lineno, f"expected 3 fields, got {line!r}")
            head_name, rel_name, tail_name = fields

            hid = log.entities.get(head_name)
            if hid is None:
                hid = log.entities.intern(head_name, EntityKind.PRODUCT)
            elif log.entities.kind_of(hid) != EntityKind.PRODUCT:
                raise FormatError(
                    path, lineno,
                    f"head {head_name!r} resolves to "
                    f"{KIND_LABELS[log.entities.kind_of(hid)]}, not product",
                )
            tid = log.entities.get(tail_name)
            if tid is None:
                tid = log.entities.intern(tail_name, EntityKind.ATTRIBUTE)
            elif log.entities.kind_of(tid) not in (EntityKind.ATTRIBUTE, EntityKind.QUERY):
                raise FormatError(
                    path, lineno,
                    f"tail {tail_name!r} resolves to "
                    f"{KIND_LABELS[log.entities.kind_of(tid)]}, "
                    "must be attribute or query",
                )
            try:
                rid = log.relations.intern(rel_name, RelationKind.STATIC)
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc))

            key = (hid, rid, tid)
            if key not in seen:
                seen[key] = None
                triples.append(StaticTriple(hid, rid, tid))

    return triples


def k_core_filter(log: EventLog, min_interactions: int) -> EventLog:
    """Iteratively drop entities with fewer than `min_interactions` events.

    Removal cascades until every surviving user/product/query participates
    in at least `min_interactions` events; surviving entity ids are
    re-densified in first-appearance order. Filter before ingesting the
    product graph: attribute entities never survive (they have no events).
    """
    if min_interactions < 1:
        raise ValueError("min_interactions must be >= 1")
    n = len(log.entities)
    alive = np.ones(n, dtype=bool)
    keep = np.ones(len(log), dtype=bool)
    while True:
        keep = alive[log.users] & alive[log.targets]
        counts = np.bincount(log.users[keep], minlength=n)
        counts += np.bincount(log.targets[keep], minlength=n)
        bad = alive & (counts < min_interactions)
        if not bad.any():
            break
        alive[bad] = False

    entities = EntityRegistry()
    users, targets = [], []
    for u, t in zip(log.users[keep], log.targets[keep]):
        users.append(entities.intern(log.entities.names[u], log.entities.kinds[u]))
        targets.append(entities.intern(log.entities.names[t], log.entities.kinds[t]))

    relations = RelationRegistry()
    for name, kind in zip(log.relations.names, log.relations.kinds):
        relations.intern(name, kind)

    return EventLog(
        entities, relations,
        np.array(users, dtype=np.int64),
        np.array(targets, dtype=np.int64),
        log.rels[keep].copy(),
        log.times[keep].copy(),
    )


@dataclass
class TimeSegmentation:
    """T+1 ascending step boundaries plus the background/train/val/test split."""

    boundaries: np.ndarray
    counts: np.ndarray
    split: tuple[int, int, int, int]
    mode: str = "count"

    @property
    def num_steps(self) -> int:
        return len(self.counts)

    def background_steps(self) -> range:
        return range(0, self.split[0])

    def train_steps(self) -> range:
        b = self.split[0]
        return range(b, b + self.split[1])

    def val_steps(self) -> range:
        b = self.split[0] + self.split[1]
        return range(b, b + self.split[2])

    def test_steps(self) -> range:
        b = self.split[0] + self.split[1] + self.split[2]
        return range(b, b + self.split[3])


def _balanced_targets(n: int, t: int) -> np.ndarray:
    sizes = np.full(t, n // t, dtype=np.int64)
    sizes[: n % t] += 1
    return np.cumsum(sizes)


def segment_time(
    log: EventLog,
    num_steps: int,
    split: tuple[int, int, int, int] | None = None,
    mode: str = "count",
) -> TimeSegmentation:
    """Partition the log into `num_steps` segments.

    ``count`` mode balances event counts per segment (each holds floor or
    ceil of N/T events when timestamps are distinct); events sharing a
    timestamp always land in the same segment, in the earlier one when the
    balanced cut is ambiguous. ``duration`` mode slices the time span into
    equal-length windows and permits empty segments.
    """
    if len(log) == 0:
        raise ValueError("cannot segment an empty log")
    t = int(num_steps)
    if t < 1:
        raise ValueError("num_steps must be >= 1")
    if split is None:
        split = (0, t, 0, 0)
    split = tuple(int(x) for x in split)
    if len(split) != 4 or any(x < 0 for x in split):
        raise ValueError("split must be 4 non-negative step counts")
    if sum(split) != t:
        raise ValueError(f"split {split} must sum to num_steps {t}")

    ts = log.times
    n = len(ts)

    if mode == "duration":
        span = int(ts[-1]) + 1 - int(ts[0])
        if span < t:
            raise ValueError("time span too short for the requested step count")
        boundaries = ts[0] + (np.arange(t + 1, dtype=np.int64) * span) // t
        idx = np.searchsorted(ts, boundaries)
        counts = np.diff(idx).astype(np.int64)
        return TimeSegmentation(boundaries.astype(np.int64), counts, split, mode)
    if mode != "count":
        raise ValueError(f"unknown segmentation mode {mode!r}")

    # Cumulative event count at the end of each distinct-timestamp group.
    change = np.flatnonzero(np.diff(ts)) + 1
    group_ends = np.concatenate([change, [n]]).astype(np.int64)
    d = len(group_ends)
    if t > d:
        raise ValueError(
            f"num_steps {t} exceeds the {d} distinct timestamps in the log"
        )

    ideal = _balanced_targets(n, t)
    cuts = []  # indices into group_ends
    prev = -1
    for k in range(t - 1):
        lo = prev + 1
        hi = d - (t - 1 - k) - 1  # leave one group per remaining segment
        pos = int(np.searchsorted(group_ends, ideal[k]))
        best = None
        for cand in (pos - 1, pos):
            if lo <= cand <= hi:
                dist = abs(int(group_ends[cand]) - int(ideal[k]))
                # ties keep the group in the earlier segment (larger cut)
                if best is None or dist < best[0] or (dist == best[0] and cand > best[1]):
                    best = (dist, cand)
        if best is None:
            cand = min(max(pos, lo), hi)
            best = (abs(int(group_ends[cand]) - int(ideal[k])), cand)
        cuts.append(best[1])
        prev = best[1]

    positions = [0] + [int(group_ends[c]) for c in cuts] + [n]
    counts = np.diff(positions).astype(np.int64)
    boundaries = np.empty(t + 1, dtype=np.int64)
    boundaries[0] = ts[0]
    for k in range(1, t):
        boundaries[k] = ts[positions[k]]
    boundaries[t] = ts[-1] + 1
    return TimeSegmentation(boundaries, counts, split, mode)


@dataclass
class SnapshotGraph:
    """One time step: that step's interaction edges plus all static triples."""

    step: int
    users: np.ndarray
    targets: np.ndarray
    rels: np.ndarray
    times: np.ndarray
    triple_heads: np.ndarray
    triple_rels: np.ndarray
    triple_tails: np.ndarray
    n_entities: int

    @property
    def n_events(self) -> int:
        return len(self.users)

    @property
    def n_triples(self) -> int:
        return len(self.triple_heads)


def triples_to_arrays(triples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    heads = np.array([t.head for t in triples], dtype=np.int64)
    rels = np.array([t.relation for t in triples], dtype=np.int64)
    tails = np.array([t.tail for t in triples], dtype=np.int64)
    return heads, rels, tails


def build_snapshots(
    log: EventLog, seg: TimeSegmentation, triples: list[StaticTriple]
) -> list[SnapshotGraph]:
    """Slice the log into per-step snapshots sharing the static triples."""
    heads, trels, tails = triples_to_arrays(triples)
    offsets = np.concatenate([[0], np.cumsum(seg.counts)])
    n = len(log.entities)
    snaps = []
    for step in range(seg.num_steps):
        a, b = int(offsets[step]), int(offsets[step + 1])
        snaps.append(
            SnapshotGraph(
                step=step,
                users=log.users[a:b],
                targets=log.targets[a:b],
                rels=log.rels[a:b],
                times=log.times[a:b],
                triple_heads=heads,
                triple_rels=trels,
                triple_tails=tails,
                n_entities=n,
            )
        )
    return snaps


@dataclass
class AdjacencyIndex:
    """Immutable symmetric CSR adjacency over all entities of a snapshot.

    Each undirected edge is stored in both directions; parallel edges
    between a pair collapse to one entry holding the first-seen relation
    and the multiplicity count. Safe for concurrent reads.
    """

    indptr: np.ndarray
    indices: np.ndarray
    relations: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def neighbor_relations(self, u: int) -> np.ndarray:
        return self.relations[self.indptr[u]:self.indptr[u + 1]]

    def neighbor_counts(self, u: int) -> np.ndarray:
        return self.counts[self.indptr[u]:self.indptr[u + 1]]


def to_adjacency(snap: SnapshotGraph) -> AdjacencyIndex:
    """Build the undirected CSR index for one snapshot."""
    entries: dict[tuple[int, int], list[int]] = {}
    for u, v, r in zip(snap.users, snap.targets, snap.rels):
        key = (int(min(u, v)), int(max(u, v)))
        hit = entries.get(key)
        if hit is None:
            entries[key] = [int(r), 1]
        else:
            hit[1] += 1
    for h, r, tl in zip(snap.triple_heads, snap.triple_rels, snap.triple_tails):
        key = (int(min(h, tl)), int(max(h, tl)))
        hit = entries.get(key)
        if hit is None:
            entries[key] = [int(r), 1]
        else:
            hit[1] += 1

    m = len(entries)
    rows = np.empty(2 * m, dtype=np.int64)
    cols = np.empty(2 * m, dtype=np.int64)
    rels = np.empty(2 * m, dtype=np.int64)
    cnts = np.empty(2 * m, dtype=np.int64)
    for i, ((a, b), (r, c)) in enumerate(entries.items()):
        rows[2 * i], cols[2 * i] = a, b
        rows[2 * i + 1], cols[2 * i + 1] = b, a
        rels[2 * i] = rels[2 * i + 1] = r
        cnts[2 * i] = cnts[2 * i + 1] = c

    order = np.lexsort((cols, rows))
    rows, cols, rels, cnts = rows[order], cols[order], rels[order], cnts[order]
    n = snap.n_entities
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return AdjacencyIndex(indptr, cols, rels, cnts)
