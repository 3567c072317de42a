"""Command-line surface: ingest, sample, train, eval, export-attention,
selftest. Errors print ``ERROR <code>: <message>`` on stderr with a
matching nonzero exit status; every command is idempotent given the same
config and seed."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig, apply_overrides, parse_config, serialize_config
from .evaluation import evaluate, ndcg_at_k, recall_at_k
from .graph import (
    EntityKind,
    FormatError,
    ingest_events,
    ingest_product_graph,
    k_core_filter,
    segment_time,
)
from .kernels import backend_name
from .model import temporal_pass, write_attention_csv
from .pipeline import (
    build_dataset,
    load_store,
    sample_dataset,
    save_store,
)
from .sampler import read_subgraph_cache, write_subgraph_cache
from .seeding import child_seed, rng_for
from .training import train, warp_loss, write_loss_csv, WarpConfig
from .evaluation import trajectory_rows

EXIT_CODES = {"CONFIG": 2, "IO": 3, "FORMAT": 4, "STATE": 5, "INTERNAL": 6}


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> "CommandError":
    return CommandError(code, message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise _fail("IO", f"config file not found: {path}")
        cfg = parse_config(path.read_text(encoding="utf-8"), cfg)
    if args.set:
        apply_overrides(cfg, args.set)
    return cfg


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    log = ingest_events(cfg.events)
    log = k_core_filter(log, cfg.kcore)
    if len(log) == 0:
        raise _fail("STATE", f"no events survive the {cfg.kcore}-core filter")
    triples = ingest_product_graph(cfg.triples, log)
    seg = segment_time(log, cfg.num_steps, cfg.split, mode=cfg.segmentation)
    save_store(cfg.out, log, triples, seg)
    with open(Path(cfg.out) / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    reg = log.entities
    print(f"#User\t{reg.count_of_kind(EntityKind.USER)}")
    print(f"#Product\t{reg.count_of_kind(EntityKind.PRODUCT)}")
    print(f"#Query\t{reg.count_of_kind(EntityKind.QUERY)}")
    print(f"#Entity\t{len(reg)}")
    print(f"#Triplet\t{len(triples)}")
    print(f"#Event\t{len(log)}")
    return 0


def _load_dataset(cfg: RunConfig):
    try:
        log, triples, seg = load_store(cfg.out)
    except FileNotFoundError:
        raise _fail("STATE", f"missing ingested store in {cfg.out}; run `evocast ingest` first")
    return build_dataset(log, triples, seg)


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    data = _load_dataset(cfg)
    ensemble = cfg.ensemble(seed=child_seed(cfg.seed, "sample"))
    sample_dataset(data, ensemble, seed=child_seed(cfg.seed, "sample"))
    records = [
        (user, step, idx, sub)
        for (user, step), subs in sorted(data.subgraphs.items())
        for idx, sub in enumerate(subs)
    ]
    write_subgraph_cache(Path(cfg.out) / "subgraphs.bin", records)
    print(f"sampled {len(records)} subgraphs "
          f"({len(data.subgraphs)} user-step pairs, backend={backend_name()})")
    return 0


def _load_sampled_dataset(cfg: RunConfig):
    data = _load_dataset(cfg)
    cache = Path(cfg.out) / "subgraphs.bin"
    if not cache.exists():
        raise _fail("STATE", f"missing {cache}; run `evocast sample` first")
    data.subgraphs = read_subgraph_cache(cache)
    return data


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = _load_sampled_dataset(cfg)
    result = train(data, cfg.model_config(), cfg.warp_config(), cfg.optim_config())
    ad.save_params(Path(cfg.out) / "checkpoint.bin", result.store)
    write_loss_csv(Path(cfg.out) / "loss_history.csv", result.history)
    last = result.history[-1] if result.history else {}
    print(f"trained {result.epochs_run} epochs; best val recall@{cfg.k} = "
          f"{result.best_val:.4f}; final total loss = {last.get('total', float('nan')):.4f}")
    return 0


def _load_checkpoint(cfg: RunConfig):
    path = Path(cfg.out) / "checkpoint.bin"
    if not path.exists():
        raise _fail("STATE", f"missing {path}; run `evocast train` first")
    return ad.load_params(path)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    mode = args.mode or cfg.eval_mode
    data = _load_sampled_dataset(cfg)
    store = _load_checkpoint(cfg)
    dump = Path(cfg.out) / f"scores_{args.region}_{mode}.csv" if args.dump else None
    report = evaluate(
        store, data, cfg.model_config(), k=cfg.k,
        mode=mode, region=args.region, dump_path=dump,
    )
    out = Path(cfg.out) / f"report_{args.region}_{mode}.json"
    report.write_json(out)
    for task in sorted(report.aggregates):
        agg = report.aggregates[task]
        print(f"{task}\trecall@{cfg.k}={agg['recall']:.4f}\t"
              f"ndcg@{cfg.k}={agg['ndcg']:.4f}\t(n={agg['n_pairs']})")
    print(f"report written to {out}")
    return 0


def cmd_export_attention(args) -> int:
    cfg = _load_config(args)
    data = _load_sampled_dataset(cfg)
    store = _load_checkpoint(cfg)
    uid = data.log.entities.get(args.user)
    if uid is None or data.log.entities.kind_of(uid) != EntityKind.USER:
        raise _fail("CONFIG", f"unknown user {args.user!r}")
    model_cfg = cfg.model_config()
    train_steps = list(data.seg.train_steps())
    rows = trajectory_rows(store, data, model_cfg, uid, train_steps)
    tape = ad.Tape()
    _, betas = temporal_pass(tape, store, tape.constant(rows), model_cfg.dim)
    records = []
    for j in range(1, len(train_steps) + 1):
        for t in range(1, j + 1):
            records.append(
                (args.user, train_steps[t - 1], train_steps[j - 1],
                 float(betas.value[j - 1, t - 1]))
            )
    out = Path(cfg.out) / f"attention_{args.user}.csv"
    write_attention_csv(out, records)
    print(f"{len(records)} attention weights written to {out}")
    return 0


def _random_connected(rng, n, extra):
    edges = set()
    for v in range(1, n):
        edges.add((int(rng.integers(0, v)), v))
    for _ in range(extra):
        a, b = sorted(int(x) for x in rng.integers(0, n, size=2))
        if a != b:
            edges.add((a, b))
    return sorted(edges)


def _adjacency(n, edges):
    from .graph import AdjacencyIndex

    rows, cols = [], []
    for a, b in edges:
        rows += [a, b]
        cols += [b, a]
    rows = np.array(rows, dtype=np.int64)
    cols = np.array(cols, dtype=np.int64)
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    zeros = np.zeros(len(rows), dtype=np.int64)
    return AdjacencyIndex(indptr, cols[order], zeros, zeros + 1)


def cmd_selftest(args) -> int:
    """Condensed oracle suite; each check re-derives its expected values
    independently of the code path it exercises."""
    from .sampler import PprConfig, approx_ppr

    rng = np.random.default_rng(20_24)
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"{'ok' if ok else 'FAIL'}  {name}")
        if not ok:
            failures += 1

    # local push vs dense power iteration
    ok = True
    for _ in range(20):
        n = int(rng.integers(3, 31))
        adj = _adjacency(n, _random_connected(rng, n, n // 2))
        eps, alpha = 1e-5, 0.15
        p = approx_ppr(adj, 0, PprConfig(budget=5, alpha=alpha, eps=eps))
        walk = np.zeros((n, n))
        for u in range(n):
            if adj.degree(u):
                walk[u, adj.neighbors(u)] = 1.0 / adj.degree(u)
        pi = np.zeros(n)
        pi[0] = 1.0
        seed_vec = np.zeros(n)
        seed_vec[0] = alpha
        for _ in range(100_000):
            nxt = seed_vec + (1 - alpha) * pi @ walk
            if np.abs(nxt - pi).max() < 1e-12:
                break
            pi = nxt
        for v in range(n):
            if abs(p.get(v, 0.0) - pi[v]) > eps * adj.degree(v):
                ok = False
    check("ppr-forward-push-vs-power-iteration", ok)

    # gradient spot checks
    store = ad.ParameterStore()
    store.add("w", rng.standard_normal((5, 5)))
    store.add("x", rng.standard_normal((3, 5)))

    def objective():
        tape = ad.Tape()
        h = ad.tanh(ad.matmul(tape.leaf(store["x"]), tape.leaf(store["w"])))
        return ad.l2_sq(ad.masked_softmax(ad.matmul(h, ad.transpose(h))))

    check("gradient-central-differences", ad.grad_check(objective, store) < 1e-5)

    # causal attention: future rows are invisible
    ok = True
    from .model import ModelConfig, init_model_params

    mc = ModelConfig(dim=6, layers=1, num_subgraphs=1)
    mstore = ad.ParameterStore()
    init_model_params(mstore, mc, 2, [], rng_for(1, "selftest"))
    h = rng.standard_normal((5, 6))
    tape = ad.Tape()
    _, betas = temporal_pass(tape, mstore, tape.constant(h), 6)
    live = np.tril(np.ones((5, 5))) > 0
    ok &= bool(np.allclose((betas.value * live).sum(axis=1), 1.0, atol=1e-12))
    h2 = h.copy()
    h2[4] += 17.0
    tape = ad.Tape()
    _, betas2 = temporal_pass(tape, mstore, tape.constant(h2), 6)
    ok &= bool(np.array_equal(betas.value[:4, :4], betas2.value[:4, :4]))
    check("temporal-attention-normalized-and-causal", ok)

    # metric oracles
    import math

    ok = True
    for _ in range(200):
        m = int(rng.integers(2, 30))
        ranked = rng.permutation(m)[: int(rng.integers(1, m + 1))].tolist()
        truth = set(rng.integers(0, m, size=int(rng.integers(1, 6))).tolist())
        k = int(rng.integers(1, m + 1))
        brute_r = len([x for x in ranked[:k] if x in truth]) / len(truth)
        brute_d = sum(
            1 / math.log2(i + 2) for i, x in enumerate(ranked[:k]) if x in truth
        )
        brute_i = sum(1 / math.log2(i + 2) for i in range(min(len(truth), k)))
        if recall_at_k(ranked, truth, k) != brute_r:
            ok = False
        if abs(ndcg_at_k(ranked, truth, k) - brute_d / brute_i) > 1e-12:
            ok = False
    check("recall-ndcg-brute-force", ok)

    # ranking loss oracle
    ok = True
    wcfg = WarpConfig(margin=0.5, num_negatives=1)
    for _ in range(200):
        pos = float(rng.normal())
        negs = rng.normal(size=int(rng.integers(1, 10))).tolist()
        viol = sum(1 for g in negs if g + wcfg.margin > pos)
        rank = max(1, viol)
        weight = sum(1.0 / i for i in range(1, rank + 1))
        expected = weight * sum(max(0.0, wcfg.margin - pos + g) for g in negs) / rank
        if abs(warp_loss(pos, negs, wcfg) - expected) > 1e-12:
            ok = False
    check("warp-rank-weighted-hinge", ok)

    print(f"selftest: {5 - failures}/5 suites passed (backend={backend_name()})")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evocast",
        description="Temporal event forecasting on evolutionary interaction graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")

    common(sub.add_parser("ingest", help="read events/triples, filter, segment, store"))
    common(sub.add_parser("sample", help="precompute per-user subgraphs"))
    common(sub.add_parser("train", help="run the alternating optimization loop"))
    p_eval = sub.add_parser("eval", help="score test steps and write the report")
    common(p_eval)
    p_eval.add_argument("--mode", choices=["frozen", "autoregressive"], default=None)
    p_eval.add_argument("--region", choices=["val", "test"], default="test")
    p_eval.add_argument("--dump", action="store_true", help="write per-user score CSV")
    p_att = sub.add_parser("export-attention", help="write temporal weights for one user")
    common(p_att)
    p_att.add_argument("--user", required=True, help="external user name")
    sub.add_parser("selftest", help="run the condensed oracle suites")
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-attention": cmd_export_attention,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    except ConfigError as exc:
        print(f"ERROR CONFIG: {exc}", file=sys.stderr)
        return EXIT_CODES["CONFIG"]
    except FormatError as exc:
        print(f"ERROR FORMAT: {exc}", file=sys.stderr)
        return EXIT_CODES["FORMAT"]
    except FileNotFoundError as exc:
        print(f"ERROR IO: {exc}", file=sys.stderr)
        return EXIT_CODES["IO"]
    except (ValueError, FloatingPointError) as exc:
        print(f"ERROR INTERNAL: {exc}", file=sys.stderr)
        return EXIT_CODES["INTERNAL"]


if __name__ == "__main__":
    raise SystemExit(main())
