"""Command-line entry point: ``scenemrf <command> ...``.

Exit codes: 0 on success, 1 when inputs or checks fail validation, 2 on any
other runtime error. Error lines start with ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from collections import defaultdict

import numpy as np

from . import oracle
from .bp import infer_marginals, run_bp
from .energy import TrainConfig
from .estimator import SceneGrounder
from .graph import (
    CandidateSet,
    InvalidQueryError,
    Node,
    QueryGraph,
    Vocabulary,
    energy_of_assignment,
    random_scene_mrf,
    validate_query,
)
from .map_inference import (
    MAX_ENUMERATION,
    brute_force_map,
    brute_force_marginals,
    constrained_refine_mcmc,
    mplp_map,
    tree_map,
)
from .metrics import node_hits, pair_hits, pair_recall_at_k, top_k
from .trees import is_tree, random_tree_query
from .world import DatasetConfig, GroundingItem, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("scenemrf")

NODE_KS = (1, 5)
PAIR_KS = (1, 5, 10, 20, 50, 100)


class ValidationError(Exception):
    """Bad input or a failed check; maps to exit code 1."""


# -- shared helpers -------------------------------------------------------------


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: cannot parse {what}: {exc.msg}") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read {what} {path}: {exc.strerror}") from exc


def _read_config(path, cls):
    if path is None:
        return {}
    d = _read_json(path, "config")
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: config must be a flat key-value object")
    nested = sorted(k for k, v in d.items() if isinstance(v, (dict, list)))
    if nested:
        raise ValidationError(f"{path}: config values must be scalars (keys {', '.join(nested)})")
    try:
        cls.from_dict(d)
    except KeyError as exc:
        raise ValidationError(f"{path}: {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return d


def vocab_path(data_path):
    return data_path + ".vocab.json"


def _load_items(path):
    try:
        return load_dataset(path)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    except OSError as exc:
        raise ValidationError(f"cannot read dataset {path}: {exc.strerror}") from exc


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return x


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _load_model(path):
    try:
        return SceneGrounder.load(path)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"cannot load checkpoint {path}: {exc}") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def _check_vocab(est, items, data_path):
    vp = vocab_path(data_path)
    if os.path.exists(vp):
        data_vocab = Vocabulary.load(vp)
        if data_vocab.to_dict() != est.vocabulary_.to_dict():
            raise ValidationError(f"vocabulary of {data_path} does not match the checkpoint")
    n_obj, n_rel = len(est.vocabulary_.objects), len(est.vocabulary_.relations)
    for item in items:
        for n in item.query.nodes:
            if not n.generic and not 0 <= n.category < n_obj:
                raise ValidationError(f"item {item.item_id}: category {n.category} outside the checkpoint vocabulary")
        for e in item.query.edges:
            if not 0 <= e.rel < n_rel:
                raise ValidationError(f"item {item.item_id}: relation {e.rel} outside the checkpoint vocabulary")


# -- gen-data ---------------------------------------------------------------------


def cmd_gen_data(config, out, seed, vocab_out=None):
    """Generate a dataset; returns ``{n_rels: count}``."""
    d = _read_config(config, DatasetConfig)
    cfg = DatasetConfig.from_dict(d)
    items = generate_dataset(cfg, seed)
    save_dataset(items, out)
    cfg.world.vocabulary().save(vocab_out or vocab_path(out))
    counts = defaultdict(int)
    for item in items:
        counts[item.n_relations] += 1
    return dict(sorted(counts.items()))


# -- train -------------------------------------------------------------------------


def cmd_train(data, out, seed, config=None, loss_csv=None, resume=None, steps=None):
    """Train (or resume) a model; returns the fitted estimator."""
    d = _read_config(config, TrainConfig)
    d["seed"] = seed
    if steps is not None:
        d["steps"] = steps
    cfg = TrainConfig.from_dict(d)
    items = _load_items(data)
    vp = vocab_path(data)
    vocab = Vocabulary.load(vp) if os.path.exists(vp) else None
    if resume is not None:
        est = _load_model(resume)
        if est.train_config().to_dict() | {"steps": cfg.steps} != cfg.to_dict():
            raise ValidationError("resume config differs from the checkpoint's training config")
        est.set_params(steps=cfg.steps, warm_start=True)
    else:
        est = SceneGrounder.from_train_config(cfg)
    start = time.perf_counter()

    def progress(step, loss):
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("step %d loss %.4f (%.1fs)", step, loss, time.perf_counter() - start)

    est.fit(items, vocab=vocab, callback=progress)
    est.save(out, extra={"loss_history": [[int(s), float(v)] for s, v in est.loss_history_]})
    if loss_csv is not None:
        _write_csv(loss_csv, ["step", "loss"], [(s, repr(float(v))) for s, v in est.loss_history_])
    return est


# -- evaluation --------------------------------------------------------------------


def _mask_node(item, seed):
    rng = np.random.default_rng([seed, item.item_id])
    node = item.query.node_ids[int(rng.integers(item.query.n_nodes))]
    nodes = [Node(n.id, n.category, True) if n.id == node else n for n in item.query.nodes]
    return node, item.query.with_nodes(nodes)


def _select(items, loops_only=False, trees_only=False):
    if loops_only and trees_only:
        raise ValidationError("--loops-only and --trees-only are exclusive")
    if loops_only:
        return [it for it in items if not is_tree(it.query)]
    if trees_only:
        return [it for it in items if is_tree(it.query)]
    return items


class _Bucket:
    def __init__(self):
        self.items = 0
        self.node_hits = {k: [] for k in NODE_KS}
        self.pairs = {k: [] for k in PAIR_KS}
        self.chance = []

    def add(self, res, item, nodes, chance):
        self.items += 1
        for k in NODE_KS:
            self.node_hits[k].extend(node_hits(res, item, k, nodes).values())
        for k in PAIR_KS:
            self.pairs[k].append(pair_hits(res, item, k))
        self.chance.extend([chance] * len(nodes))

    def row(self, name):
        row = [name, self.items, len(self.node_hits[1])]
        row += [np.mean(self.node_hits[k]) if self.node_hits[k] else float("nan") for k in NODE_KS]
        for k in PAIR_KS:
            row += list(pair_recall_at_k(self.pairs[k]))
        row.append(np.mean(self.chance) if self.chance else float("nan"))
        return [_fmt(x) for x in row]


EVAL_HEADER = (
    ["bucket", "n_items", "n_nodes"]
    + [f"recall@{k}" for k in NODE_KS]
    + [f"{m}@{k}" for k in PAIR_KS for m in ("pair_R", "pair_mR")]
    + ["chance@1"]
)


def evaluate(est, items, no_rels=False, mask_node=False, seed=0):
    """Bucketed metrics; returns ``{bucket: row}`` with ``"all"`` last."""
    buckets = defaultdict(_Bucket)
    total = _Bucket()
    for item in items:
        query, nodes = item.query, None
        if no_rels:
            query = query.with_edges(())
        if mask_node:
            node, query = _mask_node(item, seed)
            nodes = [node]
        res = est.marginals(item, query)
        scored = item.query.node_ids if nodes is None else nodes
        chance = 1.0 / item.candidates.n_boxes
        buckets[item.n_relations].add(res, item, scored, chance)
        total.add(res, item, scored, chance)
    rows = {b: buckets[b].row(str(b)) for b in sorted(buckets)}
    rows["all"] = total.row("all")
    return rows


def cmd_eval(data, checkpoint, out=None, no_rels=False, mask_node=False, loops_only=False,
             trees_only=False, seed=0):
    est = _load_model(checkpoint)
    items = _load_items(data)
    _check_vocab(est, items, data)
    items = _select(items, loops_only, trees_only)
    rows = evaluate(est, items, no_rels, mask_node, seed)
    _write_csv(out, EVAL_HEADER, rows.values())
    return rows


# -- relation sweep --------------------------------------------------------------------


SWEEP_HEADER = ["mode", "bucket", "deleted", "remaining", "n_items", "n_nodes", "recall@1", "recall@5"]


def sweep_relations(est, items, seed=0):
    """Recall by #relations bucket plus edge-removal curves.

    For every item, edges are deleted one at a time in a seeded random
    order, so the query with ``k`` deletions contains the one with ``k + 1``.
    Empty buckets are kept as rows with blank metrics.
    """
    hits = defaultdict(lambda: {k: [] for k in NODE_KS})
    counts = defaultdict(int)
    max_rels = max(it.n_relations for it in items)
    for item in items:
        tables = est.energy_tables(item)
        n = item.n_relations
        order = np.random.default_rng([seed, item.item_id]).permutation(n)
        for deleted in range(n + 1):
            keep = sorted(order[deleted:])
            query = item.query.with_edges(item.query.edges[i] for i in keep)
            res = est.marginals(item, query, tables)
            key = (n, deleted)
            counts[key] += 1
            for k in NODE_KS:
                hits[key][k].extend(node_hits(res, item, k).values())

    def metrics(key):
        if not counts.get(key):
            return [0, 0, "", ""]
        h = hits[key]
        return [counts[key], len(h[1])] + [_fmt(float(np.mean(h[k]))) for k in NODE_KS]

    rows = []
    for n in range(0, max_rels + 1):
        rows.append(["bucket", n, 0, n] + metrics((n, 0)))
    for n in range(1, max_rels + 1):
        for deleted in range(n + 1):
            rows.append(["removal", n, deleted, n - deleted] + metrics((n, deleted)))
    return rows


def cmd_sweep_relations(data, checkpoint, out=None, seed=0):
    est = _load_model(checkpoint)
    items = _load_items(data)
    _check_vocab(est, items, data)
    rows = sweep_relations(est, items, seed)
    _write_csv(out, SWEEP_HEADER, rows)
    return rows


# -- infer -----------------------------------------------------------------------


def _top(marginal, k):
    return [{"box": int(b), "prob": float(marginal[b])} for b in top_k(marginal, k)]


def cmd_infer(checkpoint, query_path, candidates_path, mode="marginal", top=5, verify=False,
              mcmc_steps=2000, seed=0):
    """Ground one query; returns the JSON-ready result dict."""
    if mode not in ("marginal", "map", "map-distinct"):
        raise ValidationError(f"unknown mode {mode!r}")
    est = _load_model(checkpoint)
    try:
        q = QueryGraph.from_dict(_read_json(query_path, "query"), est.vocabulary_)
        validate_query(q)
        cands = CandidateSet.from_dict(_read_json(candidates_path, "candidates"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid input: {exc}") from exc
    expected = est.params_.feature_dim - est.frequencies_.dim
    if cands.features.shape[1] != expected:
        raise ValidationError(f"candidate features have {cands.features.shape[1]} columns, model expects {expected}")

    item = GroundingItem(cands, q, {}, {})
    m = est.scene_mrf(item)
    res = infer_marginals(m, est.bp_max_iters, est.bp_damping, est.bp_tol)
    out = {
        "mode": mode,
        "is_tree": m.is_tree(),
        "log_partition": float(res.log_partition.item()),
        "bp_converged": bool(res.converged),
        "top": {str(i): _top(res.marginals[i], top) for i in m.node_ids},
    }
    if mode == "marginal":
        a = {i: int(np.argmax(res.marginals[i])) for i in m.node_ids}
        out.update(assignment=a, energy=energy_of_assignment(m, a))
    else:
        mp = mplp_map(m)
        out["dual_bound"] = mp.dual_bound
        if mode == "map":
            chosen = mp
        else:
            if m.n_nodes > m.n_boxes:
                raise ValidationError(f"{m.n_nodes} nodes cannot take distinct boxes among {m.n_boxes}")
            chosen = constrained_refine_mcmc(m, mp.assignment, mcmc_steps, seed)
        out.update(assignment=chosen.assignment, energy=chosen.energy, distinct=chosen.distinct)
    out["assignment"] = {str(k): int(v) for k, v in out["assignment"].items()}

    if verify:
        out["verify"] = _verify(m, mode, res, out)
    return out


def _verify(m, mode, res, out):
    report = {}
    small = m.n_boxes ** m.n_nodes <= min(MAX_ENUMERATION, 10**6)
    ok = True
    if mode == "map" and m.is_tree():
        ref = tree_map(m).energy
        report["tree_map_energy"] = ref
        ok &= out["energy"] == ref
    if small:
        if mode == "marginal":
            exact = brute_force_marginals(m)
            err = max(float(np.max(np.abs(res.marginals[i] - exact.marginals[i]))) for i in m.node_ids)
            report["max_marginal_error"] = err
            if m.is_tree():
                ok &= err < 1e-9
        else:
            ref = brute_force_map(m, distinct=(mode == "map-distinct"))
            report["brute_force_energy"] = ref.energy
            if m.is_tree() and mode == "map":
                ok &= out["energy"] == ref.energy
    else:
        report["skipped"] = "search space too large for enumeration"
    report["ok"] = bool(ok)
    return report


# -- oracle-check and bench ---------------------------------------------------------


def cmd_oracle_check(seed=0, trials=None, perturb=0.0, suites=None):
    results = oracle.run_all(seed=seed, trials=trials, perturb=perturb, names=suites)
    return results


BENCH_HEADER = ["routine", "N", "N_b", "mean_ms", "p95_ms"]


def _tree_mrf(n, nb, rng):
    return random_scene_mrf(random_tree_query(n, rng), nb, rng)


def cmd_bench(nodes=(3, 5), boxes=(8, 16, 32), reps=20, seed=0, out=None, mcmc_steps=500):
    routines = {
        "bp": lambda m: run_bp(m),
        "mplp": lambda m: mplp_map(m),
        "mcmc": lambda m: constrained_refine_mcmc(m, {i: 0 for i in m.node_ids}, mcmc_steps, 0),
    }
    rows = []
    for name, fn in routines.items():
        for n in nodes:
            for nb in boxes:
                rng = np.random.default_rng([seed, n, nb])
                m = _tree_mrf(n, nb, rng)
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn(m)
                    times.append(1000 * (time.perf_counter() - t0))
                rows.append([name, n, nb, f"{np.mean(times):.4f}", f"{np.percentile(times, 95):.4f}"])
    _write_csv(out, BENCH_HEADER, rows)
    return rows


# -- argument parsing -----------------------------------------------------------------


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="scenemrf", description="Scene-graph grounding with Markov random fields.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic grounding dataset (JSON lines)")
    g.add_argument("--config", help="flat JSON dataset config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--vocab-out", help="vocabulary file (default: <out>.vocab.json)")

    t = sub.add_parser("train", help="train an energy model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat JSON training config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--loss-csv", help="write step,loss rows here")
    t.add_argument("--resume", help="continue from this checkpoint")

    e = sub.add_parser("eval", help="bucketed recall and pair recall")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.add_argument("--seed", type=int, default=0, help="seed for --mask-node")
    e.add_argument("--no-rels", action="store_true", help="drop every edge before inference")
    e.add_argument("--mask-node", action="store_true", help="make one node per item generic and score only it")
    e.add_argument("--loops-only", action="store_true")
    e.add_argument("--trees-only", action="store_true")

    s = sub.add_parser("sweep-relations", help="recall by #relations and edge-removal curves")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("infer", help="ground one query on one candidate set")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--query", required=True)
    i.add_argument("--candidates", required=True)
    i.add_argument("--mode", choices=("marginal", "map", "map-distinct"), default="marginal")
    i.add_argument("--top", type=int, default=5)
    i.add_argument("--mcmc-steps", type=int, default=2000)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--verify", action="store_true", help="cross-check against exact oracles on small inputs")
    i.add_argument("--out", help="JSON path (default: stdout)")

    o = sub.add_parser("oracle-check", help="run the brute-force equivalence suites")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--trials", type=int, help="cap on instances per suite")
    o.add_argument("--suite", action="append", choices=sorted(oracle.SUITES), help="run only these suites")
    o.add_argument("--self-test", action="store_true", help="perturb the oracles; the run must fail")

    b = sub.add_parser("bench", help="time BP, MPLP and MCMC")
    b.add_argument("--nodes", type=_int_list, default=(3, 5))
    b.add_argument("--boxes", type=_int_list, default=(8, 16, 32))
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _run(args):
    if args.command == "gen-data":
        counts = cmd_gen_data(args.config, args.out, args.seed, args.vocab_out)
        for n, c in counts.items():
            print(f"n_rels={n} items={c}")
        print(f"total={sum(counts.values())}")
    elif args.command == "train":
        est = cmd_train(args.data, args.out, args.seed, args.config, args.loss_csv, args.resume, args.steps)
        hist = est.loss_history_
        if hist:
            print(f"steps={len(hist)} first_loss={hist[0][1]:.4f} last_loss={hist[-1][1]:.4f}")
    elif args.command == "eval":
        rows = cmd_eval(args.data, args.checkpoint, args.out, args.no_rels, args.mask_node,
                        args.loops_only, args.trees_only, args.seed)
        if args.out:
            for row in rows.values():
                print(f"bucket={row[0]} items={row[1]} recall@1={row[3]} recall@5={row[4]}")
    elif args.command == "sweep-relations":
        rows = cmd_sweep_relations(args.data, args.checkpoint, args.out, args.seed)
        if args.out:
            for row in rows:
                if row[0] == "bucket":
                    print(f"n_rels={row[1]} items={row[4]} recall@1={row[6]}")
    elif args.command == "infer":
        res = cmd_infer(args.checkpoint, args.query, args.candidates, args.mode, args.top, args.verify,
                        args.mcmc_steps, args.seed)
        text = json.dumps(res, indent=1, sort_keys=True) + "\n"
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        if args.verify and not res["verify"]["ok"]:
            raise ValidationError("verification against the exact oracle failed")
    elif args.command == "oracle-check":
        perturb = 1e-3 if args.self_test else 0.0
        results = cmd_oracle_check(args.seed, args.trials, perturb, args.suite)
        for r in results:
            print(r.line())
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise ValidationError(f"oracle suites failed: {', '.join(failed)}")
    elif args.command == "bench":
        cmd_bench(args.nodes, args.boxes, args.reps, args.seed, args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _run(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvalidQueryError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
