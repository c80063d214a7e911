"""Command-line interface: ``gsrw {synth,train,refine,eval,gradcheck}``.

Exit codes: 0 success, 1 failed check, 2 usage or validation error.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .gradcheck import DEFAULT_GROUPS, DEFAULT_LAMBDAS, DEFAULT_SEEDS, DEFAULT_SIZES, FAULTS, run_gradcheck
from .head import load_params, save_params
from .rank_eval import DEFAULT_MAX_RANK, DEFAULT_TOPN, evaluate, leave_one_out_queries, rerank_details
from .random_walk import RWConfig, SolverError
from .synthio import FORMATS, EmbeddingSet, SynthConfig, generate_synthetic, load_embeddings, save_embeddings
from .trainer import MODES, TrainConfig, train, write_history

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _emit_json(payload, out):
    text = json.dumps(payload, indent=2)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n")


def _params_for(args):
    params = load_params(args.params)
    if args.groups is not None and args.groups != params.K:
        raise UsageError(f"--groups {args.groups} does not match K={params.K} in {args.params}")
    return params


def cmd_synth(args):
    cfg = SynthConfig(
        num_identities=args.ids,
        images_per_identity=args.per_id,
        d=args.dim,
        cluster_spread=args.cluster_spread,
        center_spread=args.center_spread,
        seed=args.seed,
    )
    records = generate_synthetic(cfg)
    save_embeddings(records, args.out, args.format)
    print(f"wrote {len(records)} records (d={cfg.d}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    records = load_embeddings(args.data, args.format)
    overrides = dict(
        lam=args.lam,
        K=args.groups,
        seed=args.seed,
        mode=args.mode,
        epochs=args.epochs,
        lr_initial=args.lr,
        lr_final=args.lr_final,
        lr_decay_epoch=args.decay_epoch,
        persons_per_batch=args.persons,
        images_per_person=args.images,
    )
    if args.config is not None:
        cfg = TrainConfig.from_file(args.config, **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    params, history = train(records, cfg)
    save_params(params, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    write_history(history, history_path)
    print(f"{'epoch':>6} {'mean_loss':>12} {'lr':>10}")
    for row in history:
        print(f"{row['epoch']:>6d} {row['mean_loss']:>12.6f} {row['lr']:>10.3g}")
    print(f"params -> {args.out}; history -> {history_path}")
    return EXIT_OK


def cmd_refine(args):
    params = _params_for(args)
    probes = load_embeddings(args.probe, args.format)
    gallery = load_embeddings(args.gallery, args.format)
    cfg = RWConfig(lam=args.lam if args.lam is not None else 0.95)
    results = []
    for probe in probes:
        eset = EmbeddingSet(probe, tuple(gallery))
        if eset.d != params.d:
            raise UsageError(f"embedding dimension {eset.d} does not match params d={params.d}")
        initial, refined = rerank_details(eset.probe_feature, eset.gallery_features, params, cfg, args.topn)
        results.append(
            {
                "probe_id": probe.id,
                "initial_order": initial.order.tolist(),
                "refined_order": refined.order.tolist(),
                "initial_scores": initial.scores.tolist(),
                "refined_scores": refined.scores.tolist(),
            }
        )
    payload = {
        "config": {"lambda": cfg.lam, "topn": args.topn, "K": params.K},
        "gallery_ids": [r.id for r in gallery],
        "results": results,
    }
    _emit_json(payload, args.out)
    if args.out is not None:
        for res in results[:20]:
            top = [gallery[i].id for i in res["refined_order"][:5]]
            print(f"{res['probe_id']}: top-5 {' '.join(top)}")
        if len(results) > 20:
            print(f"... {len(results) - 20} more probes in {args.out}")
    return EXIT_OK


def cmd_eval(args):
    params = _params_for(args)
    records = load_embeddings(args.queries, args.format)
    if args.gallery is not None:
        gallery = tuple(load_embeddings(args.gallery, args.format))
        queries = [EmbeddingSet(rec, gallery) for rec in records]
    else:
        queries = leave_one_out_queries(records)
    cfg = RWConfig(lam=args.lam if args.lam is not None else 0.95)
    modes = {"on": [True], "off": [False], "both": [True, False]}[args.use_rw]
    reports = {}
    for use_rw in modes:
        reports["rw" if use_rw else "no_rw"] = evaluate(
            queries, params, cfg, args.topn, use_rw=use_rw, max_rank=args.max_rank
        )
    if len(reports) == 1:
        (report,) = reports.values()
        payload = report.to_dict()
    else:
        payload = {name: rep.to_dict() for name, rep in reports.items()}
    _emit_json(payload, args.out)
    if args.per_query_csv is not None:
        if len(reports) == 1:
            next(iter(reports.values())).write_per_query_csv(args.per_query_csv)
        else:
            stem = Path(args.per_query_csv)
            for name, rep in reports.items():
                rep.write_per_query_csv(stem.with_name(f"{stem.stem}.{name}{stem.suffix}"))
    if args.out is not None:
        print(f"{'pipeline':<8} {'mAP':>8} {'top-1':>8} {'top-5':>8} {'top-10':>8} {'queries':>8}")
        for name, rep in reports.items():
            cmc = list(rep.cmc) + [rep.cmc[-1]] * 10
            print(
                f"{name:<8} {rep.mAP:>8.4f} {cmc[0]:>8.4f} {cmc[4]:>8.4f} {cmc[9]:>8.4f} {rep.num_queries:>8d}"
            )
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradcheck(
        sizes=args.sizes,
        groups=args.groups_list,
        lambdas=args.lambdas,
        seeds=args.seeds,
        tol=args.tol,
        fault=args.inject_fault,
    )
    for res in results:
        print(res.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="gsrw", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, walk=True):
        p.add_argument("--format", choices=FORMATS, default="binary")
        p.add_argument("--out", default=None)
        if walk:
            p.add_argument("--lambda", dest="lam", type=float, default=None)
            p.add_argument("--groups", type=int, default=None)

    p = sub.add_parser("synth", help="generate synthetic identity clusters")
    common(p, walk=False)
    p.add_argument("--ids", type=int, default=32)
    p.add_argument("--per-id", type=int, default=6)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--cluster-spread", type=float, default=0.7)
    p.add_argument("--center-spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth, required_out=True)

    p = sub.add_parser("train", help="train head parameters")
    common(p)
    p.add_argument("data")
    p.add_argument("--config", default=None, help="key=value TrainConfig file")
    p.add_argument("--history", default=None, help="history CSV (default: OUT.history.csv)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="initial learning rate")
    p.add_argument("--lr-final", type=float, default=None, help="learning rate after --decay-epoch")
    p.add_argument("--decay-epoch", type=int, default=None)
    p.add_argument("--persons", type=int, default=None, help="identities per batch")
    p.add_argument("--images", type=int, default=None, help="images per identity in a batch")
    p.set_defaults(func=cmd_train, required_out=True)

    p = sub.add_parser("refine", help="re-rank a gallery for each probe")
    common(p)
    p.add_argument("probe")
    p.add_argument("gallery")
    p.add_argument("params")
    p.add_argument("--topn", type=int, default=DEFAULT_TOPN)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="mAP / CMC evaluation")
    common(p)
    p.add_argument("queries", help="embedding file; leave-one-out unless --gallery is given")
    p.add_argument("params")
    p.add_argument("--gallery", default=None)
    p.add_argument("--topn", type=int, default=DEFAULT_TOPN)
    p.add_argument("--use-rw", choices=("on", "off", "both"), default="on")
    p.add_argument("--max-rank", type=int, default=DEFAULT_MAX_RANK)
    p.add_argument("--per-query-csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--sizes", type=_int_list, default=DEFAULT_SIZES)
    p.add_argument("--groups", dest="groups_list", type=_int_list, default=DEFAULT_GROUPS)
    p.add_argument("--lambdas", type=_float_list, default=DEFAULT_LAMBDAS)
    p.add_argument("--seeds", type=_int_list, default=DEFAULT_SEEDS)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("GSRW_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GSRW_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise UsageError("GSRW_THREADS must be >= 0")
    return threadpool_limits(limits=n) if n else nullcontext()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "required_out", False) and args.out is None:
        parser.error(f"{args.command}: --out is required")
    try:
        with _thread_limit():
            return args.func(args)
    except SolverError as exc:
        print(f"gsrw {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (ValueError, TypeError, OSError) as exc:
        print(f"gsrw {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
