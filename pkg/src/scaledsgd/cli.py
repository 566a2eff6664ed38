"""Experiment runner: synthetic completion, distance matrices, collaborative
filtering, and the descent-inequality audit.

Each subcommand is deterministic given its seed flags (in single-threaded
mode; the wall-clock column of a trace is the one exception) and emits CSV
traces in the schema written by evaluate.write_trace_csv. Flags may be
loaded from a TOML file with one table per subcommand; explicit flags
override file values, which override built-in defaults.

Seed derivation: ``--seed S`` draws the dataset (ground truth, points,
triples) from S, the model initialization from S + 1, the sampling stream
from S + 2, and the noise (when any) from S + 3. The roles are kept
disjoint so, e.g., the init cannot accidentally share the random matrix
that generated the ground truth, and the two algorithms of one invocation
always start from the same point.
"""

import argparse
import os
import sys

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from . import datagen, engine, evaluate, ingest, model as model_mod, parallel
from .engine import Dataset, NonFiniteError, RunConfig
from .parallel import ParallelConfig


def _parse_spectrum(text: str) -> list[float]:
    try:
        vals = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad spectrum {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("spectrum must be nonempty")
    return vals


def _parse_kappas(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad kappa list {text!r}") from None


def _algos(choice: str) -> list[str]:
    return ["scaled", "plain"] if choice == "both" else [choice]


def _train(model, dataset, config, workers):
    if workers > 1:
        return parallel.run_parallel(model, dataset, config, ParallelConfig(workers=workers))
    return engine.run(model, dataset, config)


def _run_and_write(model, dataset, config, workers, path, strict):
    """Run one algorithm, write its trace, and report divergence.

    Returns 0, or 1 when the run diverged and --strict was given.
    """
    try:
        _, trace = _train(model, dataset, config, workers)
    except NonFiniteError as exc:
        evaluate.write_trace_csv(exc.trace, path)
        print(f"{path}: diverged at step {exc.step}", file=sys.stderr)
        return 1 if strict else 0
    evaluate.write_trace_csv(trace, path)
    return 0


def cmd_synth(args) -> int:
    """Synthetic symmetric completion with the squared or 1-bit loss."""
    M = datagen.gen_low_rank(args.d, args.spectrum, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.snr_db is not None:
        M = datagen.add_noise(M, args.snr_db, seed=args.seed + 3)
        floor = datagen.noise_floor(M, args.r)
        floor_path = os.path.join(args.out, "noise_floor.csv")
        with open(floor_path, "w", encoding="utf-8") as fh:
            fh.write("noise_floor\n")
            fh.write(repr(floor) + "\n")
        print(f"wrote {floor_path} (rank-{args.r} floor = {floor:.6g})")
    dataset = Dataset.fully_observed(args.loss, M)
    status = 0
    for algo in _algos(args.algo):
        model = model_mod.init_gaussian(args.d, args.r, sigma=args.sigma, seed=args.seed + 1)
        config = RunConfig(
            alpha=args.alpha,
            epochs=args.epochs,
            scaled=(algo == "scaled"),
            seed=args.seed + 2,
            trace_every=args.trace_every,
        )
        path = os.path.join(args.out, f"{args.loss}_{algo}.csv")
        status |= _run_and_write(model, dataset, config, args.workers, path, args.strict)
        print(f"wrote {path}")
    return status


def cmd_edm(args) -> int:
    """Squared-distance completion of a random point cloud, with outliers."""
    pts, D = datagen.gen_edm(
        args.n, side=args.side, outlier_count=args.outliers,
        outlier_shift=args.shift, seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    pts_path = os.path.join(args.out, "points.txt")
    with open(pts_path, "w", encoding="utf-8") as fh:
        for p in pts:
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n")
    print(f"wrote {pts_path}")
    dataset = Dataset.fully_observed("edm", D)
    status = 0
    for algo, alpha in (("scaled", args.alpha_scaled), ("plain", args.alpha_plain)):
        model = model_mod.init_gaussian(args.n, 3, sigma=args.sigma, seed=args.seed + 1)
        config = RunConfig(
            alpha=alpha,
            epochs=args.epochs,
            scaled=(algo == "scaled"),
            seed=args.seed + 2,
            trace_every=args.trace_every,
        )
        path = os.path.join(args.out, f"edm_{algo}.csv")
        status |= _run_and_write(model, dataset, config, args.workers, path, args.strict)
        print(f"wrote {path}")
    return status


def cmd_cf(args) -> int:
    """Collaborative filtering on ranking triples with an AUC baseline."""
    if args.ratings:
        ratings = ingest.load_ratings_csv(args.ratings)
        omega = ingest.build_triples(ratings, args.count, seed=args.seed)
        d = ratings.n_items
    elif args.triples:
        omega = ingest.read_triples(args.triples)
        d = max(max(t.i, t.j, t.k) for t in omega) + 1
    else:
        M = datagen.gen_low_rank(args.d, args.spectrum, seed=args.seed)
        omega = ingest.build_triples_from_matrix(M, args.count, seed=args.seed)
        d = args.d
    train, test = ingest.split(omega, args.train, args.test, seed=args.seed)
    train_ds = Dataset.from_triples(train, d)
    test_ds = Dataset.from_triples(test, d)

    os.makedirs(args.out, exist_ok=True)
    if args.save_triples:
        ingest.write_triples(args.save_triples, omega)
        print(f"wrote {args.save_triples}")
    np_max = evaluate.np_maximum(
        test_ds, alpha=args.np_alpha, epochs=args.np_epochs, seed=args.seed, d=d
    )
    np_path = os.path.join(args.out, "np_maximum.csv")
    with open(np_path, "w", encoding="utf-8") as fh:
        fh.write("np_maximum\n")
        fh.write(repr(np_max) + "\n")
    print(f"wrote {np_path} (np_maximum = {np_max:.4f})")

    status = 0
    for algo, alpha in (("scaled", args.alpha_scaled), ("plain", args.alpha_plain)):
        if algo not in _algos(args.algo):
            continue
        model = model_mod.init_gaussian(d, args.r, sigma=args.sigma, seed=args.seed + 1)
        config = RunConfig(
            alpha=alpha,
            epochs=args.epochs,
            scaled=(algo == "scaled"),
            seed=args.seed + 2,
            trace_every=args.trace_every,
            eval_set=test_ds,
            record_g_max=False,
        )
        path = os.path.join(args.out, f"cf_{algo}.csv")
        status |= _run_and_write(model, train_ds, config, args.workers, path, args.strict)
        print(f"wrote {path}")
    return status


def cmd_verify(args) -> int:
    """Randomized numeric audit of the descent inequalities."""
    total = 0
    for kappa in args.kappas:
        res = model_mod.audit_descent_bounds(
            d=args.d, r=args.r, kappa=kappa, trials=args.trials,
            rho=args.rho, C=args.c, seed=args.seed,
        )
        total += res.total_violations
        print(
            f"kappa={kappa:g}: trials={res.trials} "
            f"loss_taylor={res.function_taylor} "
            f"loss_lower={res.function_lower} loss_upper={res.function_upper} "
            f"coh_taylor={res.coherence_taylor} coh_align={res.coherence_alignment} "
            f"sg_norm={res.sg_norm} sg_mean={res.sg_mean} "
            f"[relaxed: loss_lower={res.function_lower_relaxed} "
            f"coh_align={res.coherence_alignment_relaxed}] skipped={res.skipped}"
        )
    print(f"total violations: {total}")
    return 1 if total else 0


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="base seed (see module help)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--sigma", type=float, default=1.0, help="init row std deviation")
    p.add_argument("--trace-every", type=int, default=None,
                   help="samples between trace rows (default: one epoch)")
    p.add_argument("--workers", type=int, default=1, help="lock-free worker count")
    p.add_argument("--strict", action="store_true",
                   help="exit nonzero if a run diverges")
    p.add_argument("--config", default=None,
                   help="TOML file with one table of flag defaults per subcommand")


def build_parser(file_defaults=None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scaledsgd",
        description="Matrix-completion experiments with plain and preconditioned SGD.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthetic completion experiment")
    p.add_argument("--d", type=int, default=30)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--spectrum", type=_parse_spectrum, default=[2.0, 2.0, 2.0])
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--epochs", type=float, default=100.0)
    p.add_argument("--algo", choices=["scaled", "plain", "both"], default="both")
    p.add_argument("--loss", choices=["rmse", "xent"], default="rmse")
    p.add_argument("--snr-db", type=float, default=None,
                   help="corrupt the ground truth at this SNR (dB)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("edm", help="distance-matrix completion experiment")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--side", type=float, default=2.0)
    p.add_argument("--outliers", type=int, default=5)
    p.add_argument("--shift", type=float, default=10.0)
    p.add_argument("--alpha-scaled", type=float, default=0.2)
    p.add_argument("--alpha-plain", type=float, default=0.002)
    p.add_argument("--epochs", type=float, default=100.0)
    _add_common(p)
    p.set_defaults(func=cmd_edm)

    p = sub.add_parser("cf", help="collaborative-filtering ranking experiment")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--ratings", default=None, help="MovieLens-format ratings CSV")
    src.add_argument("--triples", default=None, help="prebuilt `i j k y` triple file")
    p.add_argument("--d", type=int, default=500, help="item count (synthetic source)")
    p.add_argument("--spectrum", type=_parse_spectrum, default=[10.0, 0.1, 0.001],
                   help="item-item spectrum (synthetic source)")
    p.add_argument("--count", type=int, default=110_000, help="triples to sample")
    p.add_argument("--train", type=int, default=100_000)
    p.add_argument("--test", type=int, default=10_000)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--alpha-scaled", type=float, default=1000.0)
    p.add_argument("--alpha-plain", type=float, default=0.05)
    p.add_argument("--algo", choices=["scaled", "plain", "both"], default="both")
    p.add_argument("--epochs", type=float, default=2.0)
    p.add_argument("--np-alpha", type=float, default=0.01)
    p.add_argument("--np-epochs", type=int, default=20)
    p.add_argument("--save-triples", default=None,
                   help="also write the sampled triples to this file")
    _add_common(p)
    p.set_defaults(func=cmd_cf)

    p = sub.add_parser("verify", help="audit the descent inequalities numerically")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--kappas", type=_parse_kappas, default=[1.0, 1e4])
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_verify)

    if file_defaults:
        for name, action in (("synth", cmd_synth), ("edm", cmd_edm),
                             ("cf", cmd_cf), ("verify", cmd_verify)):
            if name in file_defaults:
                _apply_file_defaults(parser, name, file_defaults[name])
    return parser


def _apply_file_defaults(parser, name, table):
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    subparser = sub_actions[0].choices[name]
    known = {a.dest for a in subparser._actions}
    unknown = {k.replace("-", "_") for k in table} - known
    if unknown:
        raise SystemExit(f"config error: unknown keys for [{name}]: {sorted(unknown)}")
    subparser.set_defaults(**{k.replace("-", "_"): v for k, v in table.items()})


def _peek_config(argv) -> dict:
    for pos, tok in enumerate(argv):
        if tok == "--config" and pos + 1 < len(argv):
            path = argv[pos + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
        else:
            continue
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return {}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        file_defaults = _peek_config(argv)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser(file_defaults)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ingest.ParseError,
        ingest.DuplicateRating,
        ingest.InsufficientTriples,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
