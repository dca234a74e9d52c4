"""Command-line entry point: ``fatrec <command> [flags]``.

Commands: prepare, train, evaluate, sweep, export-coupling, gradcheck.
Every command also reads ``--config FILE`` (``key=value`` lines, keys are flag
names with dashes or underscores); explicit flags win over the file.
The default output directory comes from ``FATREC_OUTPUT_DIR`` (else ``fatrec-out``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import DataError, prepare, read_cache, write_cache
from .evaluation import (EvaluationError, evaluate_model, export_coupling, neighbor_sets_for)
from .training import (POLICIES, VARIANTS, Checkpoint, CheckpointMismatch, TrainConfig,
                       TrainingDiverged, check_compatible, read_checkpoint, train,
                       write_checkpoint)

log = logging.getLogger("fatrec")

OUTPUT_ENV = "FATREC_OUTPUT_DIR"
EXIT_FAILURE = 1
EXIT_USAGE = 2

_HELP = {
    "d": "embedding / hidden size",
    "T": "number of trend capsules",
    "K": "anchor items per user (last K train items)",
    "max_neighbors": "neighbors kept per user",
    "max_future_len": "items kept per neighbor future sequence",
    "max_seq_len": "history items fed to the encoder",
    "routing_iters": "dynamic routing iterations",
    "alpha": "time-attention decay",
    "learn_alpha": "train the decay instead of fixing it (0/1)",
    "lr": "Adam learning rate",
    "batch_size": "samples per mini-batch",
    "epochs": "training epochs",
    "negatives": "sampled-softmax negatives per batch (0: full softmax)",
    "seed": "root random seed",
    "variant": "fat or base",
    "max_capsules": "primary capsules routed per user",
    "single_cap": "max share of single-common-item neighbors",
    "exclude_anchor": "drop the anchor itself from future sequences (0/1)",
    "forget_bias": "initial forget-gate bias",
    "val_max_users": "validation users per epoch (0: all)",
    "user_batching": "keep each user's samples together in batches (0/1)",
}


class UsageError(Exception):
    pass


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _int_list(s: str) -> list[int]:
    try:
        out = [int(x) for x in str(s).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        v = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        kw = {"default": v, "help": _HELP[f.name], "dest": f.name}
        if f.name == "variant":
            p.add_argument(flag, choices=VARIANTS, **kw)
        elif isinstance(v, bool):
            p.add_argument(flag, type=_bool, metavar="0|1", **kw)
        else:
            p.add_argument(flag, type=type(v), **kw)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying flag defaults")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="BLAS threads, the available cores unless set")
    p.add_argument("--deterministic", action="store_true",
                   help="force one BLAS thread so reductions run in a fixed order")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--N", type=_int_list, default=[20, 50], help="comma-separated cutoffs")
    p.add_argument("--policy", choices=POLICIES, default="first-of-test",
                   help="which test item is the target")
    p.add_argument("--eval-seed", type=int, default=0, help="seed of the seeded-random policy")
    p.add_argument("--diversity", type=_bool, default=None, metavar="0|1",
                   help="report Diversity@N (None: when the cache has categories)")


def build_parser() -> argparse.ArgumentParser:
    out_default = os.environ.get(OUTPUT_ENV, "fatrec-out")
    ap = argparse.ArgumentParser(prog="fatrec", description="Future-aware diverse trends recommender")
    ap.add_argument("--version", action="version", version=f"fatrec {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, help):
        return sub.add_parser(name, help=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = command("prepare", help="parse, filter and split a dataset into a cache file")
    _add_common(p)
    p.add_argument("--input", required=True, help="interaction file")
    p.add_argument("--format", choices=("tsv", "movielens-dat"), default="tsv", help="input layout")
    p.add_argument("--min-user", type=int, default=10, help="min records per user")
    p.add_argument("--min-item", type=int, default=3, help="min records per item")
    p.add_argument("--categories", help="item category file")
    p.add_argument("--categories-format", choices=("tsv", "movielens-dat"), default="tsv",
                   help="category file layout")
    p.add_argument("--subsample", type=float, default=1.0, help="fraction of users kept")
    p.add_argument("--seed", type=int, default=0, help="subsampling seed")
    p.add_argument("--out", default=str(Path(out_default) / "dataset.fatd"), help="cache path")
    p.add_argument("--force", action="store_true", help="overwrite an existing cache")

    p = command("train", help="train a fat or base model")
    _add_common(p)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", default=out_default, help="output directory")
    _add_train_flags(p)

    p = command("evaluate", help="Recall/NDCG/Diversity of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--name", default="report", help="report file stem")
    _add_eval_flags(p)

    p = command("sweep", help="train and evaluate once per value of T or K")
    _add_common(p)
    p.add_argument("--cache", required=True)
    p.add_argument("--parameter", choices=("T", "K"), required=True)
    p.add_argument("--values", type=_int_list, required=True)
    p.add_argument("--out", default=out_default, help="output directory")
    _add_train_flags(p)
    _add_eval_flags(p)

    p = command("export-coupling", help="coupling factors of one user's routing")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--user", required=True, help="external user id (or dense index with --by-index)")
    p.add_argument("--by-index", action="store_true", help="read --user as a dense index")
    p.add_argument("--out", help="CSV path; None writes <output dir>/coupling_<user>.csv")

    p = command("gradcheck", help="finite-difference gradient suites")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error accepted")
    p.add_argument("--seed", type=int, default=0, help="seed of the random instances")
    return ap


def _read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = _read_config(args.config)
    except (OSError, UsageError) as e:
        ap.error(str(e))
    sub = ap._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        a = actions.get(k)
        if a is None or k in ("config", "help"):
            sub.error(f"unknown key {k!r} in {args.config}")
        if a.nargs == 0:
            defaults[k] = _bool(v)
        else:
            try:
                defaults[k] = a.type(v) if a.type else v
            except (argparse.ArgumentTypeError, ValueError) as e:
                sub.error(f"{args.config}: bad value for {k}: {e}")
            if a.choices is not None and defaults[k] not in a.choices:
                sub.error(f"{args.config}: {k} must be one of {list(a.choices)}")
    sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def _train_config(args) -> TrainConfig:
    return TrainConfig(**{f.name: getattr(args, f.name) for f in fields(TrainConfig)})


def _print_summary(s: dict) -> None:
    for k, v in s.items():
        print(f"{k}\t{v}")


def cmd_prepare(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        print(f"fatrec: {out} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_USAGE
    split = prepare(args.input, args.format, args.min_user, args.min_item,
                    categories=args.categories, categories_fmt=args.categories_format,
                    subsample=args.subsample, seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cache(split, out)
    back = read_cache(out)
    if back.fingerprint() != split.fingerprint():
        raise RuntimeError(f"{out}: cache failed to round-trip")
    log.info("filter rule: users with < %d records and items with < %d records removed "
             "repeatedly until stable", args.min_user, args.min_item)
    _print_summary(split.summary())
    print(f"cache\t{out}")
    return 0


def _train_one(cfg: TrainConfig, split, out_dir: Path, echo=print):
    """Train and write ``checkpoint.fatm``, ``train.log`` (epoch lines) and ``run.log`` (phases).

    Returns the checkpoint and the neighbor sets (``None`` for the Base variant).
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.log", "w", encoding="utf-8") as run, \
            open(out_dir / "train.log", "w", encoding="utf-8") as fh:
        run.write(f"data\tusers={split.n_users}\titems={split.n_items}\t"
                  f"fingerprint={split.fingerprint()}\n")
        sets = None
        if cfg.variant == "fat":
            sets = neighbor_sets_for(cfg, split)
            sizes = np.array([len(s) for s in sets])
            nseq = sum(len(s.sequences) for s in sets)
            run.write(f"neighbors\tK={cfg.K}\tmean_size={sizes.mean():.6f}\t"
                      f"empty={int((sizes == 0).sum())}\tsequences={nseq}\n")
        run.write(f"train\tvariant={cfg.variant}\tseed={cfg.seed}\tepochs={cfg.epochs}\n")
        run.flush()
        t0 = time.time()

        def progress(epoch, loss, val):
            echo(f"epoch {epoch}/{cfg.epochs}  loss {loss:.5f}  val Recall@50 {val:.5f}  "
                 f"({time.time() - t0:.0f}s)")

        try:
            res = train(cfg, split, sets, fh, progress)
        except TrainingDiverged as e:
            run.write(f"diverged\t{e}\n")
            raise
        run.write(f"best\tepoch={res.best_epoch}\n")
    ck = Checkpoint(cfg, res.params, split.fingerprint(), split.n_users, split.n_items)
    path = out_dir / "checkpoint.fatm"
    write_checkpoint(path, ck)
    back = read_checkpoint(path)
    if back.cfg != cfg or any(not np.array_equal(back.params[k], ck.params[k]) for k in ck.params):
        raise RuntimeError(f"{path}: checkpoint failed to round-trip")
    return ck, sets


def cmd_train(args) -> int:
    cfg = _train_config(args)
    split = read_cache(args.cache)
    out = Path(args.out)
    _train_one(cfg, split, out)
    print(f"checkpoint\t{out / 'checkpoint.fatm'}")
    print(f"log\t{out / 'train.log'}")
    print(f"run_log\t{out / 'run.log'}")
    return 0


def _diversity_flag(args, split) -> bool:
    if args.diversity is None:
        return split.catalog.item_category is not None
    return args.diversity


def cmd_evaluate(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    split = read_cache(args.cache)
    check_compatible(ck, split)
    rep = evaluate_model(ck, split, args.N, _diversity_flag(args, split), args.policy,
                         args.eval_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rp, up = out / f"{args.name}.csv", out / f"{args.name}_per_user.csv"
    rep.write(rp, up)
    with open(rp, newline="", encoding="utf-8") as fh:
        if len(list(csv.reader(fh))) != len(rep.values) + 1:
            raise RuntimeError(f"{rp}: report failed to validate")
    for m, n, v in rep.rows():
        print(f"{m}@{n}\t{v:.4f}")
    print(f"report\t{rp}")
    return 0


def cmd_sweep(args) -> int:
    split = read_cache(args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    div = _diversity_flag(args, split)
    metrics = ["recall", "ndcg"] + (["diversity"] if div else [])
    cols = [f"{m}@{n}" for n in sorted(set(args.N)) for m in metrics]
    rows, failed = [], 0
    for value in args.values:
        row = {args.parameter: value}
        try:
            cfg = _train_config(args)
            setattr(cfg, args.parameter, value)
            cfg.__post_init__()
            ck, sets = _train_one(cfg, split, out / f"{args.parameter}={value}",
                                  echo=lambda s: print(f"[{args.parameter}={value}] {s}"))
            rep = evaluate_model(ck, split, args.N, div, args.policy, args.eval_seed, sets)
            rep.write(out / f"{args.parameter}={value}" / "report.csv")
            row.update({f"{m}@{n}": repr(v) for (m, n), v in rep.values.items()})
            row["status"], row["error"] = "ok", ""
        except Exception as e:  # noqa: BLE001 - recorded per row, sweep continues
            log.exception("sweep %s=%s failed", args.parameter, value)
            row["status"], row["error"] = "failed", f"{type(e).__name__}: {e}"
            failed += 1
        rows.append(row)
    path = out / f"sweep_{args.parameter}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=[args.parameter] + cols + ["status", "error"],
                           restval="")
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print("\t".join(str(row.get(c, "")) for c in [args.parameter] + cols + ["status"]))
    print(f"sweep\t{path}")
    return EXIT_FAILURE if failed else 0


def cmd_export_coupling(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    split = read_cache(args.cache)
    check_compatible(ck, split)
    if args.by_index:
        user = int(args.user)
    else:
        idx = split.catalog.user_index()
        if args.user not in idx:
            raise EvaluationError(f"unknown user {args.user!r}")
        user = idx[args.user]
    path = Path(args.out) if args.out else (
        Path(os.environ.get(OUTPUT_ENV, "fatrec-out")) / f"coupling_{args.user}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = export_coupling(ck, split, user, path)
    print(f"rows\t{len(rows)}")
    print(f"coupling\t{path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suites

    worst = 0.0
    for suite, group, err in run_suites(eps=args.eps, seed=args.seed):
        worst = max(worst, err)
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{suite}\t{group}\t{err:.3e}\t{flag}")
    print(f"max_relative_error\t{worst:.3e}")
    return 0 if worst < args.tol else EXIT_FAILURE


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-coupling": cmd_export_coupling,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.deterministic else max(1, args.threads)
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (DataError, EvaluationError, CheckpointMismatch, TrainingDiverged, ValueError,
            OSError) as e:
        print(f"fatrec {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
