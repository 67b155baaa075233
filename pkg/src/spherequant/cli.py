"""Command-line entry points: synth, train, encode, search, eval.

Training writes an artifact directory::

    embedder_W.sqft  classifier_W.sqft  classifier_b.sqft
    centers.sqft  codebooks.sqcb  [codebooks.sqsc]  codes.sqcd
    hparams.cfg  trace.csv

Flags override values from ``--config``, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import HyperParams, format_config, hyperparams_from_dict, m_from_bits, read_config
from .embedder import EmbedderParams
from .evaluation import map_at, mean_pr_curve, write_metrics, write_pr_csv
from .search import SparseCodebooks, read_results_csv, search_batch, write_results_csv
from .synth import make_features
from .trainer import encode_database, fit, write_trace_csv

log = logging.getLogger("spherequant")


class CLIError(Exception):
    pass


# flag dest -> config key
_HP_FLAGS = {
    "alpha": "alpha", "lam": "lambda", "gamma": "gamma", "zeta": "zeta", "k_perturb": "k_perturb",
    "m": "m", "h": "h", "p": "p", "sparsity_eps": "sparsity_eps", "sls_rounds": "sls_rounds",
    "icm_iters": "icm_iters", "ridge": "ridge", "learning_rate": "learning_rate", "momentum": "momentum",
    "weight_decay": "weight_decay", "batch_size": "batch_size", "epochs_per_round": "epochs_per_round",
}


def _shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for encoding and search")
    parser.add_argument("--config", type=Path, default=None, help="key = value hyperparameter file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spherequant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labelled synthetic features")
    _shared(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--queries", type=int, default=0, help="also draw this many query points")
    p.add_argument("--out-features", type=Path, required=True)
    p.add_argument("--out-labels", type=Path, required=True)
    p.add_argument("--out-query-features", type=Path)
    p.add_argument("--out-query-labels", type=Path)

    p = sub.add_parser("train", help="fit embedder, centers, codebooks and codes")
    _shared(p)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="artifact directory")
    p.add_argument("--bits", type=int, help="code length; sets m = bits / log2(h)")
    p.add_argument("--rounds", type=int, help="alternation rounds (default 5)")
    p.add_argument("--rel-tol", type=float, help="stop when the total loss improves less than this")
    for dest, key in _HP_FLAGS.items():
        typ = int if key in ("k_perturb", "m", "h", "p", "sparsity_eps", "sls_rounds", "icm_iters",
                             "batch_size", "epochs_per_round") else float
        p.add_argument("--" + key.replace("_", "-"), dest=dest, type=typ)

    p = sub.add_parser("encode", help="encode features with trained artifacts")
    _shared(p)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--artifacts", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="labels of the encoded points (needed unless --cross-domain)")
    p.add_argument("--cross-domain", action="store_true", help="drop the center term; no labels needed")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("search", help="top-k inner-product search")
    _shared(p)
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--artifacts", type=Path, required=True)
    p.add_argument("--codes", type=Path, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--sparse-lut", action="store_true", help="build lookup tables from sparse codewords")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="MAP@R and precision-recall from search results")
    _shared(p)
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--query-labels", type=Path, required=True)
    p.add_argument("--db-labels", type=Path, required=True)
    p.add_argument("--R", type=int, required=True)
    p.add_argument("--codes", type=Path, help="code file, used to report bits")
    p.add_argument("--out-dir", type=Path, required=True)
    return parser


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _config(args) -> dict:
    return read_config(args.config) if args.config else {}


def resolve_hyperparams(args, cfg: dict) -> HyperParams:
    values = dict(cfg)
    for dest, key in _HP_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            values[key] = val
    values.pop("bits", None)
    bits = getattr(args, "bits", None)
    if bits is None:
        bits = cfg.get("bits")
    if bits is not None and getattr(args, "m", None) is None:
        values["m"] = m_from_bits(int(bits), int(values.get("h", HyperParams().h)))
    try:
        return hyperparams_from_dict(values)
    except TypeError as exc:
        raise CLIError(str(exc)) from None


def _check_dim(what: str, shape: tuple, expected: int, expected_what: str) -> None:
    if shape[1] != expected:
        raise CLIError(f"shape mismatch: {what} has shape {shape} but {expected_what} expects dim {expected}")


def save_artifacts(out: Path, result, hp: HyperParams, run: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.save_features(result.params.W, out / "embedder_W.sqft")
    io.save_features(result.params.W_cls, out / "classifier_W.sqft")
    io.save_features(result.params.b_cls[None, :], out / "classifier_b.sqft")
    io.save_features(result.centers, out / "centers.sqft")
    if result.codebooks is not None:
        io.save_codebooks(result.codebooks, out / "codebooks.sqcb")
        io.save_codes(result.codes, out / "codes.sqcd", h=hp.h)
        if hp.sparsity_eps is not None:
            io.save_sparse_codebooks(SparseCodebooks.from_dense(result.codebooks), out / "codebooks.sqsc")
    (out / "hparams.cfg").write_text(format_config(hp, run))
    write_trace_csv(out / "trace.csv", result.trace)


def load_artifacts(art: Path):
    cfg = read_config(art / "hparams.cfg")
    hp = hyperparams_from_dict(cfg)
    params = EmbedderParams(
        io.load_features(art / "embedder_W.sqft").values.copy(),
        io.load_features(art / "classifier_W.sqft").values.copy(),
        io.load_features(art / "classifier_b.sqft").values[0].copy(),
    )
    centers = io.load_features(art / "centers.sqft").values
    cb_path = art / "codebooks.sqcb"
    if not cb_path.exists():
        raise CLIError(f"{art}: no codebooks (was training run with alpha = gamma = 0?)")
    codebooks = io.load_codebooks(cb_path).codewords
    return hp, params, centers, codebooks


def cmd_synth(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = make_features(args.n, args.classes, args.d, args.noise, seed, n_queries=args.queries)
    io.save_features(out[0], args.out_features)
    io.save_labels(out[1], args.out_labels, num_classes=args.classes)
    if args.queries:
        if args.out_query_features is None or args.out_query_labels is None:
            raise CLIError("--queries needs --out-query-features and --out-query-labels")
        io.save_features(out[2], args.out_query_features)
        io.save_labels(out[3], args.out_query_labels, num_classes=args.classes)


def cmd_train(args) -> None:
    cfg = _config(args)
    hp = resolve_hyperparams(args, cfg)
    seed = _seed(args, cfg)
    rounds = args.rounds if args.rounds is not None else int(cfg.get("rounds", 5))
    rel_tol = args.rel_tol if args.rel_tol is not None else cfg.get("rel_tol")
    X = io.load_features(args.features).values
    labels = io.load_labels(args.labels)
    if labels.n != X.shape[0]:
        raise CLIError(f"shape mismatch: features have shape {X.shape} but labels have shape ({labels.n},)")
    result = fit(X, labels.labels, hp, rounds, seed=seed, rel_tol=rel_tol, threads=args.threads)
    save_artifacts(args.out, result, hp, {"rounds": rounds, "seed": seed})


def cmd_encode(args) -> None:
    hp, params, centers, codebooks = load_artifacts(args.artifacts)
    cfg = _config(args)
    seed = _seed(args, cfg)
    X = io.load_features(args.features).values
    _check_dim("features", X.shape, params.W.shape[1], "embedder")
    labels = None
    if args.labels is not None:
        labels = io.load_labels(args.labels).labels
        if labels.shape[0] != X.shape[0]:
            raise CLIError(f"shape mismatch: features have shape {X.shape} but labels have shape {labels.shape}")
    if not args.cross_domain and labels is None:
        raise CLIError("--labels is required unless --cross-domain is given")
    codes = encode_database(X, params, codebooks, hp, centers=centers, labels=labels,
                            cross_domain=args.cross_domain, seed=seed, threads=args.threads)
    io.save_codes(codes, args.out, h=hp.h)


def cmd_search(args) -> None:
    hp, params, _, codebooks = load_artifacts(args.artifacts)
    Q = io.load_features(args.queries).values
    _check_dim("queries", Q.shape, params.W.shape[1], "embedder")
    codes = io.load_codes(args.codes)
    if (codes.m, codes.h) != codebooks.shape[:2]:
        raise CLIError(f"shape mismatch: codes are (m={codes.m}, h={codes.h}) but codebooks have shape {codebooks.shape}")
    sparse = None
    if args.sparse_lut:
        sparse_path = args.artifacts / "codebooks.sqsc"
        sparse = io.load_sparse_codebooks(sparse_path) if sparse_path.exists() else SparseCodebooks.from_dense(codebooks)
    ids, scores = search_batch(Q, params, codebooks, codes.codes, args.k, sparse=sparse, threads=args.threads)
    write_results_csv(args.out, ids, scores)


def cmd_eval(args) -> None:
    results = read_results_csv(args.results)
    yq = io.load_labels(args.query_labels).labels
    ydb = io.load_labels(args.db_labels).labels
    if len(results) != yq.shape[0]:
        raise CLIError(f"shape mismatch: {len(results)} result lists but query labels have shape {yq.shape}")
    if any(r.size and r.max() >= ydb.shape[0] for r in results):
        raise CLIError(f"result ids exceed database labels of shape {ydb.shape}")
    bits = None
    if args.codes is not None:
        cm = io.load_codes(args.codes)
        bits = int(cm.m * np.log2(cm.h))
    metrics = {f"map@{args.R}": map_at(yq, ydb, results, args.R)}
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(args.out_dir / "metrics.csv", args.out_dir / "summary.json", metrics, args.R, bits)
    lengths = {r.size for r in results}
    if len(lengths) == 1:
        write_pr_csv(args.out_dir / "pr.csv", mean_pr_curve(yq, ydb, results))
    print(f"map@{args.R}\t{metrics[f'map@{args.R}']:.6f}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "encode": cmd_encode, "search": cmd_search, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (CLIError, ValueError, OSError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"spherequant {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
