"""``talr`` command line: synth | train | eval | tiebreak-audit | gradcheck.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Reports are JSON (``report_version`` 1); plottable tables are CSV.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    DatasetFile,
    Standardizer,
    labels_to_indicator,
    load_dataset,
    single_labels,
    synthetic_dataset,
    write_features,
    write_labels,
)
from .errors import DataError, NumericError, TalrError
from .gradcheck import check_objective
from .hamming import BinaryCodebook
from .metrics import AUDIT_STRATEGIES, audit_codes, evaluate_codes
from .relaxed import OBJECTIVES
from .trainer import (
    AFFINITY_MODES,
    DEFAULT_LEVEL_VALUES,
    DEFAULT_QUANTILES,
    AffinityOracle,
    HashModel,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

REPORT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("talr")


class UsageError(TalrError):
    """Bad flags or config values."""


def thread_count() -> int:
    raw = os.environ.get("TALR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TALR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TALR_THREADS must be a positive integer, got {raw!r}")
    return n


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------- reports


UNHASHED_FIELDS = ("timings", "digest", "checkpoint")


def report_digest(report: dict) -> str:
    """SHA-256 of the report without wall-clock times or output paths."""
    stable = {k: v for k, v in report.items() if k not in UNHASHED_FIELDS}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def write_report(path: str | None, command: str, body: dict, timings: dict) -> dict:
    report = {"report_version": REPORT_VERSION, "command": command, **body, "timings": timings}
    report["digest"] = report_digest(report)
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False)
    if path:
        Path(path).write_text(text + "\n")
    return report


def _summary(reports: dict) -> dict:
    return {name: {"mean": r.mean, "num_undefined": r.num_undefined} for name, r in reports.items()}


# ---------------------------------------------------------------- data plumbing


def _add_dataset_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--features", required=required, help="feature matrix (TALRFEAT binary or CSV)")
    p.add_argument("--labels", help="per-item label lists (TALRLABL binary or CSV)")
    p.add_argument("--splits", help="JSON with train/query/database index lists")


def _add_affinity_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--affinity-mode", choices=AFFINITY_MODES, default=None)
    p.add_argument("--thresholds", type=_floats, default=None, help="decreasing distance quantiles, e.g. 0.05,0.01")
    p.add_argument("--level-values", type=_ints, default=None, help="increasing affinity values, e.g. 1,2,5,10")


def _load(args) -> tuple[DatasetFile, np.ndarray]:
    """Dataset plus features standardized with statistics of the training split."""
    ds = load_dataset(args.features, args.labels, args.splits)
    fit_rows = ds.splits.get("train", np.arange(len(ds.features)))
    return ds, Standardizer.fit(ds.features[fit_rows])(ds.features)


def _make_oracle(args, config: dict | None = None) -> AffinityOracle:
    config = config or {}
    mode = args.affinity_mode or config.get("affinity_mode", "single_label")
    quantiles = args.thresholds or config.get("thresholds", DEFAULT_QUANTILES)
    values = args.level_values or config.get("level_values", DEFAULT_LEVEL_VALUES)
    try:
        return AffinityOracle(mode, tuple(quantiles), tuple(values))
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _payload(oracle: AffinityOracle, ds: DatasetFile, x: np.ndarray) -> np.ndarray:
    """What the oracle compares: class ids, label indicators or features."""
    if oracle.mode == "threshold_multilevel":
        return x
    if ds.labels is None:
        raise DataError(f"affinity mode {oracle.mode!r} needs --labels")
    if oracle.mode == "single_label":
        return single_labels(ds.labels)
    return labels_to_indicator(ds.labels)


def _fit_oracle(oracle: AffinityOracle, payload: np.ndarray, ds: DatasetFile, seed: int) -> AffinityOracle:
    rows = ds.splits.get("train", np.arange(len(payload)))
    return oracle.fit(payload[rows], seed=seed)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synthetic_dataset(
        args.num_train, args.num_query, args.num_database, args.classes, args.dim, args.separation, args.seed
    )
    suffix = ".csv" if args.format == "csv" else ".bin"
    feat, lab = out / f"features{suffix}", out / f"labels{suffix}"
    if args.format == "csv":
        np.savetxt(feat, ds.features, delimiter=",", fmt="%.9g")
        lab.write_text("".join(f"{r[0]}\n" for r in ds.labels))
    else:
        write_features(feat, ds.features)
        write_labels(lab, ds.labels)
    (out / "splits.json").write_text(json.dumps({k: v.tolist() for k, v in ds.splits.items()}))
    print(f"wrote {feat}, {lab} and {out / 'splits.json'}")
    return EXIT_OK


# ---------------------------------------------------------------- train


_TRAIN_FLAGS = {
    "bits": "num_bits",
    "objective": "objective",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "epochs": "epochs",
    "alpha": "alpha",
    "alpha_growth": "alpha_growth",
    "alpha_cap": "alpha_cap",
    "delta": "delta",
    "seed": "seed",
}


def _train_config(args) -> tuple[TrainConfig, dict]:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    affinity = {k: raw.pop(k) for k in ("affinity_mode", "thresholds", "level_values") if k in raw}
    for flag, name in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            raw[name] = value
    try:
        return TrainConfig.from_dict(raw), affinity
    except (DataError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    config, affinity = _train_config(args)
    oracle = _make_oracle(args, affinity)
    t0 = time.perf_counter()
    ds, x = _load(args)
    payload = _payload(oracle, ds, x)
    oracle = _fit_oracle(oracle, payload, ds, config.seed)
    tr = ds.splits.get("train", np.arange(len(x)))
    model = HashModel.init(config.num_bits, x.shape[1], np.random.default_rng(config.seed), bias=config.bias)

    validate = None
    if not args.no_validate and {"query", "database"} <= set(ds.splits):
        q, db = ds.splits["query"], ds.splits["database"]
        lv = oracle.pair_levels(payload[q], payload[db])
        workers = thread_count()

        def validate(m: HashModel) -> dict:
            r = evaluate_codes(m.encode(x[q]), m.encode(x[db]), lv, oracle.levels, workers=workers)
            return {"AP_T": r["AP"].mean, "NDCG_T": r["NDCG"].mean}

    result = train(model, x[tr], payload[tr], oracle, config, validate=validate)
    save_checkpoint(args.out, result.model, result.alpha)
    elapsed = time.perf_counter() - t0
    body = {
        "config": {**config.to_dict(), "affinity": oracle.to_dict()},
        "checkpoint": str(args.out),
        "history": result.history_dicts(),
    }
    write_report(args.report, "train", body, {"total_seconds": elapsed})
    last = result.history[-1] if result.history else None
    print(f"saved {args.out}" + (f"; final objective {last.objective:.5f} {last.validation}" if last else ""))
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _codes_for_eval(args, ds: DatasetFile, x: np.ndarray) -> tuple[BinaryCodebook, BinaryCodebook, np.ndarray, np.ndarray]:
    q, db = ds.split("query"), ds.split("database")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        if model.input_dim != x.shape[1]:
            raise DataError(f"checkpoint expects dimension {model.input_dim}, features have {x.shape[1]}")
        return model.encode(x[q]), model.encode(x[db]), q, db
    qc, dc = BinaryCodebook.load(args.query_codes), BinaryCodebook.load(args.database_codes)
    if qc.num_items != len(q) or dc.num_items != len(db):
        raise DataError(
            f"codebooks hold {qc.num_items}/{dc.num_items} items, splits list {len(q)} queries and {len(db)} database items"
        )
    return qc, dc, q, db


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.query_codes and args.database_codes):
        raise UsageError("give either --checkpoint or both --query-codes and --database-codes")
    oracle = _make_oracle(args)
    t0 = time.perf_counter()
    ds, x = _load(args)
    payload = _payload(oracle, ds, x)
    oracle = _fit_oracle(oracle, payload, ds, args.seed)
    qc, dc, q, db = _codes_for_eval(args, ds, x)
    lv = oracle.pair_levels(payload[q], payload[db])
    t1 = time.perf_counter()
    reports = evaluate_codes(qc, dc, lv, oracle.levels, cutoff=args.cutoff, workers=thread_count())
    t2 = time.perf_counter()
    body = {
        "affinity": oracle.to_dict(),
        "num_bits": dc.num_bits,
        "num_queries": qc.num_items,
        "num_database": dc.num_items,
        "metrics": {name: r.to_dict() for name, r in reports.items()},
    }
    write_report(args.report, "eval", body, {"load_seconds": t1 - t0, "eval_seconds": t2 - t1})
    print(json.dumps(_summary(reports), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- tie-break audit


def cmd_tiebreak_audit(args) -> int:
    if not args.checkpoint and not args.random_bits:
        raise UsageError("give --checkpoint (repeatable) or --random-bits")
    oracle = _make_oracle(args)
    t0 = time.perf_counter()
    ds, x = _load(args)
    payload = _payload(oracle, ds, x)
    oracle = _fit_oracle(oracle, payload, ds, args.seed)
    q, db = ds.split("query"), ds.split("database")
    lv = oracle.pair_levels(payload[q], payload[db])

    # each source is (label, bits, seed, query codes, database codes)
    sources = []
    for path in args.checkpoint or []:
        model, _ = load_checkpoint(path)
        sources.append((str(path), model.num_bits, args.seed, model.encode(x[q]), model.encode(x[db])))
    for bits in args.random_bits or []:
        for seed in range(args.seed, args.seed + args.num_seeds):
            # sign random projections: a method-free code at every width
            model = HashModel.init(bits, x.shape[1], np.random.default_rng(seed), bias=False)
            sources.append((f"random-{bits}-seed{seed}", bits, seed, model.encode(x[q]), model.encode(x[db])))

    rows, groups = [], {}
    for label, bits, seed, qc, dc in sources:
        audit = audit_codes(qc, dc, lv, oracle.levels, args.metric, seed)
        ok = ~np.isnan(audit["tie_aware"])
        for i in np.flatnonzero(ok):
            rows.append([label, bits, seed, int(q[i])] + [float(audit[s][i]) for s in AUDIT_STRATEGIES])
        width = audit["optimistic"][ok] - audit["pessimistic"][ok]
        inside = (audit["pessimistic"][ok] <= audit["tie_aware"][ok] + 1e-12) & (
            audit["tie_aware"][ok] <= audit["optimistic"][ok] + 1e-12
        )
        g = groups.setdefault(bits, {"sources": [], "ranges": [], "inside": [], "means": {s: [] for s in AUDIT_STRATEGIES}})
        g["sources"].append(label)
        g["ranges"].append(float(width.mean()))
        g["inside"].append(float(inside.mean()))
        for s in AUDIT_STRATEGIES:
            g["means"][s].append(float(audit[s][ok].mean()))

    by_width = {
        str(bits): {
            "sources": g["sources"],
            "mean_range": float(np.mean(g["ranges"])),
            "fraction_within_range": float(np.mean(g["inside"])),
            **{f"mean_{s}": float(np.mean(v)) for s, v in g["means"].items()},
        }
        for bits, g in sorted(groups.items())
    }
    header = ["source", "bits", "seed", "query"] + list(AUDIT_STRATEGIES)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    body = {"metric": args.metric, "affinity": oracle.to_dict(), "by_bit_width": by_width, "columns": header, "rows": rows}
    write_report(args.report, "tiebreak-audit", body, {"total_seconds": time.perf_counter() - t0})
    print(json.dumps(by_width, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    objectives = args.objective or list(OBJECTIVES)
    t0 = time.perf_counter()
    results = []
    for name in objectives:
        r = check_objective(
            name,
            num_items=args.batch_size,
            num_bits=args.bits,
            dim=args.dim,
            num_levels=args.levels,
            alpha=args.alpha,
            h=args.h,
            tol=args.tol,
            seed=args.seed,
            path=args.path,
        )
        results.append(r)
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {name}: max rel error {r.max_rel_error:.3e} at {r.worst_coordinate} (path {r.path})")
    passed = all(r.passed for r in results)
    body = {
        "tolerance": args.tol,
        "h": args.h,
        "passed": passed,
        "results": [{k: (bool(v) if isinstance(v, np.bool_) else v) for k, v in r.to_dict().items()} for r in results],
    }
    write_report(args.report, "gradcheck", body, {"total_seconds": time.perf_counter() - t0})
    return EXIT_OK if passed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talr", description="Tie-aware hashing: evaluation and training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the Gaussian-cluster fixture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-train", type=int, default=2000)
    p.add_argument("--num-query", type=int, default=400)
    p.add_argument("--num-database", type=int, default=1600)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--separation", type=float, default=4.0, help="distance between cluster centres in std units")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train linear hash functions")
    _add_dataset_args(p)
    _add_affinity_args(p)
    p.add_argument("--config", help="JSON config; flags override its fields")
    p.add_argument("--bits", type=int)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-growth", type=float)
    p.add_argument("--alpha-cap", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="model.talr", help="checkpoint path")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--no-validate", action="store_true", help="skip per-epoch query/database evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="tie-aware AP / NDCG of Hamming ranking")
    _add_dataset_args(p)
    _add_affinity_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--query-codes", help="TALRCODE file for the query split")
    p.add_argument("--database-codes", help="TALRCODE file for the database split")
    p.add_argument("--cutoff", type=_positive_int, default=5000, help="k for AP@k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tiebreak-audit", help="metric ranges over tie-breaking strategies")
    _add_dataset_args(p)
    _add_affinity_args(p)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--random-bits", type=_ints, help="bit widths for sign-random-projection codes, e.g. 12,48")
    p.add_argument("--num-seeds", type=_positive_int, default=5)
    p.add_argument("--metric", choices=("AP", "NDCG"), default="AP")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="per-query table path")
    p.add_argument("--report", help="JSON report path")
    p.set_defaults(func=cmd_tiebreak_audit)

    p = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    p.add_argument("--objective", action="append", choices=OBJECTIVES)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--bits", type=_positive_int, default=8)
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--levels", type=int, default=2, choices=(2, 3, 4, 5))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--path", choices=("verified", "matrix", "naive"), default="verified")
    p.add_argument("--report", help="JSON report path")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"talr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"talr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TalrError, OSError) as exc:
        print(f"talr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
