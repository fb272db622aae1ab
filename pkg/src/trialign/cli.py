"""Command-line surface: tri gradcheck | train | eval | sweep | bench.

Every subcommand is driven by the JSON run config (defaults apply when no
--config is given) and writes its artifacts under the output directory.
Exit codes: 0 success, 1 contract/config error, 2 numerical abort,
3 verification failure. Artifact bodies never embed timestamps, so
re-running a command with the same config overwrites byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import geometry, gradcheck
from .config import OutputConfig, RunConfig, build_model, default_config, load_config
from .errors import ConfigError, FormatError, NumericalAbort
from .evaluation import evaluate_stack, make_eval_fn
from .nn import load_checkpoint, save_checkpoint
from .train import train


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this tool reserves 2 for
    # numerical aborts, so map usage problems to exit 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="tri", description="Tri-modal alignment toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--config", help="JSON run config (gradcheck section optional)")
    p.add_argument("--out", help="output directory override")

    p = sub.add_parser("train", help="train and checkpoint the encoder stack")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="override model/optimizer seeds")
    p.add_argument("--out", help="output directory override")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--ckpt", required=True, help="TRI1 checkpoint to evaluate")
    p.add_argument("--out", help="output directory override")

    p = sub.add_parser("sweep", help="train+eval across one hyperparameter")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--param", required=True, choices=["alpha", "lambda"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", help="output directory override")

    p = sub.add_parser("bench", help="time the area kernel against cosine")
    p.add_argument("--dim", type=int, default=2048)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--out", help="write bench.json here as well")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, init_seed=args.seed),
                      optim=replace(cfg.optim, rng_seed=args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, output=OutputConfig(dir=args.out))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    gc = cfg.gradcheck
    if gc.checks is not None and len(gc.checks) == 0:
        print("[gradcheck] warning: empty check list, nothing verified")
        return 0
    results = gradcheck.run_checks(checks=gc.checks, n_configs=gc.configs_per_check,
                                   tolerance=gc.tolerance, seed=gc.seed,
                                   negative_control=gc.negative_control)
    out = _out_dir(cfg)
    gradcheck.write_csv(results, out / "gradcheck.csv")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[gradcheck] {r.name}: max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tolerance:.1e} {status}")
    failures = [r for r in results if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_err)
        print(f"[gradcheck] FAILED: worst offender {worst.name} "
              f"(max_rel_err={worst.max_rel_err:.3e})")
        return 3
    print(f"[gradcheck] all {len(results)} checks passed; report at {out / 'gradcheck.csv'}")
    return 0


def _run_training(cfg: RunConfig, out: Path):
    train_ds, test_ds = cfg.data.build()
    stack, matcher = build_model(cfg, train_ds)
    eval_fn = make_eval_fn(test_ds, cfg.loss)
    result = train(stack, matcher, train_ds, cfg.loss, cfg.optim, eval_fn=eval_fn)
    result.log.write_jsonl(out / "runlog.jsonl")
    save_checkpoint(result.stack, out / "final.ckpt")
    best = result.best_stack if result.best_stack is not None else result.stack
    save_checkpoint(best, out / "best.ckpt")
    evals = result.log.evals()
    report = {
        "best_step": result.best_step,
        "best_r1": result.best_metric,
        "final": evals[-1] if evals else None,
        "first": evals[0] if evals else None,
        "steps_run": len(result.log.steps()),
    }
    _write_json(out / "train_report.json", report)
    return result, report


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    try:
        result, report = _run_training(cfg, out)
    except NumericalAbort as exc:
        _write_json(out / "abort.json", {"step": exc.step, "components": exc.components})
        print(f"[train] aborted: {exc}")
        return 2
    final = report["final"] or {}
    print(f"[train] {report['steps_run']} steps; final r1={final.get('r1')}; "
          f"best r1={report['best_r1']} at step {report['best_step']}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        print(f"[eval] checkpoint not found: {ckpt}")
        return 1
    stack = load_checkpoint(ckpt)
    _, test_ds = cfg.data.build()
    ks = (1, 5, 10)
    metrics = evaluate_stack(stack, test_ds, cfg.loss, ks=ks)
    out = _out_dir(cfg)
    payload = {"checkpoint": ckpt.name, "objective": cfg.loss.objective.value,
               "alpha_t2d": cfg.loss.alpha, "alpha_d2t": cfg.loss.alpha_d2t,
               "metrics": metrics}
    _write_json(out / "eval_report.json", payload)
    with open(out / "eval_report.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["direction", "k", "recall"])
        for direction in ("d2t", "t2d"):
            for k in ks:
                writer.writerow([direction, k, metrics[f"r{k}_{direction}"]])
    print(f"[eval] r1={metrics['r1']:.4f} (d2t={metrics['r1_d2t']:.4f}, "
          f"t2d={metrics['r1_t2d']:.4f}); reports in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        print(f"[sweep] --values must be comma-separated numbers, got {args.values!r}")
        return 1
    if not values:
        print("[sweep] --values is empty")
        return 1
    out = _out_dir(cfg)
    rows = []
    for value in values:
        if args.param == "lambda":
            run_cfg = replace(cfg, loss=replace(cfg.loss, dtm_weight=value))
        else:
            run_cfg = replace(cfg, loss=replace(cfg.loss, alpha=value))
        run_dir = out / f"{args.param}_{value:g}"
        run_cfg = replace(run_cfg, output=OutputConfig(dir=str(run_dir)))
        run_dir.mkdir(parents=True, exist_ok=True)
        try:
            _, report = _run_training(run_cfg, run_dir)
            final = report["final"] or {}
            rows.append({"param": args.param, "value": value, "status": "ok",
                         "best_step": report["best_step"], "best_r1": report["best_r1"],
                         "r1": final.get("r1"), "r1_d2t": final.get("r1_d2t"),
                         "r1_t2d": final.get("r1_t2d"), "mean_area": final.get("mean_area")})
            print(f"[sweep] {args.param}={value:g}: r1={final.get('r1')}")
        except (NumericalAbort, ValueError, ConfigError) as exc:
            rows.append({"param": args.param, "value": value, "status": "failed",
                         "best_step": "", "best_r1": "", "r1": "", "r1_d2t": "",
                         "r1_t2d": "", "mean_area": ""})
            print(f"[sweep] {args.param}={value:g}: FAILED ({exc})")
    fields = ["param", "value", "status", "best_step", "best_r1", "r1",
              "r1_d2t", "r1_t2d", "mean_area"]
    with open(out / "sweep.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"[sweep] {len(rows)} rows written to {out / 'sweep.csv'}")
    return 0


def _median_seconds(kernel, repeats: int) -> float:
    for _ in range(3):  # warmup
        kernel()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        kernel()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def cmd_bench(args) -> int:
    if args.repeats < 1:
        print(f"[bench] --repeats must be >= 1, got {args.repeats}")
        return 1
    if args.dim < 1 or args.batch < 1:
        print("[bench] --dim and --batch must be >= 1")
        return 1
    rng = np.random.default_rng(0)

    def unit_rows(m):
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    t = unit_rows(rng.standard_normal((args.batch, args.dim)))
    v = unit_rows(rng.standard_normal((args.batch, args.dim)))
    a = unit_rows(rng.standard_normal((args.batch, args.dim)))

    area_s = _median_seconds(lambda: geometry.triangle_area_rows(t, v, a), args.repeats)
    cos_s = _median_seconds(lambda: geometry.cosine_rows(t, v), args.repeats)
    ratio = area_s / cos_s if cos_s > 0 else float("inf")
    payload = {"dim": args.dim, "batch": args.batch, "repeats": args.repeats,
               "area_seconds": area_s, "cosine_seconds": cos_s, "ratio": ratio}
    print(f"[bench] dim={args.dim} batch={args.batch}: "
          f"area={area_s:.6f}s cosine={cos_s:.6f}s ratio={ratio:.2f}x")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "bench.json", payload)
    if not (np.isfinite(area_s) and np.isfinite(cos_s) and area_s > 0 and cos_s > 0):
        print("[bench] timings are not positive/finite")
        return 1
    return 0


_COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"[tri] error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"[tri] numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
