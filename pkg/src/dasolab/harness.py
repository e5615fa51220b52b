"""Command-line experiment harness: run, ablate, sweep, gradcheck, report."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, parse_config, serialize_config, config_to_dict, with_overrides
from .errors import ConfigError
from .learner import RunResult, run_training
from .nn_core import Batches, LossSpec, finite_diff_check, init_model, softmax

log = logging.getLogger("dasolab")

OUT_ENV = "DASOLAB_OUT"
GRADCHECK_TOL = 1e-4

ABLATION_ARMS = {
    "daso": {},
    "fixmatch": {"loss.learner_mode": "fixmatch"},
    "blend_const_0": {"loss.learner_mode": "blend_const", "loss.blend_value": 0.0},
    "blend_const_1": {"loss.learner_mode": "blend_const", "loss.blend_value": 1.0},
    "blend_const_0.5": {"loss.learner_mode": "blend_const", "loss.blend_value": 0.5},
    "no_align": {"loss.lambda_align": 0.0},
    "unbalanced_queue": {"bank.balanced": False},
    "no_ema_encoder": {"bank.use_ema_encoder": False},
}


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


# --- serialisation ---------------------------------------------------------


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v) -> str:
    v = float(v)
    return "NA" if math.isnan(v) else repr(v)


def metric_rows(history: list[dict]):
    """Long-format ``(step, metric, class, value)`` rows; class is '' for scalars."""
    for rec in history:
        step = rec["step"]
        ev = rec["eval"]
        for name, val in (
            ("balanced_acc", ev.balanced_acc),
            ("overall_acc", ev.overall_acc),
            ("minority_acc", ev.minority_acc),
            ("pl_coverage", rec["pl_masked"].coverage),
        ):
            yield step, name, "", _fmt(val)
        for key in ("loss", "loss_cls", "loss_u", "loss_align", "mask_rate"):
            if key in rec:
                yield step, key, "", _fmt(rec[key])
        per_class = {
            "acc": ev.per_class_acc,
            "pl_recall_all": rec["pl_all"].recall,
            "pl_precision_all": rec["pl_all"].precision,
            "pl_rel_size_all": rec["pl_all"].rel_size,
            "pl_recall_masked": rec["pl_masked"].recall,
            "pl_precision_masked": rec["pl_masked"].precision,
            "m_hat": rec["m_hat"],
            "upsilon": rec["upsilon"],
        }
        for name, vec in per_class.items():
            for k, val in enumerate(vec):
                yield step, name, str(k), _fmt(val)


def metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "metric", "class", "value"])
    w.writerows(metric_rows(history))
    return buf.getvalue()


def summary_dict(result: RunResult) -> dict:
    out = dict(result.summary)
    out["config_echo"] = config_to_dict(result.config)
    out["seed"] = result.config.run.seed
    out["status"] = result.status
    if result.error:
        out["error"] = result.error
    return out


def write_run_dir(result: RunResult, run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    _atomic_write(run_dir / "config.yaml", serialize_config(result.config))
    _atomic_write(run_dir / "metrics.csv", metrics_csv(result.history))
    _atomic_write(run_dir / "summary.json", json.dumps(summary_dict(result), indent=2, sort_keys=True) + "\n")
    _atomic_write(run_dir / "status", result.status + "\n")
    meta = {"finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "wall_clock_s": result.wall_clock}
    _atomic_write(run_dir / "metadata.json", json.dumps(meta, indent=2) + "\n")
    return run_dir


def _run_one(cfg: RunConfig, run_dir: str) -> tuple[str, str, float | None]:
    try:
        result = run_training(cfg)
    except Exception as exc:  # a broken run must not sink the suite
        _atomic_write(Path(run_dir) / "status", f"failed\n{type(exc).__name__}: {exc}\n")
        return run_dir, "failed", None
    write_run_dir(result, Path(run_dir))
    return run_dir, result.status, result.summary.get("balanced_acc_median20")


def run_many(jobs: list[tuple[RunConfig, Path]], workers: int = 1):
    if workers <= 1:
        return [_run_one(cfg, str(d)) for cfg, d in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, [c for c, _ in jobs], [str(d) for _, d in jobs]))


# --- commands --------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = parse_config(args.config) if args.config else parse_config()
    if args.seed is not None:
        cfg = with_overrides(cfg, {"run.seed": args.seed})
    out = Path(args.out) if args.out else Path(cfg.run.out_dir or default_out_root()) / f"{cfg.run.name}_s{cfg.run.seed}"
    result = run_training(cfg, progress=lambda r: log.info("step %d balanced_acc %.4f", r["step"], r["eval"].balanced_acc))
    write_run_dir(result, out)
    print(f"{out}: status={result.status} balanced_acc_median20={result.summary.get('balanced_acc_median20')}")
    return 0 if result.status == "ok" else 1


def ablation_jobs(cfg: RunConfig, seeds: int, root: Path):
    base = with_overrides(cfg, {"loss.learner_mode": "fixmatch_daso"})
    jobs = []
    for arm, overrides in ABLATION_ARMS.items():
        for i in range(seeds):
            seed = cfg.run.seed + i
            arm_cfg = with_overrides(base, {**overrides, "run.name": arm, "run.seed": seed})
            jobs.append((arm_cfg, root / f"{arm}_s{seed}"))
    return jobs


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config) if args.config else parse_config()
    root = Path(args.out) if args.out else Path(cfg.run.out_dir or default_out_root()) / "ablate"
    results = run_many(ablation_jobs(cfg, args.seeds, root), args.jobs)
    failed = [d for d, status, _ in results if status != "ok"]
    table = format_report(collect_summaries([root]))
    _atomic_write(root / "comparison.md", table)
    print(table)
    if failed:
        print(f"{len(failed)} run(s) failed: {', '.join(failed)}", file=sys.stderr)
    return 0


def sweep_points(grid: dict):
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config) if args.config else parse_config()
    grid = yaml.safe_load(Path(args.grid).read_text()) if Path(args.grid).is_file() else yaml.safe_load(args.grid)
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError("grid must map dotted keys to lists of values", "grid")
    root = Path(args.out) if args.out else Path(cfg.run.out_dir or default_out_root()) / "sweep"
    jobs = []
    for point in sweep_points(grid):
        tag = ",".join(f"{k}={v}" for k, v in point.items())
        point_cfg = with_overrides(cfg, {**point, "run.name": f"{cfg.run.name}[{tag}]"})
        jobs.append((point_cfg, root / tag.replace("/", "_")))
    run_many(jobs, args.jobs)
    table = format_report(collect_summaries([root]))
    _atomic_write(root / "comparison.md", table)
    print(table)
    return 0


def gradcheck_problem(cfg: RunConfig | None = None, seed: int = 0):
    """A small composite-loss instance (labeled CE with logit adjustment,
    masked soft-target consistency, semantic alignment) on random data."""
    cfg = cfg or parse_config()
    K, d = cfg.dataset.K, cfg.dataset.d
    rng = np.random.default_rng(seed)
    params = init_model(cfg.layer_dims, K, seed)
    for w, b in params.encoder_layers:
        b += rng.uniform(0.05, 0.2, size=b.shape)  # keep features away from all-zero
    B, U = 8, 16
    C = np.abs(rng.normal(size=(K, cfg.model.feature_dim))) + 0.1
    counts = np.arange(K, 0, -1) * 5
    batches = Batches(
        x=rng.normal(size=(B, d)),
        y=np.eye(K)[rng.integers(K, size=B)],
        u=rng.normal(size=(U, d)),
        u_target=softmax(rng.normal(size=(U, K)) * 3),
        u_mask=(rng.random(U) < 0.6).astype(float),
        align_target=softmax(rng.normal(size=(U, K)) * 3),
        prototypes=C,
    )
    spec = LossSpec(lambda_u=1.0, lambda_align=cfg.loss.lambda_align or 1.0, unsup="ce",
                    T_proto=cfg.bank.T_proto, la_offset=cfg.loss.la_tau * np.log(counts))
    return params, spec, batches


def cmd_gradcheck(args) -> int:
    cfg = parse_config(args.config) if getattr(args, "config", None) else parse_config()
    params, spec, batches = gradcheck_problem(cfg)
    start = time.perf_counter()
    err = finite_diff_check(params, spec, batches, eps=args.eps)
    print(f"max relative error {err:.3e} ({time.perf_counter() - start:.2f}s)")
    return 0 if err < GRADCHECK_TOL else 1


def collect_summaries(dirs) -> list[dict]:
    out = []
    for d in dirs:
        for path in sorted(Path(d).rglob("summary.json")):
            out.append(json.loads(path.read_text()))
    return out


REPORT_COLUMNS = (
    ("balanced_acc_median20", "bal.acc"),
    ("minority_acc_median20", "minority acc"),
    ("pl_recall_minority", "PL recall (min.)"),
    ("pl_precision_minority", "PL precision (min.)"),
)


def aggregate(summaries: list[dict]) -> dict[str, dict[str, tuple[float, float, int]]]:
    groups: dict[str, list[dict]] = {}
    for s in summaries:
        groups.setdefault(s["config_echo"]["run"]["name"], []).append(s)
    table = {}
    for name, runs in groups.items():
        row = {}
        for key, _ in REPORT_COLUMNS:
            vals = [r[key] for r in runs if r.get(key) is not None and r.get("status") == "ok"]
            if vals:
                row[key] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
        table[name] = row
    return table


def format_report(summaries: list[dict]) -> str:
    table = aggregate(summaries)
    head = "| run | " + " | ".join(label for _, label in REPORT_COLUMNS) + " |"
    lines = [head, "|" + "---|" * (len(REPORT_COLUMNS) + 1)]
    for name, row in table.items():
        cells = []
        for key, _ in REPORT_COLUMNS:
            if key in row:
                mean, std, _ = row[key]
                cells.append(f"{100 * mean:.2f}±{100 * std:.2f}")
            else:
                cells.append("n/a")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    summaries = collect_summaries(args.dirs)
    if not summaries:
        print("no summary.json found", file=sys.stderr)
        return 1
    print(format_report(summaries), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dasolab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run the fixed ablation arm matrix")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="cartesian product over dotted-key value lists")
    s.add_argument("--config")
    s.add_argument("--grid", required=True, help="YAML file or inline YAML mapping")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference check of the composite loss")
    g.add_argument("--config")
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    rp = sub.add_parser("report", help="aggregate run directories into mean±std tables")
    rp.add_argument("dirs", nargs="+")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
