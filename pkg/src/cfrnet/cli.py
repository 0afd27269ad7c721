"""Command-line entry point: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import json
import logging
import multiprocessing
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .metrics import detections_csv, timing_profile, write_pgm
from .synthetic import generate_dataset
from .training import (
    CHECKPOINT_NAME,
    CONFIG_NAME,
    RunConfig,
    ensure_dataset,
    evaluate,
    load_dataset,
    load_model,
    train,
)

log = logging.getLogger("cfrnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_SWEEP = (0, 1, 2, 3, 4)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_loops(text: str) -> list[int]:
    try:
        loops = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--loops expects a comma-separated list of integers, got {text!r}") from None
    if not loops or min(loops) < 0:
        raise UsageError("--loops needs at least one non-negative integer")
    return loops


def worker_cap(default: int) -> int:
    raw = os.environ.get("CFR_THREADS")
    if raw is None:
        return max(1, default)
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CFR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("CFR_THREADS must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfrnet", description="Cyclic fuse-and-refine multispectral detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="flat JSON config; unknown keys are errors")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--preset", choices=("pedestrian", "multiclass"))

    sp = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    common(sp)
    sp = sub.add_parser("train", help="train one detector")
    common(sp)
    sp.add_argument("--loops", help="CFR loop count (0 = average-fusion baseline)")
    sp = sub.add_parser("eval", help="evaluate a trained run on the test split")
    common(sp)
    sp.add_argument("--loops", help="evaluate with this many loops instead of the trained count")
    sp.add_argument("--timing", action="store_true", help="also time inference per loop count")
    sp.add_argument("--masks", action="store_true", help="write per-loop binarized masks as PGM")
    sp = sub.add_parser("ablate", help="loop-count sweep over seeds")
    common(sp)
    sp.add_argument("--loops", default=",".join(map(str, DEFAULT_SWEEP)))
    sp.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    sp = sub.add_parser("gradcheck", help="finite-difference suite over every op and a tiny model")
    sp.add_argument("--seed", type=int, default=0)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(preset=getattr(args, "preset", None))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args).with_overrides(data_seed=args.seed,
                                              data_dir=str(args.out) if args.out else None)
    manifest = generate_dataset(cfg.scene_spec(), cfg.n_train, cfg.n_test, cfg.data_seed, cfg.data_dir)
    print(f"manifest: {manifest.path}")
    print(f"train: {len(manifest.split('train'))}  test: {len(manifest.split('test'))}")
    print(f"sha256: {manifest.digest()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    loops = None
    if args.loops is not None:
        values = parse_loops(args.loops)
        if len(values) != 1:
            raise UsageError("train takes a single --loops value")
        loops = values[0]
    cfg = cfg.with_overrides(seed=args.seed, loops=loops, out_dir=str(args.out) if args.out else None)
    result = train(cfg, out_dir=cfg.out_dir,
                   on_epoch=lambda e: print(f"epoch {e['epoch']:3d}  loss {e['loss']:.5f}  "
                                            f"det {e['det']:.5f}  seg {e['seg']:.5f}", flush=True))
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _run_dir_config(args) -> tuple[RunConfig, Path]:
    run_dir = Path(args.out) if args.out else None
    if args.config:
        cfg = resolve_config(args)
        run_dir = run_dir or Path(cfg.out_dir)
    else:
        run_dir = run_dir or Path(RunConfig().out_dir)
        path = run_dir / CONFIG_NAME
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; pass --config or a trained run directory via --out")
        cfg = RunConfig.load(path)
    return cfg.with_overrides(seed=args.seed), run_dir


def write_report(run_dir: Path, cfg: RunConfig, evaluation, timing: Optional[dict] = None) -> dict:
    rep = evaluation.report
    if timing:
        rep.timing_per_loop = timing
    (run_dir / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    payload = {"label": cfg.label, "seed": rep.seed, "mAP": rep.mAP,
               "per_class_ap": {str(k): v for k, v in rep.per_class_ap.items()},
               "log_average_miss_rate": rep.log_average_miss_rate, "recall_at_fppi_1": rep.recall_at_fppi,
               "dice_per_loop": rep.dice_per_loop, "config": cfg.to_dict()}
    if timing:
        payload["timing_per_loop_s"] = {str(k): v for k, v in timing.items()}
    (run_dir / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return payload


def cmd_eval(args) -> int:
    cfg, run_dir = _run_dir_config(args)
    ckpt = run_dir / CHECKPOINT_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    model = load_model(cfg, ckpt)
    if args.loops is not None:
        values = parse_loops(args.loops)
        if len(values) != 1 or model.config.fusion != "cfr" or values[0] < 1:
            raise UsageError("eval --loops takes one value >= 1 and needs a CFR run")
        model.cfr_config.loops = values[0]
        cfg = cfg.with_overrides(loops=values[0])
    test = load_dataset(cfg, "test")
    ev = evaluate(model, test, cfg.to_dict(), cfg.seed)
    timing = None
    if args.timing:
        counts = list(range(1, model.config.loops + 1)) if model.config.fusion == "cfr" else [None]
        prof = timing_profile(model, test[0], counts)
        timing = {k if k is not None else 0: v.median for k, v in prof.items()}
    write_report(run_dir, cfg, ev, timing)
    (run_dir / "detections.csv").write_text(
        detections_csv({s.sample_id: d for s, d in zip(test, ev.detections)}), encoding="utf-8")
    if args.masks:
        mdir = run_dir / "masks"
        mdir.mkdir(exist_ok=True)
        for s, mt, mv in zip(test, ev.masks_t, ev.masks_v):
            for i, m in enumerate(mt):
                write_pgm(mdir / f"{s.sample_id}_t{i + 1}.pgm", m >= 0)
            for i, m in enumerate(mv):
                write_pgm(mdir / f"{s.sample_id}_v{i + 1}.pgm", m >= 0)
    print(ev.report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation


def run_cell(cfg_dict: dict, cell_dir: str) -> dict:
    """Train and evaluate one (loop count, seed) cell in isolation."""
    cfg = RunConfig.from_dict(cfg_dict)
    t0 = time.perf_counter()
    result = train(cfg, out_dir=cell_dir)
    train_s = time.perf_counter() - t0
    test = load_dataset(cfg, "test")
    t1 = time.perf_counter()
    ev = evaluate(result.model, test, cfg.to_dict(), cfg.seed)
    per_image_ms = 1000 * (time.perf_counter() - t1) / len(test)
    payload = write_report(Path(cell_dir), cfg, ev)
    payload["timing"] = {"train_s": train_s, "eval_ms_per_image": per_image_ms}
    return payload


def aggregate(loop_counts: Sequence[int], seeds: Sequence[int], cells: dict) -> list[dict]:
    """One row per loop count: per-seed metrics and their means over completed cells."""
    rows = []
    for k in loop_counts:
        done = [cells[(k, s)] for s in seeds if cells.get((k, s)) is not None]
        row = {"loops": k, "label": "Baseline" if k == 0 else f"CFR_{k}", "completed": len(done),
               "per_seed": {s: cells.get((k, s)) and {
                   "mAP": cells[(k, s)]["mAP"], "miss_rate": cells[(k, s)]["log_average_miss_rate"],
                   "dice": cells[(k, s)]["dice_per_loop"]} for s in seeds}}
        if done:
            row["mAP"] = float(np.mean([c["mAP"] for c in done]))
            mr = [c["log_average_miss_rate"] for c in done if c["log_average_miss_rate"] is not None]
            row["miss_rate"] = float(np.mean(mr)) if mr else None
            row["dice"] = [float(np.mean([c["dice_per_loop"][i] for c in done])) for i in range(k)]
        else:
            row["mAP"], row["miss_rate"], row["dice"] = None, None, []
        rows.append(row)
    return rows


def _fmt(v, pct=True) -> str:
    if v is None:
        return "absent"
    return f"{100 * v:.2f}" if pct else f"{v:.4f}"


def format_table(rows: list[dict], seeds: Sequence[int]) -> str:
    """Miss rate, mAP and per-loop DICE in percent; per-seed lines under each mean."""
    width = max([r["loops"] for r in rows] + [0])
    head = ["row", "seed", "miss_rate", "mAP"] + [f"DICE_{i + 1}" for i in range(width)]
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join([r["label"], "mean", _fmt(r["miss_rate"]), _fmt(r["mAP"])]
                               + [_fmt(d) for d in r["dice"]]))
        for s in seeds:
            c = r["per_seed"][s]
            if c is None:
                lines.append("\t".join([r["label"], str(s), "absent", "absent"] + ["absent"] * r["loops"]))
            else:
                lines.append("\t".join([r["label"], str(s), _fmt(c["miss_rate"]), _fmt(c["mAP"])]
                                       + [_fmt(d) for d in c["dice"]]))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    loop_counts = parse_loops(args.loops)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    base_seed = cfg.seed if args.seed is None else args.seed
    seeds = list(range(base_seed, base_seed + args.seeds))
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ensure_dataset(cfg)

    jobs = {}
    for k in loop_counts:
        for s in seeds:
            cell_cfg = cfg.with_overrides(loops=k, seed=s, fusion="cfr")
            jobs[(k, s)] = (cell_cfg.to_dict(), str(out / f"{cell_cfg.label}_seed{s}"))
    workers = min(worker_cap(os.cpu_count() or 1), len(jobs))
    cells = {}
    if workers == 1:
        for key, (d, cell_dir) in jobs.items():
            try:
                cells[key] = run_cell(d, cell_dir)
            except Exception as exc:
                log.error("cell loops=%d seed=%d failed: %s", key[0], key[1], exc)
                cells[key] = None
            _progress(key, cells[key])
    else:
        ctx = multiprocessing.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = {pool.submit(run_cell, d, cell_dir): key for key, (d, cell_dir) in jobs.items()}
            for fut in cf.as_completed(futures):
                key = futures[fut]
                try:
                    cells[key] = fut.result()
                except Exception as exc:
                    log.error("cell loops=%d seed=%d failed: %s", key[0], key[1], exc)
                    cells[key] = None
                _progress(key, cells[key])

    rows = aggregate(loop_counts, seeds, cells)
    table = format_table(rows, seeds)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    summary = {"config": cfg.to_dict(), "seeds": seeds, "loop_counts": loop_counts,
               "rows": [{**r, "per_seed": {str(s): v for s, v in r["per_seed"].items()}} for r in rows],
               "timing": {f"{k}_{s}": c["timing"] for (k, s), c in sorted(cells.items()) if c is not None}}
    (out / "ablation.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(table, end="")
    missing = [k for k, c in cells.items() if c is None]
    if missing:
        print(f"{len(missing)} cell(s) absent", file=sys.stderr)
    return EXIT_OK


def _progress(key, cell):
    k, s = key
    if cell is None:
        print(f"[cell] loops={k} seed={s} absent", file=sys.stderr, flush=True)
    else:
        print(f"[cell] loops={k} seed={s} mAP={cell['mAP']:.4f} dice={[round(d, 4) for d in cell['dice_per_loop']]}",
              file=sys.stderr, flush=True)


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    result = run_suite(seed=args.seed)
    print(result.to_text(), end="")
    return EXIT_OK if result.passed else EXIT_RUNTIME


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
