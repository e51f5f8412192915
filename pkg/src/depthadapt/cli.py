"""Command-line entry point: dataset synthesis, staged training, evaluation,
gradient verification, and multi-run reporting.

Exit codes: 0 success, 1 verification failure, 2 usage/config error. All
randomness flows from config seeds; reruns with identical arguments reproduce
identical outputs. PPEA_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import jsonschema


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def cmd_synth(args) -> int:
    from .datasynth import generate_dataset

    manifest = generate_dataset(args.out, args.variant, args.count, args.seed,
                                args.height, args.width)
    print(manifest)
    return 0


def _build_stage_model(run_cfg, stage_cfg):
    from .networks import build_model

    decoder_adapter = stage_cfg.stage == 2 and stage_cfg.plan == "stage"
    return build_model(run_cfg.encoder, run_cfg.adapter, decoder_adapter,
                       run_cfg.bin_count, seed=run_cfg.seed)


def cmd_train(args) -> int:
    from .config import load_config
    from .training import run_stage

    cfg = load_config(args.config)
    stage_cfg = {1: cfg.stage1, 2: cfg.stage2}[args.stage]
    if stage_cfg is None:
        return _err(f"config has no stage{args.stage} section")
    if args.init_from:
        stage_cfg.init_from = args.init_from
    if args.stage == 2 and stage_cfg.plan == "stage" and not stage_cfg.init_from:
        return _err("stage 2 requires --init-from or config init_from")
    out_dir = Path(cfg.output_dir) / f"stage{args.stage}"
    model = _build_stage_model(cfg, stage_cfg)
    result = run_stage(stage_cfg, cfg.encoder, cfg.adapter, cfg.loss, out_dir,
                       cfg.bin_count, model=model)
    print(result.checkpoint_path)
    return 0


def model_from_checkpoint(ckpt, run_cfg=None):
    """Rebuild a model matching a checkpoint's structure and load it."""
    from .adapters import AdapterConfig
    from .checkpoint import apply_checkpoint
    from .config import parse_config
    from .networks import StudentState, build_model

    cfg = run_cfg if run_cfg is not None else parse_config({"seed": 0, "output_dir": "."})
    keys = ckpt.entries
    has_enc_adapters = any(".encoder." in k and ".adapter." in k for k in keys)
    has_dec_adapter = any(".decoder.adapter." in k for k in keys)
    reduce_key = "param.student.reduce.weight"
    c0 = cfg.encoder.stage_channels[0]
    bin_count = int(keys[reduce_key].shape[1]) - c0 if reduce_key in keys else cfg.bin_count
    model = build_model(cfg.encoder, cfg.adapter if has_enc_adapters else None,
                        has_dec_adapter, bin_count, seed=cfg.seed)
    state = StudentState(bin_count)
    report = apply_checkpoint(ckpt, model, state)
    missing_real = [m for m in report.missing if ".adapter." not in m]
    if missing_real:
        raise ValueError(f"checkpoint does not match the model config; missing {missing_real[:3]}"
                         " (pass --config with the model section used in training)")
    return model, state


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_config
    from .datasynth import Dataset
    from .metrics import format_table
    from .training import evaluate_model

    run_cfg = load_config(args.config) if args.config else None
    ckpt = load_checkpoint(args.ckpt)
    model, state = model_from_checkpoint(ckpt, run_cfg)
    manifest = Path(args.dataset)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    report, per_frame = evaluate_model(model, Dataset(manifest), args.network, state,
                                       limit=args.limit)
    print(format_table({args.network: report}))
    if args.out:
        payload = {"network": args.network, "checkpoint": str(args.ckpt),
                   "dataset": str(manifest), "metrics": json.loads(report.to_json()),
                   "per_frame": [f.row() for f in per_frame]}
        Path(args.out).write_text(json.dumps(payload, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import END_TO_END_TOL, PRIMITIVE_TOL, run_suite, suite_passes

    if args.dtype != "f64":
        return _err("only f64 gradient checking is supported")
    report = run_suite(seed=args.seed)
    width = max(len(k) for k in report)
    ok = suite_passes(report)
    for name, errv in sorted(report.items()):
        tol = END_TO_END_TOL if name in ("loss_pipeline_8x8", "network_params_32x32") else PRIMITIVE_TOL
        status = "ok" if errv < tol else "FAIL"
        print(f"{name:<{width}}  max_rel_err={errv:.3e}  tol={tol:.0e}  {status}")
    print(f"gradcheck: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_report(args) -> int:
    from .metrics import METRIC_COLUMNS

    rows = []
    curves = []
    for run_dir in args.runs:
        run = Path(run_dir)
        hist_path = run / "eval_history.json"
        if not hist_path.exists():
            return _err(f"missing eval history in {run_dir}")
        history = json.loads(hist_path.read_text())
        final = history[-1]
        for net in ("teacher", "student"):
            rows.append((run.name, net, final["epoch"], final[net]))
        for rec in history:
            curves.append((run.name, rec["epoch"], *rec["teacher"], *rec["student"]))
    lines = [f"{'run':>20} {'network':>8} {'epoch':>5} " +
             " ".join(f"{c:>9}" for c in METRIC_COLUMNS)]
    for name, net, epoch, vals in rows:
        lines.append(f"{name:>20} {net:>8} {epoch:>5} " + " ".join(f"{v:9.4f}" for v in vals))
    table = "\n".join(lines)
    print(table)
    out = Path(args.out)
    out.write_text(table + "\n")
    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "epoch"] + [f"teacher_{c}" for c in METRIC_COLUMNS]
                        + [f"student_{c}" for c in METRIC_COLUMNS])
        writer.writerows(curves)
    print(csv_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthadapt",
                                description="progressive adapter depth estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--variant", required=True, choices=["static", "dynamic"])
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=192)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="run one training stage from a config")
    tp.add_argument("--config", required=True)
    tp.add_argument("--stage", type=int, required=True, choices=[1, 2])
    tp.add_argument("--init-from", dest="init_from", default=None)
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--network", required=True, choices=["teacher", "student"])
    ep.add_argument("--config", default=None)
    ep.add_argument("--out", default=None)
    ep.add_argument("--limit", type=int, default=None)
    ep.set_defaults(fn=cmd_eval)

    gp = sub.add_parser("gradcheck", help="finite-difference verification suite")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--dtype", default="f64", choices=["f64"])
    gp.set_defaults(fn=cmd_gradcheck)

    rp = sub.add_parser("report", help="collate eval results from multiple runs")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError,
            jsonschema.ValidationError) as e:
        return _err(str(e))
    except Exception:
        raise


if __name__ == "__main__":
    sys.exit(main())
