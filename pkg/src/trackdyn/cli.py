"""``trackdyn`` command line: simulate, calibrate, run, evaluate, report.

Failures print ``{"error": <kind>, "message": ...}`` to stderr and exit with
status 2; ``kind`` is the exception class name (``SchemaError``, ``FileError``, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio, pipeline
from .config import load_config
from .dynamics import LongitudinalHyperParams
from .errors import FileError, SchemaError, TrackDynError
from .estimator import FrameRecord
from .evaluation import horizon_steps
from .simulation import SCRIPT_NAMES


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("horizons must be positive")
    return vals


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scripts = args.scripts or cfg.sim.scripts
    unknown = [s for s in scripts if s not in SCRIPT_NAMES]
    if unknown:
        raise SchemaError(f"unknown scripts {unknown}; available: {list(SCRIPT_NAMES)}")
    out = Path(args.out)
    single = len(scripts) == 1 and out.suffix == ".jsonl"
    written = []
    for name in scripts:
        data = pipeline.simulate_script(cfg, name, args.seed)
        path = out if single else out / f"{name}.jsonl"
        fileio.save_dataset(path, data, {"script": name, "duration": cfg.sim.duration})
        written.append(str(path))
    _emit({"datasets": written})
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    datasets = [fileio.load_dataset(p) for p in args.datasets]
    init = init_ext = None
    if args.params:
        init, _, init_ext, _ = fileio.load_params(args.params)
    outcome = pipeline.calibrate_datasets(datasets, cfg, init, init_ext, args.seed)
    r = outcome.result
    extra = {
        "cost": float(r.cost),
        "iterations": int(r.iterations),
        "initial_params": dict(zip(fileio.PARAM_NAMES, map(float, outcome.init_params.as_array()))),
        "datasets": [str(p) for p in args.datasets],
    }
    fileio.save_params(args.out, r.params, r.hyper, r.extrinsics, extra)
    _emit({"params": str(args.out), **extra, "result": dict(zip(fileio.PARAM_NAMES, map(float, r.params.as_array())))})
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if not args.params:
        raise FileError("a parameter file is required (--params)")
    params, hyper, ext, _ = fileio.load_params(args.params)
    data = fileio.load_dataset(args.dataset)
    run = pipeline.run_dataset(data, cfg, params, hyper, ext, args.horizons)
    out = Path(args.out)
    header = {
        "dataset": str(args.dataset),
        "sequence": data.meta.get("script", Path(args.dataset).stem),
        "initial_params": [float(v) for v in params.as_array()],
        "hyper": [float(v) for v in hyper.as_array()],
        "diagnostics": run.diagnostics,
    }
    fileio.save_states(out / "states.jsonl", run.records, header)
    fileio.save_param_trace(out / "params.csv", run.records)
    fileio.save_predictions(out / "predictions.jsonl", pipeline.prediction_rows(run), {"horizons": run.horizons, "frame_dt": run.frame_dt, "sequence": header["sequence"]})
    secs = [r.seconds for r in run.records]
    _emit(
        {
            "out": str(out),
            "frames": len(run.records),
            "gate_on_frames": sum(r.gate for r in run.records),
            "mean_step_ms": 1e3 * float(np.mean(secs)) if secs else 0.0,
            "final_params": dict(zip(fileio.PARAM_NAMES, map(float, run.records[-1].params))) if run.records else {},
        }
    )
    return 0


def _records_from_truth(data) -> list:
    """Ground truth dressed as estimator output (an ideal estimate)."""
    gt = data.gt
    return [
        FrameRecord(i, float(gt.t[i]), gt.poses[i], gt.vel_world[i], gt.bias[i], data.config.extrinsics, data.config.params_at(float(gt.t[i])).as_array(), gt.body[i], True, 0.0, 0, 0.0)
        for i in range(len(gt))
    ]


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    data = fileio.load_dataset(args.dataset)
    run = Path(args.run)
    starts = preds = None
    hyper = None
    sequence = data.meta.get("script", Path(args.dataset).stem)
    if run.is_dir():
        states = run / "states.jsonl"
        if not states.is_file():
            raise FileError(f"{states} does not exist")
        head, records = fileio.load_states(states)
        if "hyper" in head:
            hyper = LongitudinalHyperParams.from_array(head["hyper"])
        sequence = head.get("sequence", sequence)
        pred_path = run / "predictions.jsonl"
        if pred_path.is_file():
            phead, rows = fileio.load_predictions(pred_path)
            have = set(horizon_steps(phead.get("horizons", []), data.frame_dt).values())
            want = args.horizons or cfg.evaluation.horizons
            missing = [h for h, k in horizon_steps(want, data.frame_dt).items() if k not in have]
            if missing:
                raise SchemaError(f"{pred_path} has no predictions for horizons {missing}")
            starts, preds = pipeline.parse_prediction_rows(rows)
    elif run.is_file():
        try:
            head, records = fileio.load_states(run)
        except SchemaError:
            records = _records_from_truth(fileio.load_dataset(run))
    else:
        raise FileError(f"{run} does not exist")
    report = pipeline.evaluate_run(data, records, cfg, starts, preds, args.horizons, hyper)
    report["sequence"] = sequence
    out = Path(args.out)
    fileio.save_json(out, report)
    header, rows = pipeline.report_rows({sequence: report}, report["horizons"])
    fileio.save_table(out.with_suffix(".csv"), header, rows[:-1])
    _emit({"report": str(out), "tracking": report["tracking"], "sequence": sequence})
    return 0


def cmd_report(args) -> int:
    reports = {}
    for p in args.evaluations:
        rep = fileio.load_json(p)
        if not isinstance(rep, dict) or "tracking" not in rep:
            raise SchemaError(f"{p} is not an evaluation report")
        name = rep.get("sequence", Path(p).stem)
        while name in reports:
            name += "'"
        reports[name] = rep
    horizons = args.horizons or next(iter(reports.values())).get("horizons", [])
    header, rows = pipeline.report_rows(reports, horizons)
    out = Path(args.out)
    fileio.save_table(out.with_suffix(".csv"), header, rows)
    fileio.save_json(out.with_suffix(".json"), {"header": header, "rows": [[v if isinstance(v, str) or np.isfinite(v) else None for v in r] for r in rows]})
    print(pipeline.format_table(header, rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trackdyn", description="Single-track dynamics estimation laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate datasets from built-in control scripts")
    p.add_argument("--config")
    p.add_argument("--scripts", type=_names, help=f"comma-separated, from {', '.join(SCRIPT_NAMES)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="directory, or a .jsonl file for a single script")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="two-stage offline parameter estimation")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--config")
    p.add_argument("--params", help="initial parameter file (default: perturbed truth)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run the sliding-window estimator")
    p.add_argument("dataset")
    p.add_argument("--params")
    p.add_argument("--config")
    p.add_argument("--horizons", type=_floats)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="tracking and prediction RPE of a run")
    p.add_argument("run", help="run output directory or states file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--horizons", type=_floats)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate evaluation reports into one table")
    p.add_argument("evaluations", nargs="+")
    p.add_argument("--horizons", type=_floats)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrackDynError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
