"""File formats: line-delimited JSON datasets and run outputs, YAML parameter files, report tables.

Every file starts with a header record naming its format and version.  Floats
are written with ``repr`` precision, so datasets round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import yaml

from .dynamics import DynamicsParams, LongitudinalHyperParams, VehicleGeometry
from .errors import FileError, SchemaError
from .estimator import FrameRecord
from .geometry import Pose3
from .integration import ControlTimeline
from .measurements import GyroStream, OdomMeasurement
from .simulation import GroundTruth, NoiseConfig, SimConfig, SimOutput

DATASET_FORMAT = "trackdyn-dataset"
STATES_FORMAT = "trackdyn-states"
PREDICTIONS_FORMAT = "trackdyn-predictions"
PARAMS_FORMAT = "trackdyn-params"
VERSION = 1
STREAMS = ("control", "gyro", "odom", "groundtruth", "params_truth")
PARAM_NAMES = ("gamma", "c_thr1", "c_thr2", "c_res", "c_tire")


def _f(x) -> float:
    return float(x)


def _vec(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _pose(T: Pose3) -> dict:
    return {"R": _vec(T.R), "t": _vec(T.t)}


def _open_lines(path: Path):
    try:
        with open(path) as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc


def _write_lines(path: Path, records) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, allow_nan=False, separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


class _Reader:
    """Field access with schema errors that name the file and line."""

    def __init__(self, source: str):
        self.source = source
        self.line = 0

    def fail(self, msg: str):
        raise SchemaError(f"{self.source}:{self.line}: {msg}")

    def parse(self, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            self.fail(f"invalid JSON ({exc.msg})")
        if not isinstance(obj, dict):
            self.fail("record must be an object")
        return obj

    def get(self, rec: dict, key: str):
        if key not in rec:
            self.fail(f"missing field {key!r}")
        return rec[key]

    def num(self, rec: dict, key: str) -> float:
        v = self.get(rec, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(f"field {key!r} must be a finite number")
        return float(v)

    def arr(self, rec: dict, key: str, n: int) -> np.ndarray:
        v = self.get(rec, key)
        if not isinstance(v, list) or len(v) != n:
            self.fail(f"field {key!r} must be a list of {n} numbers")
        try:
            a = np.array(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(f"field {key!r} must be numeric")
        if not np.all(np.isfinite(a)):
            self.fail(f"field {key!r} must be finite")
        return a

    def pose(self, rec: dict, key: str) -> Pose3:
        d = self.get(rec, key)
        if not isinstance(d, dict):
            self.fail(f"field {key!r} must be an object with R and t")
        return Pose3(self.arr(d, "R", 9).reshape(3, 3), self.arr(d, "t", 3))

    def header(self, lines: list, fmt: str) -> dict:
        if not lines:
            self.fail("empty file")
        self.line = 1
        h = self.parse(lines[0])
        if h.get("kind") != "header" or h.get("format") != fmt:
            self.fail(f"first record must be a {fmt} header")
        if h.get("version") != VERSION:
            self.fail(f"unsupported version {h.get('version')!r}")
        return h


# ---------------------------------------------------------------------------
# simulator config in the dataset header (raw SI values, exact)


def _sim_config_dict(cfg: SimConfig) -> dict:
    return {
        "geometry": _vec(cfg.geometry.as_array()),
        "params_schedule": [{"t": _f(t), "params": _vec(p.as_array())} for t, p in cfg.params_schedule],
        "extrinsics": _pose(cfg.extrinsics),
        "hyper": _vec(cfg.hyper.as_array()),
        "noise": _vec([cfg.noise.rel_trans, cfg.noise.rel_rot, cfg.noise.vel, cfg.noise.gyro, cfg.noise.bias_rw]),
        "odom_rate": _f(cfg.odom_rate),
        "gyro_rate": _f(cfg.gyro_rate),
        "control_rate": _f(cfg.control_rate),
        "tire_saturation": _f(cfg.tire_saturation),
        "initial_bias": _vec(cfg.initial_bias),
        "odom_lag": int(cfg.odom_lag),
        "seed": int(cfg.seed),
    }


def _sim_config_from(rd: _Reader, d) -> SimConfig:
    if not isinstance(d, dict):
        rd.fail("header 'sim' must be an object")
    sched = rd.get(d, "params_schedule")
    if not isinstance(sched, list) or not sched:
        rd.fail("params_schedule must be a non-empty list")
    try:
        return SimConfig(
            geometry=VehicleGeometry(*rd.arr(d, "geometry", 4)),
            params_schedule=[(rd.num(e, "t"), DynamicsParams.from_array(rd.arr(e, "params", 5))) for e in sched],
            extrinsics=rd.pose(d, "extrinsics"),
            hyper=LongitudinalHyperParams.from_array(rd.arr(d, "hyper", 3)),
            noise=NoiseConfig(*rd.arr(d, "noise", 5)),
            odom_rate=rd.num(d, "odom_rate"),
            gyro_rate=rd.num(d, "gyro_rate"),
            control_rate=rd.num(d, "control_rate"),
            tire_saturation=rd.num(d, "tire_saturation"),
            initial_bias=tuple(rd.arr(d, "initial_bias", 3)),
            odom_lag=int(rd.num(d, "odom_lag")),
            seed=int(rd.num(d, "seed")),
        )
    except (TypeError, ValueError) as exc:
        rd.fail(f"invalid simulator config: {exc}")


# ---------------------------------------------------------------------------
# datasets


def dataset_records(data: SimOutput, meta: dict | None = None):
    """Header followed by every stream, each in time order."""
    yield {
        "kind": "header",
        "format": DATASET_FORMAT,
        "version": VERSION,
        "meta": dict(meta or {}),
        "sim": _sim_config_dict(data.config),
        "initial_pose": _pose(data.initial_pose),
    }
    c = data.ctrl
    for i in range(len(c)):
        yield {"kind": "control", "t": _f(c.t[i]), "u_thr": _f(c.u_thr[i]), "u_str": _f(c.u_str[i])}
    g = data.gyro
    for i in range(len(g)):
        yield {"kind": "gyro", "t": _f(g.t[i]), "rate": _vec(g.rate[i]), "dtheta": _vec(g.dtheta[i]), "dt": _f(g.dt[i])}
    for m in data.odom:
        rel = [{"ref": int(k), **_pose(T)} for k, T in sorted(m.rel.items())]
        yield {"kind": "odom", "t": _f(m.t), "index": int(m.index), "vel": _vec(m.vel), "rel": rel}
    gt = data.gt
    for i in range(len(gt)):
        yield {
            "kind": "groundtruth",
            "t": _f(gt.t[i]),
            "pose": _pose(gt.poses[i]),
            "vel_world": _vec(gt.vel_world[i]),
            "body": _vec(gt.body[i]),
            "planar": _vec(gt.planar[i]),
            "bias": _vec(gt.bias[i]),
            "slips": _vec(gt.slips[i]),
        }
    for t, p in data.config.params_schedule:
        yield {"kind": "params_truth", "t": _f(t), "params": _vec(p.as_array())}


def save_dataset(path, data: SimOutput, meta: dict | None = None) -> None:
    _write_lines(Path(path), dataset_records(data, meta))


def load_dataset(path) -> SimOutput:
    """Parse and validate a dataset file; ``meta`` from the header is attached as ``data.meta``."""
    path = Path(path)
    lines = _open_lines(path)
    rd = _Reader(str(path))
    h = rd.header(lines, DATASET_FORMAT)
    cfg = _sim_config_from(rd, rd.get(h, "sim"))
    initial_pose = rd.pose(h, "initial_pose")
    streams = {k: [] for k in STREAMS}
    last_t = {k: -math.inf for k in STREAMS}
    for n, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rd.line = n
        rec = rd.parse(text)
        kind = rd.get(rec, "kind")
        if kind not in streams:
            rd.fail(f"unknown record kind {kind!r}")
        t = rd.num(rec, "t")
        if t <= last_t[kind]:
            rd.fail(f"{kind} timestamps must be strictly increasing")
        last_t[kind] = t
        if kind == "control":
            u = (t, rd.num(rec, "u_thr"), rd.num(rec, "u_str"))
            if not (0.0 <= u[1] <= 1.0 and -1.0 <= u[2] <= 1.0):
                rd.fail("control inputs out of bounds")
            streams[kind].append(u)
        elif kind == "gyro":
            streams[kind].append((t, rd.arr(rec, "rate", 3), rd.arr(rec, "dtheta", 3), rd.num(rec, "dt")))
        elif kind == "odom":
            rel = {}
            refs = rd.get(rec, "rel")
            if not isinstance(refs, list):
                rd.fail("odom 'rel' must be a list")
            for e in refs:
                rel[int(rd.num(e, "ref"))] = Pose3(rd.arr(e, "R", 9).reshape(3, 3), rd.arr(e, "t", 3))
            streams[kind].append(OdomMeasurement(int(rd.num(rec, "index")), t, rd.arr(rec, "vel", 3), rel))
        elif kind == "groundtruth":
            streams[kind].append(
                (t, rd.pose(rec, "pose"), rd.arr(rec, "vel_world", 3), rd.arr(rec, "body", 3), rd.arr(rec, "planar", 3), rd.arr(rec, "bias", 3), rd.arr(rec, "slips", 2))
            )
        else:
            streams[kind].append((t, DynamicsParams.from_array(rd.arr(rec, "params", 5))))
    rd.line = 0
    if not streams["control"]:
        rd.fail("no control records")
    if not streams["odom"]:
        rd.fail("no odom records")
    ctrl = ControlTimeline(*map(np.array, zip(*streams["control"])))
    gy = streams["gyro"]
    gyro = GyroStream(
        np.array([r[0] for r in gy]),
        np.array([r[1] for r in gy]).reshape(-1, 3),
        np.array([r[2] for r in gy]).reshape(-1, 3),
        np.array([r[3] for r in gy]),
    )
    g = streams["groundtruth"]
    gt = GroundTruth(
        np.array([r[0] for r in g]),
        [r[1] for r in g],
        np.array([r[2] for r in g]).reshape(-1, 3),
        np.array([r[3] for r in g]).reshape(-1, 3),
        np.array([r[4] for r in g]).reshape(-1, 3),
        np.array([r[5] for r in g]).reshape(-1, 3),
        np.array([r[6] for r in g]).reshape(-1, 2),
    )
    if streams["params_truth"]:
        cfg.params_schedule = streams["params_truth"]
    out = SimOutput(cfg, ctrl, gt, gyro, streams["odom"], initial_pose)
    out.meta = h.get("meta", {})
    return out


# ---------------------------------------------------------------------------
# parameter files


def save_params(path, params: DynamicsParams, hyper: LongitudinalHyperParams, extrinsics: Pose3, extra: dict | None = None) -> None:
    doc = {
        "format": PARAMS_FORMAT,
        "version": VERSION,
        "params": dict(zip(PARAM_NAMES, _vec(params.as_array()))),
        "hyper": dict(zip(("psi", "tau", "sigma"), _vec(hyper.as_array()))),
        "extrinsics": {"rotation": _vec(extrinsics.R), "translation": _vec(extrinsics.t)},
    }
    doc.update(extra or {})
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(doc, sort_keys=False))
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> tuple[DynamicsParams, LongitudinalHyperParams, Pose3, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileError(f"parameter file {path} does not exist")
    rd = _Reader(str(path))
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: invalid YAML: {exc}") from exc
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != PARAMS_FORMAT:
        rd.fail(f"not a {PARAMS_FORMAT} file")
    if doc.get("version") != VERSION:
        rd.fail(f"unsupported version {doc.get('version')!r}")
    p, h, e = rd.get(doc, "params"), rd.get(doc, "hyper"), rd.get(doc, "extrinsics")
    if not all(isinstance(x, dict) for x in (p, h, e)):
        rd.fail("params, hyper and extrinsics must be mappings")
    try:
        params = DynamicsParams(*(rd.num(p, k) for k in PARAM_NAMES))
        hyper = LongitudinalHyperParams(*(rd.num(h, k) for k in ("psi", "tau", "sigma")))
    except ValueError as exc:
        rd.fail(str(exc))
    ext = Pose3(rd.arr(e, "rotation", 9).reshape(3, 3), rd.arr(e, "translation", 3))
    rest = {k: v for k, v in doc.items() if k not in ("format", "version", "params", "hyper", "extrinsics")}
    return params, hyper, ext, rest


# ---------------------------------------------------------------------------
# run outputs


def _state_record(r: FrameRecord) -> dict:
    return {
        "kind": "state",
        "index": int(r.index),
        "t": _f(r.t),
        "pose": _pose(r.pose),
        "vel": _vec(r.vel),
        "bg": _vec(r.bg),
        "ext": _pose(r.ext),
        "params": _vec(r.params),
        "body_vel": _vec(r.body_vel),
        "gate": bool(r.gate),
        "bias_variance": _f(r.bias_variance) if math.isfinite(r.bias_variance) else None,
        "iterations": int(r.iterations),
        "seconds": _f(r.seconds),
    }


def save_states(path, records: list, header: dict) -> None:
    head = {"kind": "header", "format": STATES_FORMAT, "version": VERSION, **header}
    _write_lines(Path(path), [head, *(_state_record(r) for r in records)])


def load_states(path) -> tuple[dict, list]:
    path = Path(path)
    lines = _open_lines(path)
    rd = _Reader(str(path))
    h = rd.header(lines, STATES_FORMAT)
    out = []
    for n, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rd.line = n
        rec = rd.parse(text)
        bv = rec.get("bias_variance")
        out.append(
            FrameRecord(
                int(rd.num(rec, "index")),
                rd.num(rec, "t"),
                rd.pose(rec, "pose"),
                rd.arr(rec, "vel", 3),
                rd.arr(rec, "bg", 3),
                rd.pose(rec, "ext"),
                rd.arr(rec, "params", 5),
                rd.arr(rec, "body_vel", 3),
                bool(rd.get(rec, "gate")),
                math.inf if bv is None else float(bv),
                int(rd.num(rec, "iterations")),
                rd.num(rec, "seconds"),
            )
        )
        if len(out) > 1 and out[-1].t <= out[-2].t:
            rd.fail("state timestamps must be strictly increasing")
    return h, out


def save_param_trace(path, records: list) -> None:
    """One row per frame once the model coupling is enabled."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *PARAM_NAMES])
            for r in records:
                if r.gate:
                    w.writerow([repr(float(r.t)), *(repr(float(v)) for v in r.params)])
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


def save_predictions(path, rows: list, header: dict) -> None:
    head = {"kind": "header", "format": PREDICTIONS_FORMAT, "version": VERSION, **header}
    _write_lines(Path(path), [head, *rows])


def load_predictions(path) -> tuple[dict, list]:
    path = Path(path)
    lines = _open_lines(path)
    rd = _Reader(str(path))
    head = rd.header(lines, PREDICTIONS_FORMAT)
    rows = []
    for n, text in enumerate(lines[1:], start=2):
        if text.strip():
            rd.line = n
            rows.append(rd.parse(text))
    return head, rows


def save_json(path, obj) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, allow_nan=False))
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc


def save_table(path, header: list, rows: list) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc
