"""File formats: CANF feature files, detection/trajectory/ground-truth CSVs, event logs, model JSON."""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cantrack.aggregation import CanModel, ClassifierHead, MetaNorm, OptimizerState
from cantrack.association import AssociationEvent, BBox, Detection, Trajectory
from cantrack.errors import ValidationError
from cantrack.metrics import FrameLog
from cantrack.nn_core import LayerParams, MlpParams

CANF_MAGIC = b"CANF"
CANF_VERSION = 1
_CANF_HEADER = struct.Struct("<4sHII")

MODEL_SCHEMA_VERSION = 1

DETECTION_FIELDS = ["camera", "frame", "x", "y", "w", "h", "feature_id", "gt_identity"]
GT_FIELDS = ["camera", "frame", "x", "y", "w", "h", "gt_identity"]
TRAJECTORY_FIELDS = ["camera", "frame", "x", "y", "w", "h", "track_id", "global_identity"]


def _num(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# features


def write_canf(path: str | Path, features: np.ndarray) -> None:
    features = np.atleast_2d(np.asarray(features))
    count, dim = features.shape if features.size else (0, features.shape[-1] if features.ndim == 2 else 0)
    with open(path, "wb") as fh:
        fh.write(_CANF_HEADER.pack(CANF_MAGIC, CANF_VERSION, count, dim))
        fh.write(features.astype("<f4").tobytes())


def read_canf(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _CANF_HEADER.size:
        raise ValidationError(f"{path}: too short for a CANF header")
    magic, version, count, dim = _CANF_HEADER.unpack_from(data)
    if magic != CANF_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != CANF_VERSION:
        raise ValidationError(f"{path}: unsupported CANF version {version}")
    expected = _CANF_HEADER.size + 4 * count * dim
    if len(data) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes for {count}x{dim} features, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_CANF_HEADER.size).reshape(count, dim)
    return arr.astype(np.float64)


def write_features_csv(path: str | Path, features: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"v{k + 1}" for k in range(features.shape[1])])
        for i, row in enumerate(features):
            w.writerow([i] + [_num(v) for v in row])


def read_features_csv(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise ValidationError(f"{path}: first column must be 'id'")
        for lineno, row in enumerate(reader, start=2):
            try:
                idx = int(row[0])
                vals = [float(v) for v in row[1:]]
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if idx != len(rows):
                raise ValidationError(f"{path}:{lineno}: ids must run 0..n-1 in order")
            rows.append(vals)
    return np.array(rows, dtype=np.float64)


def read_features(path: str | Path) -> np.ndarray:
    return read_features_csv(path) if str(path).endswith(".csv") else read_canf(path)


# ---------------------------------------------------------------------------
# CSV tables


def _read_table(path: str | Path, required: Sequence[str], optional: Sequence[str] = ()):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [f for f in required if f not in header]
        if missing:
            raise ValidationError(f"{path}:1: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                yield lineno, {k: row[k] for k in (*required, *optional) if k in row}
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc


def _box(row, path, lineno) -> BBox:
    try:
        return BBox(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"]))
    except (ValueError, ValidationError) as exc:
        raise ValidationError(f"{path}:{lineno}: bad box ({exc})") from exc


def _int(row, key, path, lineno) -> int:
    try:
        return int(row[key])
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{path}:{lineno}: {key} must be an integer, got {row.get(key)!r}") from exc


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_FIELDS)
        for d in detections:
            b = d.box
            w.writerow([d.camera, d.frame, _num(b.x), _num(b.y), _num(b.w), _num(b.h), d.det_id,
                        "" if d.gt_identity is None else d.gt_identity])


def read_detections(path: str | Path, features: np.ndarray) -> list[Detection]:
    dets = []
    for lineno, row in _read_table(path, DETECTION_FIELDS[:7], ["gt_identity"]):
        fid = _int(row, "feature_id", path, lineno)
        if not 0 <= fid < len(features):
            raise ValidationError(f"{path}:{lineno}: feature_id {fid} not in feature file ({len(features)} rows)")
        gt = row.get("gt_identity")
        dets.append(Detection(
            camera=_int(row, "camera", path, lineno), frame=_int(row, "frame", path, lineno),
            box=_box(row, path, lineno), feature=features[fid],
            gt_identity=_int(row, "gt_identity", path, lineno) if gt not in (None, "") else None,
            det_id=fid,
        ))
    return dets


def write_ground_truth(path: str | Path, gt: FrameLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GT_FIELDS)
        for cam, frame, ident, b in gt.rows():
            w.writerow([cam, frame, _num(b.x), _num(b.y), _num(b.w), _num(b.h), ident])


def read_ground_truth(path: str | Path) -> FrameLog:
    gt = FrameLog()
    for lineno, row in _read_table(path, GT_FIELDS):
        try:
            gt.add(_int(row, "camera", path, lineno), _int(row, "frame", path, lineno),
                   _int(row, "gt_identity", path, lineno), _box(row, path, lineno))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return gt


def write_trajectories(path: str | Path, trajectories: Sequence[Trajectory]) -> None:
    rows = []
    for tr in trajectories:
        gid = tr.global_identity if tr.global_identity is not None else tr.track_id
        for d in tr.detections:
            rows.append((d.camera, d.frame, d.det_id, d.box, tr.track_id, gid))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_FIELDS)
        for cam, frame, _, b, tid, gid in rows:
            w.writerow([cam, frame, _num(b.x), _num(b.y), _num(b.w), _num(b.h), tid, gid])


def read_hypothesis(path: str | Path) -> FrameLog:
    """Trajectory CSV as a frame log keyed by global identity."""
    hyp = FrameLog()
    for lineno, row in _read_table(path, TRAJECTORY_FIELDS):
        try:
            hyp.add(_int(row, "camera", path, lineno), _int(row, "frame", path, lineno),
                    _int(row, "global_identity", path, lineno), _box(row, path, lineno))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return hyp


def write_events(path: str | Path, events: Iterable[AssociationEvent]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")


def read_events(path: str | Path) -> list[AssociationEvent]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(AssociationEvent.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# model


def model_to_dict(model: CanModel, include_optimizer: bool = True) -> dict:
    net = model.evalnet
    d = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "dims": net.dims,
        "bn_eps": net.eps,
        "bn_momentum": net.bn_momentum,
        "layers": [
            {"W": layer.weight.tolist(), "b": layer.bias.tolist(),
             "gamma": layer.bn_gamma.tolist(), "beta": layer.bn_beta.tolist(),
             "running_mean": layer.bn_running_mean.tolist(), "running_var": layer.bn_running_var.tolist()}
            for layer in net.layers
        ],
        "meta_norm": model.norm.to_dict(),
        "seed": model.seed,
    }
    if model.head is not None:
        d["classifier"] = {"W_c": model.head.weight.tolist(), "b_c": model.head.bias.tolist(),
                           "classes": list(model.classes)}
    if include_optimizer and model.optimizer is not None:
        opt = model.optimizer
        d["optimizer"] = {
            "step": opt.step,
            "velocity": None if opt.velocity is None else {k: v.tolist() for k, v in sorted(opt.velocity.items())},
        }
    return d


def model_from_dict(d: dict) -> CanModel:
    if d.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValidationError(f"unsupported model schema_version {d.get('schema_version')!r}")
    try:
        layers = [LayerParams(np.array(l["W"], dtype=np.float64), np.array(l["b"], dtype=np.float64),
                              np.array(l["gamma"], dtype=np.float64), np.array(l["beta"], dtype=np.float64),
                              np.array(l["running_mean"], dtype=np.float64),
                              np.array(l["running_var"], dtype=np.float64))
                  for l in d["layers"]]
        net = MlpParams(layers, float(d.get("bn_eps", 1e-5)), float(d.get("bn_momentum", 0.1)))
        if net.dims != list(d["dims"]):
            raise ValidationError(f"dims {d['dims']} disagree with layer shapes {net.dims}")
        head, classes = None, []
        if "classifier" in d:
            c = d["classifier"]
            head = ClassifierHead(np.array(c["W_c"], dtype=np.float64), np.array(c["b_c"], dtype=np.float64))
            classes = [int(x) for x in c.get("classes", range(head.num_classes))]
        norm = MetaNorm(**d["meta_norm"])
        opt = None
        if "optimizer" in d:
            o = d["optimizer"]
            vel = None if o["velocity"] is None else {k: np.array(v, dtype=np.float64)
                                                      for k, v in o["velocity"].items()}
            opt = OptimizerState(int(o["step"]), vel)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from exc
    return CanModel(net, head, norm, classes, opt, int(d.get("seed", 0)))


def save_model(path: str | Path, model: CanModel, include_optimizer: bool = True) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, include_optimizer), indent=1) + "\n")


def load_model(path: str | Path) -> CanModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(d)
