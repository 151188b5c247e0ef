"""``gauss-align`` command line: register, eval, colorize and synth.

Exit codes: 0 success, 1 numerical failure, 2 input error. Failures print a
JSON object ``{"error": {...}}`` on stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from contextlib import nullcontext
from dataclasses import asdict

import numpy as np
from scipy.spatial import cKDTree

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2
THREADS_ENV = "GAUSS_ALIGN_THREADS"


class InputError(Exception):
    """Anything wrong with files, flags or configuration."""


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_json(path: str):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON: {e}") from None


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _run_config(args):
    from .pipeline import RunConfig

    d = _load_json(args.config) if args.config else {}
    if not isinstance(d, dict):
        raise InputError("config must be a JSON object")
    d.update(_parse_set(args.set))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise InputError(str(e)) from None


def _read_cloud(path: str):
    from .datasets import read_ply

    if not os.path.isfile(path):
        raise InputError(f"file not found: {path}")
    try:
        return read_ply(path)
    except (OSError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def _emit(args, payload: dict, text: str) -> None:
    body = json.dumps(payload, indent=2, sort_keys=True) + "\n" if args.format == "json" else text + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(body)
    else:
        sys.stdout.write(body)


def _pose_text(M: np.ndarray) -> str:
    return "\n".join("  " + " ".join(f"{v: .9f}" for v in row) for row in M)


# --- register ---------------------------------------------------------------

def cmd_register(args) -> int:
    from .pipeline import register

    cfg = _run_config(args)
    source, target = _read_cloud(args.source), _read_cloud(args.target)
    try:
        result = register(source, target, cfg)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as e:
        return _fail(EXIT_NUMERIC, e)
    payload = result.to_dict()
    payload["config"] = cfg.to_dict()
    f = result.fine
    text = "\n".join([
        "pose (source -> target):", _pose_text(result.transform.as_matrix()),
        f"coarse: {result.coarse.iterations} iterations, converged={result.coarse.converged}",
        "fine: skipped" if f is None else f"fine: {f.steps} steps, converged={f.converged}, "
                                          f"loss {f.loss_trace[0]:.6g} -> {f.loss_trace[-1]:.6g}",
        "timing (s): " + "  ".join(f"{k}={v:.3f}" for k, v in result.timing.items()),
    ])
    _emit(args, payload, text)
    return EXIT_OK


# --- eval -------------------------------------------------------------------

def _as_pose(value, base: str):
    """16 numbers, a 4x4 nested list, or a path to a JSON file holding a ``pose`` entry."""
    from .geometry import RigidTransform

    if isinstance(value, str):
        path = os.path.join(base, value)
        doc = _load_json(path)
        value = doc.get("pose") if isinstance(doc, dict) else doc
        if value is None:
            raise InputError(f"{path}: no 'pose' entry")
    try:
        return RigidTransform.from_matrix(np.asarray(value, dtype=float).reshape(4, 4))
    except ValueError as e:
        raise InputError(f"invalid pose: {e}") from None


def ground_truth_correspondences(P: np.ndarray, Q: np.ndarray, T_gt, radius: float) -> np.ndarray:
    """Source points paired with their nearest target point when it lies within ``radius`` under ``T_gt``."""
    if len(P) == 0 or len(Q) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d, j = cKDTree(Q).query(T_gt.apply(P))
    i = np.flatnonzero(d <= radius)
    return np.stack([i, j[i]], axis=1).astype(np.int64)


def evaluate_manifest(manifest: dict, base: str, poses: dict, gts: dict, thresholds):
    from .metrics import MetricsReport, PairMetrics, correspondence_rmse, inlier_ratio, pose_errors

    if not isinstance(manifest, dict) or not isinstance(manifest.get("pairs"), list):
        raise InputError("manifest must be a JSON object with a 'pairs' list")
    rows, skipped = [], []
    for k, entry in enumerate(manifest["pairs"]):
        pid = str(entry.get("id", k))
        gt = gts.get(pid, entry.get("gt"))
        pose = poses.get(pid, entry.get("pose"))
        if gt is None or pose is None:
            reason = "ground truth" if gt is None else "pose"
            warnings.warn(f"pair {pid}: missing {reason}, skipped", stacklevel=2)
            skipped.append(f"{pid}: missing {reason}")
            continue
        T_gt, T_est = _as_pose(gt, base), _as_pose(pose, base)
        rre, rte = pose_errors(T_est, T_gt)
        row = PairMetrics(pid, rre, rte)
        if entry.get("source") and entry.get("target"):
            P = _read_cloud(os.path.join(base, entry["source"])).positions
            Q = _read_cloud(os.path.join(base, entry["target"])).positions
            C = ground_truth_correspondences(P, Q, T_gt, thresholds.delta_corr)
            if len(C):
                row.RMSE = correspondence_rmse(C, P, Q, T_est)
            if entry.get("correspondences"):
                row.IR = inlier_ratio(entry["correspondences"], P, Q, T_gt, thresholds.delta_corr)
        rows.append(row)
    return MetricsReport.from_pairs(rows, thresholds, skipped)


def cmd_eval(args) -> int:
    from .metrics import MetricThresholds

    manifest = _load_json(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    poses = _load_json(args.poses) if args.poses else {}
    gts = _load_json(args.gt) if args.gt else {}
    try:
        th = MetricThresholds(**(_load_json(args.thresholds) if args.thresholds else {}))
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid thresholds: {e}") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = evaluate_manifest(manifest, base, poses, gts, th)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _emit(args, report.to_dict(), report.to_text())
    return EXIT_OK


# --- colorize / synth -------------------------------------------------------

def cmd_colorize(args) -> int:
    from .datasets import CameraCalibration, colorize_scan, read_ppm, write_ply

    scan = _read_cloud(args.scan)
    try:
        image = read_ppm(args.image)
    except FileNotFoundError:
        raise InputError(f"file not found: {args.image}") from None
    except ValueError as e:
        raise InputError(f"{args.image}: {e}") from None
    try:
        with open(args.calib) as f:
            calib = CameraCalibration.from_json(f.read())
    except FileNotFoundError:
        raise InputError(f"file not found: {args.calib}") from None
    except ValueError as e:
        raise InputError(str(e)) from None
    out = colorize_scan(scan, image, calib)
    if not args.out:
        raise InputError("colorize needs --out PATH for the colored PLY")
    write_ply(out, args.out)
    n = int(np.sum(out.color_mask))
    summary = {"points": len(out), "colored": n}
    sys.stdout.write((json.dumps(summary, sort_keys=True) if args.format == "json"
                      else f"colored {n} of {len(out)} points") + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .datasets import SyntheticPairSpec, generate_pair, generate_twin_rooms, save_pair

    d = _load_json(args.spec) if args.spec else {}
    if args.overlap is not None:
        d["overlap"] = args.overlap
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SyntheticPairSpec(**d)
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid spec: {e}") from None
    if not args.out:
        raise InputError("synth needs --out DIR")
    try:
        pair = generate_twin_rooms(spec) if args.twin else generate_pair(spec)
    except ValueError as e:
        raise InputError(str(e)) from None
    save_pair(pair, args.out)
    summary = {"out": args.out, "source_points": len(pair.source), "target_points": len(pair.target),
               "overlap": pair.overlap, "spec": asdict(spec)}
    sys.stdout.write((json.dumps(summary, indent=2, sort_keys=True) if args.format == "json"
                      else f"wrote {args.out}: {len(pair.source)} / {len(pair.target)} points, "
                           f"audited overlap {pair.overlap:.3f}") + "\n")
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path")
    common.add_argument("--format", choices=["json", "text"], default="json")

    p = argparse.ArgumentParser(prog="gauss-align", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("register", parents=[common], help="estimate the source -> target pose")
    r.add_argument("source")
    r.add_argument("target")
    r.set_defaults(func=cmd_register)
    e = sub.add_parser("eval", parents=[common], help="metrics over a pair manifest")
    e.add_argument("manifest")
    e.add_argument("--poses", help="JSON object: pair id -> pose (16 numbers or result file)")
    e.add_argument("--gt", help="JSON object: pair id -> ground-truth pose")
    e.add_argument("--thresholds", help="JSON object of MetricThresholds fields")
    e.set_defaults(func=cmd_eval)
    c = sub.add_parser("colorize", parents=[common], help="color a scan from one camera image")
    c.add_argument("scan")
    c.add_argument("image", help="P6 PPM")
    c.add_argument("calib", help="calibration JSON")
    c.set_defaults(func=cmd_colorize)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic pair to --out DIR")
    s.add_argument("--spec", help="SyntheticPairSpec JSON")
    s.add_argument("--overlap", type=float)
    s.add_argument("--twin", action="store_true", help="two identical-shape rooms painted differently")
    s.set_defaults(func=cmd_synth)
    return p


def _fail(code: int, err: BaseException) -> int:
    kind = "input" if code == EXIT_INPUT else "numerical"
    print(json.dumps({"error": {"kind": kind, "type": type(err).__name__, "message": str(err)}}, sort_keys=True))
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except InputError as e:
        return _fail(EXIT_INPUT, e)
    except OSError as e:
        return _fail(EXIT_INPUT, e)
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError) as e:
        return _fail(EXIT_NUMERIC, e)


if __name__ == "__main__":
    sys.exit(main())
