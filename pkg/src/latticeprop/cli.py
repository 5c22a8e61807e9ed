"""``latticeprop`` command line: generate | infer | train | bench | render | eval.

Every command writes a manifest next to its main output with the resolved
configuration, input hashes and library versions.  Wall-clock figures and
the worker count live under the manifest's ``timing`` key, which is the only
part allowed to differ between reruns.

Exit codes: 0 ok, 2 invalid arguments, 3 placement failed, 4 file error,
5 algorithm error, 6 diverged loss.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cp import ClusterAssignment, cp_run, cp_step, extract_centers, heatmap_pgm, init_one_hot
from .geometry import GeometryError, OrientedBox, assemble_boxes, evaluate
from .gps import DEFAULT_DT, CycleDetected, gps_infer
from .labels import LabelError
from .lattice import CorrelationField, LatticeError, field_from_dict, field_to_dict, normalize_field
from .learn import DivergedLoss, TrainConfig, train
from .mcl import AllPruned, build_flow_matrix, mc_clusters, mc_iterate
from .report import omega_ppm, plot_bench, plot_trace
from .synth import (PlacementFailed, SceneConfig, config_dict, generate_scene, ideal_field,
                    load_scene)

log = logging.getLogger("latticeprop")

EXIT_OK, EXIT_ARGS, EXIT_PLACEMENT, EXIT_FILE, EXIT_ALGO, EXIT_DIVERGED = 0, 2, 3, 4, 5, 6
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _output_hash(path) -> str:
    """sha256 of an output; JSON reports are hashed without their "timing" key."""
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        if isinstance(data, dict) and "timing" in data:
            data.pop("timing")
            return hashlib.sha256(_dump(data).encode()).hexdigest()
    return _sha256(path)


def _versions() -> dict:
    import matplotlib
    return {"latticeprop": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__, "python": platform.python_version()}


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_json(path, obj) -> None:
    Path(path).write_text(_dump(obj))


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.stem + ".manifest.json")


def write_manifest(out: Path, command: str, config: dict, inputs: list, outputs: list,
                   timing: dict | None = None, threads: int | None = None) -> Path:
    """Manifest for one command run; returns its path."""
    timing = dict(timing or {})
    if threads is not None:
        timing["threads"] = threads
    data = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": {str(p): _output_hash(p) for p in outputs},
        "versions": _versions(),
        "timing": timing,
    }
    path = _manifest_path(out)
    _write_json(path, data)
    return path


def _resolved(args, skip=("func", "threads")) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return v


def _load_model(path):
    data = _read_json(path)
    fld = field_from_dict(data)
    n = fld.lattice.node_count
    fg_logits = np.asarray(data["fg_logits"], dtype=np.float64)
    geometry = np.asarray(data["geometry"], dtype=np.float64)
    if fg_logits.shape != (n, 2) or geometry.shape != (n, 5):
        raise LatticeError("model arrays do not match the lattice")
    z = fg_logits - fg_logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    fg_prob = p[:, 1] / p.sum(axis=1)
    return fld, fg_prob, geometry


def _inference_inputs(args):
    """Scene, field, fg mask, fg confidence and per-node geometry for infer/render."""
    scene = load_scene(args.scene)
    lat, labels = scene.lattice, scene.labels
    fld = fg_conf = geometry = None
    if getattr(args, "model", None):
        fld, fg_conf, geometry = _load_model(args.model)
    if args.field:
        fld = field_from_dict(_read_json(args.field))
    if fld is None:
        fld = ideal_field(lat, labels)
    if fld.lattice != lat:
        raise LatticeError("field lattice does not match the scene")
    if fg_conf is None:
        fg_conf = labels.fg_mask.astype(np.float64)
        geometry = np.where(labels.fg_mask[:, None], labels.box_targets, 0.0)
    return scene, fld, fg_conf > 0.5, fg_conf, geometry


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    cfg = SceneConfig(h=args.h, w=args.w, d=args.d, n_boxes=args.boxes,
                      scale_range=tuple(args.scale), aspect_range=tuple(args.aspect),
                      angle_range=tuple(args.angle), allow_overlap=args.allow_overlap,
                      overlap_cap=args.overlap_cap)
    scene = generate_scene(args.seed, cfg)
    out = Path(args.output)
    scene.save(out)
    outputs = [out]
    if args.field_out:
        _write_json(args.field_out, field_to_dict(ideal_field(scene.lattice, scene.labels)))
        outputs.append(Path(args.field_out))
    config = {"seed": args.seed, "scene": config_dict(cfg), "output": str(out),
              "field_out": args.field_out}
    write_manifest(out, "generate", config, [], outputs, threads=args.threads)
    log.info("scene with %d boxes written to %s", len(scene.gt_boxes), out)
    return EXIT_OK


# ---------------------------------------------------------------- infer

def run_pipeline(algo: str, scene, fld: CorrelationField, fg_mask, fg_conf, geometry,
                 merge: str = "regress", d_t: float = DEFAULT_DT, max_steps: int | None = None,
                 tol: float = 1e-6, prune_eps: float = 1e-6, mc_prune: float = 1e-4,
                 mc_iters: int = 50, nms_thresh: float = 0.5):
    """Cluster with the chosen algorithm, then assemble scored boxes.

    Returns ``(boxes, scores, assignment, info, timing)``.
    """
    lat = scene.lattice
    info: dict = {"algo": algo}
    timing: dict = {}
    t0 = time.perf_counter()
    if algo == "cp":
        steps_cap = max_steps or lat.diameter or 1
        state, steps, updates = cp_run(lat, fld, init_one_hot(lat, prune_eps), steps_cap, tol)
        assignment = extract_centers(state, fg_mask)
        info.update(steps=steps, update_count=updates)
        info["final_state"] = state
    elif algo == "gps":
        assignment, traps, merged = gps_infer(lat, fld, fg_mask, d_T=d_t)
        info.update(candidates=len(traps.candidates), merged_candidates=len(merged.candidates),
                    total_hops=traps.total_hops, merge_checks=merged.checked_pairs)
    elif algo == "mc":
        res = mc_iterate(build_flow_matrix(lat, fld), max_iters=mc_iters, prune_threshold=mc_prune)
        clusters = mc_clusters(res.flow)
        assignment = ClusterAssignment.from_centers(np.where(fg_mask, clusters.center_of, -1))
        info.update(counters=res.counters.to_dict(), converged=res.converged)
    else:
        raise UsageError(f"unknown algorithm {algo!r}")
    timing["cluster_ms"] = 1e3 * (time.perf_counter() - t0)
    t1 = time.perf_counter()
    boxes, scores = assemble_boxes(assignment, lat, fg_conf, geometry, merge, nms_thresh)
    timing["assemble_ms"] = 1e3 * (time.perf_counter() - t1)
    info["clusters"] = len(assignment.clusters)
    return boxes, scores, assignment, info, timing


def detections_dict(boxes: list[OrientedBox], scores: list[float]) -> dict:
    return {"boxes": [b.to_dict(score=s) for b, s in zip(boxes, scores)]}


def cmd_infer(args) -> int:
    scene, fld, fg_mask, fg_conf, geometry = _inference_inputs(args)
    boxes, scores, assignment, info, timing = run_pipeline(
        args.algo, scene, fld, fg_mask, fg_conf, geometry, merge=args.merge, d_t=args.d_t,
        max_steps=args.max_steps, tol=args.tol, prune_eps=args.prune_eps,
        mc_prune=args.mc_prune, mc_iters=args.mc_iters, nms_thresh=args.nms)
    out = Path(args.output)
    det = detections_dict(boxes, scores)
    det["assignment"] = [int(c) for c in assignment.center_of]
    _write_json(out, det)
    outputs = [out]
    state = info.pop("final_state", None)
    if args.heatmap:
        if state is None:
            state = init_one_hot(scene.lattice)
            log.warning("--heatmap with --algo %s renders the initial state", args.algo)
        Path(args.heatmap).write_bytes(heatmap_pgm(state, scene.labels.centers))
        outputs.append(Path(args.heatmap))
    config = _resolved(args)
    config["result"] = info
    write_manifest(out, "infer", config, [args.scene, args.field, args.model], outputs,
                   timing, args.threads)
    log.info("%d boxes from %s", len(boxes), args.algo)
    return EXIT_OK


# ---------------------------------------------------------------- train

def _model_dict(result, lattice) -> dict:
    out = field_to_dict(result.field)
    out["fg_logits"] = [[float(v) for v in row] for row in result.fg_logits]
    out["geometry"] = [[float(v) for v in row] for row in result.geometry]
    return out


def _trace_rows(trace) -> list[list[float]]:
    return [[it] + rep.row() for it, rep in enumerate(trace)]


def _write_trace(path, trace) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "total", "l_fg", "l_center", "l_box"])
    for row in _trace_rows(trace):
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    Path(path).write_text(buf.getvalue())


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    cfg = TrainConfig(alpha=args.alpha, beta=args.beta, lr=args.lr, iters=args.iters,
                      seed=args.seed, init_scale=args.init_scale, threads=args.threads)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        result = train(scene.lattice, scene.labels, cfg)
    except DivergedLoss as exc:
        _write_trace(out / "trace.csv", exc.trace)
        raise
    timing = {"train_ms": 1e3 * (time.perf_counter() - t0)}
    outputs = [out / "field.json", out / "model.json", out / "trace.csv", out / "eval.json"]
    _write_json(outputs[0], field_to_dict(result.field))
    _write_json(outputs[1], _model_dict(result, scene.lattice))
    _write_trace(outputs[2], result.trace)
    boxes, _ = assemble_boxes(result.assignment, scene.lattice, result.fg_prob, result.geometry,
                              args.merge, args.nms)
    metrics = evaluate(boxes, scene.gt_boxes, args.iou)
    first, last = result.trace[0].total, result.trace[-1].total
    _write_json(outputs[3], {"metrics": metrics.to_dict(), "initial_total": first,
                             "final_total": last,
                             "reduction": 1.0 - last / first if first > 0 else 0.0})
    if args.plot:
        plot_trace(_trace_rows(result.trace), out / "trace.png")
        outputs.append(out / "trace.png")
    write_manifest(out, "train", _resolved(args), [args.scene], outputs, timing, args.threads)
    log.info("loss %.6g -> %.6g, F=%.3f", first, last, metrics.f_score)
    return EXIT_OK


# ---------------------------------------------------------------- bench

def _median_ms(fn, repeats: int, warmup: int) -> tuple[float, list[float], object]:
    result = None
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(1e3 * (time.perf_counter() - t0))
    return statistics.median(times), times, result


def cmd_bench(args) -> int:
    d = args.d
    cfg = SceneConfig(h=args.size * d, w=args.size * d, d=d, n_boxes=args.boxes,
                      scale_range=tuple(args.scale), aspect_range=tuple(args.aspect))
    scene = generate_scene(args.seed, cfg)
    lat, labels = scene.lattice, scene.labels
    fld = ideal_field(lat, labels)
    horizon = args.max_steps or lat.diameter
    cp_med, cp_times, (state, steps, updates) = _median_ms(
        lambda: cp_run(lat, fld, init_one_hot(lat), horizon, args.tol), args.repeats, args.warmup)
    gps_med, gps_times, (gps_assign, traps, merged) = _median_ms(
        lambda: gps_infer(lat, fld, labels.fg_mask), args.repeats, args.warmup)
    cp_assign = extract_centers(state, labels.fg_mask)
    report = {
        "config": _resolved(args),
        "lattice": {"rows": lat.rows, "cols": lat.cols, "node_count": lat.node_count},
        "cp": {"max_steps": horizon, "steps": steps, "update_count": updates},
        "gps": {"total_hops": traps.total_hops, "candidates": len(traps.candidates),
                "merged_candidates": len(merged.candidates), "merge_checks": merged.checked_pairs},
        "agreement": cp_assign.agreement(gps_assign, labels.fg_mask),
    }
    timing = {"cp_median_ms": cp_med, "gps_median_ms": gps_med,
              "speedup": cp_med / gps_med if gps_med > 0 else float("inf"),
              "repeats": args.repeats, "warmup": args.warmup}
    if args.mc:
        res = mc_iterate(build_flow_matrix(lat, fld), max_iters=args.mc_iters,
                         prune_threshold=args.mc_prune)
        report["mc"] = res.counters.to_dict()
    out = Path(args.output)
    report["timing"] = timing
    _write_json(out, report)
    outputs = [out]
    if args.plot:
        png = out.with_suffix(".png")
        plot_bench(cp_times, gps_times, png)
        timing["plot"] = png.name  # timing-dependent artifact, kept out of hashed outputs
    write_manifest(out, "bench", _resolved(args), [], outputs, timing, args.threads)
    log.info("cp %.3f ms, gps %.3f ms (x%.1f)", cp_med, gps_med, timing["speedup"])
    return EXIT_OK


# ---------------------------------------------------------------- render

def _parse_steps(text: str) -> list[int]:
    try:
        steps = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad step list {text!r}") from exc
    if not steps or steps[0] < 0:
        raise argparse.ArgumentTypeError("steps must be non-negative integers")
    return steps


def cmd_render(args) -> int:
    scene, fld, fg_mask, _, _ = _inference_inputs(args)
    lat = scene.lattice
    tracked = scene.labels.centers if args.track == "centers" else range(lat.node_count)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    state = init_one_hot(lat, args.prune_eps)
    wanted = set(args.steps)
    for t in range(max(args.steps) + 1):
        if t > 0:
            state = cp_step(lat, fld, state)
        if t in wanted:
            path = out / f"heatmap_{t:04d}.pgm"
            path.write_bytes(heatmap_pgm(state, tracked))
            outputs.append(path)
    path = out / "omega.ppm"
    path.write_bytes(omega_ppm(fld.omega(), lat.rows, lat.cols, fg_mask, args.cell))
    outputs.append(path)
    write_manifest(out, "render", _resolved(args), [args.scene, args.field, args.model], outputs,
                   threads=args.threads)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    preds = [OrientedBox.from_dict(b) for b in _read_json(args.pred)["boxes"]]
    gts = load_scene(args.gt).gt_boxes
    metrics = evaluate(preds, gts, args.iou)
    out = Path(args.output)
    _write_json(out, metrics.to_dict())
    write_manifest(out, "eval", _resolved(args), [args.pred, args.gt], [out], threads=args.threads)
    log.info("P=%.3f R=%.3f F=%.3f", metrics.precision, metrics.recall, metrics.f_score)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticeprop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker cap (default: available cores; 1 = serial)")

    g = sub.add_parser("generate", parents=[common], help="synthetic scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=_positive_int, default=256)
    g.add_argument("--w", type=_positive_int, default=256)
    g.add_argument("--d", type=_positive_int, default=16)
    g.add_argument("--boxes", type=int, default=3)
    g.add_argument("--scale", type=float, nargs=2, default=(32.0, 64.0), metavar=("LO", "HI"))
    g.add_argument("--aspect", type=float, nargs=2, default=(1.0, 4.0), metavar=("LO", "HI"))
    g.add_argument("--angle", type=float, nargs=2, default=(-math.pi / 3, math.pi / 3),
                   metavar=("LO", "HI"))
    g.add_argument("--allow-overlap", action="store_true")
    g.add_argument("--overlap-cap", type=_nonneg_float, default=0.0)
    g.add_argument("--field-out", help="also write the ideal field JSON here")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    def scene_inputs(q):
        q.add_argument("--scene", required=True)
        q.add_argument("--field", help="field JSON (default: ideal field of the scene)")
        q.add_argument("--model", help="trained model JSON from `train`")

    i = sub.add_parser("infer", parents=[common], help="cluster and assemble boxes")
    scene_inputs(i)
    i.add_argument("--algo", choices=("cp", "gps", "mc"), default="gps")
    i.add_argument("--merge", choices=("pca", "regress"), default="regress")
    i.add_argument("--d-t", type=_nonneg_float, default=DEFAULT_DT)
    i.add_argument("--max-steps", type=_positive_int, default=None,
                   help="CP horizon (default: lattice diameter)")
    i.add_argument("--tol", type=_nonneg_float, default=1e-6)
    i.add_argument("--prune-eps", type=_nonneg_float, default=1e-6)
    i.add_argument("--mc-prune", type=_nonneg_float, default=1e-4)
    i.add_argument("--mc-iters", type=_positive_int, default=50)
    i.add_argument("--nms", type=_nonneg_float, default=0.5)
    i.add_argument("--heatmap", help="PGM of the final CP state")
    i.add_argument("-o", "--output", required=True)
    i.set_defaults(func=cmd_infer)

    t = sub.add_parser("train", parents=[common], help="fit field, fg and geometry logits")
    t.add_argument("--scene", required=True)
    t.add_argument("--iters", type=_positive_int, default=200)
    t.add_argument("--lr", type=_nonneg_float, default=0.5)
    t.add_argument("--alpha", type=_nonneg_float, default=1.0)
    t.add_argument("--beta", type=_nonneg_float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-scale", type=_nonneg_float, default=0.01)
    t.add_argument("--merge", choices=("pca", "regress"), default="regress")
    t.add_argument("--nms", type=_nonneg_float, default=0.5)
    t.add_argument("--iou", type=float, default=0.5)
    t.add_argument("--plot", action="store_true", help="also write trace.png")
    t.add_argument("-o", "--output", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", parents=[common], help="time cp_run against greedy paths")
    b.add_argument("--size", type=_positive_int, default=64, help="lattice rows = cols")
    b.add_argument("--d", type=_positive_int, default=16)
    b.add_argument("--boxes", type=int, default=3)
    b.add_argument("--scale", type=float, nargs=2, default=(32.0, 96.0), metavar=("LO", "HI"))
    b.add_argument("--aspect", type=float, nargs=2, default=(1.0, 5.0), metavar=("LO", "HI"))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=_positive_int, default=20)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--max-steps", type=_positive_int, default=None,
                   help="CP horizon (default: lattice diameter)")
    b.add_argument("--tol", type=_nonneg_float, default=1e-6)
    b.add_argument("--mc", action="store_true", help="also run MC and report its counters")
    b.add_argument("--mc-prune", type=_nonneg_float, default=1e-4)
    b.add_argument("--mc-iters", type=_positive_int, default=50)
    b.add_argument("--plot", action="store_true", help="also write a timing PNG")
    b.add_argument("-o", "--output", required=True)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("render", parents=[common], help="heatmaps and omega raster")
    scene_inputs(r)
    r.add_argument("--steps", type=_parse_steps, default=_parse_steps("0,1,2,4,8,16,32"))
    r.add_argument("--track", choices=("centers", "all"), default="centers")
    r.add_argument("--prune-eps", type=_nonneg_float, default=1e-6)
    r.add_argument("--cell", type=_positive_int, default=16)
    r.add_argument("-o", "--output", required=True, help="output directory")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="precision / recall / F")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="scene JSON")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def _configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("LATTICEPROP_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _fail(code: int, exc: BaseException) -> int:
    print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlacementFailed as exc:
        return _fail(EXIT_PLACEMENT, exc)
    except DivergedLoss as exc:
        return _fail(EXIT_DIVERGED, exc)
    except (CycleDetected, AllPruned, GeometryError) as exc:
        return _fail(EXIT_ALGO, exc)
    except (OSError, json.JSONDecodeError, KeyError, LatticeError, LabelError) as exc:
        return _fail(EXIT_FILE, exc)
    except (UsageError, ValueError) as exc:
        return _fail(EXIT_ARGS, exc)


if __name__ == "__main__":
    sys.exit(main())
