"""Command-line entry point: generate, train, render, segment, evaluate, tree.

Exit status is 0 on success, 1 on invalid input or configuration and 2 on
runtime failures. Progress goes to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .clustering import hdbscan, normalize_rows
from .data import (
    PRESETS,
    generate_scene,
    load_scene,
    parse_scene_spec,
    read_feature_map,
    write_feature_map,
)
from .inference import (
    PromptSet,
    effective_cluster_size,
    predict_scene,
    read_prompts,
    render_features,
    scene_prompts,
)
from .metrics import scene_report
from .numerics import NumericsError
from .rendering import render_image
from .training import load_model, train

log = logging.getLogger("pvlff")

COMMANDS = ("generate", "train", "render", "segment", "evaluate", "tree")
PRED_LAYERS = ("semantic_raw", "semantic", "instance", "panoptic_class", "panoptic_instance")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; bad usage is a validation error here
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    epilog = cfgmod.help_text()
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="pvlff", description="Panoptic vision-language feature fields at desk scale.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic scene", epilog=epilog, formatter_class=fmt)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", type=Path, help="scene description (key = value)")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in scene")
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="fit a field to a scene", epilog=epilog, formatter_class=fmt)
    t.add_argument("--scene", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("render", help="render views of a trained field", epilog=epilog, formatter_class=fmt)
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--scene", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--frames", default="all", help="comma-separated frame indices or 'all'")

    s = sub.add_parser("segment", help="semantic, instance and panoptic maps", epilog=epilog, formatter_class=fmt)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--prompts", type=Path, help="prompt file; defaults to the scene's classes")
    s.add_argument("--frames", default="all")
    s.add_argument("--points", type=Path, help="text file of 3D points to label instead of views")

    e = sub.add_parser("evaluate", help="score predictions against ground truth", epilog=epilog, formatter_class=fmt)
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--scene", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    tr = sub.add_parser("tree", help="export the instance cluster hierarchy", epilog=epilog, formatter_class=fmt)
    tr.add_argument("--checkpoint", type=Path, required=True)
    tr.add_argument("--scene", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--frames", default="all")
    tr.add_argument("--format", choices=("json", "text"), default="json")

    for sp in (g, t, r, s, e, tr):
        sp.add_argument("--config", type=Path, help="key = value configuration file")
    return p


def _frames(text: str, n: int) -> list[int]:
    if text == "all":
        return list(range(n))
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--frames: {exc}") from exc
    bad = [f for f in out if not 0 <= f < n]
    if bad or not out:
        raise UsageError(f"--frames: indices {bad or text} outside 0..{n - 1}")
    return out


def _progress(step: int, rep: dict, elapsed: float) -> None:
    terms = " ".join(f"{k}={rep[k]:.5f}" for k in ("rgb", "depth", "semantic", "contrastive", "slow_center", "total"))
    log.info("step %d %s (%.1fs)", step, terms, elapsed)


def _palette(n: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 255, size=(max(n, 1), 3), dtype=np.uint8)
    pal[0] = 0
    return pal


def _preview(path: Path, labels: np.ndarray) -> None:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(_palette(256).ravel().tolist())
    img.save(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args, rc: cfgmod.RunConfig) -> None:
    if args.spec is not None:
        if not args.spec.is_file():
            raise UsageError(f"{args.spec}: spec file not found")
        spec = parse_scene_spec(args.spec.read_text())
    else:
        spec = PRESETS[args.preset]()
    out = generate_scene(spec, args.out, seed=rc.seed, threads=rc.threads)
    log.info("wrote scene %s", out)


def cmd_train(args, rc: cfgmod.RunConfig) -> None:
    scene = load_scene(args.scene, load_gt=False)
    args.out.mkdir(parents=True, exist_ok=True)
    rc.write(args.out / "run_config.txt")
    res = train(scene, rc.model(scene.semantic_dim), rc.training(), args.out, progress=_progress)
    log.info("wrote %s after %d steps", args.out / "model.pvlf", len(res.history))


def _load(args):
    scene = load_scene(args.scene)
    model, header = load_model(args.checkpoint)
    if model.config.semantic_dim != scene.semantic_dim:
        raise UsageError(f"{args.checkpoint}: semantic width {model.config.semantic_dim} != scene {scene.semantic_dim}")
    return scene, model


def cmd_render(args, rc: cfgmod.RunConfig) -> None:
    scene, model = _load(args)
    args.out.mkdir(parents=True, exist_ok=True)
    rc.write(args.out / "run_config.txt")
    for fi in _frames(args.frames, len(scene.frames)):
        out = render_image(
            model,
            scene.frames[fi].pose,
            scene.intrinsics,
            scene.height,
            scene.width,
            scene.bbox,
            n_samples=rc.render_samples,
            chunk=rc.chunk,
            threads=rc.threads,
        )
        name = f"{fi:05d}"
        rgb = np.clip(np.round(out["color"] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(args.out / f"{name}_rgb.png")
        write_feature_map(args.out / f"{name}_depth.pvfm", out["depth"].astype(np.float32))
        write_feature_map(args.out / f"{name}_semantic.pvfm", out["semantic"].astype(np.float32))
        write_feature_map(args.out / f"{name}_instance.pvfm", out["instance"].astype(np.float32))
        log.info("rendered frame %d", fi)


def cmd_segment(args, rc: cfgmod.RunConfig) -> None:
    scene, model = _load(args)
    prompts = read_prompts(args.prompts) if args.prompts else scene_prompts(scene)
    if prompts.embeddings.shape[1] != scene.semantic_dim:
        raise UsageError(f"prompt width {prompts.embeddings.shape[1]} != semantic width {scene.semantic_dim}")
    args.out.mkdir(parents=True, exist_ok=True)
    rc.write(args.out / "run_config.txt")
    (args.out / "prompts.txt").write_text(prompts.to_text())
    if args.points is not None:
        _segment_points(args, rc, model, scene, prompts)
        return
    frames = _frames(args.frames, len(scene.frames))
    pred = predict_scene(
        model, scene, prompts, rc.clustering(), frames, rc.render_samples, rc.threads, rc.min_opacity
    )
    layers = {
        "semantic_raw": pred.semantic_raw,
        "semantic": pred.semantic,
        "instance": pred.instance,
        "panoptic_class": pred.panoptic.semantic,
        "panoptic_instance": pred.panoptic.instance,
    }
    for name in PRED_LAYERS + ("previews",):
        (args.out / name).mkdir(exist_ok=True)
    for k, fi in enumerate(frames):
        stem = f"{fi:05d}"
        for name, arr in layers.items():
            write_feature_map(args.out / name / f"{stem}.pvfm", arr[k].astype(np.uint16))
        _preview(args.out / "previews" / f"{stem}_semantic.png", pred.semantic[k])
        _preview(args.out / "previews" / f"{stem}_instance.png", pred.instance[k] % 256)
        pan = pred.panoptic.semantic[k] * 16 + pred.panoptic.instance[k]
        _preview(args.out / "previews" / f"{stem}_panoptic.png", pan % 256)
    (args.out / "frames.txt").write_text("\n".join(str(f) for f in frames) + "\n")
    log.info("segmented %d frames into %d instances", len(frames), int(pred.instance.max()))


def _segment_points(args, rc, model, scene, prompts: PromptSet) -> None:
    from .inference import assign_semantics, denoise_semantics, fuse_panoptic, segment_instances

    try:
        pts = np.loadtxt(args.points, ndmin=2)
    except ValueError as exc:
        raise UsageError(f"{args.points}: {exc}") from exc
    if pts.shape[1] != 3:
        raise UsageError(f"{args.points}: expected 3 columns, got {pts.shape[1]}")
    unit = np.clip(scene.to_unit(pts), 0.0, 1.0)
    heads = model.forward_points(unit, None, semantic=True, instance=True)
    cls, _, valid = assign_semantics(heads["semantic"].value, prompts)
    inst = segment_instances(heads["instance"].value, valid, rc.clustering())
    den = denoise_semantics(cls, inst, prompts.thing)
    pan = fuse_panoptic(den, inst, prompts, valid)
    rows = np.column_stack([pts, den, inst, pan.instance])
    np.savetxt(args.out / "points.txt", rows, fmt=["%.9g"] * 3 + ["%d"] * 3, header="x y z class instance panoptic_id")
    log.info("labeled %d points", len(pts))


def _read_layer(pred: Path, name: str, fi: int, hw: tuple[int, int]) -> np.ndarray:
    path = pred / name / f"{fi:05d}.pvfm"
    if not path.is_file():
        raise UsageError(f"{path}: prediction raster missing")
    arr = read_feature_map(path)
    if arr.shape != hw:
        raise UsageError(f"{path}: size {arr.shape} does not match ground truth {hw}")
    return arr.astype(np.int64)


def cmd_evaluate(args, rc: cfgmod.RunConfig) -> None:
    scene = load_scene(args.scene)
    ftxt = args.pred / "frames.txt"
    if not ftxt.is_file():
        raise UsageError(f"{ftxt}: missing")
    frames = [int(v) for v in ftxt.read_text().split()]
    prompts_path = args.pred / "prompts.txt"
    prompts = read_prompts(prompts_path) if prompts_path.is_file() else scene_prompts(scene)
    # map prompt indices onto the scene's class ids by name; unknown names get fresh ids
    names = [c.name for c in scene.classes]
    lut = np.array([names.index(n) if n in names else len(names) + j for j, n in enumerate(prompts.names)])
    all_names = names + [n for n in prompts.names if n not in names]
    hw = (scene.height, scene.width)
    stack = {name: [] for name in PRED_LAYERS}
    for fi in frames:
        if not 0 <= fi < len(scene.frames):
            raise UsageError(f"{ftxt}: frame {fi} not in scene")
        for name in PRED_LAYERS:
            stack[name].append(_read_layer(args.pred, name, fi, hw))
    arr = {k: np.stack(v) for k, v in stack.items()}
    for k in ("semantic_raw", "semantic", "panoptic_class"):
        if arr[k].max() >= len(lut):
            raise UsageError(f"{args.pred / k}: class id {int(arr[k].max())} has no prompt")
        arr[k] = lut[arr[k]]
    gt_c = np.stack([scene.frames[f].gt_class for f in frames])
    gt_i = np.stack([scene.frames[f].gt_instance for f in frames])
    rows = scene_report(
        arr["semantic_raw"],
        arr["semantic"],
        arr["instance"],
        arr["panoptic_class"],
        arr["panoptic_instance"],
        gt_c,
        gt_i,
        all_names,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    rc.write(args.out / "run_config.txt")
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "class", "value"))
        for m, c, v in rows:
            w.writerow((m, c, repr(float(v))))
    lines = [f"scene {args.scene} ({len(frames)} frames)", ""]
    lines += [f"{m:<10} {v:.4f}" for m, c, v in rows if c == "all"]
    lines += ["", "per-class IoU:"] + [f"  {c:<12} {v:.4f}" for m, c, v in rows if m == "iou"]
    (args.out / "summary.txt").write_text("\n".join(lines) + "\n")
    for m, c, v in rows:
        if c == "all":
            log.info("%s = %.4f", m, v)


def cmd_tree(args, rc: cfgmod.RunConfig) -> None:
    scene, model = _load(args)
    frames = _frames(args.frames, len(scene.frames))
    _, ins, opa = render_features(model, scene, frames, rc.render_samples, rc.threads)
    feats = normalize_rows(ins.reshape(-1, ins.shape[-1]))
    idx = np.flatnonzero(opa.ravel() > rc.min_opacity)
    if len(idx) > rc.max_points:
        rng = np.random.default_rng([rc.seed, 29])
        idx = np.sort(rng.choice(idx, size=rc.max_points, replace=False))
    n_valid = int(np.count_nonzero(opa.ravel() > rc.min_opacity))
    m = effective_cluster_size(rc.clustering(), len(idx), n_valid, len(frames))
    res = hdbscan(feats[idx], rc.min_samples, m)
    if res.tree is None:
        raise UsageError(f"only {len(idx)} valid pixels; need more than min_samples={rc.min_samples}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(res.tree.to_json() if args.format == "json" else res.tree.to_text())
    log.info("tree with %d nodes, %d selected clusters", res.tree.n_clusters, res.labeling.n_clusters)


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "tree": cmd_tree,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        if not argv or argv[0] not in COMMANDS:
            if argv and argv[0] in ("-h", "--help"):
                parser.print_help(sys.stderr)
                return 0
            sys.stderr.write(parser.format_help())
            if argv:
                sys.stderr.write(f"\nunknown subcommand {argv[0]!r}\n")
            return 1
        args, rest = parser.parse_known_args(argv)
        rc = cfgmod.resolve_config(args.config, cfgmod.parse_overrides(rest))
        log.info("resolved config:\n%s", rc.to_text().rstrip())
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            HANDLERS[args.command](args, rc)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ValueError as exc:  # configuration, format, scene and prompt errors
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (NumericsError, OSError, RuntimeError) as exc:
        sys.stderr.write(f"runtime failure: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(dispatch(sys.argv[1:]))
