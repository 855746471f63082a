"""Command line entry point.

Every subcommand reads one pipeline config (JSON) and accepts flags that
override parts of it. Exit codes: 0 success, 2 usage, 3 file I/O, and the
``exit_code`` of the library error class otherwise (see ``errors``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .errors import ConfigError, ReldistillError

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3

log = logging.getLogger("reldistill")


def _config(args, **overrides):
    if args.config is None:
        raise ConfigError("--config is required")
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return pl.load_config(args.config, **overrides)


def _scene(cfg):
    return pl.resolve_scene(cfg.scene) if cfg.scene is not None else None


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def cmd_synth(args):
    from .synthscene import capture

    cfg = _config(args, scene=args.scene, views=args.views)
    scene = _scene(cfg)
    if scene is None:
        raise ConfigError("synth needs a scene")
    cams, views = capture(scene, cfg.capture_config())
    index = pl.save_posed_images(args.out, cams, [v.rgb for v in views], scene.bounds)
    print(index)


def cmd_annotate(args):
    cfg = _config(args)
    cams, imgs, _ = pl.load_posed_images(args.images)
    ann = pl.annotate_images(cfg, cams, imgs, _scene(cfg))
    pl.save_annotations(ann, cfg.prompts, args.out)
    present = sum(a.present for row in ann for slot in row for a in slot)
    print(f"{args.out}: {present} present point(s) over {len(cams)} view(s)")


def _bounds(cfg, images_bounds):
    if cfg.capture.bounds is not None:
        return cfg.capture.bounds
    if images_bounds is not None:
        return images_bounds
    scene = _scene(cfg)
    if scene is None:
        raise ConfigError("no bounds: set capture.bounds or use a scene")
    return scene.bounds


def cmd_distill(args):
    import numpy as np

    from .relfield import RelevancyField, cubic_resolution, save_field, train

    cfg = _config(args)
    cams, imgs, ib = pl.load_posed_images(args.images)
    prompts, ann = pl.load_annotations(args.annotations)
    if prompts != cfg.prompts:
        raise ConfigError(f"annotation prompts {prompts} differ from config prompts {cfg.prompts}")
    _, dataset = pl.training_dataset(cfg, cams, imgs, ann)
    lo, hi = (np.asarray(b, float) for b in _bounds(cfg, ib))
    field = RelevancyField(lo, hi, cubic_resolution(lo, hi, cfg.longest), len(prompts))
    result = train(field, dataset, cfg.train_config())
    save_field(field, args.out)
    last = result.history[-1] if result.history else None
    print(f"{args.out}: {len(result.history)} iterations"
          + ("" if last is None else f", final rgb loss {last.loss_rgb:.5f}, relevancy loss {last.loss_rel:.5f}"))


def cmd_extract(args):
    from .relfield import RaySampling, extract_point_cloud, load_field, write_ply

    cfg = _config(args)
    field = load_field(args.field)
    cams, _, _ = pl.load_posed_images(args.images)
    tcfg = cfg.train_config()
    tcams = [c.scaled(cfg.annotation.downsample) for c in cams]
    cloud = extract_point_cloud(field, tcams, cfg.alpha_threshold, RaySampling(tcfg.n_samples, skip_tau=tcfg.skip_tau))
    write_ply(cloud, args.out)
    print(f"{args.out}: {len(cloud)} points")


def cmd_grasp(args):
    from .graspsel import sample_candidates, save_candidates, select_grasp
    from .relfield import read_ply

    cfg = _config(args)
    cloud = read_ply(args.cloud)
    cands = sample_candidates(cloud, cfg.gripper_config(_scene(cfg)))
    if args.candidates_out:
        save_candidates(cands, args.candidates_out)
    sel = select_grasp(cands, cloud, cfg.grasp_channel, cfg.k)
    _write_json(args.out, {"prompt": cfg.prompts[cfg.grasp_channel], "channel": cfg.grasp_channel,
                           "seed": cfg.seed, **sel.to_dict()})
    print(f"{args.out}: candidate {sel.index} of {len(cands)}, relevancy {sel.relevancy:.4f}")


def cmd_plan(args):
    from .relfield import argmax_relevancy, read_ply

    cfg = _config(args)
    kind = args.kind or cfg.plan.kind
    if kind == "none":
        raise ConfigError("no plan kind: pass --kind or set plan.kind")
    plan_cfg = cfg.plan.model_copy(update={"kind": kind})
    if kind == "pick_place" and plan_cfg.place_point is None:
        raise ConfigError("pick_place plan needs plan.place_point")
    sel = pl.selection_from_dict(json.loads(Path(args.grasp).read_text()))
    argmax = {}
    if kind == "handover":
        cloud = read_ply(args.cloud) if args.cloud else None
        if cloud is None:
            raise ConfigError("handover plan needs --cloud for the danger point")
        argmax = {p: argmax_relevancy(cloud, c) for c, p in enumerate(cfg.prompts)}
    plan = pl.make_plan(cfg.model_copy(update={"plan": plan_cfg}), sel, argmax)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(plan.to_json() + "\n")
    print(f"{args.out}: {len(plan)} waypoints")


def cmd_eval(args):
    from .evalkit import EvalConfig, eval_run

    cfg = _config(args)
    scene = _scene(cfg)
    if scene is None:
        raise ConfigError("eval needs a synthetic scene")
    a = cfg.annotation
    ec = EvalConfig(capture=cfg.capture_config(), jitter=a.jitter,
                    outlier_rate=a.outlier_rate, miss_rate=a.miss_rate, occlusion_aware=a.occlusion_aware,
                    blur_sigma=a.blur_sigma, downsample=a.downsample, train=cfg.train_config(),
                    longest=cfg.longest, alpha_threshold=cfg.alpha_threshold, seed=cfg.seed)
    report = eval_run(scene, cfg.prompts, args.method, ec, out_dir=args.out)
    print(json.dumps(report.summary(), indent=2))


def cmd_pipeline(args):
    cfg = _config(args, mode=args.mode)
    out = args.out or cfg.output_dir
    result = pl.run_pipeline(cfg, out_dir=out)
    t = result.timings
    print(f"{out}: grasp {result.selection.index} (relevancy {result.selection.relevancy:.4f}), "
          f"total {t.total:.2f}s")


def cmd_stub_server(args):
    import uvicorn

    from .service import ServiceConfig, colors_from_scene, create_app

    scene_ref = args.scene
    if scene_ref is None and args.config is not None:
        scene_ref = pl.load_config(args.config).scene
    colors = colors_from_scene(pl.resolve_scene(scene_ref)) if scene_ref else {}
    app = create_app(ServiceConfig(latency=args.latency, colors=colors))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reldistill", description="Distill 2D point annotations into a 3D "
                                "relevancy field and select grasps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help, config_required=True):
        s = sub.add_parser(name, help=help, description=help)
        s.add_argument("--config", required=config_required, help="pipeline config JSON")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.set_defaults(fn=fn)
        return s

    s = add("synth", cmd_synth, "render ground-truth views of a scene into a posed-image directory")
    s.add_argument("--scene", help="builtin scene name or scene file (overrides config)")
    s.add_argument("--views", type=int, help="number of views (overrides config)")
    s.add_argument("--out", required=True, help="output directory")

    s = add("annotate", cmd_annotate, "run the configured point source over a posed-image directory")
    s.add_argument("--images", required=True)
    s.add_argument("--out", default="annotations.json")

    s = add("distill", cmd_distill, "train a relevancy field from views and annotations")
    s.add_argument("--images", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", default="field.bin")

    s = add("extract", cmd_extract, "render a field into a relevancy point cloud (PLY)")
    s.add_argument("--field", required=True)
    s.add_argument("--images", required=True, help="posed-image directory providing the cameras")
    s.add_argument("--out", default="cloud.ply")

    s = add("grasp", cmd_grasp, "generate grasp candidates on a cloud and select one")
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", default="grasp.json")
    s.add_argument("--candidates-out", help="also write every candidate here")

    s = add("plan", cmd_plan, "waypoints for a selected grasp")
    s.add_argument("--grasp", required=True)
    s.add_argument("--kind", choices=["pick_place", "handover"])
    s.add_argument("--cloud", help="relevancy cloud (handover needs it for the danger point)")
    s.add_argument("--out", default="plan.json")

    s = add("eval", cmd_eval, "score a method on the config's synthetic scene and prompts")
    s.add_argument("--method", default="distilled-field",
                   choices=["distilled-field", "single-view-sensor", "single-view-rendered"])
    s.add_argument("--out", help="directory for report.csv / report.json")

    s = add("pipeline", cmd_pipeline, "run the full pipeline")
    s.add_argument("--mode", choices=["pipelined", "sequential"])
    s.add_argument("--out", help="run directory (overrides config output_dir)")

    s = add("stub-server", cmd_stub_server, "serve the reference point service", config_required=False)
    s.add_argument("--scene", help="scene whose colors the service recognizes")
    s.add_argument("--latency", type=float, default=0.0, help="seconds added to every request")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ReldistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
