"""
Command-Line Front End

Subcommands wiring the pipeline stages together; each stage reads and writes
files so it can be run and tested on its own.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from ..core.accel import build_accel
from ..core.camera_io import load_dataset, load_manifest, save_image
from ..core.config import RunConfig
from ..core.errors import ConfigError, RefractionNeRFError
from ..core.logs import log_event, setup_logging
from ..core.mesh import read_obj, write_obj
from ..core.radiance_field import field_summary, load_checkpoint, save_checkpoint
from ..core.synth_scene import IOR_PRESETS, generate_dataset
from ..core.trainer import evaluate, mean_hull_sigma, render_image, trace_pixel, train, write_trace_csv
from ..core.version import __version__, APP_NAME
from ..core.visual_hull import (GridSpec, estimate_bbox, mesh_from_grid, read_occupancy, reconstruct_hull,
                                select_mask_views, write_occupancy)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

# command-line flags that feed config keys (dest == key)
CONFIG_FLAGS = (
    "seed", "threads", "solid", "ior", "n_views", "width", "height", "rig_layout", "hull_K", "mask_views",
    "mask_margin", "smooth_radius", "isolevel", "backend", "mode", "iterations", "batch_rays", "samples", "lr",
)


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_mode_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--mode", choices=["straight", "refract"], help="ray model")
    parser.add_argument("--mesh", help="hull mesh (OBJ), required for refract mode")
    parser.add_argument("--ior", type=float, help="index of refraction (default: dataset value)")
    parser.add_argument("--samples", type=int, help="samples per ray")


def _add_shared_flags(parser: argparse.ArgumentParser, after_command: bool = False):
    """Flags accepted before and after the subcommand."""
    # after the subcommand, unset flags must not overwrite values given before it
    unset = argparse.SUPPRESS if after_command else None
    parser.add_argument("--config", default=unset, help="key = value config file")
    parser.add_argument("--set", dest="set_after" if after_command else "set", action="append",
                        default=unset if after_command else [], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--threads", type=int, default=unset, help="worker threads (1 = serial, bit-exact)")
    parser.add_argument("--seed", type=int, default=unset, help="random seed")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", default=unset if after_command else False,
                           help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", default=unset if after_command else False,
                           help="warnings only")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="glasshull", description=f"{APP_NAME} {__version__}: radiance fields "
                                                           "for transparent objects with refracted rays")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {__version__}")
    _add_shared_flags(parser)
    shared = argparse.ArgumentParser(add_help=False)
    _add_shared_flags(shared, after_command=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, parents=[shared])

    p = add_command("synth", "render a synthetic dataset")
    p.add_argument("--solid", choices=sorted(IOR_PRESETS))
    p.add_argument("--ior", type=float)
    p.add_argument("--n-views", dest="n_views", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--layout", dest="rig_layout", choices=["arc", "ring"])
    p.add_argument("--out", required=True, help="dataset directory")

    p = add_command("carve", "visual hull mesh from the dataset masks")
    p.add_argument("--data", required=True)
    p.add_argument("--K", dest="hull_K", type=int, help="voxels per axis")
    p.add_argument("--mask-views", dest="mask_views", type=int, help="views used for carving (0 = all)")
    p.add_argument("--mask-margin", dest="mask_margin", type=int, help="grow masks by N pixels before carving")
    p.add_argument("--out", required=True, help="output OBJ")
    p.add_argument("--grid-out", help="also dump the occupancy grid")

    p = add_command("mesh", "re-mesh a dumped occupancy grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--smooth-radius", dest="smooth_radius", type=int)
    p.add_argument("--isolevel", type=float)
    p.add_argument("--out", required=True, help="output OBJ")

    p = add_command("train", "fit a radiance field")
    p.add_argument("--data", required=True)
    _add_mode_flags(p)
    p.add_argument("--backend", choices=["grid", "mlp"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-rays", dest="batch_rays", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint", required=True, help="output checkpoint")
    p.add_argument("--log", help="training log CSV (default: <checkpoint>.log.csv)")

    for name, help_text in (("render", "render views to PNG"), ("eval", "PSNR of rendered views"),
                            ("trace-pixel", "per-sample report of one pixel")):
        p = add_command(name, help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test", choices=["train", "test", "all"])
        _add_mode_flags(p)
        if name == "render":
            p.add_argument("--out", required=True, help="output directory")
        elif name == "eval":
            p.add_argument("--out", default="eval.csv", help="per-view PSNR CSV")
        else:
            p.add_argument("--view", default="0", help="view name or index within the split")
            p.add_argument("--pixel", type=int, nargs=2, metavar=("U", "V"), help="pixel (default: image center)")
            p.add_argument("--out", default="trace.csv", help="per-sample CSV")
    return parser


def _configure(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(args.config)
    config.apply_overrides(args.set + getattr(args, "set_after", []))
    for key in CONFIG_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            config.set(key, value)
    return config


def _ior(config: RunConfig) -> float:
    return config.get("ior", IOR_PRESETS.get(config.get("solid"), 1.5))


def _accel_for(config: RunConfig, mesh_path: Optional[str]):
    if config.get("mode") == "refract" and not mesh_path:
        raise RefractionNeRFError("refract mode needs --mesh")
    if not mesh_path:
        return None
    return build_accel(read_obj(mesh_path))


def cmd_synth(args, config: RunConfig) -> int:
    scene = config.scene_spec()
    rig = config.rig_spec()
    generate_dataset(scene, rig, args.out, config.get("threads"), config.get("progress"))
    return EXIT_OK


def cmd_carve(args, config: RunConfig) -> int:
    views = [v for v in load_dataset(args.data, "all") if v.mask is not None]
    views = select_mask_views(views, config.get("mask_views"))
    bbox = config.hull_bbox() or estimate_bbox(views)
    spec = GridSpec(config.get("hull_K"), *bbox)
    mesh, grid = reconstruct_hull(views, spec, config.get("smooth_radius"), config.get("isolevel"),
                                  config.get("smooth_lambda"), config.get("smooth_iters"), config.get("threads"),
                                  config.get("mask_margin"))
    write_obj(args.out, mesh)
    if args.grid_out:
        write_occupancy(args.grid_out, grid)
    log_event(logger, "carve.done", out=args.out, views=len(views), K=spec.K, occupied=grid.count,
              faces=len(mesh.faces))
    return EXIT_OK


def cmd_mesh(args, config: RunConfig) -> int:
    grid = read_occupancy(args.grid)
    mesh = mesh_from_grid(grid, config.get("smooth_radius"), config.get("isolevel"), config.get("smooth_lambda"),
                          config.get("smooth_iters"))
    write_obj(args.out, mesh)
    log_event(logger, "mesh.done", out=args.out, vertices=len(mesh.vertices), faces=len(mesh.faces))
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    config.apply_hints(load_manifest(args.data))
    views = load_dataset(args.data, "train", with_masks=False)
    accel = _accel_for(config, args.mesh)
    field = config.build_field()
    for line in field_summary(field):
        logger.info("field %s", line)
    log = train(views, field, accel, _ior(config), config.train_config())
    save_checkpoint(args.checkpoint, field)
    log.write_csv(args.log or args.checkpoint + ".log.csv")
    log_event(logger, "train.saved", checkpoint=args.checkpoint, final_loss=log.final_loss)
    return EXIT_OK


def _render_setup(args, config: RunConfig):
    config.apply_hints(load_manifest(args.data))
    views = load_dataset(args.data, args.split, with_masks=False)
    if not views:
        raise RefractionNeRFError(f"split {args.split!r} of {args.data} has no views")
    field = load_checkpoint(args.checkpoint)
    accel = _accel_for(config, args.mesh)
    t_near, t_far = config.t_span()
    options = dict(mode=config.get("mode"), accel=accel, ior=_ior(config), samples=config.get("samples"),
                   t_near=t_near, t_far=t_far)
    return views, field, options


def cmd_render(args, config: RunConfig) -> int:
    views, field, options = _render_setup(args, config)
    os.makedirs(args.out, exist_ok=True)
    for view in views:
        image = render_image(field, view, threads=config.get("threads"), **options)
        save_image(os.path.join(args.out, os.path.splitext(view.name)[0] + ".png"), image)
    log_event(logger, "render.done", out=args.out, views=len(views), mode=options["mode"])
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    views, field, options = _render_setup(args, config)
    report = evaluate(field, views, threads=config.get("threads"), progress=config.get("progress"), **options)
    report.write_csv(args.out)
    log_event(logger, "eval.saved", out=args.out, mean_psnr=report.mean_psnr, mode=options["mode"])
    return EXIT_OK


def cmd_trace_pixel(args, config: RunConfig) -> int:
    views, field, options = _render_setup(args, config)
    by_name = {v.name: v for v in views}
    if args.view in by_name:
        view = by_name[args.view]
    elif args.view.isdigit() and int(args.view) < len(views):
        view = views[int(args.view)]
    else:
        raise RefractionNeRFError(f"no view {args.view!r} in split {args.split!r}")
    pixel = tuple(args.pixel) if args.pixel else (view.width // 2, view.height // 2)
    rows = trace_pixel(field, view, pixel, **options)
    write_trace_csv(args.out, rows)
    log_event(logger, "trace.saved", out=args.out, view=view.name, u=pixel[0], v=pixel[1],
              hull_samples=sum(r.region == "hull" for r in rows), mean_hull_sigma=mean_hull_sigma(rows))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "carve": cmd_carve,
    "mesh": cmd_mesh,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "trace-pixel": cmd_trace_pixel,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code is None else int(e.code)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    setup_logging(level)
    try:
        config = _configure(args)
        if not sys.stderr.isatty():
            config.set("progress", False)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error("%s: bad configuration: %s", args.command, e)
        return EXIT_USAGE
    except (RefractionNeRFError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILURE
