"""Command-line entry point: ``puppetpose <command> [options]``.

Commands
--------
render     draw a pose (from a JSON file or the pose bank) as an image and a label map
fit        recover pose, camera and colours from a target image or label map
selfsup    train the toy encoder/decoder with the decoupled schedule
eval       score predicted poses (and optionally label maps) against ground truth
gradcheck  run the gradient suite; exits non-zero if any check fails
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as pio
from .camera import UPRIGHT_BOUNDS, CameraParams, sample_camera
from .config import Config, FitConfig
from .errors import PuppetError
from .geometry import align_canonical, default_skeleton, forward_kinematics, template_local_pose
from .puppet import build_dictionary, default_dictionary, hard_segmentation, pose_maps, render_flat

log = logging.getLogger("puppetpose")


def _global_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--template-dir", help="directory holding template.png and template.json")
    p.add_argument("--pose-bank", help="pose bank (JSON or CSV) replacing the shipped one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="directory for every written file")
    p.add_argument("--dump-maps", action="store_true", help="also write the composited part maps as 16-bit PNGs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="puppetpose", description=__doc__.split("\n")[0])
    _global_options(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a pose")
    r.add_argument("--pose", help="JSON with 'pose' (J x 3 joints, any similarity frame) or 'v3d'")
    r.add_argument("--camera", type=float, nargs=6, metavar=("RZ", "RY", "RX", "TX", "TY", "TZ"))
    r.add_argument("--size", type=int, default=128)
    r.add_argument("--out", default="render.png")
    r.add_argument("--seg-out", default="render_seg.png")

    f = sub.add_parser("fit", help="fit pose and camera to a target")
    f.add_argument("--target", required=True, help="RGB image (image mode) or palette label map (seg mode)")
    f.add_argument("--mode", choices=("seg", "image"), default=None)
    f.add_argument("--iters", type=int, default=None)
    f.add_argument("--restarts", type=int, default=None)
    f.add_argument("--out", default="pose.json")
    f.add_argument("--render-out", default="fit.png")

    s = sub.add_parser("selfsup", help="self-supervised toy training")
    s.add_argument("--corpus-size", type=int, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--ablate", choices=("qz", "msal", "fk"), default=None)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="JSON with 'pose' or 'poses'")
    e.add_argument("--gt", required=True, help="JSON with 'pose' or 'poses'")
    e.add_argument("--pred-seg", help="palette label map of the prediction")
    e.add_argument("--gt-seg", help="palette label map of the ground truth")

    g = sub.add_parser("gradcheck", help="run the gradient suite")
    g.add_argument("--points", type=int, default=None)
    g.add_argument("--names", nargs="*", help="restrict to these registered cases")

    # global flags are accepted after the subcommand too
    for p in (r, f, s, e, g):
        _global_options_late(p)
    return parser


def _global_options_late(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", dest="config_late", help=argparse.SUPPRESS)
    p.add_argument("--template-dir", dest="template_dir_late", help=argparse.SUPPRESS)
    p.add_argument("--pose-bank", dest="pose_bank_late", help=argparse.SUPPRESS)
    p.add_argument("--seed", dest="seed_late", type=int, help=argparse.SUPPRESS)
    p.add_argument("--out-dir", dest="out_dir_late", help=argparse.SUPPRESS)
    p.add_argument("--dump-maps", dest="dump_maps_late", action="store_true", help=argparse.SUPPRESS)


def _merge_late(args) -> None:
    for name in ("config", "template_dir", "pose_bank", "seed", "out_dir"):
        late = getattr(args, f"{name}_late", None)
        if late is not None:
            setattr(args, name, late)
    if getattr(args, "dump_maps_late", False):
        args.dump_maps = True


class Context:
    """Resources shared by every command, built from the global flags."""

    def __init__(self, args):
        self.args = args
        self.cfg: Config = pio.load_config(args.config)
        self.skeleton = default_skeleton()
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rng = np.random.default_rng(args.seed)
        torch.manual_seed(args.seed)
        self._bank = None

    @property
    def dictionary(self):
        pc = self.cfg.puppet
        if self.args.template_dir:
            label, anchors = pio.load_template(self.args.template_dir, self.skeleton)
            return build_dictionary(label, anchors, self.skeleton, pc.erosion_radius, pc.blur_sigma)
        return default_dictionary(pc)

    @property
    def bank(self) -> pio.PoseBank:
        if self._bank is None:
            self._bank = pio.load_pose_bank(self.args.pose_bank) if self.args.pose_bank else pio.default_pose_bank()
        return self._bank

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def dump_maps(self, maps, stem: str) -> None:
        if not self.args.dump_maps:
            return
        for l in range(maps.phi_bar.shape[0]):
            pio.write_png(self.path(f"{stem}_phibar_{l + 1:02d}.png"), pio.map_to_uint16(maps.phi_bar[l]))


def _read_pose(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PuppetError(f"cannot read pose file {path}: {exc}") from None


def _poses(doc: dict, key_single: str = "pose", key_many: str = "poses") -> np.ndarray:
    if key_many in doc:
        return np.asarray(doc[key_many], dtype=np.float64)
    return np.asarray(doc[key_single], dtype=np.float64)[None]


def cmd_render(ctx: Context) -> dict:
    a = ctx.args
    if a.pose:
        doc = _read_pose(a.pose)
        if "v3d" in doc:
            p = forward_kinematics(torch.tensor(doc["v3d"], dtype=torch.float64), ctx.skeleton)
        else:
            p = align_canonical(torch.tensor(doc["pose"], dtype=torch.float64), ctx.skeleton)
    else:
        p = ctx.bank.sample(ctx.rng)
    cam = CameraParams(torch.tensor(a.camera, dtype=torch.float64)) if a.camera else sample_camera(
        ctx.rng, UPRIGHT_BOUNDS, p, ctx.cfg.camera.f)
    maps = pose_maps(p, cam, ctx.dictionary, ctx.cfg.puppet, ctx.cfg.camera.f, a.size)
    colors = torch.tensor([c for c in pio.PART_PALETTE[1 : ctx.skeleton.L + 1]], dtype=torch.float64) / 255.0
    img = render_flat(maps.phi_bar, colors, ctx.cfg.loss.bg_color)
    pio.write_png(ctx.path(a.out), pio.image_to_uint8(img))
    labels = hard_segmentation(maps.phi_bar).numpy().astype(np.uint8)
    pio.write_png(ctx.path(a.seg_out), labels, palette=pio.PART_PALETTE)
    ctx.dump_maps(maps, Path(a.out).stem)
    return {"pose": p.tolist(), "camera": cam.tolist(), "image": str(ctx.path(a.out)),
            "segmentation": str(ctx.path(a.seg_out))}


def cmd_fit(ctx: Context) -> dict:
    from .fitter import FitInit, fit

    a = ctx.args
    raw = pio.read_png(a.target)
    mode = a.mode or ("image" if raw.ndim == 3 else "seg")
    fc = ctx.cfg.fit
    cfg = FitConfig(**{**vars(fc), "mode": mode,
                       "max_iters": a.iters or fc.max_iters, "restarts": a.restarts or fc.restarts})
    if mode == "image":
        if raw.ndim != 3:
            raise PuppetError("image mode needs an RGB target")
        target = pio.uint8_to_image(raw)
    else:
        if raw.ndim != 2:
            raise PuppetError("seg mode needs a palette-indexed label map")
        target = raw.astype(np.int64)
        # templates mark background with 0; the fitter expects L+1
        target[target == 0] = ctx.skeleton.L + 1
    v0 = template_local_pose(ctx.skeleton)
    mid = (UPRIGHT_BOUNDS.low + UPRIGHT_BOUNDS.high) / 2.0
    mid[1] = np.pi / 2.0  # frontal view
    cam0 = CameraParams(torch.from_numpy(mid))
    result = fit(target, FitInit(v0, cam0), cfg, dictionary=ctx.dictionary, puppet=ctx.cfg.puppet,
                 bounds=UPRIGHT_BOUNDS, bank=ctx.bank.canonical, rng=ctx.rng, bg_color=ctx.cfg.loss.bg_color,
                 f=ctx.cfg.camera.f)
    out = result.to_dict()
    ctx.path(a.out).write_text(json.dumps(out, indent=1))
    size = target.shape[-1]
    maps = pose_maps(result.pose, result.camera, ctx.dictionary, ctx.cfg.puppet, ctx.cfg.camera.f, size, check=False)
    if mode == "image":
        img = render_flat(maps.phi_bar, result.colors, ctx.cfg.loss.bg_color)
        pio.write_png(ctx.path(a.render_out), pio.image_to_uint8(img))
    else:
        pio.write_png(ctx.path(a.render_out), hard_segmentation(maps.phi_bar).numpy().astype(np.uint8),
                      palette=pio.PART_PALETTE)
    ctx.dump_maps(maps, Path(a.render_out).stem)
    return {"loss": result.loss, "restart": result.restart, "iterations": result.iterations,
            "wall_time": result.wall_time, "pose_file": str(ctx.path(a.out))}


def cmd_selfsup(ctx: Context) -> dict:
    from dataclasses import replace

    from .selfsup.train import make_corpora, run, save_checkpoint

    a = ctx.args
    sc = ctx.cfg.selfsup
    cfg = replace(sc, corpus_size=a.corpus_size or sc.corpus_size, steps=a.steps if a.steps is not None else sc.steps)
    corpora = make_corpora(cfg, ctx.args.seed, ctx.dictionary, ctx.cfg.camera)
    bank = ctx.bank if ctx.args.pose_bank else None
    result = run(cfg, seed=ctx.args.seed, ablate=a.ablate, corpora=corpora, bank=bank,
                 log_fn=lambda lg: log.info("step %d %s", lg.iteration, json.dumps(lg.losses)))
    tag = f"selfsup_{a.ablate or 'full'}_seed{ctx.args.seed}"
    bin_path, json_path = save_checkpoint(result.trainer, ctx.path(tag))
    report = result.to_dict()
    report["checkpoint"] = {"parameters": str(bin_path), "metadata": str(json_path)}
    ctx.path(f"{tag}_report.json").write_text(json.dumps(report, indent=1))
    return report


def cmd_eval(ctx: Context) -> dict:
    from .metrics import auc, pck3d, pose_report, seg_f1

    a = ctx.args
    pred = _poses(_read_pose(a.pred))
    gt = _poses(_read_pose(a.gt))
    if pred.shape != gt.shape:
        raise PuppetError(f"prediction and ground truth differ in shape: {pred.shape} vs {gt.shape}")
    mc = ctx.cfg.metrics
    rep = pose_report(pred, gt)
    out = {
        "mpjpe_pa": rep.mean,
        "per_sample": rep.values.tolist(),
        "pck3d": float(np.mean([pck3d(p, g, mc.pck_threshold) for p, g in zip(pred, gt)])),
        "auc": float(np.mean([auc(p, g, mc.pck_threshold, mc.auc_steps) for p, g in zip(pred, gt)])),
    }
    if a.pred_seg and a.gt_seg:
        fg, part = seg_f1(pio.read_png(a.pred_seg), pio.read_png(a.gt_seg), background=ctx.skeleton.L + 1)
        out.update({"fg_f1": fg, "part_f1": part})
    return out


def cmd_gradcheck(ctx: Context) -> dict:
    from .diffcore import run_suite

    gc = ctx.cfg.gradcheck
    reports = run_suite(ctx.args.points or gc.points, gc.eps, gc.tol, ctx.args.seed, ctx.args.names)
    if not reports:
        raise PuppetError("no gradient cases matched")
    width = max(len(r.name) for r in reports)
    print(f"{'case':<{width}}  {'max rel error':>13}  result")
    for r in reports:
        print(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
    return {"passed": all(r.passed for r in reports), "tol": gc.tol,
            "cases": {r.name: {"max_rel_error": r.max_rel_error, "passed": r.passed} for r in reports}}


COMMANDS = {"render": cmd_render, "fit": cmd_fit, "selfsup": cmd_selfsup, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    _merge_late(args)
    try:
        ctx = Context(args)
        out = COMMANDS[args.command](ctx)
    except PuppetError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    if args.command == "gradcheck":
        return 0 if out["passed"] else 1
    print(json.dumps(out, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
