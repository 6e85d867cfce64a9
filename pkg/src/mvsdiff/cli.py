"""Command-line entry point: gen-data, train, infer, fuse, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Relative output paths are resolved against ``$MVSDIFF_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config, save_config

log = logging.getLogger("mvsdiff")

OUTPUT_ROOT_ENV = "MVSDIFF_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} not given")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=str))


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> None:
    from .data import save_scene, write_manifest
    from .synthetic import SceneSpec, generate_dataset
    g = cfg.generate
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SceneSpec(g.height, g.width, g.num_views, g.profile)
    dirs = [save_scene(s, out / f"scene_{i:04d}") for i, s in enumerate(generate_dataset(g.num_scenes, cfg.seed, spec))]
    write_manifest(out / "manifest.json", dirs)
    save_config(cfg, out / "config.json")
    print(f"wrote {len(dirs)} scenes to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    from .data import load_manifest
    from .pipeline import DepthDiffusionMVS
    from .training import load_checkpoint, save_checkpoint, seed_everything, train_model
    train = load_manifest(_require(args.manifest or cfg.data.train_manifest, "training manifest"))
    val_path = args.val_manifest or cfg.data.val_manifest
    val = load_manifest(_require(val_path, "validation manifest")) if val_path else None
    out = output_path(args.out or cfg.data.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    seed_everything(cfg.seed)
    init = args.init or cfg.data.checkpoint
    model = load_checkpoint(_require(init, "checkpoint"), cfg)[0] if init else DepthDiffusionMVS.from_config(cfg)
    hist = train_model(model, train, cfg, val, dump_dir=out)
    with open(out / "metrics.jsonl", "a") as fh:
        for i, (loss, lr) in enumerate(zip(hist.losses, hist.lrs)):
            fh.write(json.dumps({"step": i + 1, "loss": loss, "lr": lr}) + "\n")
        for v in hist.val:
            fh.write(json.dumps({"validation": v}) + "\n")
    save_checkpoint(model, cfg, out / "checkpoint.pt", {"seed": cfg.seed})
    print(f"checkpoint: {out / 'checkpoint.pt'}")


def cmd_infer(cfg: RunConfig, args) -> None:
    from .data import make_sample, collate, load_scene, read_manifest
    from .io import write_pfm
    from .training import load_checkpoint
    ckpt = _require(args.checkpoint or cfg.data.checkpoint, "checkpoint")
    scene_dirs = read_manifest(_require(args.manifest or cfg.data.test_manifest, "scene manifest"))
    model, _ = load_checkpoint(ckpt, cfg)
    out = output_path(args.out or Path(cfg.data.output_dir) / "infer")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    entries = []
    for sd in scene_dirs:
        scene = load_scene(sd)
        sdir = out / scene.name
        (sdir / "depth").mkdir(parents=True, exist_ok=True)
        (sdir / "conf").mkdir(parents=True, exist_ok=True)
        depths, confs = [], []
        for ref in range(scene.num_views):
            with torch.no_grad():
                res = model(collate([make_sample(scene, ref)]), "infer", generator=gen)
            dp, cp = sdir / "depth" / f"{ref:02d}.pfm", sdir / "conf" / f"{ref:02d}.pfm"
            write_pfm(dp, res.depth[0].numpy())
            write_pfm(cp, res.confidence[0].numpy())
            depths.append(str(dp.relative_to(out)))
            confs.append(str(cp.relative_to(out)))
        entries.append({"name": scene.name, "source": str(Path(sd).resolve()), "depths": depths, "confidences": confs})
    _write_json(out / "manifest.json", {"config_hash": cfg.hash(), "seed": cfg.seed,
                                        "checkpoint": str(ckpt), "scenes": entries})
    print(f"wrote depth maps for {len(entries)} scenes to {out}")


def _load_infer_manifest(path: Path) -> dict:
    data = json.loads(path.read_text())
    if "scenes" not in data:
        raise ValueError(f"{path}: not an inference manifest")
    return data


def cmd_fuse(cfg: RunConfig, args) -> None:
    from .data import load_scene
    from .fusion import FusionConfig, fuse
    from .io import read_pfm, write_ply
    in_dir = _require(args.input, "inference directory")
    man = _load_infer_manifest(_require(in_dir / "manifest.json", "inference manifest"))
    f = cfg.fusion
    fcfg = FusionConfig(f.conf_min, f.reproj_max, f.rel_depth_max, f.min_views)
    out = output_path(args.out) if args.out else in_dir
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "fuse_config.json")
    clouds = []
    for e in man["scenes"]:
        scene = load_scene(_require(e["source"], "scene directory"))
        depths = [read_pfm(in_dir / p) for p in e["depths"]]
        confs = [read_pfm(in_dir / p) for p in e["confidences"]]
        pc = fuse(depths, confs, scene.cameras, fcfg, scene.images)
        path = out / f"{e['name']}.ply"
        write_ply(path, pc.points, pc.colors)
        clouds.append({"name": e["name"], "source": e["source"], "ply": str(path.resolve()), "num_points": len(pc)})
    _write_json(out / "fused.json", {"config_hash": cfg.hash(), "seed": cfg.seed, "clouds": clouds})
    print(f"fused {len(clouds)} clouds into {out}")


def cmd_eval(cfg: RunConfig, args) -> None:
    from .data import load_scene
    from .fusion import PointCloud, eval_cloud, gt_cloud
    from .io import read_ply
    in_dir = _require(args.input, "fused directory")
    fused = json.loads(_require(in_dir / "fused.json", "fusion manifest").read_text())
    if not isinstance(fused, dict) or not fused.get("clouds"):
        raise ValueError(f"{in_dir / 'fused.json'}: no clouds listed")
    rows = []
    for c in fused["clouds"]:
        scene = load_scene(c["source"])
        if scene.depths is None:
            raise FileNotFoundError(f"scene {c['source']} has no ground-truth depth")
        pts, _ = read_ply(c["ply"])
        m = eval_cloud(PointCloud(pts), gt_cloud(scene.depths, scene.cameras), cfg.eval.dist_thresh)
        rows.append({"name": c["name"], "accuracy": m.accuracy, "completeness": m.completeness, "overall": m.overall})
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("accuracy", "completeness", "overall")}
    print(f"{'scene':<16}{'acc':>10}{'comp':>10}{'overall':>10}")
    for r in rows + [{"name": "mean", **mean}]:
        print(f"{r['name']:<16}{r['accuracy']:>10.4f}{r['completeness']:>10.4f}{r['overall']:>10.4f}")
    out = output_path(args.out) if args.out else in_dir / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"config_hash": cfg.hash(), "seed": cfg.seed, "dist_thresh": cfg.eval.dist_thresh,
                      "scenes": rows, "mean": mean})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "fuse": cmd_fuse, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvsdiff", description="Diffusion-refined multi-view stereo depth estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set variant=CasDiffMVS")
        return sp

    common(sub.add_parser("gen-data", help="generate synthetic scenes")).add_argument("--out", required=True)
    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--manifest")
    sp.add_argument("--val-manifest")
    sp.add_argument("--init", help="checkpoint to start from (fine-tuning)")
    sp.add_argument("--out")
    sp = common(sub.add_parser("infer", help="estimate depth for every view"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp = common(sub.add_parser("fuse", help="fuse inferred depth maps into point clouds"))
    sp.add_argument("--input", required=True, help="output directory of infer")
    sp.add_argument("--out")
    sp = common(sub.add_parser("eval", help="score fused clouds against ground truth"))
    sp.add_argument("--input", required=True, help="output directory of fuse")
    sp.add_argument("--out", help="metrics JSON path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
