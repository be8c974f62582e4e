"""``movesynth`` command line: data, training, meta-test, ablations and reports.

Exit codes: 0 success, 1 user or configuration error, 2 internal invariant
violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import data_synth as ds
from . import io as mio
from . import skeleton as sk
from .config import ExperimentConfig, parse_shots
from .core_types import Frame, PoseMap
from .errors import (CheckpointError, ConfigError, EmptyClipError, InputFormatError,
                     MoveSynthError, NoEligibleClipError)
from .meta import VARIANTS
from .metrics import aggregate, format_table, summary_rows, write_records_csv, write_summary
from .pipeline import (ADAPT_VARIANT, META_VARIANTS, PRETRAIN_VARIANTS, effective_weights,
                       load_manifest, load_params, run_evaluation, run_meta, run_pretrain)
from .report import build_report, to_csv
from .sampling import SamplerConfig, build_episodes, save_episodes

log = logging.getLogger("movesynth")

USER_ERRORS = (ConfigError, CheckpointError, NoEligibleClipError, InputFormatError,
               EmptyClipError, FileNotFoundError)

# ablation grids: row label -> (checkpoint stem, adaptation variant)
VARIANT_GRID = (
    ("PreFrame", "pretrain_frame", "frame"),
    ("MetaFrame", "meta_metaframe", "frame"),
    ("PreMove", "pretrain_move", "move"),
    ("TD-free", "meta_td_free", "td_free"),
    ("MetaDance", "meta_metadance", "move"),
)
MOVE_GRID = tuple((str(n), f"meta_moves{n}", "move") for n in (1, 2, 3, 4))


class Parser(argparse.ArgumentParser):
    """Usage errors are user errors: exit 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared plumbing


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    data = getattr(args, "data", None)
    if data:
        cfg = replace(cfg, data_dir=str(data))
    return cfg.validate()


def variant_weights(cfg: ExperimentConfig, manifest, loss_variant: str):
    """Loss weights a run actually uses: no-flow and no-temporal-term rules applied."""
    w = effective_weights(cfg, manifest) if manifest is not None else cfg.loss.weights
    if VARIANTS[loss_variant][2]:
        w = w.without_temporal()
    return w


def echo_config(out: Path, name: str, cfg: ExperimentConfig, manifest=None,
                loss_variant: Optional[str] = None) -> ExperimentConfig:
    """Write the fully resolved config next to the outputs; rerunning from it reproduces the run."""
    if loss_variant is not None:
        w = variant_weights(cfg, manifest, loss_variant)
        cfg = replace(cfg, loss=replace(cfg.loss, temporal=w.temporal))
        log.info("%s: loss weights l1=%g perceptual=%g temporal=%g", name, w.l1, w.perceptual,
                 w.temporal)
    out.mkdir(parents=True, exist_ok=True)
    mio.atomic_write_bytes(out / f"{name}_config.json", (cfg.dumps() + "\n").encode())
    return cfg


def write_json(path: Path, obj) -> None:
    mio.atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")
                           .encode())


def _last_curve_row(path: Path) -> dict:
    import csv
    if not path.exists():
        return {}
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1] if rows else {}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    manifest = ds.build_dataset(cfg.data, out)
    echo_config(out, "gen-data", replace(cfg, data_dir=str(out)))
    for split in ("train", "test"):
        m = manifest.split(split)
        frames = sum(c["length"] for c in m.clips)
        print(f"{split}: {len(m.clips)} clips, {len(m.person_ids)} persons, {frames} frames")
    return 0


def _read_keypoints(path: Path, height: int, width: int) -> np.ndarray:
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputFormatError(f"{path}: invalid JSON ({e})") from e
    kp = d.get("keypoints") if isinstance(d, dict) else d
    if not isinstance(kp, list) or len(kp) != sk.NUM_JOINTS:
        n = len(kp) if isinstance(kp, list) else "no"
        raise InputFormatError(f"{path}: expected {sk.NUM_JOINTS} keypoints, found {n}")
    rows = []
    for j in kp:
        if not isinstance(j, (list, tuple)) or len(j) not in (2, 3) or \
                not all(isinstance(v, (int, float)) for v in j):
            raise InputFormatError(f"{path}: keypoints must be [x, y] or [x, y, visible]")
        x, y = float(j[0]), float(j[1])
        v = float(j[2]) if len(j) == 3 else 1.0
        inside = 0 <= x < width and 0 <= y < height
        rows.append((x, y, 1.0 if v > 0 and inside else 0.0))
    return np.asarray(rows, np.float64)


def import_clip(clip_dir: Path, person_id: str, height: int, width: int) -> ds.ClipRecord:
    """Frames ``NNNN.png`` with keypoints ``NNNN.json`` -> clip record without flows."""
    pngs = sorted(clip_dir.glob("*.png"))
    if not pngs:
        raise InputFormatError(f"{clip_dir}: no frames")
    frames, poses = [], []
    for p in pngs:
        img = np.asarray(Image.open(p).convert("RGB"), np.float64) / 255.0
        if img.shape[:2] != (height, width):
            raise InputFormatError(f"{p}: frame is {img.shape[1]}x{img.shape[0]}, "
                                   f"config expects {width}x{height}")
        kp_path = p.with_suffix(".json")
        if not kp_path.exists():
            raise InputFormatError(f"{kp_path}: keypoint file missing")
        kp = _read_keypoints(kp_path, height, width)
        ch = ds.rasterize_pose(kp[:, :2], height, width, kp[:, 2] > 0)
        frames.append(Frame(img))
        poses.append(PoseMap(ch, kp))
    return ds.ClipRecord(person_id, clip_dir.name, frames, poses, None, list(range(len(frames))))


def cmd_import_poses(args) -> int:
    cfg = load_config(args)
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    h, w = cfg.data.height, cfg.data.width
    clips = []
    for split in ("train", "test"):
        for pdir in sorted(d for d in (src / split).glob("*") if d.is_dir()):
            for cdir in sorted(d for d in pdir.glob("*") if d.is_dir()):
                rec = import_clip(cdir, pdir.name, h, w)
                rec = replace(rec, clip_id=f"{pdir.name}_{cdir.name}")
                try:
                    parts = ds.filter_invalid_frames(rec, cfg.data.filter)
                except EmptyClipError:
                    log.warning("clip %s removed entirely by filtering", rec.clip_id)
                    continue
                clips += [mio.write_clip(out, split, c) for c in parts]
    if not clips:
        raise InputFormatError(f"{src}: no clips under train/ or test/")
    manifest = mio.DatasetManifest(root=out, config={**cfg.data.to_dict(), "source": str(src)},
                                   clips=clips, height=h, width=w,
                                   pose_channels=sk.NUM_LIMBS + 1, has_flow=False)
    manifest.save(out / "manifest.json")
    echo_config(out, "import-poses", replace(cfg, data_dir=str(out)))
    for split in ("train", "test"):
        m = manifest.split(split)
        print(f"{split}: {len(m.clips)} clips, {len(m.person_ids)} persons (no optical flow)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    variant = args.variant or "move"
    if variant not in PRETRAIN_VARIANTS:
        raise ConfigError(f"unknown pretraining variant {variant!r}; "
                          f"choose from {sorted(PRETRAIN_VARIANTS)}")
    manifest = load_manifest(cfg)
    out = Path(args.out)
    name = f"pretrain_{variant}"
    cfg = echo_config(out, name, cfg, manifest, PRETRAIN_VARIANTS[variant])
    init = load_params(args.checkpoint)[0] if args.checkpoint else None
    path = run_pretrain(cfg, manifest, out, variant, init)
    write_json(out / f"{name}_summary.json", {
        "command": "pretrain", "variant": variant, "checkpoint": path.name,
        "iterations": cfg.pretrain.iterations, "final": _last_curve_row(out / f"{name}_curve.csv")})
    print(f"wrote {path}")
    return 0


def cmd_meta_train(args) -> int:
    cfg = load_config(args)
    variant = args.variant or "metadance"
    if variant not in META_VARIANTS:
        raise ConfigError(f"unknown meta-training variant {variant!r}; "
                          f"choose from {sorted(META_VARIANTS)}")
    if not args.checkpoint:
        raise CheckpointError("meta-train needs --checkpoint (a pretrained generator)")
    if args.moves is not None:
        if args.moves < 1:
            raise ConfigError("--moves must be >= 1")
        cfg = replace(cfg, sampler=replace(cfg.sampler, K=2 * args.moves + 1)).validate()
    manifest = load_manifest(cfg)
    init, mc, _ = load_params(args.checkpoint)
    if mc != cfg.model:
        raise ConfigError(f"checkpoint model {mc} differs from config model {cfg.model}")
    out = Path(args.out)
    name = args.name or f"meta_{variant}"
    cfg = echo_config(out, name, cfg, manifest, META_VARIANTS[variant][1])
    path = run_meta(cfg, manifest, out, init, variant, name=name)
    write_json(out / f"{name}_summary.json", {
        "command": "meta-train", "variant": variant, "checkpoint": path.name,
        "init": str(args.checkpoint), "K": cfg.sampler.K, "tasks": cfg.meta.total_tasks,
        "final": _last_curve_row(out / f"{name}_curve.csv")})
    print(f"wrote {path}")
    return 0


def _shots(args, cfg) -> List[int]:
    return parse_shots(args.shots) if args.shots else list(cfg.eval.shots)


def _evaluate_checkpoint(cfg, manifest, ckpt, shots, variant, adapt, args, strip_dir, label):
    params, mc, _ = load_params(ckpt)
    if (mc.height, mc.width) != (manifest.height, manifest.width):
        raise ConfigError(f"{ckpt}: model resolution {mc.width}x{mc.height} differs from the "
                          f"dataset's {manifest.width}x{manifest.height}")
    recs = run_evaluation(cfg, manifest, params, mc, shots, variant, adapt,
                          episodes_file=args.episodes, strip_dir=strip_dir, label=label,
                          workers=args.workers)
    missing = sorted(set(shots) - {r.K for r in recs})
    if missing:
        raise ConfigError(f"no episodes for shots {missing}")
    return recs


def cmd_meta_test(args) -> int:
    cfg = load_config(args)
    if not args.checkpoint:
        raise CheckpointError("meta-test needs --checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    manifest = load_manifest(cfg)
    shots = _shots(args, cfg)
    cfg = replace(cfg, eval=replace(cfg.eval, shots=tuple(shots)))
    _, _, extra = load_params(ckpt)
    variant = args.variant or ADAPT_VARIANT.get(extra.get("variant", "move"), "move")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown adaptation variant {variant!r}; choose from {sorted(VARIANTS)}")
    out = Path(args.out)
    cfg = echo_config(out, "meta-test", cfg, manifest, variant)
    if args.save_episodes:
        eps = []
        for K in shots:
            sc = SamplerConfig(K=K, interval=cfg.eval.interval,
                               episode_query_len=cfg.eval.episode_query_len, seed=cfg.seed)
            eps += build_episodes(manifest.split("test"), sc, cfg.eval.episodes_per_person)
        save_episodes(args.save_episodes, eps)
    label = ckpt.stem
    recs = _evaluate_checkpoint(cfg, manifest, ckpt, shots, variant, not args.no_adapt, args,
                                out / "strips", label)
    write_records_csv(out / "records.csv", recs)
    summary = aggregate(recs)
    write_summary(out / "summary", {label: summary})
    print(format_table(summary_rows(summary, label)))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if not args.checkpoint:
        raise CheckpointError("ablate needs --checkpoint (directory of trained checkpoints)")
    ck = Path(args.checkpoint)
    grids = {"variants": VARIANT_GRID, "moves": MOVE_GRID}
    chosen = list(grids) if args.grid == "all" else [args.grid]
    rows = [(g, lab, stem, v) for g in chosen for lab, stem, v in grids[g]]
    paths = {}
    for g, lab, stem, v in rows:
        p = ck / f"{stem}.tdgn"
        if not p.exists() and stem == "meta_moves2":
            p = ck / "meta_metadance.tdgn"  # the default two-move run
        paths[(g, lab)] = p
    missing = sorted({str(p) for p in paths.values() if not p.exists()})
    if missing:
        raise CheckpointError("checkpoint not found: " + ", ".join(missing))
    manifest = load_manifest(cfg)
    shots = _shots(args, cfg)
    cfg = replace(cfg, eval=replace(cfg.eval, shots=tuple(shots)))
    out = Path(args.out)
    echo_config(out, "ablate", cfg)
    plan = []
    for g, lab, stem, v in rows:
        w = variant_weights(cfg, manifest, v)
        log.info("ablate %s row %s: lambda_t = %g", g, lab, w.temporal)
        plan.append({"grid": g, "row": lab, "checkpoint": str(paths[(g, lab)]), "variant": v,
                     "loss": {"l1": w.l1, "perceptual": w.perceptual, "temporal": w.temporal}})
    write_json(out / "ablate_rows.json", plan)
    summaries, all_recs, table = {}, [], []
    for item in plan:
        key = f"{item['grid']}:{item['row']}"
        recs = _evaluate_checkpoint(cfg, manifest, item["checkpoint"], shots, item["variant"],
                                    True, args, None, key)
        all_recs += recs
        summaries[key] = aggregate(recs)
        table += summary_rows(summaries[key], key)
    write_records_csv(out / "ablate_records.csv", all_recs)
    write_summary(out / "ablate_summary", summaries)
    print(format_table(table))
    return 0


def cmd_report(args) -> int:
    root = Path(args.runs or args.out)
    if not root.is_dir():
        raise FileNotFoundError(f"run directory not found: {root}")
    written = build_report(root, args.out)
    if not written["metric_rows"] and not written["trend_rows"] and not written["figures"]:
        raise ConfigError(f"{root}: no summaries, trend results or training curves found")
    for name in ("metric_rows", "trend_rows"):
        if written[name]:
            print(f"# {name.replace('_rows', '')}")
            print(to_csv(written[name]), end="")
    for p in written["figures"]:
        print(f"# figure {p}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults when omitted)")
    common.add_argument("--seed", type=int, help="seed routed into every random component")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1,
                        help="parallel episode workers (meta-test/ablate) or torch threads")
    common.add_argument("--data", help="dataset directory (overrides data_dir)")

    ap = Parser(prog="movesynth", description="Few-shot pose-guided dance synthesis")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic dance corpus")

    p = sub.add_parser("import-poses", parents=[common], help="import frames + keypoint JSON")
    p.add_argument("--input", required=True,
                   help="directory laid out as {train,test}/<person>/<clip>/NNNN.{png,json}")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the generator")
    p.add_argument("--variant", help=f"one of {sorted(PRETRAIN_VARIANTS)} (default move)")
    p.add_argument("--checkpoint", help="optional initial generator")

    p = sub.add_parser("meta-train", parents=[common], help="meta-train from a pretrained generator")
    p.add_argument("--variant", help=f"one of {sorted(META_VARIANTS)} (default metadance)")
    p.add_argument("--checkpoint", help="pretrained generator")
    p.add_argument("--moves", type=int, help="dancing moves per support sequence (K = 2*moves+1)")
    p.add_argument("--name", help="output stem (default meta_<variant>)")

    p = sub.add_parser("meta-test", parents=[common], help="adapt and score test episodes")
    p.add_argument("--checkpoint", help="generator to evaluate")
    p.add_argument("--shots", help="comma-separated shot counts, e.g. 3,5,8,10")
    p.add_argument("--episodes", help="episode file to replay")
    p.add_argument("--save-episodes", help="write the generated episodes to this file")
    p.add_argument("--variant", help=f"adaptation variant, one of {sorted(VARIANTS)}")
    p.add_argument("--no-adapt", action="store_true", help="evaluate without inner updates")

    p = sub.add_parser("ablate", parents=[common], help="variant and move-count grids")
    p.add_argument("--checkpoint", help="directory holding the trained checkpoints")
    p.add_argument("--grid", choices=("variants", "moves", "all"), default="all")
    p.add_argument("--shots", help="comma-separated shot counts")
    p.add_argument("--episodes", help="episode file to replay")

    p = sub.add_parser("report", parents=[common], help="tables and figures from run outputs")
    p.add_argument("runs", nargs="?", help="directory to scan (default --out)")
    return ap


COMMANDS = {"gen-data": cmd_gen_data, "import-poses": cmd_import_poses,
            "pretrain": cmd_pretrain, "meta-train": cmd_meta_train, "meta-test": cmd_meta_test,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command not in ("meta-test", "ablate") and args.workers > 1:
        torch.set_num_threads(args.workers)
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as e:
        print(f"movesynth: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (MoveSynthError, AssertionError) as e:
        print(f"movesynth: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
