"""Command-line entry points: simulate, reconstruct, evaluate, report.

Exit codes: 0 success, 1 usage problem, 2 bad data or config,
3 numeric failure during optimization.  Every command drops a copy of
the exact configuration it ran with into its output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import io as gio
from .config import RunConfig, load_config, save_config
from .fbp import extract_init_points, fbp_reconstruct
from .geometry import ConeBeamGeometry
from .metrics import eval_mask, masked_dsc, masked_psnr, ssim3d
from .optimize import (ReconLossConfig, ReconstructionError, reconstruct,
                       read_loss_trace, write_loss_trace)
from .phantom import build_dataset, load_manifest, load_sample_projections
from .projector import ProjectionSet, forward_project

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERIC_ERROR = 3

ANGLE_TOL = 1e-9


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _require_out(cfg: RunConfig, args) -> str:
    out = args.out or cfg.out_dir
    if not out:
        raise UsageError("an output directory is required (--out or config out_dir)")
    return out


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    d = cfg.to_dict()
    if getattr(args, "views", None):
        d["n_views"] = args.views
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    return RunConfig.from_dict(d)


# ------------------------------------------------------------ simulate

def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _require_out(cfg, args)
    schedule = cfg.schedule()
    os.makedirs(out, exist_ok=True)
    save_config(os.path.join(out, "config.json"), cfg)
    manifest = build_dataset(out, cfg.geometry, schedule.angles, cfg.n_samples,
                             cfg.seed, cfg.tree, cfg.smoothing_sigma,
                             cfg.store_volume)
    print(f"wrote {len(manifest['samples'])} case(s) to {out}")
    return 0


# ------------------------------------------------------------ reconstruct

def _select_views(stored_angles, wanted_angles):
    """Indices of the stored views matching each wanted angle exactly."""
    stored = np.asarray(stored_angles, dtype=np.float64)
    idx = []
    for a in wanted_angles:
        hits = np.flatnonzero(np.abs(stored - a) < ANGLE_TOL)
        if hits.size == 0:
            raise ValueError(f"dataset has no projection at angle {a!r}; "
                             f"stored angles: {stored.tolist()}")
        idx.append(int(hits[0]))
    return idx


def _case_results(manifest, results_dir):
    for entry in manifest["samples"]:
        case_dir = os.path.join(results_dir, entry["id"])
        if os.path.isdir(case_dir):
            yield entry, case_dir


def _seed_points_path(init_arg: str, case_id: str) -> str:
    # a directory of per-case files, or one file shared by every case
    if os.path.isdir(init_arg):
        return os.path.join(init_arg, f"{case_id}.pc")
    return init_arg


def cmd_reconstruct(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = _require_out(cfg, args)
    manifest = load_manifest(args.dataset)
    geom = ConeBeamGeometry.from_dict(manifest["geometry"])
    wanted = cfg.schedule().angles

    os.makedirs(out, exist_ok=True)
    save_config(os.path.join(out, "config.json"), cfg)
    for entry in manifest["samples"]:
        full = load_sample_projections(args.dataset, entry, geom)
        sel = _select_views(entry["angles"], wanted)
        meas = ProjectionSet(geom, wanted, np.ascontiguousarray(full.images[sel]))

        case_dir = os.path.join(out, entry["id"])
        os.makedirs(case_dir, exist_ok=True)
        if args.init == "fbp":
            fbp_vol = fbp_reconstruct(meas, cfg.fbp)
            gio.save_volume(os.path.join(case_dir, "fbp_volume.raw"), fbp_vol)
            points = extract_init_points(fbp_vol, cfg.fbp)
        else:
            points = gio.load_points(_seed_points_path(args.init, entry["id"]))
        gio.save_points(os.path.join(case_dir, "init_points.pc"), points)

        result = reconstruct(meas, points,
                             loss_cfg=ReconLossConfig(alpha=cfg.alpha),
                             opt_cfg=cfg.optimizer,
                             density_cfg=cfg.density,
                             compose_cfg=cfg.compose)
        gio.save_volume(os.path.join(case_dir, "volume.raw"), result.volume)
        gio.save_cloud(os.path.join(case_dir, "cloud.pc"), result.cloud)
        write_loss_trace(os.path.join(case_dir, "trace.csv"), result.trace)
        gio.write_json(os.path.join(case_dir, "recon.json"), {
            "case": entry["id"],
            "views": cfg.n_views,
            "angles": [float(a) for a in wanted],
            "init": args.init,
            "gaussians": result.cloud.count,
            "final_loss": float(result.trace[-1, 3]),
        })
        print(f"{entry['id']}: {result.cloud.count} gaussians, "
              f"final loss {result.trace[-1, 3]:.6g}")
    return 0


# ------------------------------------------------------------ evaluate

def _normalized(arr):
    """Map a grid to [0,1] by its 99.9th-percentile value, clipped.

    A handful of hot voxels (reconstruction spikes, filter overshoot)
    would otherwise set the scale for the whole volume and empty out the
    binarized support.
    """
    a = np.asarray(arr, dtype=np.float64)
    denom = float(np.percentile(a, 99.9))
    if denom <= 0:
        denom = float(a.max())
    if denom <= 0:
        return a
    return np.clip(a / denom, 0.0, 1.0)


def _evaluate_case(geom, gt_vol, method_vols, heldout, collision, mcfg, case_id, views):
    rows = []
    gt = gt_vol.data
    gt_n = _normalized(gt)
    vol_mask = eval_mask(gt > 0, mcfg.mask_dilation)
    gt_proj = forward_project(gt_vol, geom, heldout).images
    proj_masks = [eval_mask(im > 0, mcfg.mask_dilation) for im in gt_proj]
    for method, vol in method_vols:
        pred = vol.data
        pred_n = _normalized(pred)
        pred_proj = forward_project(vol, geom, heldout).images
        dscs, psnrs = [], []
        for pi, gi, m in zip(pred_proj, gt_proj, proj_masks):
            dscs.append(masked_dsc(_normalized(pi), _normalized(gi), m,
                                   mcfg.dsc_threshold))
            psnrs.append(masked_psnr(pi, gi, m))
        rows.append({
            "case_id": case_id,
            "views": views,
            "method": method,
            "dsc_proj": float(np.mean(dscs)),
            "psnr_proj": float(np.mean(psnrs)),
            "dsc_vol": masked_dsc(pred_n, gt_n, vol_mask, mcfg.dsc_threshold),
            "ssim_vol": ssim3d(pred_n, gt_n),
            "angle_collision": int(collision),
            "mask_dilation": mcfg.mask_dilation,
        })
    return rows


def cmd_evaluate(args) -> int:
    if not args.out:
        raise UsageError("--out is required for evaluate")
    manifest = load_manifest(args.dataset)
    geom = ConeBeamGeometry.from_dict(manifest["geometry"])
    rows = []
    provenance = {"dataset": args.dataset, "results": list(args.results)}
    for results_dir in args.results:
        rcfg = load_config(os.path.join(results_dir, "config.json"))
        schedule = rcfg.schedule()
        training = schedule.angles
        heldout = (np.asarray(args.heldout, dtype=np.float64)
                   if args.heldout else schedule.heldout_angles())
        collision = bool(np.any(np.abs(heldout[:, None] - training[None, :]) < ANGLE_TOL))
        if collision:
            warnings.warn("held-out angles collide with training views; "
                          "metrics are computed on seen projections")
        provenance[results_dir] = {"config": rcfg.to_dict(),
                                   "heldout_angles": [float(a) for a in heldout]}
        n_cases = 0
        for entry, case_dir in _case_results(manifest, results_dir):
            if "volume" not in entry["files"]:
                raise ValueError(f"dataset case {entry['id']} has no stored "
                                 "volume; re-simulate with store_volume")
            gt_vol, _ = gio.load_volume(
                os.path.join(args.dataset, entry["dir"], entry["files"]["volume"]))
            method_vols = []
            for method, fname in (("gaussian", "volume.raw"),
                                  ("fbp", "fbp_volume.raw")):
                path = os.path.join(case_dir, fname)
                if os.path.exists(path):
                    method_vols.append((method, gio.load_volume(path)[0]))
            if not method_vols:
                raise ValueError(f"no reconstructed volumes under {case_dir}")
            rows.extend(_evaluate_case(geom, gt_vol, method_vols, heldout,
                                       collision, rcfg.metric, entry["id"],
                                       rcfg.n_views))
            n_cases += 1
        if n_cases == 0:
            raise ValueError(f"no result cases found under {results_dir}")

    from .report import plot_method_bars, plot_view_sweep, write_metrics_csv
    os.makedirs(args.out, exist_ok=True)
    gio.write_json(os.path.join(args.out, "eval_config.json"), provenance)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    plot_method_bars(rows, os.path.join(args.out, "metric_bars.png"))
    if len({r["views"] for r in rows}) > 1:
        plot_view_sweep(rows, os.path.join(args.out, "dsc_vs_views.png"))
    print(f"evaluated {len(rows)} (case, method) pairs -> {args.out}")
    return 0


# ------------------------------------------------------------ report

def cmd_report(args) -> int:
    if not args.out:
        raise UsageError("--out is required for report")
    if not args.evals and not args.results:
        raise UsageError("report needs --evals and/or --results inputs")
    from .report import read_metrics_csv, render_report
    rows = []
    for d in args.evals or []:
        rows.extend(read_metrics_csv(os.path.join(d, "metrics.csv")))
    traces = {}
    for results_dir in args.results or []:
        label_root = os.path.basename(os.path.normpath(results_dir))
        for name in sorted(os.listdir(results_dir)):
            trace_path = os.path.join(results_dir, name, "trace.csv")
            if os.path.isdir(os.path.join(results_dir, name)) and os.path.exists(trace_path):
                traces[f"{label_root}/{name}"] = read_loss_trace(trace_path)
    written = render_report(rows, args.out, traces or None)
    gio.write_json(os.path.join(args.out, "report_config.json"),
                   {"evals": list(args.evals or []),
                    "results": list(args.results or [])})
    for path in written:
        print(f"wrote {path}")
    return 0


# ------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gausstomo",
                     description="Sparse-view vessel reconstruction with "
                                 "additive 3D Gaussians.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--views", type=int, default=None,
                       help="override the number of training views")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", default=None, help="output directory")

    p_sim = sub.add_parser("simulate", help="generate a phantom dataset")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_rec = sub.add_parser("reconstruct", help="fit Gaussian clouds to a dataset")
    common(p_rec)
    p_rec.add_argument("--dataset", required=True, help="dataset directory")
    p_rec.add_argument("--init", default="fbp",
                       help="'fbp' or a point-cloud file used as the seed")
    p_rec.set_defaults(func=cmd_reconstruct)

    p_eval = sub.add_parser("evaluate", help="score results on held-out views")
    p_eval.add_argument("--results", nargs="+", required=True,
                        help="one or more reconstruction output directories")
    p_eval.add_argument("--dataset", required=True, help="dataset directory")
    p_eval.add_argument("--heldout", type=float, nargs="+", default=None,
                        help="explicit held-out angles (radians)")
    p_eval.add_argument("--out", default=None, help="output directory")
    p_eval.set_defaults(func=cmd_evaluate)

    p_rep = sub.add_parser("report", help="merge metrics and render figures")
    p_rep.add_argument("--evals", nargs="+", default=None,
                       help="evaluate output directories to merge")
    p_rep.add_argument("--results", nargs="+", default=None,
                       help="reconstruction directories to pull loss traces from")
    p_rep.add_argument("--out", default=None, help="output directory")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gausstomo: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except ReconstructionError as exc:
        print(f"gausstomo: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"gausstomo: error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
