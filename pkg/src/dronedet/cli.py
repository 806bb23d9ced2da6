"""Command-line interface.

Subcommands::

    dronedet arch summary      parameter/MAC accounting of a configuration
    dronedet arch forward      forward pass with a shape/checksum tap manifest
    dronedet loss eval         IoU-family losses for explicit box pairs
    dronedet loss grad-check   analytic-vs-finite-difference gradient campaign
    dronedet eval map          COCO-style mAP over record files
    dronedet eval tide         six-way error decomposition over record files
    dronedet stats annotations size statistics of an annotation file

Every subcommand writes a CSV report, a JSON run manifest and (where it has
a natural picture) a PNG under the output directory (--out flag, else the
DRONEDET_OUT environment variable, else ./reports). Exit status is 0 on
success and 2 on any configuration, input or module error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__, reportio
from .arch import (
    ArchConfig,
    ConfigError,
    build_model,
    forward,
    load_config,
)
from .datastats import AnnotationError, load_annotations, load_detections, size_stats
from .evalmap import IOU_THRESHOLDS, evaluate
from .flops import count_model, dysample_gflops
from .losses import (
    Box,
    StateError,
    WiouState,
    finite_diff_grad,
    grad,
    iou,
    random_overlapping_pair,
    wiou_loss,
    wiou_r,
)
from .tensor import ShapeError
from .tide import ERROR_TYPES, tide_report

# Published reference totals for the default configuration, used only for
# the summary verdict lines.
PARAM_ANCHOR = 2.3e6
GFLOP_ANCHOR = 9.0
ANCHOR_TOL = 0.15


def _config_from_args(args) -> ArchConfig:
    overrides = {}
    if getattr(args, "include_p5", False):
        overrides["include_p5"] = True
    if getattr(args, "input_size", None) is not None:
        overrides["input_size"] = args.input_size
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), **overrides)


def _config_dict(cfg: ArchConfig) -> dict:
    from dataclasses import asdict

    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def _band(value: float, anchor: float, tol: float = ANCHOR_TOL) -> tuple[float, float, bool]:
    lo, hi = anchor * (1 - tol), anchor * (1 + tol)
    return lo, hi, lo <= value <= hi


def cmd_arch_summary(args) -> int:
    cfg = _config_from_args(args)
    report = count_model(cfg)
    out = reportio.resolve_outdir(args.out)

    rows = [{"name": r.name, "kind": r.kind, "section": r.section,
             "params": r.params, "macs": r.macs} for r in report.rows]
    rows.append({"name": "TOTAL", "kind": "", "section": "",
                 "params": report.params, "macs": report.macs})
    csv_path = reportio.write_csv(out / "arch_summary.csv",
                                  ["name", "kind", "section", "params", "macs"], rows)
    fig_path = reportio.save_figure(reportio.fig_layer_macs(report.rows),
                                    out / "arch_summary.png")
    reportio.write_manifest(
        out / "arch_summary.manifest.json", "arch summary",
        config=_config_dict(cfg), seed=cfg.seed,
        outputs=[csv_path.name, fig_path.name],
        extra={"totals": {"params": report.params, "macs": report.macs,
                          "gflops": report.gflops}})

    sections = report.section_totals()
    reportio.print_table(
        ["section", "params", "MACs (M)"],
        [[s, p, f"{m / 1e6:.1f}"] for s, (p, m) in sections.items()]
        + [["total", report.params, f"{report.macs / 1e6:.1f}"]])
    print(f"params: {report.params / 1e6:.3f} M    gflops: {report.gflops:.3f}    "
          f"dysample gflops: {dysample_gflops(report):.4f}")
    if not cfg.include_p5 and cfg.input_size == 640:
        for label, value, anchor in (("params (M)", report.params / 1e6, PARAM_ANCHOR / 1e6),
                                     ("gflops", report.gflops, GFLOP_ANCHOR)):
            lo, hi, ok = _band(value, anchor)
            print(f"anchor check {label}: {value:.3f} within [{lo:.3f}, {hi:.3f}] "
                  f"(±15% of {anchor:.2f}): {'PASS' if ok else 'FAIL'}")
    print(f"report written to {csv_path}")
    return 0


def cmd_arch_forward(args) -> int:
    import hashlib

    cfg = _config_from_args(args)
    model = build_model(cfg)
    # Input image drawn from a stream keyed off (seed, 0xF0) so it never
    # collides with the weight stream.
    img_rng = np.random.default_rng((cfg.seed, 0xF0))
    x = img_rng.standard_normal((1, 3, cfg.input_size, cfg.input_size)).astype(np.float32)
    _, taps = forward(model, x, return_taps=True)
    rows = [{"tap": name,
             "shape": "x".join(str(d) for d in arr.shape),
             "sha256": hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()}
            for name, arr in taps.items()]
    magnitudes = [float(np.abs(taps[r["tap"]]).mean()) for r in rows]

    out = reportio.resolve_outdir(args.out)
    csv_path = reportio.write_csv(out / "forward_taps.csv", ["tap", "shape", "sha256"], rows)
    fig_path = reportio.save_figure(reportio.fig_tap_magnitudes(rows, magnitudes),
                                    out / "forward_taps.png")
    reportio.write_manifest(
        out / "forward_taps.manifest.json", "arch forward",
        config=_config_dict(cfg), seed=cfg.seed,
        outputs=[csv_path.name, fig_path.name],
        extra={"input_stream": "default_rng((seed, 0xF0)) standard normal"})
    reportio.print_table(["tap", "shape", "sha256"],
                         [[r["tap"], r["shape"], r["sha256"][:16] + "..."] for r in rows])
    print(f"report written to {csv_path}")
    return 0


def _parse_box(text: str) -> Box:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"box must be 'cx,cy,w,h', got {text!r}")
    return Box(*parts)


def cmd_loss_eval(args) -> int:
    import json

    state = WiouState(running_mean=args.running_mean, mode=args.mode)
    pairs: list[tuple[Box, Box]] = []
    inputs = {}
    if args.pairs_file:
        inputs["pairs"] = args.pairs_file
        with open(args.pairs_file, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                pairs.append((Box(*record["pred"]), Box(*record["gt"])))
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise ValueError("--pred and --gt must be given together")
        pairs.append((_parse_box(args.pred), _parse_box(args.gt)))
    if not pairs:
        raise ValueError("no box pairs given; use --pred/--gt or --pairs-file")

    rows = []
    for i, (p, g) in enumerate(pairs):
        res = wiou_loss(p, g, state)
        rows.append({"pair": i, "iou": f"{iou(p, g):.6f}",
                     "r_factor": f"{wiou_r(p, g):.6f}",
                     "beta": f"{res.beta:.6f}", "focus": f"{res.focus:.6f}",
                     "loss": f"{res.loss:.6f}"})
    out = reportio.resolve_outdir(args.out)
    csv_path = reportio.write_csv(out / "loss_eval.csv",
                                  ["pair", "iou", "r_factor", "beta", "focus", "loss"], rows)
    samples = [(float(r["beta"]), float(r["focus"])) for r in rows]
    fig_path = reportio.save_figure(reportio.fig_focus_curve(state, samples),
                                    out / "loss_eval.png")
    reportio.write_manifest(out / "loss_eval.manifest.json", "loss eval",
                            inputs=inputs, outputs=[csv_path.name, fig_path.name],
                            extra={"state": {"running_mean": state.running_mean,
                                             "mode": state.mode}})
    reportio.print_table(["pair", "iou", "R", "beta", "focus", "loss"],
                         [[r["pair"], r["iou"], r["r_factor"], r["beta"],
                           r["focus"], r["loss"]] for r in rows])
    return 0


def cmd_loss_grad_check(args) -> int:
    kinds = tuple(args.kinds.split(","))
    # Collect per-pair errors for the report, mirroring grad_check's metric.
    rng = np.random.default_rng(args.seed)
    per_kind: dict[str, list[float]] = {k: [] for k in kinds}
    for _ in range(args.pairs):
        a, b = random_overlapping_pair(rng)
        st = WiouState(running_mean=float(rng.uniform(0.2, 1.0)))
        for kind in kinds:
            g_an = grad(kind, a, b, st).wrt
            g_fd = finite_diff_grad(kind, a, b, st, args.step)
            denom = max(np.abs(g_an).max(), np.abs(g_fd).max(), 1e-12)
            per_kind[kind].append(float(np.abs(g_an - g_fd).max() / denom))

    rows = [{"kind": k, "pairs": args.pairs, "max_rel_err": f"{max(v):.3e}",
             "tolerance": args.tolerance,
             "verdict": "PASS" if max(v) <= args.tolerance else "FAIL"}
            for k, v in per_kind.items()]
    out = reportio.resolve_outdir(args.out)
    csv_path = reportio.write_csv(out / "grad_check.csv",
                                  ["kind", "pairs", "max_rel_err", "tolerance", "verdict"],
                                  rows)
    fig_path = reportio.save_figure(reportio.fig_grad_errors(per_kind),
                                    out / "grad_check.png")
    reportio.write_manifest(out / "grad_check.manifest.json", "loss grad-check",
                            seed=args.seed, outputs=[csv_path.name, fig_path.name],
                            extra={"pairs": args.pairs, "step_scale": args.step})
    for row in rows:
        print(f"{row['kind']}: max relative error {row['max_rel_err']} over "
              f"{args.pairs} pairs -> {row['verdict']}")
    return 0 if all(r["verdict"] == "PASS" for r in rows) else 2


def cmd_eval_map(args) -> int:
    gts = load_annotations(args.gt)
    dets = load_detections(args.det)
    report = evaluate(dets, gts, conf_thresh=args.conf)

    rows = [{"class_id": c,
             "ap50": f"{report.ap[c][0.5]:.6f}",
             "ap5095": f"{np.mean([report.ap[c][t] for t in IOU_THRESHOLDS]):.6f}"}
            for c in report.classes]
    rows.append({"class_id": "mean", "ap50": f"{report.map50:.6f}",
                 "ap5095": f"{report.map5095:.6f}"})
    out = reportio.resolve_outdir(args.out)
    csv_path = reportio.write_csv(out / "eval_map.csv", ["class_id", "ap50", "ap5095"], rows)
    fig_path = reportio.save_figure(reportio.fig_pr_curves(report.pr_curves),
                                    out / "eval_map.png")
    reportio.write_manifest(out / "eval_map.manifest.json", "eval map",
                            inputs={"gt": args.gt, "det": args.det},
                            outputs=[csv_path.name, fig_path.name],
                            extra={"conf_thresh": args.conf,
                                   "map50": report.map50, "map5095": report.map5095,
                                   "precision": report.precision, "recall": report.recall})
    reportio.print_table(["class", "AP@0.5", "AP@[.5:.95]"],
                         [[r["class_id"], r["ap50"], r["ap5095"]] for r in rows])
    print(f"mAP@0.5 = {report.map50:.4f}   mAP@[.5,.95] = {report.map5095:.4f}   "
          f"P = {report.precision:.4f}   R = {report.recall:.4f}   "
          f"(conf >= {args.conf})")
    return 0


def cmd_eval_tide(args) -> int:
    gts = load_annotations(args.gt)
    dets = load_detections(args.det)
    report = tide_report(dets, gts, t_fg=args.t_fg, t_bg=args.t_bg)

    rows = [{"error": t, "count": report.counts[t],
             "penalty_pp": f"{report.penalties[t]:.4f}"} for t in ERROR_TYPES]
    out = reportio.resolve_outdir(args.out)
    csv_path = reportio.write_csv(out / "eval_tide.csv", ["error", "count", "penalty_pp"], rows)
    fig_path = reportio.save_figure(reportio.fig_tide(report.penalties),
                                    out / "eval_tide.png")
    reportio.write_manifest(out / "eval_tide.manifest.json", "eval tide",
                            inputs={"gt": args.gt, "det": args.det},
                            outputs=[csv_path.name, fig_path.name],
                            extra={"base_map50": report.base_map50,
                                   "residual_pp": report.residual,
                                   "t_fg": args.t_fg, "t_bg": args.t_bg})
    reportio.print_table(["error", "count", "penalty (pp)"],
                         [[r["error"], r["count"], r["penalty_pp"]] for r in rows])
    print(f"base mAP@0.5 = {report.base_map50:.4f}   unexplained gap = "
          f"{report.residual:.4f} pp")
    return 0


def cmd_stats_annotations(args) -> int:
    anns = load_annotations(args.path)
    report = size_stats(anns, rule=args.rule)

    rows = [{"metric": f"below_{t}x{t}", "value": f"{report.fractions[t]:.6f}"}
            for t in sorted(report.fractions, reverse=True)]
    rows.append({"metric": "total", "value": report.total})
    rows.extend({"metric": f"class_{c}", "value": n}
                for c, n in sorted(report.class_counts.items()))
    out = reportio.resolve_outdir(args.out)
    csv_path = reportio.write_csv(out / "stats_annotations.csv", ["metric", "value"], rows)
    fig_path = reportio.save_figure(
        reportio.fig_area_hist(report.hist_edges, report.hist_counts),
        out / "stats_annotations.png")
    reportio.write_manifest(out / "stats_annotations.manifest.json", "stats annotations",
                            inputs={"annotations": args.path},
                            outputs=[csv_path.name, fig_path.name],
                            extra={"rule": report.rule})
    reportio.print_table(["metric", "value"], [[r["metric"], r["value"]] for r in rows])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dronedet", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"dronedet {__version__}")
    groups = parser.add_subparsers(dest="group", required=True)

    def add_out(p):
        p.add_argument("--out", default=None, help="output directory for reports")

    arch = groups.add_parser("arch", help="architecture accounting and forward pass")
    arch_sub = arch.add_subparsers(dest="command", required=True)
    for name, fn in (("summary", cmd_arch_summary), ("forward", cmd_arch_forward)):
        p = arch_sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--include-p5", action="store_true", dest="include_p5",
                       help="add the stride-32 head")
        p.add_argument("--input-size", type=int, default=None, dest="input_size")
        p.add_argument("--seed", type=int, default=None)
        add_out(p)
        p.set_defaults(func=fn)

    loss = groups.add_parser("loss", help="box regression losses")
    loss_sub = loss.add_subparsers(dest="command", required=True)
    p = loss_sub.add_parser("eval")
    p.add_argument("--pred", default=None, help="predicted box 'cx,cy,w,h'")
    p.add_argument("--gt", default=None, help="target box 'cx,cy,w,h'")
    p.add_argument("--pairs-file", default=None, dest="pairs_file",
                   help="JSONL with {'pred': [...], 'gt': [...]} records")
    p.add_argument("--running-mean", type=float, default=1.0, dest="running_mean")
    p.add_argument("--mode", choices=["paper-alpha", "reference-r"], default="paper-alpha")
    add_out(p)
    p.set_defaults(func=cmd_loss_eval)
    p = loss_sub.add_parser("grad-check")
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4, help="step as a fraction of box scale")
    p.add_argument("--kinds", default="iou,ciou,wiou")
    p.add_argument("--tolerance", type=float, default=1e-3)
    add_out(p)
    p.set_defaults(func=cmd_loss_grad_check)

    ev = groups.add_parser("eval", help="detection evaluation")
    ev_sub = ev.add_subparsers(dest="command", required=True)
    p = ev_sub.add_parser("map")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    add_out(p)
    p.set_defaults(func=cmd_eval_map)
    p = ev_sub.add_parser("tide")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--t-fg", type=float, default=0.5, dest="t_fg")
    p.add_argument("--t-bg", type=float, default=0.1, dest="t_bg")
    add_out(p)
    p.set_defaults(func=cmd_eval_tide)

    stats = groups.add_parser("stats", help="dataset statistics")
    stats_sub = stats.add_subparsers(dest="command", required=True)
    p = stats_sub.add_parser("annotations")
    p.add_argument("--path", required=True)
    p.add_argument("--rule", choices=["max-side", "area"], default="max-side")
    add_out(p)
    p.set_defaults(func=cmd_stats_annotations)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, AnnotationError, StateError, ValueError,
            FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
