"""Command-line harness.

Subcommands: verify, bench, gradcheck, ablate-a, demo, gen-scene.
Every command honors --seed (full determinism apart from wall-clock
timings), --json (machine-readable report), --out (output file), and
--tol where a tolerance applies.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""

import argparse
import json
import sys

import numpy as np

from . import backend, bench, refine, roi, verification

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


class Reporter:
    """Collects a report dict; prints human lines unless in JSON mode."""

    def __init__(self, json_mode):
        self.json_mode = json_mode
        self.report = {}

    def line(self, text):
        if not self.json_mode:
            print(text)

    def set(self, key, value):
        self.report[key] = value

    def finish(self, exit_code):
        self.report["exit_code"] = exit_code
        if self.json_mode:
            print(json.dumps(self.report, indent=2, default=_jsonable))
        return exit_code


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_text(path, text, rep):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
        rep.line(f"wrote {path}")
    else:
        rep.line(text.rstrip("\n"))


def _suite_outcome(rep, results):
    rep.set("suites", [r.as_dict() for r in results])
    ok = True
    for r in results:
        rep.line(r.summary())
        for failure in r.failures[:10]:
            rep.line(f"    {failure}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def cmd_verify(args, rep):
    tol = args.tol if args.tol is not None else 1e-6
    sizes = tuple(args.sizes) if args.sizes else verification.GRID_SIZES
    equivalence = verification.equivalence_suite(
        seed=args.seed, sizes=sizes, tol=tol, seeds_per_case=args.grid_seeds
    )
    if args.per_case:
        for case, err in equivalence.details["per_case_worst"].items():
            rep.line(f"    {case}: max error {err:.3e}")
    results = [
        equivalence,
        verification.reweight_bound_suite(seed=args.seed),
        verification.iou_suite(pairs=args.iou_pairs, samples=args.iou_samples, seed=args.seed),
        verification.roundtrip_suite(seed=args.seed),
        verification.confidence_target_suite(),
    ]
    return _suite_outcome(rep, results)


def cmd_bench(args, rep):
    if args.reps < 5:
        raise UsageError("--reps must be >= 5")
    if list(args.n_list) != sorted(args.n_list):
        raise UsageError("--n-list must be ascending")
    backends = (
        backend.available_backends() if args.backend == "both" else (args.backend,)
    )
    tag = len(backends) > 1
    lines = [bench.CSV_HEADER]
    slopes = {}
    for be in backends:
        name = None if be == "active" else be
        records = bench.run_sweep(
            n_list=args.n_list, d=args.d, a=args.a, kernels=args.kernels,
            reps=args.reps, seed=args.seed, backend=name,
        )
        label = be if name else backend.active_backend()
        for r in records:
            if tag:
                r.kernel = f"{r.kernel}@{label}"
            lines.append(r.csv_row())
        for kernel, slope in bench.slopes_by_kernel(records).items():
            slopes[kernel] = slope
            rep.line(f"{kernel}: log-log slope {slope:.3f} on backend {label}")
    rep.set("slopes", slopes)
    rep.set("csv", lines)
    _write_text(args.out, "\n".join(lines) + "\n", rep)
    return EXIT_OK


def cmd_gradcheck(args, rep):
    results = [verification.attention_gradcheck_suite(seed=args.seed)]
    if args.scale == "default":
        results.append(verification.model_gradcheck_suite(seed=args.seed))
    code = _suite_outcome(rep, results)
    if code != EXIT_OK:
        for r in results:
            if not r.passed and "worst_parameter" in r.details:
                rep.line(f"worst offender: {r.details['worst_parameter']}")
    return code


def cmd_ablate_a(args, rep):
    for a in args.a_list:
        if not 0.0 <= a <= 1.3169:
            raise UsageError(f"a={a} outside [0, 1.3169]")
    suite = verification.ablation_suite(a_list=args.a_list, steps=args.steps, seed=args.seed)
    lines = ["a,init_loss,final_loss,reduction_pct"]
    for row in suite.details["rows"]:
        lines.append(
            f"{row['a']},{row['init_loss']:.6f},{row['final_loss']:.6f},"
            f"{row['reduction_pct']:.2f}"
        )
        state = "pass" if row["reduction_pct"] >= 50.0 else "FAIL"
        rep.line(
            f"[{state}] a={row['a']}: loss {row['init_loss']:.4f} -> "
            f"{row['final_loss']:.4f} ({row['reduction_pct']:.1f}% reduction)"
        )
    rep.set("rows", suite.details["rows"])
    _write_text(args.out, "\n".join(lines) + "\n", rep)
    return EXIT_OK if suite.passed else EXIT_CHECK_FAILED


def cmd_demo(args, rep):
    if args.scene and not args.synthetic:
        scene = roi.read_scene(args.scene)
        if not scene.gt_boxes:
            raise UsageError("demo scene has no ground-truth boxes")
    else:
        scene = None  # synthetic default inside the suite

    model = None
    if args.params:
        # demo-trained models use the desk-scale RoI sampling count; the
        # parameter file stores only learned tensors
        desk = refine.ModelConfig.desk()
        model = refine.RefinementModel.load(args.params, n_points=desk.n_points)
    suite, model, train_result = verification.demo_suite(
        seed=args.seed, steps=args.steps, scene=scene, model=model
    )
    for row in suite.details["rows"]:
        rep.line(
            f"proposal {row['proposal']}: IoU {row['iou_before']:.4f} -> "
            f"{row['iou_after']:.4f} (confidence {row['confidence']:.3f})"
        )
    rep.line(
        f"mean IoU before {suite.details['mean_before']:.4f}, "
        f"after {suite.details['mean_after']:.4f}, "
        f"delta {suite.details['mean_delta']:+.4f}"
    )
    rep.set("demo", suite.details)
    if args.loss_history:
        if train_result is None:
            raise UsageError("--loss-history requires a training run (omit --params)")
        rows = ["step,l_iou,l_reg,l_rcnn"]
        rows += [
            f"{step},{l_iou:.10g},{l_reg:.10g},{l_rcnn:.10g}"
            for step, l_iou, l_reg, l_rcnn in train_result.history_rows()
        ]
        with open(args.loss_history, "w") as fh:
            fh.write("\n".join(rows) + "\n")
        rep.line(f"wrote training loss history to {args.loss_history}")
    if args.save_params:
        model.save(args.save_params)
        rep.line(f"saved model parameters to {args.save_params}")
    return EXIT_OK if suite.passed else EXIT_CHECK_FAILED


def cmd_gen_scene(args, rep):
    cfg = roi.SceneConfig(
        n_boxes=args.boxes,
        points_per_box=args.points_per_box,
        n_background=args.background,
    )
    scene = roi.generate_scene(cfg, seed=args.seed)
    out = args.out or "scene.txt"
    roi.write_scene(scene, out)
    rep.set("points", len(scene.points))
    rep.set("boxes", len(scene.gt_boxes))
    rep.set("path", out)
    rep.line(f"wrote scene with {len(scene.points)} points and "
             f"{len(scene.gt_boxes)} boxes to {out}")
    return EXIT_OK


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")


def _float_list(text):
    try:
        return [float(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected floats, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--json", action="store_true", help="emit a JSON report")
    common.add_argument("--out", type=str, default=None, help="output file path")
    common.add_argument("--tol", type=float, default=None,
                        help="override the default check tolerance")

    parser = argparse.ArgumentParser(
        prog="cosh3d",
        description="Linear-complexity cosh-attention and 3D proposal refinement harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common],
                       help="equivalence grid, IoU oracle, and round-trip suites")
    p.add_argument("--sizes", type=_int_list, default=None,
                   help="sequence lengths for the equivalence grid")
    p.add_argument("--grid-seeds", type=int, default=3,
                   help="random instances per grid cell")
    p.add_argument("--per-case", action="store_true",
                   help="print the max error of every equivalence grid cell")
    p.add_argument("--iou-pairs", type=int, default=20)
    p.add_argument("--iou-samples", type=int, default=1_000_000)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", parents=[common],
                       help="kernel runtime sweep with log-log slope fits")
    p.add_argument("--n-list", type=_int_list, default=list(bench.DEFAULT_N_LIST))
    p.add_argument("--d", type=int, default=bench.DEFAULT_D)
    p.add_argument("--a", type=float, default=1.1)
    p.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    p.add_argument("--kernels", type=lambda s: s.split(","), default=list(bench.KERNELS))
    p.add_argument("--backend", choices=["active", "both", "python", "compiled"],
                   default="active")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks of the analytic gradients")
    p.add_argument("--scale", choices=["micro", "default"], default="default",
                   help="micro: attention kernel only; default: adds the whole model")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate-a", parents=[common],
                       help="loss-reduction sweep over re-weighting scales")
    p.add_argument("--a-list", type=_float_list,
                   default=list(verification.ABLATION_SCALES))
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(fn=cmd_ablate_a)

    p = sub.add_parser("demo", parents=[common],
                       help="end-to-end synthetic refinement demo")
    p.add_argument("scene", nargs="?", default=None,
                   help="scene file; omit (or use --synthetic) for a generated scene")
    p.add_argument("--synthetic", action="store_true",
                   help="force a generated scene (default when no file is given)")
    p.add_argument("--steps", type=int, default=200, help="training steps")
    p.add_argument("--params", type=str, default=None,
                   help="load model parameters instead of training")
    p.add_argument("--save-params", type=str, default=None,
                   help="save trained model parameters")
    p.add_argument("--loss-history", type=str, default=None,
                   help="write the per-step training loss CSV here")
    p.set_defaults(fn=cmd_demo)

    p = sub.add_parser("gen-scene", parents=[common],
                       help="generate a synthetic scene file")
    p.add_argument("--boxes", type=int, default=5)
    p.add_argument("--points-per-box", type=int, default=200)
    p.add_argument("--background", type=int, default=500)
    p.set_defaults(fn=cmd_gen_scene)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    rep = Reporter(args.json)
    try:
        code = args.fn(args, rep)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except roi.SceneFormatError as exc:
        print(f"scene parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return rep.finish(code)


if __name__ == "__main__":
    sys.exit(main())
