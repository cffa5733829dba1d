"""Verification suites shared by the CLI and the acceptance tests.

Each suite pits an implementation against an independent route through
the same math (quadratic oracle, finite differences, Monte Carlo
sampling, analytic cases) and reports the worst observed error against
its tolerance.
"""

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import bench
from . import losses
from . import refine
from . import roi
from . import transformer as tfm


# ---------------------------------------------------------------------------
# Gradcheck primitives.
# ---------------------------------------------------------------------------


def kink_free(rng, shape, margin=0.05):
    """Gaussian sample with every entry pushed at least ``margin`` from zero.

    Finite differences are meaningless across the ReLU kink, so gradcheck
    inputs keep a safety margin around it.
    """
    x = rng.normal(size=shape)
    sign = np.where(x >= 0, 1.0, -1.0)
    return sign * np.maximum(np.abs(x), margin)


def gradcheck_error(analytic, fd, abs_floor=1e-8):
    """Worst-case error: relative where |fd| >= floor, absolute below it."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    diff = np.abs(analytic - fd)
    big = np.abs(fd) >= abs_floor
    worst = 0.0
    if big.any():
        worst = float((diff[big] / np.abs(fd[big])).max())
    if (~big).any():
        worst = max(worst, float(diff[~big].max()))
    return worst


def central_difference(loss_fn, arr, h=1e-5):
    """Central finite-difference gradient of ``loss_fn()`` w.r.t. ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_fn()
        arr[idx] = orig - h
        down = loss_fn()
        arr[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
        it.iternext()
    return grad


# ---------------------------------------------------------------------------
# Suite plumbing.
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst: float
    tol: float
    passed: bool
    failures: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def summary(self):
        state = "pass" if self.passed else "FAIL"
        return (
            f"[{state}] {self.name}: {self.cases} cases, "
            f"worst error {self.worst:.3e} (tol {self.tol:.1e})"
        )

    def as_dict(self):
        return {
            "name": self.name,
            "cases": self.cases,
            "worst": self.worst,
            "tol": self.tol,
            "passed": self.passed,
            "failures": self.failures,
            "details": self.details,
        }


# ---------------------------------------------------------------------------
# Attention: linearized form against the quadratic oracle.
# ---------------------------------------------------------------------------

GRID_SIZES = (1, 2, 3, 8, 64)
GRID_DIMS = (1, 4, 16)
GRID_HEADS = (1, 2, 4)
GRID_SCALES = (0.0, 0.5, 1.1, 1.3169)


def equivalence_suite(seed=0, sizes=GRID_SIZES, dims=GRID_DIMS, heads=GRID_HEADS,
                      scales=GRID_SCALES, seeds_per_case=3, tol=1e-6, backend=None):
    """Linear vs direct cosh-attention over the full size/head/scale grid.

    Checks both the bare kernels and the multi-head assembly (the latter
    against a per-head direct-form evaluation).
    """
    worst = 0.0
    cases = 0
    failures = []
    per_case = {}
    for n in sizes:
        for d in dims:
            for a in scales:
                case_worst = 0.0
                for s in range(seeds_per_case):
                    rng = np.random.default_rng([seed, n, d, s])
                    q, k, v = rng.normal(size=(3, n, d))
                    lin = att.cosh_attention_linear(q, k, v, a, n, backend=backend)
                    direct = att.cosh_attention_direct(q, k, v, a, n)
                    err = float(np.abs(lin - direct).max())
                    case_worst = max(case_worst, err)
                    cases += 1
                    if err >= tol:
                        failures.append(f"kernel n={n} d={d} a={a} seed={[seed, n, d, s]}: {err:.3e}")
                per_case[f"kernel n={n} d={d} a={a}"] = case_worst
                worst = max(worst, case_worst)
            for h in heads:
                if d % h:
                    continue
                for a in scales:
                    case_worst = 0.0
                    for s in range(seeds_per_case):
                        rng = np.random.default_rng([seed, n, d, h, s])
                        x = rng.normal(size=(n, d))
                        params = att.AttentionParams.create(d, h, a, rng)
                        lin = att.multihead_cosh_attention(x, x, params, backend=backend)
                        direct = att.multihead_cosh_attention(x, x, params, kernel="direct")
                        err = float(np.abs(lin - direct).max())
                        case_worst = max(case_worst, err)
                        cases += 1
                        if err >= tol:
                            failures.append(
                                f"multihead n={n} d={d} h={h} a={a} seed={[seed, n, d, h, s]}: {err:.3e}"
                            )
                    per_case[f"multihead n={n} d={d} h={h} a={a}"] = case_worst
                    worst = max(worst, case_worst)
    return SuiteResult("oracle equivalence", cases, worst, tol, not failures, failures,
                       details={"per_case_worst": per_case})


def reweight_bound_suite(samples=100_000, seed=0):
    """Nonnegativity of the positional weight for every scale up to the bound."""
    rng = np.random.default_rng(seed)
    low = 0.0
    cases = 0
    failures = []
    for _ in range(samples):
        a = rng.uniform(0.0, att.A_MAX)
        m = int(rng.integers(1, 10_000))
        i = int(rng.integers(0, m + 1))
        j = int(rng.integers(max(0, i - m), min(m, i + m) + 1))
        val = att.reweight(a, i, j, m)
        low = min(low, val)
        cases += 1
    if low < -1e-12:
        failures.append(f"weight dipped to {low:.3e}")
    beyond = att.reweight(1.35, 1000, 0, 1000, check=False)
    if beyond >= 0:
        failures.append(f"scale 1.35 at full distance stayed nonnegative ({beyond:.3e})")
    return SuiteResult(
        "reweight nonnegativity", cases, abs(min(low, 0.0)), 1e-12, not failures,
        failures, details={"beyond_bound_value": float(beyond)}
    )


# ---------------------------------------------------------------------------
# Geometry: clipped IoU against Monte Carlo, target round trips.
# ---------------------------------------------------------------------------


def _random_overlapping_pair(rng):
    b1 = roi.Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(1, 3, 3), rng.uniform(-np.pi, np.pi))
    off = rng.uniform(-1.5, 1.5, 3)
    b2 = roi.Box3D(
        b1.x + off[0], b1.y + off[1], b1.z + off[2],
        *rng.uniform(1, 3, 3), rng.uniform(-np.pi, np.pi),
    )
    return b1, b2


def iou_suite(pairs=100, samples=1_000_000, tol=5e-3, seed=0):
    """Rotated IoU against the sampling estimate, plus three analytic cases."""
    failures = []
    worst = 0.0
    unit = roi.Box3D(0, 0, 0, 1, 1, 1, 0.0)
    analytic = [
        (roi.iou_3d(unit, unit), 1.0, "identical"),
        (roi.iou_3d(unit, roi.Box3D(100, 0, 0, 1, 1, 1, 0.0)), 0.0, "disjoint"),
        (roi.iou_3d(unit, roi.Box3D(0.5, 0, 0, 1, 1, 1, 0.0)), 1.0 / 3.0, "half offset"),
    ]
    for got, want, label in analytic:
        err = abs(got - want)
        worst = max(worst, err)
        if err > 1e-12:
            failures.append(f"analytic case {label}: got {got!r}, want {want!r}")

    rng = np.random.default_rng(seed)
    for idx in range(pairs):
        b1, b2 = _random_overlapping_pair(rng)
        exact = roi.iou_3d(b1, b2)
        estimate = roi.monte_carlo_iou(b1, b2, samples, seed=seed * 7919 + idx)
        err = abs(exact - estimate)
        worst = max(worst, err)
        if err >= tol:
            failures.append(f"pair {idx}: clipped {exact:.5f} vs sampled {estimate:.5f}")
    return SuiteResult("rotated IoU vs Monte Carlo", pairs + 3, worst, tol, not failures, failures)


def roundtrip_suite(pairs=1000, tol=1e-9, seed=0):
    """Regression targets decode back to the ground truth box."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for idx in range(pairs):
        prop = roi.Box3D(*rng.uniform(-20, 20, 3), *rng.uniform(0.5, 5, 3),
                         rng.uniform(-np.pi, np.pi))
        gt = roi.Box3D(*rng.uniform(-20, 20, 3), *rng.uniform(0.5, 5, 3),
                       rng.uniform(-np.pi, np.pi))
        back = losses.decode_regression(prop, losses.regression_targets(prop, gt))
        err = float(np.abs(back.as_array() - gt.as_array()).max())
        worst = max(worst, err)
        if err >= tol:
            failures.append(f"pair {idx}: max field error {err:.3e}")
    return SuiteResult("target round trip", pairs, worst, tol, not failures, failures)


def confidence_target_suite():
    """Exact ramp values at the standard thresholds."""
    expected = {0.0: 0.0, 0.25: 0.0, 0.5: 0.5, 0.75: 1.0, 1.0: 1.0}
    failures = []
    worst = 0.0
    for iou, want in expected.items():
        got = losses.confidence_target(iou)
        err = abs(got - want)
        worst = max(worst, err)
        if got != want:
            failures.append(f"iou={iou}: got {got}, want {want}")
    return SuiteResult("confidence target ramp", len(expected), worst, 0.0,
                       not failures, failures)


# ---------------------------------------------------------------------------
# Gradients: analytic backward passes against central differences.
# ---------------------------------------------------------------------------


def attention_gradcheck_suite(seed=0, n=6, d=4, a=1.1, tol=1e-4, h=1e-5):
    rng = np.random.default_rng(seed)
    q = kink_free(rng, (n, d))
    k = kink_free(rng, (n, d))
    v = kink_free(rng, (n, d))
    d_out = rng.normal(size=(n, d))
    grads = att.cosh_attention_backward(q, k, v, a, n, d_out)

    def loss():
        return float((d_out * att.cosh_attention_linear(q, k, v, a, n)).sum())

    worst = 0.0
    failures = []
    for label, arr, analytic in (("dQ", q, grads.dq), ("dK", k, grads.dk), ("dV", v, grads.dv)):
        err = gradcheck_error(analytic, central_difference(loss, arr, h=h))
        worst = max(worst, err)
        if err >= tol:
            failures.append(f"{label}: rel err {err:.3e}")

    zero_grads = att.cosh_attention_backward(q, k, v, a, n, np.zeros_like(d_out))
    if any(np.abs(g).max() > 0 for g in (zero_grads.dq, zero_grads.dk, zero_grads.dv)):
        failures.append("zero upstream gradient produced nonzero gradients")
    return SuiteResult("attention gradcheck", 3, worst, tol, not failures, failures)


def _micro_model_and_batch(seed=0):
    cfg = refine.ModelConfig(d=8, n_heads=2, n_blocks=1, a=1.1, n_points=8,
                             d_ff=16, embed_hidden=8)
    model = refine.RefinementModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # all paths active: the zero query would sit in the attention dead zone
    model.decoder.query_embedding[:] = kink_free(rng, (1, cfg.d), margin=0.2)
    batch = []
    for iou in (0.9, 0.62, 0.15):
        feats = kink_free(rng, (cfg.n_points, roi.FEATURE_WIDTH), margin=0.02)
        targets = losses.TrainTargets(
            c_t=losses.confidence_target(iou), reg_t=rng.normal(size=7) * 0.2, iou=iou
        )
        batch.append(refine.BatchEntry(feats, targets, None, None))
    return model, batch


def model_gradcheck_suite(seed=0, tol=1e-3, h=1e-5):
    """Every parameter of the micro refinement model against central differences.

    h = 1e-5 keeps the finite-difference round-off noise well under the
    1e-8 absolute floor of the comparison metric.
    """
    model, batch = _micro_model_and_batch(seed)
    targets = [e.targets for e in batch]

    def loss():
        logits = np.empty(len(batch))
        regs = np.empty((len(batch), losses.REG_WIDTH))
        for i, e in enumerate(batch):
            logits[i], regs[i], _ = model.forward(e.features)
        b, _, _ = losses.rcnn_loss_and_grads(logits, regs, targets, seed=0)
        return b.l_rcnn

    logits = np.empty(len(batch))
    regs = np.empty((len(batch), losses.REG_WIDTH))
    caches = []
    for i, e in enumerate(batch):
        logits[i], regs[i], cache = model.forward(e.features)
        caches.append(cache)
    _, d_logits, d_regs = losses.rcnn_loss_and_grads(logits, regs, targets, seed=0)
    total = None
    for i in range(len(batch)):
        grads = model.backward(caches[i], d_logits[i], d_regs[i])
        if total is None:
            total = grads
        else:
            for name, g in grads.items():
                total[name] += g

    worst = 0.0
    cases = 0
    failures = []
    worst_name = ""
    for name, tensor in model.named_tensors():
        err = gradcheck_error(total[name], central_difference(loss, tensor, h=h))
        cases += 1
        if err > worst:
            worst, worst_name = err, name
        if err >= tol:
            failures.append(f"{name}: rel err {err:.3e}")
    return SuiteResult("whole-model gradcheck", cases, worst, tol, not failures,
                       failures, details={"worst_parameter": worst_name})


# ---------------------------------------------------------------------------
# Structure: permutation behavior of the encoder/decoder at a = 0.
# ---------------------------------------------------------------------------


def permutation_suite(seed=0, n=24, d=16, n_heads=4, tol=1e-9):
    rng = np.random.default_rng(seed)
    blocks = [
        tfm.EncoderBlockParams.create(d, n_heads, 0.0, 2 * d, rng) for _ in range(3)
    ]
    dec = tfm.DecoderParams.create(d, n_heads, 0.0, 2 * d, rng)
    dec.query_embedding = kink_free(rng, (1, d))
    x = rng.normal(size=(n, d))
    perm = rng.permutation(n)

    enc = tfm.encoder_stack(x, blocks)
    enc_perm = tfm.encoder_stack(x[perm], blocks)
    equiv_err = float(np.abs(enc_perm - enc[perm]).max())

    dec_base = tfm.decode_global(enc, dec)
    dec_perm = tfm.decode_global(enc[perm], dec)
    invar_err = float(np.abs(dec_perm - dec_base).max())

    failures = []
    if equiv_err >= tol:
        failures.append(f"encoder equivariance error {equiv_err:.3e}")
    if invar_err >= tol:
        failures.append(f"decoder invariance error {invar_err:.3e}")
    worst = max(equiv_err, invar_err)
    return SuiteResult("permutation properties at a=0", 2, worst, tol,
                       not failures, failures)


# ---------------------------------------------------------------------------
# Scaling, ablation, and the end-to-end demo.
# ---------------------------------------------------------------------------

LINEAR_SLOPE_RANGE = (0.8, 1.4)
SOFTMAX_SLOPE_RANGE = (1.7, 2.3)


def complexity_suite(n_list=bench.DEFAULT_N_LIST, d=bench.DEFAULT_D,
                     reps=bench.DEFAULT_REPS, seed=0, backend=None):
    """Runtime scaling: near-linear kernel vs near-quadratic softmax."""
    records = bench.run_sweep(n_list=n_list, d=d, reps=reps, seed=seed, backend=backend)
    slopes = bench.slopes_by_kernel(records)
    failures = []
    lin, soft = slopes.get("cosh_linear"), slopes.get("softmax")
    if lin is None or not LINEAR_SLOPE_RANGE[0] < lin < LINEAR_SLOPE_RANGE[1]:
        failures.append(f"linear kernel slope {lin} outside {LINEAR_SLOPE_RANGE}")
    if soft is None or not SOFTMAX_SLOPE_RANGE[0] < soft < SOFTMAX_SLOPE_RANGE[1]:
        failures.append(f"softmax slope {soft} outside {SOFTMAX_SLOPE_RANGE}")
    n_top = max(n_list)
    top = {r.kernel: r.median_ns for r in records if r.n == n_top and r.status == "ok"}
    if not top.get("cosh_linear", np.inf) < top.get("softmax", 0.0):
        failures.append(f"linear kernel not faster than softmax at N={n_top}")
    return SuiteResult(
        "complexity scaling", len(records), 0.0, 0.0, not failures, failures,
        details={"slopes": slopes, "records": [r.csv_row() for r in records]},
    )


ABLATION_SCALES = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3169)
REDUCTION_TARGET = 0.5


def ablation_suite(a_list=ABLATION_SCALES, steps=200, seed=0):
    """Loss-reduction robustness across re-weighting scales on identical data."""
    rows = []
    failures = []
    for a in a_list:
        cfg = refine.ModelConfig.desk(a=a)
        result = refine.train_toy(model_config=cfg, steps=steps, seed=seed)
        reduction = 1.0 - result.final_loss / result.initial_loss
        rows.append(
            {"a": a, "init_loss": result.initial_loss,
             "final_loss": result.final_loss, "reduction_pct": 100.0 * reduction}
        )
        if reduction < REDUCTION_TARGET:
            failures.append(f"a={a}: reduction {100 * reduction:.1f}% < 50%")
    worst = min(r["reduction_pct"] for r in rows)
    return SuiteResult(
        "re-weighting scale sweep", len(rows), worst, 100 * REDUCTION_TARGET,
        not failures, failures, details={"rows": rows},
    )


def demo_suite(seed=0, steps=200, scene=None, noise=None, model=None):
    """Synthetic refinement demo: train, refine every proposal, compare IoU.

    Returns (suite result, model, train result or None when a pre-trained
    model was supplied).
    """
    if scene is None:
        scene = roi.generate_scene(
            roi.SceneConfig(n_boxes=4, points_per_box=160, n_background=240), seed=seed
        )
    cfg = model.config if model is not None else refine.ModelConfig.desk()
    proposals = [
        roi.perturb_to_proposal(gt, noise, seed=seed * 613 + i)
        for i, gt in enumerate(scene.gt_boxes)
    ]
    train_result = None
    if model is None:
        batch = refine.build_training_batch(scene, cfg, seed=seed, proposals=proposals)
        train_result = refine.train_toy(model_config=cfg, steps=steps, seed=seed, batch=batch)
        model = train_result.model

    rows = []
    for i, (gt, prop) in enumerate(zip(scene.gt_boxes, proposals)):
        out, refined = refine.refine_proposal(model, scene, prop, seed=seed * 769 + i)
        rows.append(
            {
                "proposal": i,
                "iou_before": roi.iou_3d(prop, gt),
                "iou_after": roi.iou_3d(refined, gt),
                "confidence": out.confidence,
            }
        )
    mean_before = float(np.mean([r["iou_before"] for r in rows]))
    mean_after = float(np.mean([r["iou_after"] for r in rows]))
    failures = []
    if mean_after < mean_before:
        failures.append(
            f"mean IoU dropped: {mean_before:.4f} -> {mean_after:.4f}"
        )
    return SuiteResult(
        "refinement demo", len(rows), mean_before - mean_after, 0.0,
        not failures, failures,
        details={"rows": rows, "mean_before": mean_before, "mean_after": mean_after,
                 "mean_delta": mean_after - mean_before},
    ), model, train_result
