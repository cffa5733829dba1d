"""Training targets, refinement losses, and the two detection heads.

The confidence target is a clamped linear ramp of the proposal/ground-truth
IoU; the regression target is the normalized box residual.  The combined
loss is binary cross-entropy on the confidence plus an IoU-gated smooth-L1
on the residual.
"""

from dataclasses import dataclass

import numpy as np

from .roi import Box3D

ALPHA_F = 0.75  # foreground IoU threshold
ALPHA_B = 0.25  # background IoU threshold
ALPHA_R = 0.55  # regression gate
CONF_SAMPLE = 128
REG_SAMPLE = 64

REG_WIDTH = 7  # (x, y, z, l, w, h, theta) residual


def confidence_target(iou, alpha_f=ALPHA_F, alpha_b=ALPHA_B):
    """Clamped ramp: 0 below alpha_b, 1 above alpha_f, linear between."""
    if not alpha_b < alpha_f:
        raise ValueError(f"need alpha_b < alpha_f, got {alpha_b} >= {alpha_f}")
    if not (0.0 <= alpha_b and alpha_f <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    return float(min(1.0, max(0.0, (iou - alpha_b) / (alpha_f - alpha_b))))


def regression_targets(prop, gt):
    """Normalized 7-vector residual from proposal to ground truth.

    Planar offsets are scaled by the proposal's bottom diagonal, the
    vertical offset by its height, extents are log ratios, and the yaw
    residual is the raw angle difference.
    """
    d_diag = np.sqrt(prop.l**2 + prop.w**2)
    return np.array(
        [
            (gt.x - prop.x) / d_diag,
            (gt.y - prop.y) / d_diag,
            (gt.z - prop.z) / prop.h,
            np.log(gt.l / prop.l),
            np.log(gt.w / prop.w),
            np.log(gt.h / prop.h),
            gt.theta - prop.theta,
        ]
    )


def decode_regression(prop, reg):
    """Exact algebraic inverse of :func:`regression_targets`."""
    reg = np.asarray(reg, dtype=np.float64)
    if reg.shape != (REG_WIDTH,):
        raise ValueError(f"residual must have shape ({REG_WIDTH},), got {reg.shape}")
    d_diag = np.sqrt(prop.l**2 + prop.w**2)
    return Box3D(
        x=prop.x + reg[0] * d_diag,
        y=prop.y + reg[1] * d_diag,
        z=prop.z + reg[2] * prop.h,
        l=prop.l * np.exp(reg[3]),
        w=prop.w * np.exp(reg[4]),
        h=prop.h * np.exp(reg[5]),
        theta=prop.theta + reg[6],
    )


@dataclass
class TrainTargets:
    """Per-proposal supervision: confidence target, residual target, raw IoU."""

    c_t: float
    reg_t: np.ndarray
    iou: float


def compute_targets(prop, gt, iou, alpha_f=ALPHA_F, alpha_b=ALPHA_B):
    return TrainTargets(
        c_t=confidence_target(iou, alpha_f, alpha_b),
        reg_t=regression_targets(prop, gt),
        iou=float(iou),
    )


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def confidence_loss(c_pred, c_t):
    """Binary cross-entropy on a predicted probability."""
    c = min(max(float(c_pred), 1e-300), 1.0 - 1e-16)
    return float(-c_t * np.log(c) - (1.0 - c_t) * np.log(1.0 - c))


def confidence_loss_from_logit(z, c_t):
    """BCE evaluated in logit space; stable for any finite logit."""
    z = float(z)
    return float(max(z, 0.0) - z * c_t + np.log1p(np.exp(-abs(z))))


def smooth_l1(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) < 1.0, 0.5 * u * u, np.abs(u) - 0.5)


def smooth_l1_grad(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) < 1.0, u, np.sign(u))


def regression_loss(pred, target, iou, alpha_r=ALPHA_R):
    """Smooth-L1 summed over the 7 residual components; zero below the gate."""
    if iou < alpha_r:
        return 0.0
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(smooth_l1(pred - target).sum())


# ---------------------------------------------------------------------------
# Detection heads: two separate FFNs on the pooled representation.
# ---------------------------------------------------------------------------


@dataclass
class HeadParams:
    conf_w1: np.ndarray
    conf_b1: np.ndarray
    conf_w2: np.ndarray
    conf_b2: np.ndarray
    reg_w1: np.ndarray
    reg_b1: np.ndarray
    reg_w2: np.ndarray
    reg_b2: np.ndarray

    @classmethod
    def create(cls, d, d_ff, rng):
        def lin(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            conf_w1=lin(d, (d, d_ff)),
            conf_b1=lin(d, (d_ff,)),
            conf_w2=lin(d_ff, (d_ff, 1)),
            conf_b2=lin(d_ff, (1,)),
            reg_w1=lin(d, (d, d_ff)),
            reg_b1=lin(d, (d_ff,)),
            reg_w2=lin(d_ff, (d_ff, REG_WIDTH)),
            reg_b2=lin(d_ff, (REG_WIDTH,)),
        )

    def named_tensors(self, prefix=""):
        for name in ("conf_w1", "conf_b1", "conf_w2", "conf_b2",
                     "reg_w1", "reg_b1", "reg_w2", "reg_b2"):
            yield prefix + name, getattr(self, name)


def heads_forward(g, params):
    """(1, d) pooled representation -> (confidence logit, 7-vector residual)."""
    conf_pre = g @ params.conf_w1 + params.conf_b1
    conf_hid = np.maximum(conf_pre, 0.0)
    logit = float((conf_hid @ params.conf_w2 + params.conf_b2)[0, 0])
    reg_pre = g @ params.reg_w1 + params.reg_b1
    reg_hid = np.maximum(reg_pre, 0.0)
    reg = (reg_hid @ params.reg_w2 + params.reg_b2)[0]
    cache = (g, conf_pre, conf_hid, reg_pre, reg_hid)
    return logit, reg, cache


def heads_backward(cache, d_logit, d_reg, params):
    g, conf_pre, conf_hid, reg_pre, reg_hid = cache
    d_logit_arr = np.array([[d_logit]])
    d_reg_arr = np.asarray(d_reg, dtype=np.float64).reshape(1, REG_WIDTH)

    d_conf_hid = d_logit_arr @ params.conf_w2.T
    d_conf_pre = d_conf_hid * (conf_pre > 0)
    d_reg_hid = d_reg_arr @ params.reg_w2.T
    d_reg_pre = d_reg_hid * (reg_pre > 0)

    grads = {
        "conf_w1": g.T @ d_conf_pre,
        "conf_b1": d_conf_pre[0],
        "conf_w2": conf_hid.T @ d_logit_arr,
        "conf_b2": d_logit_arr[0],
        "reg_w1": g.T @ d_reg_pre,
        "reg_b1": d_reg_pre[0],
        "reg_w2": reg_hid.T @ d_reg_arr,
        "reg_b2": d_reg_arr[0],
    }
    d_g = d_conf_pre @ params.conf_w1.T + d_reg_pre @ params.reg_w1.T
    return d_g, grads


# ---------------------------------------------------------------------------
# Batch loss.
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_iou: float
    l_reg: float
    gated: bool

    @property
    def l_rcnn(self):
        return self.l_iou + self.l_reg


def rcnn_loss_and_grads(conf_logits, reg_preds, targets, alpha_r=ALPHA_R,
                        conf_sample=CONF_SAMPLE, reg_sample=REG_SAMPLE, seed=0):
    """Subsampled batch loss plus per-proposal upstream gradients.

    Confidence: mean BCE over a random subsample of at most ``conf_sample``
    proposals.  Regression: mean gated smooth-L1 over a random subsample of
    at most ``reg_sample`` proposals with IoU >= ``alpha_r``.  Gradients are
    zero for proposals outside the subsamples.
    """
    conf_logits = np.asarray(conf_logits, dtype=np.float64)
    reg_preds = np.asarray(reg_preds, dtype=np.float64).reshape(-1, REG_WIDTH)
    n = conf_logits.shape[0]
    if n == 0:
        raise ValueError("empty proposal batch")
    if len(targets) != n or reg_preds.shape[0] != n:
        raise ValueError("predictions and targets disagree in length")

    rng = np.random.default_rng(seed)
    c_t = np.array([t.c_t for t in targets])
    reg_t = np.vstack([t.reg_t for t in targets])
    iou = np.array([t.iou for t in targets])

    conf_idx = np.arange(n)
    if n > conf_sample:
        conf_idx = rng.choice(n, size=conf_sample, replace=False)
    gated_idx = np.nonzero(iou >= alpha_r)[0]
    if gated_idx.size > reg_sample:
        gated_idx = rng.choice(gated_idx, size=reg_sample, replace=False)

    d_logits = np.zeros(n)
    d_regs = np.zeros((n, REG_WIDTH))

    l_iou = 0.0
    for i in conf_idx:
        l_iou += confidence_loss_from_logit(conf_logits[i], c_t[i])
        d_logits[i] = (sigmoid(conf_logits[i]) - c_t[i]) / conf_idx.size
    l_iou /= conf_idx.size

    l_reg = 0.0
    if gated_idx.size:
        resid = reg_preds[gated_idx] - reg_t[gated_idx]
        l_reg = float(smooth_l1(resid).sum(axis=1).mean())
        d_regs[gated_idx] = smooth_l1_grad(resid) / gated_idx.size

    breakdown = LossBreakdown(l_iou=float(l_iou), l_reg=float(l_reg), gated=bool(gated_idx.size))
    return breakdown, d_logits, d_regs


def rcnn_loss(conf_logits, reg_preds, targets, alpha_r=ALPHA_R,
              conf_sample=CONF_SAMPLE, reg_sample=REG_SAMPLE, seed=0):
    """Batch loss only; see :func:`rcnn_loss_and_grads`."""
    breakdown, _, _ = rcnn_loss_and_grads(
        conf_logits, reg_preds, targets, alpha_r, conf_sample, reg_sample, seed
    )
    return breakdown
