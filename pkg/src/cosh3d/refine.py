"""End-to-end proposal refinement.

Pipeline per proposal: spherical RoI sampling -> proposal-aware features ->
MLP embedding -> encoder stack -> single-query decoder -> confidence and
residual heads.  ``train_toy`` overfits the model on a fixed synthetic
batch with plain gradient descent through the analytic backward passes.
"""

from dataclasses import dataclass

import numpy as np

from . import losses
from . import roi
from . import transformer as tfm


class TrainingDivergedError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class ModelConfig:
    """Refinement model hyperparameters.

    Defaults mirror the full-scale operating point (d=64, 256 RoI points,
    3 encoder blocks); ``desk()`` is the reduced configuration the toy
    trainer and demo use.
    """

    d: int = 64
    n_heads: int = 4
    n_blocks: int = 3
    a: float = 1.1
    n_points: int = 256
    roi_alpha: float = 1.1
    d_ff: int | None = None        # defaults to 4 * d
    embed_hidden: int | None = None  # defaults to d

    @property
    def ffn_width(self):
        return 4 * self.d if self.d_ff is None else self.d_ff

    @property
    def hidden_width(self):
        return self.d if self.embed_hidden is None else self.embed_hidden

    @classmethod
    def desk(cls, **overrides):
        base = dict(d=32, n_heads=4, n_blocks=3, a=1.1, n_points=64)
        base.update(overrides)
        return cls(**base)


@dataclass
class RefinementOutput:
    """Predicted confidence in (0, 1) plus the 7-vector box residual."""

    confidence: float
    residual: np.ndarray


class RefinementModel:
    """Embedding + encoder stack + decoder + detection heads."""

    def __init__(self, config=None, seed=0):
        self.config = config if config is not None else ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.embedding = tfm.EmbeddingParams.create(cfg.d, cfg.hidden_width, rng)
        self.blocks = [
            tfm.EncoderBlockParams.create(cfg.d, cfg.n_heads, cfg.a, cfg.ffn_width, rng)
            for _ in range(cfg.n_blocks)
        ]
        self.decoder = tfm.DecoderParams.create(cfg.d, cfg.n_heads, cfg.a, cfg.ffn_width, rng)
        self.heads = losses.HeadParams.create(cfg.d, cfg.ffn_width, rng)

    def named_tensors(self):
        yield from self.embedding.named_tensors("embed.")
        for i, blk in enumerate(self.blocks):
            yield from blk.named_tensors(f"block{i}.")
        yield from self.decoder.named_tensors("decoder.")
        yield from self.heads.named_tensors("heads.")

    def forward(self, feats):
        """(n, 28) features -> (confidence logit, residual, cache)."""
        x, embed_cache = tfm.embed_forward(feats, self.embedding)
        x, stack_caches = tfm.encoder_stack_forward(x, self.blocks)
        g, dec_cache = tfm.decode_forward(x, self.decoder)
        logit, reg, head_cache = losses.heads_forward(g, self.heads)
        return logit, reg, (embed_cache, stack_caches, dec_cache, head_cache)

    def predict(self, feats):
        logit, reg, _ = self.forward(feats)
        return RefinementOutput(confidence=losses.sigmoid(logit), residual=reg)

    def backward(self, cache, d_logit, d_reg):
        """Gradients for every parameter, keyed like ``named_tensors``."""
        embed_cache, stack_caches, dec_cache, head_cache = cache
        grads = {}
        d_g, head_grads = losses.heads_backward(head_cache, d_logit, d_reg, self.heads)
        for name, g in head_grads.items():
            grads["heads." + name] = g
        d_encoded, dec_grads = tfm.decode_backward(dec_cache, d_g, self.decoder)
        for name, g in dec_grads.items():
            grads["decoder." + name] = g
        d_x0, block_grads = tfm.encoder_stack_backward(stack_caches, d_encoded, self.blocks)
        for i, bg in enumerate(block_grads):
            for name, g in bg.items():
                grads[f"block{i}." + name] = g
        for name, g in tfm.embed_backward(embed_cache, d_x0, self.embedding).items():
            grads["embed." + name] = g
        return grads

    def apply_gradients(self, grads, lr):
        for name, tensor in self.named_tensors():
            tensor -= lr * grads[name]

    def save(self, path):
        cfg = self.config
        tfm.write_tensor_stream(path, cfg.d, cfg.n_heads, cfg.n_blocks, self.named_tensors())

    @classmethod
    def load(cls, path, a=1.1, n_points=None, roi_alpha=1.1, d_ff=None, embed_hidden=None):
        """Rebuild from a parameter file.

        The stream stores the header (d, head count, block count) and the
        learned tensors only; the re-weighting scale, RoI settings, and any
        non-default layer widths are configuration and must be supplied
        (defaults match the standard operating point).
        """

        def factory(d, n_heads, n_blocks):
            cfg = ModelConfig(
                d=d, n_heads=n_heads, n_blocks=n_blocks, a=a,
                n_points=n_points if n_points is not None else ModelConfig.n_points,
                roi_alpha=roi_alpha, d_ff=d_ff, embed_hidden=embed_hidden,
            )
            return cls(cfg, seed=0)

        return tfm.read_tensor_stream(path, factory)


def proposal_features(scene, proposal, config, seed):
    """RoI sampling plus feature encoding for one proposal."""
    pts = roi.sample_roi_points(scene, proposal, config.roi_alpha, config.n_points, seed)
    return roi.encode_proposal_features(pts, proposal)


def refine_proposal(model, scene, proposal, seed=0):
    """Run one proposal through the model; returns (output, refined box)."""
    feats = proposal_features(scene, proposal, model.config, seed)
    out = model.predict(feats)
    return out, losses.decode_regression(proposal, out.residual)


# ---------------------------------------------------------------------------
# Training batch construction and the toy trainer.
# ---------------------------------------------------------------------------


@dataclass
class BatchEntry:
    features: np.ndarray
    targets: losses.TrainTargets
    proposal: roi.Box3D
    gt: roi.Box3D


def _background_box(gt, rng):
    # same-sized box pushed fully clear of the object: IoU exactly 0
    ang = rng.uniform(0, 2 * np.pi)
    shift = 2.5 * np.sqrt((gt.l / 2) ** 2 + (gt.w / 2) ** 2)
    return roi.Box3D(
        x=gt.x + shift * np.cos(ang),
        y=gt.y + shift * np.sin(ang),
        z=gt.z,
        l=gt.l, w=gt.w, h=gt.h,
        theta=rng.uniform(-np.pi, np.pi),
    )


_TIGHT_NOISE = roi.ProposalNoise(center=0.08, log_extent=0.04, yaw=0.04, iou_floor=0.75)


def build_training_batch(scene, config, seed, proposals=None, include_background=True):
    """Fixed supervision batch for one scene.

    Per ground-truth box: one tight proposal (confidence target saturates
    at 1), one default-noise proposal, and optionally one far background
    box (target 0).  Caller-supplied ``proposals`` are paired with their
    nearest ground truth and added as-is.
    """
    rng = np.random.default_rng(seed)
    entries = []

    def add(prop, gt):
        iou = roi.iou_3d(prop, gt)
        feats = proposal_features(scene, prop, config, int(rng.integers(2**63)))
        entries.append(
            BatchEntry(feats, losses.compute_targets(prop, gt, iou), prop, gt)
        )

    for gt in scene.gt_boxes:
        add(roi.perturb_to_proposal(gt, _TIGHT_NOISE, int(rng.integers(2**63))), gt)
        add(roi.perturb_to_proposal(gt, seed=int(rng.integers(2**63))), gt)
        if include_background:
            add(_background_box(gt, rng), gt)

    for prop in proposals or []:
        gt = max(scene.gt_boxes, key=lambda b: roi.iou_3d(prop, b))
        add(prop, gt)
    return entries


@dataclass
class TrainResult:
    history: list
    model: RefinementModel
    batch: list

    @property
    def initial_loss(self):
        return self.history[0].l_rcnn

    @property
    def final_loss(self):
        return self.history[-1].l_rcnn

    def history_rows(self):
        """(step, l_iou, l_reg, l_rcnn) rows for the loss-history CSV."""
        return [
            (step, b.l_iou, b.l_reg, b.l_rcnn) for step, b in enumerate(self.history)
        ]


DEFAULT_TRAIN_SCENES = 2
DEFAULT_LR = 0.05


def train_toy(scene_config=None, model_config=None, steps=200, lr=DEFAULT_LR, seed=0,
              batch=None, n_scenes=DEFAULT_TRAIN_SCENES):
    """Overfit the refinement model on a fixed synthetic batch.

    Plain gradient descent with a fixed learning rate on every parameter.
    Returns the per-step loss history together with the trained model;
    raises :class:`TrainingDivergedError` if the loss leaves the reals.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    scene_cfg = scene_config if scene_config is not None else roi.SceneConfig(
        n_boxes=4, points_per_box=160, n_background=240
    )
    cfg = model_config if model_config is not None else ModelConfig.desk()

    if batch is None:
        batch = []
        for s in range(n_scenes):
            scene = roi.generate_scene(scene_cfg, seed=seed * 7919 + s)
            batch.extend(build_training_batch(scene, cfg, seed=seed * 104729 + s))
    if not batch:
        raise ValueError("training batch is empty")

    model = RefinementModel(cfg, seed=seed)
    targets = [e.targets for e in batch]
    history = []

    for step in range(steps):
        logits = np.empty(len(batch))
        regs = np.empty((len(batch), losses.REG_WIDTH))
        caches = []
        for i, entry in enumerate(batch):
            logits[i], regs[i], cache = model.forward(entry.features)
            caches.append(cache)

        breakdown, d_logits, d_regs = losses.rcnn_loss_and_grads(
            logits, regs, targets, seed=seed
        )
        if not np.isfinite(breakdown.l_rcnn):
            raise TrainingDivergedError(step)
        history.append(breakdown)

        if lr != 0.0:
            total = None
            for i in range(len(batch)):
                if d_logits[i] == 0.0 and not d_regs[i].any():
                    continue
                grads = model.backward(caches[i], d_logits[i], d_regs[i])
                if total is None:
                    total = grads
                else:
                    for name, g in grads.items():
                        total[name] += g
            if total is not None:
                model.apply_gradients(total, lr)

    return TrainResult(history=history, model=model, batch=batch)
