"""End-to-end refinement model, toy trainer, and model serialization."""

import numpy as np
import pytest

from conftest import central_difference, gradcheck_error, kink_free

from cosh3d import losses, refine, roi


def micro_config():
    return refine.ModelConfig(
        d=8, n_heads=2, n_blocks=1, a=1.1, n_points=8, d_ff=16, embed_hidden=8
    )


def micro_batch(rng, n_entries=3):
    """Hand-built feature batch spanning gated and ungated proposals."""
    entries = []
    ious = [0.9, 0.62, 0.15][:n_entries]
    for iou in ious:
        feats = kink_free(rng, (8, roi.FEATURE_WIDTH), margin=0.02)
        targets = losses.TrainTargets(
            c_t=losses.confidence_target(iou), reg_t=rng.normal(size=7) * 0.2, iou=iou
        )
        entries.append(
            refine.BatchEntry(feats, targets, None, None)
        )
    return entries


class TestRefinementModel:
    def test_forward_shapes(self):
        model = refine.RefinementModel(micro_config(), seed=0)
        rng = np.random.default_rng(1)
        logit, reg, _ = model.forward(rng.normal(size=(8, roi.FEATURE_WIDTH)))
        assert isinstance(logit, float)
        assert reg.shape == (7,)

    def test_predict_confidence_in_unit_interval(self):
        model = refine.RefinementModel(micro_config(), seed=0)
        rng = np.random.default_rng(2)
        out = model.predict(rng.normal(size=(8, roi.FEATURE_WIDTH)))
        assert 0.0 < out.confidence < 1.0

    def test_deterministic_construction(self):
        m1 = refine.RefinementModel(micro_config(), seed=7)
        m2 = refine.RefinementModel(micro_config(), seed=7)
        for (n1, t1), (n2, t2) in zip(m1.named_tensors(), m2.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1, t2)

    def test_query_zero_initialized(self):
        model = refine.RefinementModel(micro_config(), seed=3)
        np.testing.assert_array_equal(model.decoder.query_embedding, 0.0)

    def test_save_load_round_trip(self, tmp_path):
        model = refine.RefinementModel(micro_config(), seed=4)
        rng = np.random.default_rng(5)
        # train-ish mutation so the file is not all init values
        model.decoder.query_embedding[:] = rng.normal(size=(1, 8))
        path = tmp_path / "model.bin"
        model.save(path)
        loaded = refine.RefinementModel.load(path, a=1.1, n_points=8, d_ff=16, embed_hidden=8)
        for (n1, t1), (n2, t2) in zip(model.named_tensors(), loaded.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1, t2)
        feats = rng.normal(size=(8, roi.FEATURE_WIDTH))
        l1, r1, _ = model.forward(feats)
        l2, r2, _ = loaded.forward(feats)
        assert l1 == l2
        np.testing.assert_array_equal(r1, r2)

    def test_whole_model_gradcheck(self):
        # every parameter of the micro model against central differences;
        # the query is randomized so all paths are active
        rng = np.random.default_rng(0)
        model = refine.RefinementModel(micro_config(), seed=0)
        model.decoder.query_embedding[:] = kink_free(rng, (1, 8), margin=0.2)
        batch = micro_batch(rng)
        targets = [e.targets for e in batch]

        def loss():
            logits = np.empty(len(batch))
            regs = np.empty((len(batch), 7))
            for i, e in enumerate(batch):
                logits[i], regs[i], _ = model.forward(e.features)
            b, _, _ = losses.rcnn_loss_and_grads(logits, regs, targets, seed=0)
            return b.l_rcnn

        logits = np.empty(len(batch))
        regs = np.empty((len(batch), 7))
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

        worst = {}
        for name, tensor in model.named_tensors():
            fd = central_difference(loss, tensor, h=1e-5)
            worst[name] = gradcheck_error(total[name], fd)
        bad = {k: v for k, v in worst.items() if v >= 1e-3}
        assert not bad, f"gradcheck failures: {bad}"


class TestTrainingBatch:
    def test_batch_composition(self):
        scene = roi.generate_scene(roi.SceneConfig(n_boxes=3, points_per_box=120, n_background=200), seed=0)
        batch = refine.build_training_batch(scene, refine.ModelConfig.desk(), seed=1)
        assert len(batch) == 9  # tight + default + background per box
        ious = np.array([e.targets.iou for e in batch])
        assert (ious >= 0.75).sum() >= 3   # tight proposals saturate the target
        assert (ious == 0.0).sum() == 3    # background boxes are fully clear

    def test_features_have_contract_width(self):
        scene = roi.generate_scene(roi.SceneConfig(n_boxes=2, points_per_box=100, n_background=100), seed=2)
        cfg = refine.ModelConfig.desk()
        batch = refine.build_training_batch(scene, cfg, seed=3)
        for e in batch:
            assert e.features.shape == (cfg.n_points, roi.FEATURE_WIDTH)

    def test_deterministic(self):
        scene = roi.generate_scene(seed=4)
        cfg = refine.ModelConfig.desk()
        b1 = refine.build_training_batch(scene, cfg, seed=5)
        b2 = refine.build_training_batch(scene, cfg, seed=5)
        for e1, e2 in zip(b1, b2):
            np.testing.assert_array_equal(e1.features, e2.features)
            assert e1.targets.iou == e2.targets.iou


class TestTrainToy:
    def test_zero_learning_rate_keeps_loss_constant(self):
        res = refine.train_toy(steps=5, lr=0.0, seed=0, n_scenes=1)
        vals = [b.l_rcnn for b in res.history]
        assert len(set(vals)) == 1

    def test_single_step_history(self):
        res = refine.train_toy(steps=1, seed=0, n_scenes=1)
        assert len(res.history) == 1

    def test_loss_decreases_over_short_run(self):
        res = refine.train_toy(steps=50, seed=0)
        assert res.final_loss < res.initial_loss
        # downward trend, not just endpoint luck
        h = [b.l_rcnn for b in res.history]
        assert np.mean(h[-10:]) < np.mean(h[:10])

    def test_divergence_raises_with_step(self):
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(
            refine.TrainingDivergedError
        ) as err:
            refine.train_toy(steps=40, lr=1e9, seed=0, n_scenes=1)
        assert err.value.step > 0

    def test_history_rows_format(self):
        res = refine.train_toy(steps=3, seed=0, n_scenes=1)
        rows = res.history_rows()
        assert [r[0] for r in rows] == [0, 1, 2]
        for _, l_iou, l_reg, l_rcnn in rows:
            assert l_rcnn == pytest.approx(l_iou + l_reg)

    def test_invalid_steps_rejected(self):
        with pytest.raises(ValueError):
            refine.train_toy(steps=0)


class TestRefineProposal:
    def test_refinement_returns_valid_box(self):
        scene = roi.generate_scene(roi.SceneConfig(n_boxes=2, points_per_box=150, n_background=150), seed=6)
        model = refine.RefinementModel(refine.ModelConfig.desk(), seed=0)
        prop = roi.perturb_to_proposal(scene.gt_boxes[0], seed=7)
        out, refined = refine.refine_proposal(model, scene, prop, seed=8)
        assert 0.0 < out.confidence < 1.0
        assert out.residual.shape == (7,)
        assert refined.l > 0 and refined.w > 0 and refined.h > 0

    def test_trained_model_improves_iou(self):
        scene = roi.generate_scene(
            roi.SceneConfig(n_boxes=3, points_per_box=150, n_background=150), seed=0
        )
        cfg = refine.ModelConfig.desk()
        proposals = [roi.perturb_to_proposal(gt, seed=100 + i) for i, gt in enumerate(scene.gt_boxes)]
        batch = refine.build_training_batch(scene, cfg, seed=0, proposals=proposals)
        res = refine.train_toy(model_config=cfg, steps=200, seed=0, batch=batch)
        before, after = [], []
        for i, (gt, prop) in enumerate(zip(scene.gt_boxes, proposals)):
            _, refined = refine.refine_proposal(res.model, scene, prop, seed=200 + i)
            before.append(roi.iou_3d(prop, gt))
            after.append(roi.iou_3d(refined, gt))
        assert np.mean(after) >= np.mean(before)
