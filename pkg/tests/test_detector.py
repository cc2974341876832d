import numpy as np
import pytest

import lrcnn.detector as detector_mod
from lrcnn import tensor as T
from lrcnn.data import SynthConfig, generate_scene, scene_training_arrays
from lrcnn.detector import (
    Detector,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    learning_rate,
    load_checkpoint,
    normalize_image,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def toy_model():
    return Detector(ModelConfig.toy(), seed=0)


def tiny_scene(seed=3, size=64):
    cfg = SynthConfig(seed=seed, scene_size=size, small_count=1, large_count=1)
    return generate_scene(cfg, 0)


class TestForward:
    def test_joint_forward_shapes(self, toy_model):
        scene = tiny_scene(size=128)
        img, boxes, classes = scene_training_arrays(scene)
        res = toy_model.forward(
            normalize_image(img), boxes, classes, phase="joint", rng=np.random.default_rng(0)
        )
        assert res.proposals.shape[0] <= 600
        assert res.rois.shape == (128, 4)
        assert res.class_probs.shape == (128, 3)
        assert res.box_deltas.shape == (128, 12)
        assert np.isfinite(res.losses.total.item())

    def test_no_gt_zero_regression(self, toy_model):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        res = toy_model.forward(
            normalize_image(img),
            np.zeros((0, 4)),
            np.zeros(0, dtype=int),
            phase="joint",
            rng=np.random.default_rng(0),
        )
        assert res.losses.rpn.reg.item() == 0.0
        assert np.isfinite(res.losses.total.item())

    def test_rpn_phase_skips_head(self, toy_model):
        scene = tiny_scene()
        img, boxes, classes = scene_training_arrays(scene)
        res = toy_model.forward(
            normalize_image(img), boxes, classes, phase="rpn", rng=np.random.default_rng(0)
        )
        assert res.class_probs is None
        assert res.losses.head.total.item() == 0.0
        assert res.losses.total.item() == res.losses.rpn.total.item()

    def test_stride_incompatible_rejected(self, toy_model):
        with pytest.raises(ValueError, match="stride"):
            toy_model.forward(np.zeros((1, 3, 65, 64)))

    def test_training_needs_gt(self, toy_model):
        with pytest.raises(ValueError, match="ground truth"):
            toy_model.forward(np.zeros((1, 3, 64, 64)), phase="joint")

    def test_twin_taps_see_identical_rois(self, toy_model, monkeypatch):
        captured = {}
        real_roi_align = detector_mod.roi_align
        real_ps = detector_mod.ps_roi_align

        def spy_roi_align(features, rois, cfg):
            captured["st"] = np.array(rois)
            return real_roi_align(features, rois, cfg)

        def spy_ps(maps, rois, cfg, k, c):
            captured["ps"] = np.array(rois)
            return real_ps(maps, rois, cfg, k, c)

        monkeypatch.setattr(detector_mod, "roi_align", spy_roi_align)
        monkeypatch.setattr(detector_mod, "ps_roi_align", spy_ps)
        scene = tiny_scene()
        img, boxes, classes = scene_training_arrays(scene)
        toy_model.forward(
            normalize_image(img), boxes, classes, phase="joint", rng=np.random.default_rng(1)
        )
        np.testing.assert_array_equal(captured["st"], captured["ps"])

    def test_loss_finite_for_any_normalized_input(self, toy_model):
        rng = np.random.default_rng(2)
        img = rng.uniform(-1, 1, (1, 3, 64, 64))
        res = toy_model.forward(
            img, np.array([[5.0, 5.0, 20.0, 15.0]]), np.array([1]), phase="joint",
            rng=np.random.default_rng(0),
        )
        assert np.isfinite(res.losses.total.item())

    def test_normalize_image_range(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        img[0, 0] = 255
        out = normalize_image(img)
        assert out.shape == (1, 3, 8, 8)
        assert out.min() == -1.0 and out.max() == 1.0


class TestTraining:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert learning_rate(cfg, 0) == 0.05
        assert abs(learning_rate(cfg, 3) - 0.045) < 1e-15
        assert abs(learning_rate(cfg, 6) - 0.0405) < 1e-15

    def test_zero_lr_keeps_weights(self):
        model = Detector(ModelConfig.toy(), seed=1)
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        scene = tiny_scene()
        train(
            model,
            [scene_training_arrays(scene)],
            TrainConfig(epochs=2, rpn_epochs=1, base_lr=0.0),
            seed=0,
        )
        for k, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_two_runs_same_seed_identical_logs(self):
        scene = tiny_scene()
        data = [scene_training_arrays(scene)]

        def run():
            model = Detector(ModelConfig.toy(), seed=1)
            return train(model, data, TrainConfig(epochs=2, rpn_epochs=1), seed=5)

        assert run() == run()

    def test_single_batch_overfit_smoke(self):
        # losses stay finite and decrease over 50 joint steps on a fixed batch
        model = Detector(ModelConfig.toy(), seed=2)
        scene = tiny_scene(seed=9)
        data = [scene_training_arrays(scene)]
        rows = train(
            model, data, TrainConfig(epochs=50, rpn_epochs=0, base_lr=0.02), seed=0
        )
        totals = [float(r.split(",")[-1]) for r in rows[1:]]
        assert all(np.isfinite(totals))
        assert min(totals[-10:]) < totals[0]

    def test_200_joint_steps_halve_the_loss(self):
        model = Detector(ModelConfig.toy(), seed=3)
        scene = tiny_scene(seed=11)
        data = [scene_training_arrays(scene)]
        rows = train(
            model, data, TrainConfig(epochs=200, rpn_epochs=0, base_lr=0.02), seed=0
        )
        totals = [float(r.split(",")[-1]) for r in rows[1:]]
        assert min(totals[-5:]) <= 0.5 * totals[0]

    def test_divergence_aborts_with_step(self):
        model = Detector(ModelConfig.toy(), seed=4)
        scene = tiny_scene()
        data = [scene_training_arrays(scene)]
        with pytest.raises(TrainingDiverged, match="step"):
            train(model, data, TrainConfig(epochs=30, rpn_epochs=0, base_lr=1e6), seed=0)


class TestInference:
    def test_detections_well_formed(self, toy_model):
        scene = tiny_scene(size=128)
        dets = toy_model.infer(scene.image, score_threshold=0.0)
        from lrcnn.rpn import iou

        for d in dets:
            assert d.class_id in (1, 2)
            assert 0.0 <= d.score <= 1.0
            x1, y1, x2, y2 = d.box
            assert 0 <= x1 <= x2 <= 128 and 0 <= y1 <= y2 <= 128
        # NMS postcondition: no same-class pair overlaps above threshold
        for i, a in enumerate(dets):
            for b in dets[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= 0.5 + 1e-12

    def test_infer_tiled_runs_on_oversized_image(self, toy_model):
        rng = np.random.default_rng(5)
        big = (rng.uniform(0, 255, (200, 300, 3))).astype(np.uint8)
        dets = detector_mod.infer_tiled(toy_model, big, tile_size=128, overlap=16)
        for d in dets:
            x1, y1, x2, y2 = d.box
            assert 0 <= x1 <= x2 <= 300 and 0 <= y1 <= y2 <= 200


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        model = Detector(ModelConfig.toy(), seed=6)
        cfg_dict = {"preset": "toy"}
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, model, cfg_dict)
        clone = Detector(ModelConfig.toy(), seed=99)
        manifest = load_checkpoint(path, clone)
        assert manifest["config"] == cfg_dict
        for k, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, clone.parameters()[k].data)

    def test_overwrite_is_replace(self, tmp_path):
        model = Detector(ModelConfig.toy(), seed=7)
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, model, {"v": 1})
        model.head.fc_cls.bias.data = model.head.fc_cls.bias.data + 1.0
        save_checkpoint(path, model, {"v": 2})
        clone = Detector(ModelConfig.toy(), seed=8)
        manifest = load_checkpoint(path, clone)
        assert manifest["config"] == {"v": 2}
        np.testing.assert_array_equal(clone.head.fc_cls.bias.data, model.head.fc_cls.bias.data)

    def test_mismatched_model_rejected(self, tmp_path):
        model = Detector(ModelConfig.toy(), seed=9)
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, model, {})
        other = Detector(ModelConfig.toy(stn_source="conv4_x"), seed=9)
        # same parameter names but check passes; instead corrupt a shape
        import json
        import os

        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        first = sorted(manifest["tensors"])[0]
        manifest["tensors"][first]["file"] = manifest["tensors"][sorted(manifest["tensors"])[1]]["file"]
        with open(os.path.join(path, "manifest.json"), "w") as f:
            json.dump(manifest, f)
        with pytest.raises(ValueError):
            load_checkpoint(path, Detector(ModelConfig.toy(), seed=9))


class TestConfigPlumbing:
    def test_model_config_dict_roundtrip(self):
        from lrcnn.config import model_config_from_dict, model_config_to_dict

        for cfg in (ModelConfig.toy(), ModelConfig.paper("conv4_x")):
            d = model_config_to_dict(cfg)
            back = model_config_from_dict(d)
            assert back == cfg

    def test_run_config_parsing_and_strictness(self):
        from lrcnn.config import ConfigError, parse_run_config

        cfg = parse_run_config(
            {
                "seed": 3,
                "model": {"preset": "toy", "stn_source": "conv4_x", "score_threshold": 0.2},
                "synth": {"n_train": 4, "n_test": 2, "scene_size": 64},
                "train": {"epochs": 1},
            }
        )
        assert cfg.seed == 3
        assert cfg.model.backbone.stn_source == "conv4_x"
        assert cfg.model.score_threshold == 0.2
        assert cfg.synth.seed == 3  # inherits the top-level seed
        assert cfg.n_train == 4 and cfg.n_test == 2
        with pytest.raises(ConfigError, match="unknown keys"):
            parse_run_config({"seed": 1, "bogus": {}})
        with pytest.raises(ConfigError, match="unknown keys"):
            parse_run_config({"model": {"preset": "toy", "width": 3}})
        with pytest.raises(ConfigError, match="preset"):
            parse_run_config({"model": {"preset": "huge"}})

    def test_config_hash_stable(self):
        from lrcnn.config import RunConfig, run_config_hash
        from lrcnn.data import SynthConfig

        a = RunConfig(1, ModelConfig.toy(), SynthConfig(seed=1), TrainConfig())
        b = RunConfig(1, ModelConfig.toy(), SynthConfig(seed=1), TrainConfig())
        assert run_config_hash(a) == run_config_hash(b)
        c = RunConfig(2, ModelConfig.toy(), SynthConfig(seed=1), TrainConfig())
        assert run_config_hash(a) != run_config_hash(c)
