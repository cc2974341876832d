"""Run configuration: one JSON document covering model, synthetic data and
training; unknown keys are rejected everywhere.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, replace

from .blocks import BackboneConfig, StageSpec
from .data import SynthConfig
from .detector import ModelConfig, TrainConfig, config_hash
from .losses import LossConfig
from .rpn import AnchorConfig


class ConfigError(ValueError):
    pass


def _check_keys(obj: dict, allowed: set[str], context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelConfig
    synth: SynthConfig
    train: TrainConfig
    n_train: int = 200
    n_test: int = 50


_MODEL_SCALARS = {
    "rpn_mid_channels",
    "lsc_mid_channels",
    "lsc_kernel",
    "roi_sampling_points",
    "rpn_pos_iou",
    "rpn_neg_iou",
    "rpn_batch_size",
    "rpn_pos_fraction",
    "nms_thresh_train",
    "nms_thresh_infer",
    "max_rois_after_nms",
    "rois_per_image",
    "head_pos_fraction",
    "head_fg_iou",
    "score_threshold",
    "append_gt_to_rois",
}

_SYNTH_KEYS = {
    "seed",
    "scene_size",
    "small_count",
    "large_count",
    "small_side",
    "large_side",
    "noise",
    "occlusion_prob",
    "shadow_prob",
    "distractor_count",
    "n_train",
    "n_test",
}

_TRAIN_KEYS = {
    "epochs",
    "rpn_epochs",
    "base_lr",
    "lr_decay",
    "lr_step_epochs",
    "momentum",
    "weight_decay",
}


def _parse_model(obj: dict) -> ModelConfig:
    _check_keys(obj, {"preset", "stn_source", "loss", "anchors"} | _MODEL_SCALARS, "model")
    preset = obj.get("preset", "toy")
    stn_source = obj.get("stn_source", "conv3_x")
    if preset == "paper":
        cfg = ModelConfig.paper(stn_source)
    elif preset == "toy":
        cfg = ModelConfig.toy(stn_source)
    else:
        raise ConfigError(f"unknown model preset: {preset}")
    overrides = {k: obj[k] for k in _MODEL_SCALARS if k in obj}
    if overrides:
        cfg = replace(cfg, **overrides)
    if "loss" in obj:
        loss_obj = obj["loss"]
        _check_keys(loss_obj, {"alpha", "lam", "gamma", "n_cls_rule", "n_regr_rule"}, "model.loss")
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_obj))
    if "anchors" in obj:
        a = obj["anchors"]
        _check_keys(a, {"scales", "aspect_ratios", "base_stride"}, "model.anchors")
        anchors = replace(
            cfg.anchors,
            **{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in a.items()
            },
        )
        cfg = replace(cfg, anchors=anchors)
    return cfg


def parse_run_config(obj: dict, default_seed: int = 0) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(obj, {"seed", "model", "synth", "train"}, "config")
    seed = int(obj.get("seed", default_seed))
    model = _parse_model(obj.get("model", {}))
    synth_obj = dict(obj.get("synth", {}))
    _check_keys(synth_obj, _SYNTH_KEYS, "synth")
    n_train = int(synth_obj.pop("n_train", 200))
    n_test = int(synth_obj.pop("n_test", 50))
    synth_obj.setdefault("seed", seed)
    for key in ("small_side", "large_side"):
        if key in synth_obj:
            synth_obj[key] = tuple(synth_obj[key])
    synth = SynthConfig(**synth_obj)
    train_obj = obj.get("train", {})
    _check_keys(train_obj, _TRAIN_KEYS, "train")
    train = TrainConfig(**train_obj)
    return RunConfig(seed, model, synth, train, n_train, n_test)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return parse_run_config(obj)


# ---------------------------------------------------------------------------
# model config <-> plain dicts (checkpoint manifests)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)

    def clean(v):
        if isinstance(v, tuple):
            return [clean(x) for x in v]
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v

    return clean(d)


def model_config_from_dict(d: dict) -> ModelConfig:
    backbone = d["backbone"]
    stages = {
        name: StageSpec(**backbone[name]) for name in ("stage2", "stage3", "stage4", "stage5")
    }
    return ModelConfig(
        preset=d["preset"],
        backbone=BackboneConfig(
            conv1_out=backbone["conv1_out"], stn_source=backbone["stn_source"], **stages
        ),
        anchors=AnchorConfig(
            scales=tuple(d["anchors"]["scales"]),
            aspect_ratios=tuple(d["anchors"]["aspect_ratios"]),
            base_stride=d["anchors"]["base_stride"],
        ),
        loss=LossConfig(**d["loss"]),
        **{
            k: (tuple(v) if isinstance(v, list) else v)
            for k, v in d.items()
            if k not in ("preset", "backbone", "anchors", "loss")
        },
    )


def run_config_hash(cfg: RunConfig) -> str:
    return config_hash({"seed": cfg.seed, "model": model_config_to_dict(cfg.model)})
