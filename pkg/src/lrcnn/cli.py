"""Command-line entry point: synth, tile, train, eval, infer, gradcheck, shapes.

Exit codes: 0 ok, 1 config error, 2 data error, 3 verification failure.
Heavy imports happen inside main() so LRCNN_THREADS can cap the math
libraries' thread pools before they initialize.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

_PAPER_TABLE = [
    ("conv1", "1 x 3 x 1024 x 1024", "1 x 64 x 512 x 512"),
    ("conv2_x", "1 x 64 x 512 x 512", "1 x 256 x 256 x 256"),
    ("conv3_x", "1 x 256 x 256 x 256", "1 x 512 x 128 x 128"),
    ("conv4_x", "1 x 512 x 128 x 128", "1 x 1024 x 128 x 128"),
    ("conv5_x", "128 x 1024 x 7 x 7", "128 x 2048"),
    ("rpn", "1 x 1024 x 128 x 128", "128 x 5"),
    ("lsc", "1 x 512 x 128 x 128", "1 x 147 x 128 x 128"),
    ("roi_align", "1 x 1024 x 128 x 128 + 128 x 5", "128 x 1024 x 7 x 7"),
    ("ps_roi_align", "1 x 147 x 128 x 128 + 128 x 5", "128 x 3 x 7 x 7"),
    ("localization", "128 x 3 x 7 x 7", "128 x 6"),
    ("grid_generator", "128 x 2 x 3", "128 x 7 x 7 x 2"),
    ("sampler", "128 x 1024 x 7 x 7 + 128 x 7 x 7 x 2", "128 x 1024 x 7 x 7"),
    ("fc_cls", "128 x 2048", "128 x 3"),
    ("fc_bbox", "128 x 2048", "128 x 12"),
]


def _setup_threads() -> None:
    cap = os.environ.get("LRCNN_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrcnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("tile", help="crop a dataset into overlapping tiles")
    s.add_argument("--in", dest="src", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile-size", type=int, default=1024)
    s.add_argument("--overlap", type=int, default=100)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--phase", choices=["rpn", "joint"], default=None)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")

    s = sub.add_parser("infer", help="detect vehicles in one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", default=None, help="write detections JSONL here instead of stdout")
    s.add_argument("--dump-features", default=None, help="directory for raw pooled-feature dumps")
    s.add_argument("--tile-size", type=int, default=None, help="tile oversized images to this size")
    s.add_argument("--overlap", type=int, default=None)
    s.add_argument("--score-threshold", type=float, default=None)

    s = sub.add_parser("gradcheck", help="run the finite-difference suite")
    s.add_argument("--op", default=None)
    s.add_argument("--eps", type=float, default=1e-5)

    s = sub.add_parser("shapes", help="assert architecture-table conformance")
    s.add_argument("--preset", choices=["paper", "toy"], default="paper")
    return p


def _cmd_synth(args) -> int:
    from .config import load_run_config
    from .data import synth_generate, write_dataset

    cfg = load_run_config(args.config)
    scenes = synth_generate(cfg.synth, cfg.n_train + cfg.n_test)
    splits = ["train"] * cfg.n_train + ["test"] * cfg.n_test
    write_dataset(args.out, scenes, splits, extra={"seed": cfg.synth.seed})
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_tile(args) -> int:
    from .data import Annotation, Scene, load_dataset, tile_image, write_dataset

    scenes = load_dataset(args.src)
    with open(os.path.join(args.src, "manifest.json")) as f:
        manifest = json.load(f)
    split_of = {e["id"]: e.get("split", "train") for e in manifest["images"]}
    out_scenes, out_splits = [], []
    for scene in scenes:
        tiles = tile_image(
            scene.image, scene.annotations, args.tile_size, args.overlap, parent_id=scene.image_id
        )
        for t in tiles:
            tid = f"{scene.image_id}__x{t.ox}_y{t.oy}"
            anns = [Annotation(tid, a.class_id, a.box) for a in t.annotations]
            out_scenes.append(Scene(tid, t.image, anns))
            out_splits.append(split_of.get(scene.image_id, "train"))
    write_dataset(args.out, out_scenes, out_splits)
    print(f"wrote {len(out_scenes)} tiles to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import load_run_config, model_config_to_dict, run_config_hash
    from .data import load_dataset, scene_training_arrays
    from .detector import Detector, save_checkpoint, train

    cfg = load_run_config(args.config)
    scenes = load_dataset(args.data, split="train")
    if not scenes:
        raise FileNotFoundError(f"no training scenes in {args.data}")
    dataset = [scene_training_arrays(s) for s in scenes]
    model = Detector(cfg.model, seed=cfg.seed)
    rows = train(model, dataset, cfg.train, seed=cfg.seed, force_phase=args.phase)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "loss_log.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    ckpt_cfg = model_config_to_dict(cfg.model)
    ckpt_cfg["_seed"] = cfg.seed
    save_checkpoint(os.path.join(args.out, "checkpoint"), model, ckpt_cfg)
    print(f"trained {len(rows) - 1} steps; checkpoint at {args.out}/checkpoint")
    return 0


def _load_model(weights_dir: str):
    from .config import model_config_from_dict
    from .detector import Detector, load_checkpoint

    manifest_path = os.path.join(weights_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg_dict = dict(manifest["config"])
    cfg_dict.pop("_seed", None)
    model = Detector(model_config_from_dict(cfg_dict), seed=0)
    load_checkpoint(weights_dir, model)
    return model


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate, write_pr_csv, write_summary_json

    model = _load_model(args.weights)
    scenes = load_dataset(args.data, split=args.split) or load_dataset(args.data)
    if not scenes:
        raise FileNotFoundError(f"no scenes found in {args.data}")
    detections = {s.image_id: model.infer(s.image) for s in scenes}
    annotations = {s.image_id: s.annotations for s in scenes}
    result = evaluate(detections, annotations)
    os.makedirs(args.out, exist_ok=True)
    write_summary_json(os.path.join(args.out, "summary.json"), result)
    write_pr_csv(os.path.join(args.out, "pr_curves.csv"), result)
    print(
        f"ap_small={result.ap.get(1, 0.0):.4f} ap_large={result.ap.get(2, 0.0):.4f} "
        f"map={result.mean_ap:.4f}"
    )
    return 0


def _cmd_infer(args) -> int:
    import numpy as np
    from PIL import Image

    from . import tensor as T
    from .detector import infer_tiled, normalize_image

    model = _load_model(args.weights)
    if not os.path.isfile(args.image):
        raise FileNotFoundError(f"no image at {args.image}")
    image = np.asarray(Image.open(args.image).convert("RGB"))
    stride = model.cfg.backbone.total_stride
    h, w = image.shape[0], image.shape[1]
    if args.tile_size is not None:
        overlap = args.overlap if args.overlap is not None else max(stride, args.tile_size // 8)
        dets = infer_tiled(model, image, args.tile_size, overlap, args.score_threshold)
    else:
        if h % stride or w % stride:
            raise ValueError(
                f"image {w}x{h} is not a multiple of stride {stride}; pass --tile-size"
            )
        dets = model.infer(image, args.score_threshold)

    if args.dump_features:
        record: dict = {}
        with T.no_grad():
            model.forward(normalize_image(image), phase="infer", record=record)
        os.makedirs(args.dump_features, exist_ok=True)
        for name in ("f_ps", "f_st", "f_rp"):
            if name in record:
                T.save_tensor(os.path.join(args.dump_features, f"{name}.lrtn"), record[name].data)

    name = os.path.basename(args.image)
    lines = [
        json.dumps({"image": name, "class": d.class_id, "score": d.score, "box": list(d.box)})
        for d in dets
    ]
    payload = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload)
    else:
        sys.stdout.write(payload)
    return 0


def _cmd_gradcheck(args) -> int:
    from . import gradchecks

    names = [args.op] if args.op else None
    if args.op and args.op not in gradchecks.CASES:
        print(f"config error: unknown gradcheck op {args.op!r}; "
              f"choose from {', '.join(sorted(gradchecks.CASES))}", file=sys.stderr)
        return EXIT_CONFIG
    results = gradchecks.run(names, eps=args.eps)
    failed = False
    for name, err in results.items():
        ok = err < gradchecks.TOLERANCE
        failed |= not ok
        print(f"{name}: max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_VERIFY if failed else 0


def _cmd_shapes(args) -> int:
    from .detector import Detector, ModelConfig, shape_report

    if args.preset == "paper":
        model = Detector(ModelConfig.paper(), seed=0)
        rows = shape_report(model, (1, 3, 1024, 1024))
        expected = _PAPER_TABLE
    else:
        model = Detector(ModelConfig.toy(), seed=0)
        rows = shape_report(model, (1, 3, 128, 128))
        expected = None
    failed = False
    for i, (name, ins, outs) in enumerate(rows):
        line = f"{name:<16} {ins:<40} -> {outs}"
        if expected is not None:
            exp = expected[i]
            ok = (name, ins, outs) == exp
            failed |= not ok
            line += "   OK" if ok else f"   MISMATCH (expected {exp[1]} -> {exp[2]})"
        print(line)
    return EXIT_VERIFY if failed else 0


def main(argv: list[str] | None = None) -> int:
    _setup_threads()
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "tile": _cmd_tile,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "infer": _cmd_infer,
        "gradcheck": _cmd_gradcheck,
        "shapes": _cmd_shapes,
    }
    try:
        return handlers[args.command](args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # config/parse errors
        from .config import ConfigError

        if isinstance(e, ConfigError):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        kind = type(e).__name__
        print(f"error ({kind}): {e}", file=sys.stderr)
        if isinstance(e, (ValueError, KeyError, json.JSONDecodeError)):
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
