"""Command-line entry point: ``reppoints <command> [flags]``.

Commands: generate-data, train, eval, visualize, gradcheck, appendix-a1.
Every command resolves its configuration from the defaults, an optional
``--config`` file and repeated ``--set key=value`` overrides, writes the
resolved tree to ``<out>/config.txt`` and exits nonzero with a one-line
reason on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import config as C

log = logging.getLogger("reppoints")


class CommandError(RuntimeError):
    pass


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: dict, out: Path) -> None:
    text = C.format_config(cfg)
    (out / "config.txt").write_text(text)
    log.info("resolved config:\n%s", text.rstrip())


def _train_split(cfg):
    from .data import generate_dataset, load_dataset

    if cfg["data.dir"]:
        return load_dataset(cfg["data.dir"])
    return generate_dataset(cfg["data.scenes"], cfg["data.seed"], C.build(cfg, "data"))


def _heldout_split(cfg, data_dir: str = ""):
    from .data import generate_dataset, load_dataset

    if data_dir:
        return load_dataset(data_dir)
    return generate_dataset(cfg["data.heldout_scenes"], cfg["data.seed"], C.build(cfg, "data"),
                            first_id=cfg["data.scenes"])


def _load_model(checkpoint: str):
    from .model import RPDet
    from .pipeline import load_weights, read_checkpoint

    if not checkpoint:
        raise CommandError("no checkpoint given (use --checkpoint or --set eval.checkpoint=PATH)")
    if not Path(checkpoint).is_file():
        raise CommandError(f"checkpoint not found: {checkpoint}")
    arrays, snapshot = read_checkpoint(checkpoint)
    trained_cfg = C.from_snapshot(snapshot)
    model = RPDet(C.build(trained_cfg, "model"))
    load_weights(model, arrays)
    model.eval()
    return model, trained_cfg


# --- commands --------------------------------------------------------------

def cmd_generate_data(args, cfg):
    from .data import CLASSES, generate_dataset, save_dataset

    if args.scenes is not None:
        if args.scenes <= 0:
            raise CommandError("--scenes must be positive")
        cfg["data.scenes"] = args.scenes
    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    ds = generate_dataset(cfg["data.scenes"], cfg["data.seed"], C.build(cfg, "data"))
    save_dataset(ds, out, C.build(cfg, "data"), cfg["data.seed"])
    hist = Counter(int(c) for labels in ds.labels for c in labels)
    total = sum(hist.values())
    print(f"scenes: {len(ds)}")
    print(f"annotations: {total}")
    for k, name in enumerate(CLASSES):
        print(f"  {name}: {hist.get(k, 0)}")
    return 0


def cmd_train(args, cfg):
    from .model import RPDet
    from .pipeline import set_determinism, train

    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    dataset = _train_split(cfg)
    set_determinism(cfg["run.seed"])
    model = RPDet(C.build(cfg, "model"))
    lines = train(model, dataset, C.build(cfg, "train"), C.build(cfg, "loss"), out_dir=out,
                  config_snapshot=C.to_snapshot(cfg))
    print(f"trained {len(lines)} iterations; final: {lines[-1]}")
    print(f"checkpoint: {out / 'checkpoint_final.npz'}")
    return 0


def _print_table(result, names: dict) -> None:
    print(f"{'AP':>7} {'AP50':>7} {'AP75':>7}")
    print(f"{result.AP:7.3f} {result.AP50:7.3f} {result.AP75:7.3f}")
    for k, ap in sorted(result.per_class.items()):
        print(f"{ap:7.3f}  {names.get(k, k)}")


def cmd_eval(args, cfg):
    from .evaluation import RECALL_POINTS, evaluate, load_detections
    from .pipeline import export_detections, infer_dataset
    from .plotting import render_pr_curves

    checkpoint = args.checkpoint or cfg["eval.checkpoint"]
    detections = args.detections or cfg["eval.detections"]
    dataset = _heldout_split(cfg, args.data or cfg["eval.data_dir"])
    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    if detections:
        records = load_detections(detections)
    else:
        model, _ = _load_model(checkpoint)
        records = export_detections(infer_dataset(model, dataset, C.build(cfg, "infer")),
                                    out / "detections.json")
    coco = dataset.coco()
    result = evaluate(records, coco)
    (out / "eval.json").write_text(json.dumps(result.as_dict(), indent=1, sort_keys=True))
    names = {int(c["id"]): c.get("name", str(c["id"])) for c in coco["categories"]}
    # the precision table is indexed by position in the sorted category ids
    render_pr_curves(result.precision, RECALL_POINTS, [names[k] for k in sorted(names)], out / "pr_curves.png")
    _print_table(result, names)
    return 0


def cmd_visualize(args, cfg):
    from .data import CLASSES
    from .experiments import points_inside_rate
    from .pipeline import infer
    from .plotting import render_detections

    model, _ = _load_model(args.checkpoint or cfg["eval.checkpoint"])
    dataset = _heldout_split(cfg, args.data or cfg["eval.data_dir"])
    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    infer_cfg = C.build(cfg, "infer")
    all_dets = []
    shown = min(cfg["visualize.max_images"], len(dataset))
    for s in range(0, len(dataset), 16):
        per_image = infer(model, dataset.images[s:s + 16], infer_cfg, dataset.image_ids[s:s + 16])
        for k, dets in enumerate(per_image):
            i = s + k
            all_dets.extend(dets)
            if i < shown:
                keep = [d for d in dets if d.score >= 0.3]
                render_detections(dataset.images[i], keep, out / f"image_{dataset.image_ids[i]:05d}.png",
                                  dataset.boxes[i], CLASSES)
    rate = points_inside_rate(all_dets, dataset)
    (out / "visualize.json").write_text(json.dumps({"points_inside_rate": rate, "images": shown}, indent=1))
    print(f"rendered {shown} images to {out}")
    print(f"true positives with all points inside the 10%-dilated GT: {rate:.3f}")
    return 0


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suites

    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    results = run_suites(instances=args.instances, seed=cfg["run.seed"])
    for r in results:
        print(r.line())
    # timings stay on the console so the report is reproducible
    report = [{"name": r.name, "instances": r.instances, "max_rel_err": r.max_rel_err, "tolerance": r.tolerance,
               "passed": r.passed} for r in results]
    (out / "gradcheck.json").write_text(json.dumps(report, indent=1))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_appendix(args, cfg):
    from .appendix import run_translation_sensitivity_study

    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    report = run_translation_sensitivity_study(cfg["run.seed"], C.build(cfg, "appendix"), out_dir=out)
    for key in ("dpool_jitter_correlation", "reppoints_jitter_correlation", "reppoints_pairwise_iou",
                "dpool_feature_distance_min"):
        print(f"{key}: {report[key]:.4f}")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "gradcheck": cmd_gradcheck,
    "appendix-a1": cmd_appendix,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="run seed (sets run.seed)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="reppoints", description="Point-set object detection at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate-data", parents=[common], help="render a synthetic dataset to disk")
    p.add_argument("--scenes", type=int)
    sub.add_parser("train", parents=[common], help="train a detector")
    for name, text in (("eval", "score detections on a held-out split"),
                       ("visualize", "draw learned points over detections")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="dataset directory written by generate-data")
        if name == "eval":
            p.add_argument("--detections", help="evaluate an existing detections JSON instead of a checkpoint")
    p = sub.add_parser("gradcheck", parents=[common], help="autograd versus finite differences")
    p.add_argument("--instances", type=int, default=100)
    sub.add_parser("appendix-a1", parents=[common], help="translation-sensitivity study")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "scenes", None) is not None and args.scenes <= 0:
        parser.error("--scenes must be positive")
    try:
        cfg = C.load_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (C.ConfigError, CommandError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - any other failure still gets a one-line reason
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
