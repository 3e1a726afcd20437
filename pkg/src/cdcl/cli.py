"""Command-line entry point.

    cdcl <command> [--config FILE] [--set key=value ...] [--out DIR] [--seed N]

Commands: gen-data, train, eval, infer, sweep, ablate. The configuration is
one JSON document shaped like :class:`cdcl.trainer.TrainConfig`; ``--set``
overrides existing keys by dotted path (values parsed as JSON, else kept as
strings). Every command writes ``resolved_config.json`` into ``--out``.

Exit status is 0 on success, 2 for usage/configuration errors and 1 for
failures at run time. Errors are reported as a single JSON line on stderr:
``{"error": "usage" | "runtime", "type": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMMANDS = ("gen-data", "train", "eval", "infer", "sweep", "ablate")
SPLITS = ("synthetic", "real", "eval")

log = logging.getLogger("cdcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdcl", description="Cross-domain part segmentation and pose pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key by dotted path (repeatable)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = common(sub.add_parser("gen-data", help="materialise a dataset split to disk"))
    g.add_argument("--split", choices=SPLITS, default="synthetic")
    common(sub.add_parser("train", help="train the configured model and evaluate it"))
    e = common(sub.add_parser("eval", help="evaluate a checkpoint on the evaluation split"))
    e.add_argument("--checkpoint", required=True)
    i = common(sub.add_parser("infer", help="segment parts and decode skeletons for one image"))
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--no-vis", action="store_true", help="skip the PNG visualisation")
    common(sub.add_parser("sweep", help="train one model per (beta, gamma) cell"))
    common(sub.add_parser("ablate", help="run the ablation axes"))
    return p


# -- configuration ---------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = doc
    for depth, k in enumerate(keys):
        if not isinstance(node, dict) or k not in node:
            raise UsageError(f"override path {path!r} does not exist (at {'.'.join(keys[:depth + 1])!r})")
        if depth == len(keys) - 1:
            node[k] = _parse_value(raw)
        else:
            node = node[k]


def resolve_config(config_path: Optional[str], overrides: Sequence[str], seed: Optional[int]):
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``."""
    from .synthgen import SceneConfig
    from .trainer import TrainConfig

    doc = TrainConfig().to_dict()
    if config_path:
        try:
            with open(config_path) as f:
                user = json.load(f)
        except OSError as e:
            raise UsageError(f"cannot read config {config_path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {config_path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        doc = _merge(doc, user, "")
    for o in overrides:
        apply_override(doc, o)
    if seed is not None:
        doc["seed"] = seed
    try:
        cfg = TrainConfig.from_dict(doc)
        for split in SPLITS:
            src = getattr(cfg.datasets, split)
            if src.scene is not None:
                SceneConfig.from_dict(src.scene)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return cfg


def _merge(base: dict, user: dict, prefix: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in user.items():
        if k not in out:
            raise UsageError(f"unknown configuration key {prefix + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, prefix + k + ".")
        else:
            out[k] = v
    return out


def write_resolved(config, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return path


# -- commands --------------------------------------------------------------

def cmd_gen_data(cfg, args) -> None:
    from .synthgen import SceneConfig, generate_dataset

    split = args.split
    src = getattr(cfg.datasets, split)
    if src.scene is None:
        raise UsageError(f"datasets.{split} has no scene recipe to generate from")
    domain = "synthetic" if split == "synthetic" else "real"
    m = generate_dataset(SceneConfig.from_dict(src.scene), src.count, args.out, domain)
    print(f"wrote {m['count']} {domain} samples to {os.path.join(args.out, 'manifest.json')}")


def cmd_train(cfg, args) -> None:
    from .evalkit import evaluate
    from .plotting import loss_curves
    from .skeleton import get_projection
    from .trainer import evaluation_set, train

    result = train(cfg, args.out)
    loss_curves(result.rows, os.path.join(args.out, "loss_curves.png"))
    row = evaluate(result.model, evaluation_set(cfg), get_projection(cfg.projection), cfg.decode,
                   config_id=cfg.configuration, seed=cfg.seed)
    _write_results(row, get_projection(cfg.projection), args.out)
    print(f"{cfg.configuration}: mIOU {row['avg']:.4f} (foreground {row['avg_fg']:.4f}); "
          f"checkpoint {result.checkpoint}")


def _write_results(row: dict, projection, out_dir: str) -> None:
    from .evalkit import write_rows
    from .plotting import ablation_bars

    write_rows(os.path.join(out_dir, "results.csv"), [row])
    classes = list(projection.target.classes[1:]) + [projection.target.classes[0]]
    bars = [{"setting": c, "avg": row[c]} for c in classes if row[c] == row[c]]
    if bars:
        ablation_bars(bars, os.path.join(out_dir, "results.png"), title=f"per-class IoU ({row.get('config_id')})")


def cmd_eval(cfg, args) -> None:
    from .evalkit import evaluate
    from .network import load_checkpoint
    from .skeleton import get_projection
    from .trainer import evaluation_set

    model = load_checkpoint(args.checkpoint)
    proj = get_projection(cfg.projection)
    if model.config.part_taxonomy != proj.source:
        raise UsageError(f"checkpoint taxonomy {model.config.taxonomy!r} does not match projection {cfg.projection!r}")
    row = evaluate(model, evaluation_set(cfg), proj, cfg.decode,
                   config_id=os.path.basename(args.checkpoint), seed=cfg.seed)
    _write_results(row, proj, args.out)
    print(f"mIOU {row['avg']:.4f} (foreground {row['avg_fg']:.4f})")


def cmd_infer(cfg, args) -> None:
    from PIL import Image

    from .decode import infer
    from .network import load_checkpoint
    from .plotting import inference_figure
    from .skeleton import get_skeleton
    from .synthgen import save_label_png

    model = load_checkpoint(args.checkpoint)
    try:
        with Image.open(args.image) as im:
            image = np.array(im.convert("RGB"))
    except OSError as e:
        raise UsageError(f"cannot read image {args.image}: {e}") from None
    res = infer(model, image, cfg.decode)
    save_label_png(res["labels"], os.path.join(args.out, "labels.png"))
    spec = model.config.skeleton
    doc = {"image": os.path.abspath(args.image), "skeleton": spec.name,
           "persons": [p.to_dict(spec) for p in res["skeletons"]]}
    if res["novel_skeletons"] is not None:
        novel = get_skeleton(model.config.extra_spec)
        doc["novel_skeleton"] = novel.name
        doc["novel_persons"] = [p.to_dict(novel) for p in res["novel_skeletons"]]
    with open(os.path.join(args.out, "skeletons.json"), "w") as f:
        json.dump(doc, f, indent=2)
    if not args.no_vis:
        inference_figure(image, res["labels"], res["skeletons"], spec,
                         model.config.part_taxonomy.num_classes, os.path.join(args.out, "visualization.png"))
    print(f"{len(res['skeletons'])} person(s); outputs in {args.out}")


def cmd_sweep(cfg, args) -> None:
    from .plotting import sweep_heatmap
    from .trainer import sweep

    rows = sweep(cfg.sweep.beta, cfg.sweep.gamma, cfg, args.out)
    sweep_heatmap(rows, os.path.join(args.out, "sweep.png"))
    best = max(rows, key=lambda r: r["avg"])
    print(f"{len(rows)} cells; best beta={best['beta']:g} gamma={best['gamma']:g} mIOU {best['avg']:.4f}")


def cmd_ablate(cfg, args) -> None:
    from .evalkit import ablation_suite, median_by

    report = ablation_suite(cfg, args.out)
    for axis, rows in report.items():
        med = ", ".join(f"{k}={v:.4f}" for k, v in median_by(rows).items())
        print(f"{axis}: {med}")


_DISPATCH = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
             "sweep": cmd_sweep, "ablate": cmd_ablate}


def _fail(category: str, exc: BaseException) -> None:
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(json.dumps({"error": category, "type": type(exc).__name__, "message": msg}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args.config, args.overrides, args.seed)
    except UsageError as e:
        _fail("usage", e)
        return EXIT_USAGE
    try:
        import torch

        torch.set_num_threads(1)  # single-worker runs are the reproducible ones
        write_resolved(cfg, args.out)
        _DISPATCH[args.command](cfg, args)
    except UsageError as e:
        _fail("usage", e)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - surfaced as one machine-readable line
        log.debug("failure", exc_info=True)
        _fail("runtime", e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
