"""
Scene Fusion command line.

Usage:
    scene-fusion gen-data [--config PATH] [--seed N] [--out DIR]
    scene-fusion extract-graph MAP [--classes C] [--connectivity 4|8] [--out FILE]
    scene-fusion train [--config PATH] [--stage NAME] [--init CKPT ...] [--out DIR]
    scene-fusion eval CKPT [--manifest PATH] [--split test] [--format json|csv]
    scene-fusion predict CKPT --label-map PATH --image PATH
    scene-fusion show-config [--config PATH]
    scene-fusion compare [--config PATH] [--format json|csv]

Exit codes: 0 success, 1 numeric failure, 2 config error, 3 data error,
4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from scene_fusion import __version__
from scene_fusion.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from scene_fusion.config import (
    ModelConfigs,
    RunConfig,
    apply_overrides,
    build_models,
    load_run_config,
    merge_checkpoints,
    models_from_checkpoint,
    resolve_model_configs,
)
from scene_fusion.datakit import gen_synthetic, load_dataset
from scene_fusion.errors import CheckpointError, ConfigError, SceneFusionError
from scene_fusion.fusion import FusionMode, FusionModel, fused_classify
from scene_fusion.gnn import GnnModel, LayerKind, gnn_classify
from scene_fusion.rasters import read_image, read_label_map
from scene_fusion.scenegraph import (
    ExtractionOptions,
    NodeMode,
    build_scene_graph,
    scene_graph_to_json,
)
from scene_fusion.training import SceneModels, Stage, evaluate, train
from scene_fusion.vision import VitModel, vit_classify

logger = logging.getLogger("scene_fusion.cli")

EXIT_OK = 0


# =============================================================================
# Logging
# =============================================================================


class KeyValueFormatter(logging.Formatter):
    """ts=... level=... logger=... msg="..." lines for stderr."""

    def format(self, record: logging.LogRecord) -> str:
        line = (
            f"ts={self.formatTime(record, '%Y-%m-%dT%H:%M:%S')} level={record.levelname} "
            f"logger={record.name} msg={json.dumps(record.getMessage())}"
        )
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    root = logging.getLogger("scene_fusion")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False


# =============================================================================
# Helpers
# =============================================================================


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(getattr(args, "config", None))
    apply_overrides(
        config,
        seed=getattr(args, "seed", None),
        stage=getattr(args, "stage", None),
        fusion_mode=getattr(args, "fusion_mode", None),
        out_dir=getattr(args, "out", None),
        epochs=getattr(args, "epochs", None),
        manifest=getattr(args, "manifest", None),
    )
    config.validate()
    return config


def _checkpoint_config(config: RunConfig, stage: Stage, configs: ModelConfigs) -> Dict[str, Any]:
    return {"run": config.to_dict(), "stage": stage.value, "models": configs.to_dict()}


def _extraction_from(checkpoint: Checkpoint) -> ExtractionOptions:
    raw = checkpoint.config.get("run", {}).get("extraction", {})
    try:
        return ExtractionOptions(**raw)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint extraction options invalid: {exc}") from exc


def _write_table(rows: List[Dict[str, Any]], path: Path, fmt: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buffer.getvalue(), encoding="utf-8")
    return path


def _stream_configs_from(init: Dict[str, Checkpoint], configs: ModelConfigs) -> ModelConfigs:
    """Take each stream's config from the checkpoint that supplies its tensors."""
    gnn, vit = configs.gnn, configs.vit
    for checkpoint in init.values():
        if "models" not in checkpoint.config:
            continue
        stored = ModelConfigs.from_dict(checkpoint.config["models"])
        if any(n.startswith(GnnModel.PREFIX) for n in checkpoint.tensors):
            gnn = stored.gnn
        if any(n.startswith(VitModel.PREFIX) for n in checkpoint.tensors):
            vit = stored.vit
    fusion = dataclasses.replace(configs.fusion, g_dim=gnn.hidden_dim, v_dim=vit.embed_dim)
    return ModelConfigs(gnn, vit, fusion)


# =============================================================================
# Commands
# =============================================================================


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _run_config(args)
    out = Path(args.out) if args.out else Path(config.paths.data_dir)
    manifest = gen_synthetic(config.data, out)
    print(json.dumps({"manifest": str(out / "manifest.json"), "samples": len(manifest.entries)}))
    return EXIT_OK


def cmd_extract_graph(args: argparse.Namespace) -> int:
    options = ExtractionOptions(args.connectivity, NodeMode(args.node_mode), args.min_region_pixels)
    options.validate()
    label_map = read_label_map(args.map, args.classes)
    graph = build_scene_graph(label_map, options)
    document = scene_graph_to_json(graph)
    summary = graph.summary()
    logger.info("extracted graph nodes=%d edges=%d from %s", summary["nodes"], summary["edges"], args.map)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(document + "\n", encoding="utf-8")
    else:
        print(document)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    stage = config.train.stage
    dataset = load_dataset(config.paths.manifest_path(), config.extraction)
    configs = resolve_model_configs(config, dataset.num_classes, dataset.num_scene_classes, dataset.image_shape)
    init: Optional[Checkpoint] = None
    if args.init:
        loaded = {path: load_checkpoint(path) for path in args.init}
        configs = _stream_configs_from(loaded, configs)
        init = merge_checkpoints(loaded)
    models = build_models(configs, stage, config.seed, init)
    result = train(models, dataset, config.train)

    out = Path(config.paths.out_dir) / stage.value
    checkpoint = Checkpoint.from_params(result.params, _checkpoint_config(config, stage, configs))
    save_checkpoint(checkpoint, out / "checkpoint.tsck")
    csv_path, json_path = result.metrics.write(out)
    final = result.metrics.final()
    print(json.dumps({"checkpoint": str(out / "checkpoint.tsck"), "metrics": [str(csv_path), str(json_path)], **final}))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    models = models_from_checkpoint(checkpoint)
    stage = Stage(checkpoint.config["stage"])
    options = _extraction_from(checkpoint)
    manifest = args.manifest or checkpoint.config.get("run", {}).get("paths", {}).get("manifest")
    if manifest is None:
        data_dir = checkpoint.config.get("run", {}).get("paths", {}).get("data_dir", "data")
        manifest = str(Path(data_dir) / "manifest.json")
    dataset = load_dataset(manifest, options)
    samples = dataset.split(args.split)
    result = evaluate(models, samples, stage, options)
    row = {"stage": stage.value, "split": args.split, **result.to_dict()}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    path = _write_table([row], out / f"eval.{args.format}", args.format)
    logger.info("evaluated %d samples: accuracy=%.4f -> %s", result.count, result.accuracy, path)
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def _check_predict_inputs(args: argparse.Namespace, stage: Stage) -> None:
    needs = {
        Stage.GRAPH_STREAM: ("label_map",),
        Stage.IMAGE_STREAM: ("image",),
    }.get(stage, ("label_map", "image"))
    missing = ["--" + name.replace("_", "-") for name in needs if not getattr(args, name)]
    if missing:
        raise ConfigError(f"predict with a {stage.value} checkpoint needs {' and '.join(missing)}")


def cmd_predict(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    models = models_from_checkpoint(checkpoint)
    stage = Stage(checkpoint.config["stage"])
    _check_predict_inputs(args, stage)
    options = _extraction_from(checkpoint)
    if stage is Stage.IMAGE_STREAM:
        logits = vit_classify(read_image(args.image), models.image_model())
    else:
        gnn = models.graph_model()
        label_map = read_label_map(args.label_map, gnn.config.in_dim)
        if stage is Stage.GRAPH_STREAM:
            logits = gnn_classify(build_scene_graph(label_map, options), gnn)
        else:
            image = read_image(args.image)
            logits = fused_classify(image, label_map, gnn, models.image_model(), models.fusion_model(), options)
    values = logits.data[0].astype(np.float64)
    shifted = np.exp(values - values.max())
    print(
        json.dumps(
            {
                "stage": stage.value,
                "logits": values.tolist(),
                "probabilities": (shifted / shifted.sum()).tolist(),
                "predicted": int(np.argmax(values)),
            }
        )
    )
    return EXIT_OK


def cmd_show_config(args: argparse.Namespace) -> int:
    print(_run_config(args).to_yaml(), end="")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    """Graph-layer comparison and fusion-mode comparison on one dataset."""
    config = _run_config(args)
    dataset = load_dataset(config.paths.manifest_path(), config.extraction)
    configs = resolve_model_configs(config, dataset.num_classes, dataset.num_scene_classes, dataset.image_shape)
    rows: List[Dict[str, Any]] = []

    def record(experiment: str, variant: str, models: SceneModels, stage: Stage) -> SceneModels:
        train_config = dataclasses.replace(config.train, stage=stage)
        result = train(models, dataset, train_config)
        last = result.metrics.last
        rows.append(
            {
                "experiment": experiment,
                "variant": variant,
                "params": models.params.count(),
                "train_accuracy": last.train_accuracy,
                "test_accuracy": last.test_accuracy,
            }
        )
        return models

    for kind in LayerKind:
        variant = ModelConfigs(dataclasses.replace(configs.gnn, layer_kind=kind), configs.vit, configs.fusion)
        record("graph_layers", kind.value, build_models(variant, Stage.GRAPH_STREAM, config.seed), Stage.GRAPH_STREAM)

    graph_models = record(
        "fusion_modes", "graph_only", build_models(configs, Stage.GRAPH_STREAM, config.seed), Stage.GRAPH_STREAM
    )
    image_models = record(
        "fusion_modes", "image_only", build_models(configs, Stage.IMAGE_STREAM, config.seed), Stage.IMAGE_STREAM
    )
    for mode in FusionMode:
        fusion_config = dataclasses.replace(configs.fusion, mode=mode)
        fused = SceneModels(
            gnn=graph_models.gnn,
            vit=image_models.vit,
            fusion=FusionModel(fusion_config, seed=config.seed),
        )
        record("fusion_modes", mode.value, fused, Stage.FUSION)

    out = Path(config.paths.out_dir) / "compare"
    path = _write_table(rows, out / f"compare.{args.format}", args.format)
    logger.info("comparison table written to %s", path)
    print(json.dumps(rows, sort_keys=True))
    return EXIT_OK


# =============================================================================
# Parser and entry point
# =============================================================================


def _add_run_flags(parser: argparse.ArgumentParser, out_help: str = "output directory") -> None:
    parser.add_argument("--config", help="run config YAML")
    parser.add_argument("--seed", type=int, help="root seed (overrides config)")
    parser.add_argument("--out", help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scene-fusion", description="Two-stream scene understanding: graphs, images, fusion"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging and tracebacks")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_run_flags(gen, "dataset directory (default paths.data_dir)")
    gen.set_defaults(handler=cmd_gen_data)

    extract = sub.add_parser("extract-graph", help="label map -> scene graph JSON")
    extract.add_argument("map", help="label map (.png, .pgm or .lmap)")
    extract.add_argument("--classes", type=int, help="number of classes C (default: max + 1)")
    extract.add_argument("--connectivity", type=int, default=4, choices=(4, 8))
    extract.add_argument("--node-mode", default="component", choices=[m.value for m in NodeMode])
    extract.add_argument("--min-region-pixels", type=int, default=0)
    extract.add_argument("--out", help="output JSON file (default stdout)")
    extract.set_defaults(handler=cmd_extract_graph)

    train_p = sub.add_parser("train", help="train one stage")
    _add_run_flags(train_p)
    train_p.add_argument("--stage", choices=[s.value for s in Stage])
    train_p.add_argument("--fusion-mode", choices=[m.value for m in FusionMode])
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--manifest", help="dataset manifest (default paths.data_dir/manifest.json)")
    train_p.add_argument("--init", action="append", default=[], help="checkpoint to initialize from (repeatable)")
    train_p.set_defaults(handler=cmd_train)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_p.add_argument("checkpoint")
    eval_p.add_argument("--manifest")
    eval_p.add_argument("--split", default="test", choices=("train", "test"))
    eval_p.add_argument("--format", default="json", choices=("json", "csv"))
    eval_p.add_argument("--out", help="directory for eval.<format> (default: next to the checkpoint)")
    eval_p.set_defaults(handler=cmd_eval)

    predict = sub.add_parser("predict", help="classify one sample")
    predict.add_argument("checkpoint")
    predict.add_argument("--label-map")
    predict.add_argument("--image")
    predict.set_defaults(handler=cmd_predict)

    show = sub.add_parser("show-config", help="print the resolved run config")
    _add_run_flags(show)
    show.add_argument("--stage", choices=[s.value for s in Stage])
    show.add_argument("--fusion-mode", choices=[m.value for m in FusionMode])
    show.add_argument("--epochs", type=int)
    show.set_defaults(handler=cmd_show_config)

    compare = sub.add_parser("compare", help="graph-layer and fusion-mode comparison table")
    _add_run_flags(compare)
    compare.add_argument("--manifest")
    compare.add_argument("--epochs", type=int)
    compare.add_argument("--format", default="json", choices=("json", "csv"))
    compare.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except SceneFusionError as exc:
        if args.verbose:
            logger.exception("%s failed", args.command)
        else:
            logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


__all__ = ["KeyValueFormatter", "build_parser", "main", "setup_logging"]
