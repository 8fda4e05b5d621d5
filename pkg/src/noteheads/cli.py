"""Command-line entry point: synth, train-net, train-filter, detect, evaluate.

Every command accepts ``--config FILE``, a JSON object whose keys are the
long option names with dashes replaced by underscores. Flags given on the
command line override the file; unknown keys are rejected. Each command
writes ``manifest.json`` (resolved config, input hashes, version) next to
its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, micronet
from .dataset import SYNTH_STAFF_HEIGHT, Corpus, SynthConfig, load_split, synth_corpus, validate_split
from .evaluation import aggregate, evaluate_page, format_table, pixelwise_metrics
from .forest import ForestConfig, RandomForest
from .pipeline import detect_page, filter_training_rows
from .proposals import write_features_csv
from .raster import BinaryImage, load_pbm
from .sampler import PatchSpec, SampleSet, label_targets, page_samples

log = logging.getLogger("noteheads")


class ConfigError(ValueError):
    pass


# option name -> (default, type, help); shared by all commands that use them
OPTIONS = {
    "corpus": (None, str, "corpus directory (.pbm + .json per page)"),
    "split": (None, str, "split JSON (default: <corpus>/split.json)"),
    "out": (None, str, "output directory"),
    "weights": (None, str, "network weights file"),
    "forest": (None, str, "RFv1 forest file"),
    "detections": (None, str, "directory of detection JSON files"),
    "seed": (0, int, "random seed"),
    # synth
    "writers": (20, int, "number of synthetic writers"),
    "pages_per_writer": (3, int, "pages per writer"),
    "test_pages": (10, int, "pages in the test split"),
    "validation_pages": (10, int, "pages in the validation split"),
    "noteheads": (30, int, "noteheads per page"),
    "distractors": (16, int, "non-notehead symbol groups per page"),
    "page_width": (560, int, "page width in pixels"),
    "page_height": (440, int, "page height in pixels"),
    # sampling and network
    "staff_height": (None, float, "staff height in pixels; sets the patch size to 1.2 times this"),
    "patch_size": (101, int, "crop size around a target pixel (ignored with --staff-height)"),
    "scaled_size": (51, int, "network input size"),
    "k": (1, int, "training targets per symbol"),
    "epochs": (10, int, "training epochs"),
    "batch_size": (32, int, "minibatch size"),
    "lr": (1e-3, float, "Adam learning rate"),
    "lambda_bb": (0.02, float, "weight of the box regression loss"),
    "threshold": (0.5, float, "pixel decision threshold on p"),
    # filter
    "filter_train_pages": (20, int, "training pages added to the validation pages for fitting the filter"),
    "n_trees": (300, int, "trees in the forest"),
    "max_depth": (8, int, "maximum tree depth"),
    "min_samples_leaf": (3, int, "minimum rows per leaf"),
    "filter_threshold": (0.5, float, "proposal filter decision threshold"),
    "iou_threshold": (0.5, float, "IoU above which a box hits a notehead"),
    # detect / evaluate
    "subset": ("test", str, "split part to process: train, validation, test or all"),
    "no_filter": (False, bool, "skip the proposal filter"),
    "overlay": (False, bool, "also write PPM overlays"),
    "gate": (None, str, "fail unless macro metrics reach e.g. precision=0.9,recall=0.9"),
}

COMMAND_OPTIONS = {
    "synth": ["out", "seed", "writers", "pages_per_writer", "test_pages", "validation_pages", "noteheads",
              "distractors", "page_width", "page_height"],
    "train-net": ["corpus", "split", "out", "seed", "staff_height", "patch_size", "scaled_size", "k",
                  "epochs", "batch_size", "lr", "lambda_bb"],
    "train-filter": ["corpus", "split", "out", "weights", "seed", "staff_height", "patch_size", "scaled_size",
                     "threshold", "filter_train_pages", "n_trees", "max_depth", "min_samples_leaf",
                     "iou_threshold"],
    "detect": ["corpus", "split", "out", "weights", "forest", "staff_height", "patch_size", "scaled_size",
               "threshold", "filter_threshold", "subset", "no_filter", "overlay"],
    "evaluate": ["corpus", "split", "out", "detections", "subset", "iou_threshold", "threshold", "gate"],
}
REQUIRED = {
    "synth": ["out"],
    "train-net": ["corpus", "out"],
    "train-filter": ["corpus", "out", "weights"],
    "detect": ["out", "weights"],
    "evaluate": ["corpus", "out", "detections"],
}


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    file_values = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_values) - set(OPTIONS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    config = {}
    for key in COMMAND_OPTIONS[command]:
        default, kind, _ = OPTIONS[key]
        value = getattr(args, key)
        if value is None:
            value = file_values.get(key, default)
        if value is not None and kind is not bool:
            try:
                value = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key} should be {kind.__name__}, got {value!r}") from None
        config[key] = value
    for key in REQUIRED[command]:
        if config.get(key) is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    for key in ("threshold", "filter_threshold", "iou_threshold"):
        if key in config and not 0.0 <= config[key] <= 1.0:
            raise ConfigError(f"{key} must lie in [0, 1]")
    for key in ("corpus", "weights", "forest", "detections", "split"):
        if config.get(key) is not None and not Path(config[key]).exists():
            raise ConfigError(f"{key} path {config[key]} does not exist")
    if config.get("subset") not in (None, "train", "validation", "test", "all"):
        raise ConfigError(f"unknown subset {config['subset']!r}")
    return config


def write_manifest(out: Path, command: str, config: dict, inputs) -> None:
    hashes = {}
    for path in inputs:
        path = Path(path)
        if path.is_file():
            hashes[path.as_posix()] = sha256(path)
    manifest = {"tool": "noteheads", "version": __version__, "command": command, "config": config, "inputs": hashes}
    (out / "manifest.json").write_text(dump_json(manifest))


def _patch_spec(config) -> PatchSpec:
    if config.get("staff_height"):
        return PatchSpec.from_staff_height(config["staff_height"], config["scaled_size"])
    return PatchSpec(config["patch_size"], config["scaled_size"])


def _split(config):
    path = Path(config["split"]) if config.get("split") else Path(config["corpus"]) / "split.json"
    return load_split(path), path


def _subset_keys(config, corpus):
    spec, _ = _split(config)
    if config["subset"] == "all":
        return sorted(corpus)
    return list(getattr(spec, config["subset"]))


def _page_inputs(corpus: Corpus, keys):
    files = []
    for key in keys:
        files.append(corpus.pages[tuple(key)])
        files.append(corpus.root / corpus.annotation(key).image_ref)
    return files


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(config) -> int:
    out = Path(config["out"])
    page = SynthConfig(
        page_w=config["page_width"],
        page_h=config["page_height"],
        n_noteheads=config["noteheads"],
        n_distractors=config["distractors"],
    )
    split = synth_corpus(
        out,
        n_writers=config["writers"],
        pages_per_writer=config["pages_per_writer"],
        n_test=config["test_pages"],
        n_validation=config["validation_pages"],
        seed=config["seed"],
        page=page,
    )
    write_manifest(out, "synth", config, [])
    print(f"wrote {config['writers'] * config['pages_per_writer']} pages to {out}: "
          f"{len(split.train)} train, {len(split.validation)} validation, {len(split.test)} test; "
          f"nominal staff height {SYNTH_STAFF_HEIGHT} px")
    return 0


def _samples(corpus, keys, spec, k, seed):
    sets = []
    for i, key in enumerate(keys):
        image, page = corpus.load(key)
        sets.append(page_samples(image, page, spec, k, seed=[seed, i]))
    return SampleSet.concat(sets) if sets else None


def cmd_train_net(config) -> int:
    corpus = Corpus(config["corpus"])
    split, split_path = _split(config)
    violations = validate_split(split, corpus)
    if violations:
        raise ConfigError("illegal split: " + "; ".join(v[2] for v in violations))
    spec = _patch_spec(config)
    train = _samples(corpus, split.train, spec, config["k"], config["seed"])
    val = _samples(corpus, split.validation, spec, config["k"], config["seed"] + 1)
    if train is None:
        raise ConfigError("the split has no training pages")
    log.info("training on %d samples (%d positive), validating on %d", len(train), int(train.c.sum()),
             0 if val is None else len(val))
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %(epoch)d train %(train_loss).4f", record)

        tc = micronet.TrainConfig(config["epochs"], config["batch_size"], config["seed"], config["lr"],
                                  config["lambda_bb"])
        params, _ = micronet.train(train, tc, validation=val, on_epoch=on_epoch)
    micronet.save_weights(params, out / "weights.bin")
    write_manifest(out, "train-net", config, [split_path] + _page_inputs(corpus, split.train + split.validation))
    print(f"wrote {out / 'weights.bin'}")
    return 0


def cmd_train_filter(config) -> int:
    corpus = Corpus(config["corpus"])
    split, split_path = _split(config)
    params = micronet.load_weights(config["weights"])
    spec = _patch_spec(config)
    keys = list(split.validation) + list(split.train[: config["filter_train_pages"]])
    feats, labels = [], []
    for key in keys:
        image, page = corpus.load(key)
        f, y = filter_training_rows(image, page, params, spec, config["threshold"], config["iou_threshold"])
        feats.append(f)
        labels.append(y)
    X = np.concatenate(feats) if feats else np.zeros((0, 17))
    y = np.concatenate(labels) if labels else np.zeros(0, dtype=int)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_features_csv(out / "filter_features.csv", X, y)
    fc = ForestConfig(config["n_trees"], config["max_depth"], config["min_samples_leaf"], seed=config["seed"])
    forest = RandomForest.fit(X, y, fc)
    forest.save(out / "forest.json")
    write_manifest(out, "train-filter", config, [split_path, config["weights"]] + _page_inputs(corpus, keys))
    print(f"fitted {fc.n_trees} trees on {len(y)} proposals ({int(y.sum())} positive), "
          f"out-of-bag accuracy {forest.oob_score}")
    return 0


def write_ppm(path, image: BinaryImage, kept, rejected=()) -> None:
    """Page in black on white with kept boxes in red and rejected ones in blue."""
    rgb = np.where(image.bits[..., None], 0, 255).astype(np.uint8).repeat(3, axis=2)
    for boxes, colour in ((rejected, (40, 90, 255)), (kept, (230, 20, 20))):
        for t, l, b, r in boxes:
            rgb[t, l:r] = rgb[b - 1, l:r] = colour
            rgb[t:b, l] = rgb[t:b, r - 1] = colour
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + rgb.tobytes())


def detection_record(name, result, use_filter, filter_threshold) -> dict:
    boxes, scores = result.detections(use_filter, filter_threshold)
    return {
        "page": name,
        "filtered": bool(use_filter),
        "noteheads": [{"bbox": [int(v) for v in b], "score": float(s)} for b, s in zip(boxes, scores)],
        "prefilter_count": len(result.proposals),
        "targets": {
            "coords": result.preds.coords.tolist(),
            "p": [float(v) for v in result.preds.p],
        },
    }


def cmd_detect(config, images=()) -> int:
    params = micronet.load_weights(config["weights"])
    use_filter = not config["no_filter"]
    forest = None
    if use_filter:
        if config["forest"] is None:
            raise ConfigError("--forest is required unless --no-filter is given")
        forest = RandomForest.load(config["forest"])
    jobs = []
    inputs = [config["weights"]] + ([config["forest"]] if forest else [])
    if images:
        for path in images:
            jobs.append((Path(path).stem, lambda p=path: load_pbm(p)))
            inputs.append(path)
    elif config["corpus"]:
        corpus = Corpus(config["corpus"])
        keys = _subset_keys(config, corpus)
        for key in keys:
            jobs.append(("_".join(key), lambda k=key: corpus.load(k)[0]))
        inputs += _page_inputs(corpus, keys)
    else:
        raise ConfigError("give page images or --corpus")
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = _patch_spec(config)
    total = 0
    for name, load in jobs:
        image = load()
        result = detect_page(image, params, forest, spec, config["threshold"])
        record = detection_record(name, result, use_filter, config["filter_threshold"])
        (out / f"{name}.json").write_text(dump_json(record))
        total += len(record["noteheads"])
        if config["overlay"]:
            kept = [n["bbox"] for n in record["noteheads"]]
            rejected = [b for b in result.boxes.tolist() if b not in kept]
            write_ppm(out / f"{name}.ppm", image, kept, rejected)
    write_manifest(out, "detect", config, inputs)
    print(f"{total} noteheads on {len(jobs)} pages -> {out}")
    return 0


def parse_gate(text) -> dict:
    gates = {}
    for part in filter(None, (text or "").split(",")):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in ("precision", "recall", "f1") or not value:
            raise ConfigError(f"bad gate {part!r}; use precision=X,recall=Y,f1=Z")
        gates[key] = float(value)
    return gates


def cmd_evaluate(config) -> int:
    corpus = Corpus(config["corpus"])
    det_dir = Path(config["detections"])
    gates = parse_gate(config["gate"])
    keys = _subset_keys(config, corpus)
    per_page, pixels_p, pixels_t = {}, [], []
    inputs = []
    for key in keys:
        page = corpus.annotation(key)
        path = det_dir / f"{page.name}.json"
        if not path.exists():
            raise ConfigError(f"no detections for {page.name} in {det_dir}")
        inputs.append(path)
        record = json.loads(path.read_text())
        boxes = [n["bbox"] for n in record["noteheads"]]
        truths = [tuple(s.bbox) for s in page.noteheads()]
        per_page[page.name] = evaluate_page(boxes, truths, config["iou_threshold"])
        targets = record.get("targets")
        if targets and targets["coords"]:
            c, _ = label_targets(np.array(targets["coords"]), page)
            pixels_p.append(np.array(targets["p"]))
            pixels_t.append(c)
    if not per_page:
        raise ConfigError("no pages to evaluate")
    summary = aggregate(per_page.values())
    metrics = {
        "iou_threshold": config["iou_threshold"],
        "pages": {name: m.to_dict() for name, m in sorted(per_page.items())},
        "summary": summary,
    }
    if pixels_p:
        metrics["pixelwise"] = pixelwise_metrics(np.concatenate(pixels_p), np.concatenate(pixels_t),
                                                 config["threshold"])
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(dump_json(metrics))
    table = format_table(sorted(per_page.items()), summary)
    (out / "metrics.txt").write_text(table)
    write_manifest(out, "evaluate", config, inputs)
    sys.stdout.write(table)
    failed = [f"{k} {summary['macro'][k]:.4f} < {v}" for k, v in gates.items() if summary["macro"][k] < v]
    if failed:
        print("gate failed: " + "; ".join(failed))
        return 1
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noteheads", description="Handwritten notehead detector.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic corpus with a writer-disjoint split",
        "train-net": "train the detection network",
        "train-filter": "fit the proposal filter on network output",
        "detect": "detect noteheads on pages",
        "evaluate": "score detections against annotations",
    }
    for command, keys in COMMAND_OPTIONS.items():
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", help="JSON config file; flags override it")
        for key in keys:
            _, kind, text = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, action="store_const", const=True, default=None, help=text)
            else:
                p.add_argument(flag, type=kind, default=None, help=text)
        if command == "detect":
            p.add_argument("images", nargs="*", help="PBM pages (instead of --corpus)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = resolve_config(args.command, args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train-net":
            return cmd_train_net(config)
        if args.command == "train-filter":
            return cmd_train_filter(config)
        if args.command == "detect":
            return cmd_detect(config, args.images)
        return cmd_evaluate(config)
    except ConfigError as exc:
        print(f"noteheads {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
