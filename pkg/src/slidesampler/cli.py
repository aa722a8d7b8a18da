"""Command-line entry point: ``slidesampler <subcommand> [flags]``.

Settings resolve as flags > environment > config file > defaults, and the
resolved settings are echoed to the log before a command runs.
"""

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import errors

log = logging.getLogger("slidesampler")

EXIT_OK, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_USAGE = 0, 1, 2, 64

ENV_VARS = {"token": "SLIDESAMPLER_TOKEN", "base_url": "SLIDESAMPLER_BASE_URL"}

DEFAULTS = {
    "synth": {"width": 2048, "height": 2048, "counts": "2,18,144,304,532", "screened": None, "seed": 0,
              "out": "synthetic", "slide_id": "synthetic", "role": "train", "dataset": None, "total": 5000,
              "patch_size": 256},
    "pull": {"base_url": None, "token": "", "image_set": "default", "timeout": 10.0, "out": "manifest.json",
             "patch_size": 1024, "seed": 0},
    "push": {"base_url": None, "token": "", "slide": None, "dets": None, "min_score": 0.0, "timeout": 10.0},
    "sample": {"manifest": None, "mode": "live", "bs": 16, "epochs": 1, "seed": None, "patch_size": None,
               "epoch_length": None, "out": "-", "strict": False},
    "trainsim": {"metrics": None, "manifest": None, "mode": "live", "bs": 16, "seed": 0, "max_epochs": 200,
                 "plateau_patience": 3, "stop_patience": 10, "out": "-", "figure": None},
    "infer": {"manifest": None, "slides": None, "tile": 1024, "overlap": 256, "miss_rate": 0.0, "fp_rate": 0.0,
              "jitter": 0.0, "seed": 0, "out": "-", "jobs": None},
    "eval": {"gt": None, "dets": None, "iou": 0.5, "out": "-", "figure": None, "all_detections": False},
    "report": {"row": None, "csv": "-", "figure": None, "precision": 2},
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = Parser(prog="slidesampler", description="Patch sampling and detection evaluation for partially "
                                                  "annotated whole-slide images.")
    p.add_argument("--config", help="JSON config file; keys per subcommand or at top level")
    p.add_argument("--log", help="write the run log to this file instead of stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    S = argparse.SUPPRESS

    s = sub.add_parser("synth", help="render a synthetic slide (PNG + manifest) or a six-slide dataset")
    s.add_argument("--width", type=int, default=S)
    s.add_argument("--height", type=int, default=S)
    s.add_argument("--counts", default=S, help="eos,mast,neut,macro,lymph")
    s.add_argument("--screened", action="append", default=S, help="x,y,w,h (repeatable)")
    s.add_argument("--seed", type=int, default=S)
    s.add_argument("--out", default=S, help="output prefix; writes PREFIX.png and PREFIX.json")
    s.add_argument("--slide-id", default=S)
    s.add_argument("--role", choices=("train", "val", "test"), default=S)
    s.add_argument("--dataset", default=S, help="write the six-slide synthetic dataset into this directory")
    s.add_argument("--total", type=int, default=S)
    s.add_argument("--patch-size", type=int, default=S)

    s = sub.add_parser("pull", help="download screened regions and annotations into a manifest")
    s.add_argument("--base-url", default=S)
    s.add_argument("--token", default=S)
    s.add_argument("--image-set", default=S)
    s.add_argument("--timeout", type=float, default=S)
    s.add_argument("--out", default=S)
    s.add_argument("--patch-size", type=int, default=S)
    s.add_argument("--seed", type=int, default=S)

    s = sub.add_parser("push", help="upload detections for expert review")
    s.add_argument("--base-url", default=S)
    s.add_argument("--token", default=S)
    s.add_argument("--slide", default=S)
    s.add_argument("--dets", default=S)
    s.add_argument("--min-score", type=float, default=S)
    s.add_argument("--timeout", type=float, default=S)

    s = sub.add_parser("sample", help="emit a patch manifest (JSON lines)")
    s.add_argument("--manifest", default=S)
    s.add_argument("--mode", choices=("live", "sub_image"), default=S)
    s.add_argument("--bs", type=int, default=S)
    s.add_argument("--epochs", type=int, default=S)
    s.add_argument("--seed", type=int, default=S)
    s.add_argument("--patch-size", type=int, default=S)
    s.add_argument("--epoch-length", type=int, default=S)
    s.add_argument("--out", default=S)
    s.add_argument("--strict", action="store_true", default=S)

    s = sub.add_parser("trainsim", help="run the lr-plateau training protocol on scripted metrics or a toy learner")
    s.add_argument("--metrics", default=S, help="comma-separated validation metrics to replay")
    s.add_argument("--manifest", default=S)
    s.add_argument("--mode", choices=("live", "sub_image"), default=S)
    s.add_argument("--bs", type=int, default=S)
    s.add_argument("--seed", type=int, default=S)
    s.add_argument("--max-epochs", type=int, default=S)
    s.add_argument("--plateau-patience", type=int, default=S)
    s.add_argument("--stop-patience", type=int, default=S)
    s.add_argument("--out", default=S)
    s.add_argument("--figure", default=S)

    s = sub.add_parser("infer", help="tiled whole-slide inference with the oracle detector")
    s.add_argument("--manifest", default=S)
    s.add_argument("--slides", default=S, help="comma-separated slide ids (default: all)")
    s.add_argument("--tile", type=int, default=S)
    s.add_argument("--overlap", type=int, default=S)
    s.add_argument("--miss-rate", type=float, default=S)
    s.add_argument("--fp-rate", type=float, default=S, help="expected false positives per pixel of tile area")
    s.add_argument("--jitter", type=float, default=S)
    s.add_argument("--seed", type=int, default=S)
    s.add_argument("--out", default=S)
    s.add_argument("--jobs", type=int, default=S)

    s = sub.add_parser("eval", help="VOC2007 AP/mAP of detections against ground truth")
    s.add_argument("--gt", default=S, help="manifest or ground-truth records")
    s.add_argument("--dets", default=S)
    s.add_argument("--iou", type=float, default=S)
    s.add_argument("--out", default=S)
    s.add_argument("--figure", default=S, help="precision/recall figure")
    s.add_argument("--all-detections", action="store_true", default=S,
                   help="keep detections outside the screened area")

    s = sub.add_parser("report", help="AP table (CSV) and bar chart from eval reports")
    s.add_argument("--row", action="append", default=S, help="MODE:BACKBONE:BS=eval.json (repeatable)")
    s.add_argument("--csv", default=S)
    s.add_argument("--figure", default=S)
    s.add_argument("--precision", type=int, default=S)
    return p


def resolve(command, flags, config_path=None, environ=None):
    """Merge settings: flags > environment > config file > defaults."""
    environ = os.environ if environ is None else environ
    settings = dict(DEFAULTS[command])
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise errors.ParseError(f"config {config_path}: {exc}") from None
        section = data.get(command, {}) if isinstance(data.get(command), dict) else {}
        for key, value in list(data.items()) + list(section.items()):
            if key in settings:
                settings[key] = value
    for key, var in ENV_VARS.items():
        if key in settings and environ.get(var):
            settings[key] = environ[var]
    settings.update(flags)
    return settings


@contextlib.contextmanager
def _output(path, mode="w"):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, mode, encoding="utf-8", newline="") as fh:
            yield fh


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _ints(text, n=None):
    try:
        values = [int(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(values) != n:
        raise UsageError(f"expected {n} comma-separated integers, got {text!r}")
    return values


def cmd_synth(cfg):
    from .model import DatasetManifest, save_manifest
    from .synth import generate_synthetic_slide, synthetic_dataset

    if cfg["dataset"]:
        m = synthetic_dataset(cfg["dataset"], total=cfg["total"], seed=cfg["seed"], patch_size=cfg["patch_size"])
        log.info("wrote %d slides with %d cells to %s", len(m.slides), m.n_annotations, cfg["dataset"])
        return EXIT_OK
    counts = _ints(cfg["counts"], 5)
    screened = cfg["screened"] or [f"0,0,{cfg['width']},{cfg['height']}"]
    rects = [_ints(r, 4) for r in screened]
    prefix = Path(cfg["out"])
    png = prefix.with_suffix(".png")
    _, slide = generate_synthetic_slide(cfg["width"], cfg["height"], rects, counts, cfg["seed"],
                                        slide_id=cfg["slide_id"], out_path=png, split_role=cfg["role"])
    from dataclasses import replace

    slide = replace(slide, raster_source=png.name)
    save_manifest(DatasetManifest(slides=[slide], seed=cfg["seed"]), prefix.with_suffix(".json"))
    log.info("wrote %s and %s (%d cells)", png, prefix.with_suffix(".json"), len(slide.annotations))
    return EXIT_OK


def _server_cfg(cfg):
    from .sync import ServerConfig

    _require(cfg, "base_url")
    return ServerConfig(cfg["base_url"], cfg["token"], cfg.get("image_set", ""), float(cfg["timeout"]))


def cmd_pull(cfg):
    from .model import save_manifest
    from .sync import ExactClient

    client = ExactClient(_server_cfg(cfg))
    manifest = client.pull_dataset(patch_size=cfg["patch_size"], seed=cfg["seed"])
    save_manifest(manifest, cfg["out"])
    for item in client.state.rejected:
        log.warning("rejected annotation %s on slide %s: %s", item["id"], item["slide_id"], item["reason"])
    log.info("pulled %d slides into %s (retries: %d)", len(manifest.slides), cfg["out"], client.state.retries)
    return EXIT_OK


def cmd_push(cfg):
    from .evaluation import detections_from_records
    from .model import CANONICAL_CLASSES
    from .sync import ExactClient

    _require(cfg, "slide", "dets")
    records = json.loads(Path(cfg["dets"]).read_text(encoding="utf-8"))
    names = list(CANONICAL_CLASSES)
    for r in records:
        if isinstance(r.get("class"), str) and r["class"] not in names:
            names.append(r["class"])
    dets = [d for d in detections_from_records(records, names) if d.image_id == cfg["slide"]]
    receipt = ExactClient(_server_cfg(cfg)).push_predictions(cfg["slide"], dets, names, cfg["min_score"])
    json.dump([{"client_id": c, "server_id": s} for c, s in receipt], sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_sample(cfg):
    from .model import load_manifest
    from .sampler import SamplerConfig, epoch_stream, write_patch_manifest

    _require(cfg, "manifest")
    manifest = load_manifest(cfg["manifest"])
    overrides = {"batch_size": cfg["bs"], "mode": cfg["mode"], "strict": bool(cfg["strict"])}
    for key in ("seed", "patch_size", "epoch_length"):
        if cfg[key] is not None:
            overrides[key] = cfg[key]
    scfg = SamplerConfig.from_manifest(manifest, **overrides)
    with _output(cfg["out"]) as fh:
        for epoch in range(cfg["epochs"]):
            write_patch_manifest(epoch_stream(manifest, scfg, epoch), manifest.classes.names, fh)
    return EXIT_OK


def cmd_trainsim(cfg):
    from .training import SimulatedLearner, TrainingLog, TrainingSchedule, run_training_protocol, simulate

    schedule = TrainingSchedule(plateau_patience=cfg["plateau_patience"], stop_patience=cfg["stop_patience"],
                                max_epochs=cfg["max_epochs"])
    if cfg["metrics"]:
        try:
            metrics = [float(v) for v in str(cfg["metrics"]).split(",")]
        except ValueError:
            raise UsageError(f"--metrics must be comma-separated numbers, got {cfg['metrics']!r}") from None
        records, ctl = simulate(metrics, schedule)
        result = TrainingLog(records, ctl.best_epoch, ctl.best, ctl.stop_reason or "metrics exhausted")
    else:
        from .model import load_manifest
        from .sampler import SamplerConfig

        _require(cfg, "manifest")
        manifest = load_manifest(cfg["manifest"])
        scfg = SamplerConfig.from_manifest(manifest, batch_size=cfg["bs"], mode=cfg["mode"], seed=cfg["seed"])
        learner = SimulatedLearner(seed=cfg["seed"])
        result = run_training_protocol(learner, manifest, scfg, schedule,
                                       load_patch=lambda spec: _LightPatch(spec))
    with _output(cfg["out"]) as fh:
        result.write_jsonl(fh)
    log.info("best epoch %s (metric %s), stopped: %s", result.best_epoch, result.best_metric, result.stop_reason)
    if cfg["figure"]:
        from .plotting import plot_training_log

        plot_training_log(result.records, cfg["figure"])
    return EXIT_OK


class _LightPatch:
    # the toy learner ignores pixels, so trainsim skips raster reads
    def __init__(self, spec):
        self.spec = spec


def cmd_infer(cfg):
    from .evaluation import write_detections
    from .harness import OracleDetector, OracleDetectorConfig, infer_slide
    from .model import load_manifest

    _require(cfg, "manifest")
    manifest = load_manifest(cfg["manifest"])
    ocfg = OracleDetectorConfig(n_classes=len(manifest.classes), miss_rate=cfg["miss_rate"],
                                fp_rate=cfg["fp_rate"], jitter_px=cfg["jitter"], seed=cfg["seed"])
    detector = OracleDetector(manifest, ocfg)
    wanted = str(cfg["slides"]).split(",") if cfg["slides"] else [s.slide_id for s in manifest.slides]
    jobs = cfg["jobs"] or os.cpu_count() or 1
    dets = []
    for sid in wanted:
        try:
            slide = manifest.slide(sid)
        except KeyError:
            raise errors.ValidationError([f"unknown slide {sid!r}"]) from None
        found = infer_slide(detector, slide, cfg["tile"], cfg["overlap"], manifest=manifest, jobs=jobs)
        log.info("slide %s: %d detections", sid, len(found))
        dets.extend(found)
    # globally unique ids across slides
    from .evaluation import Detection

    dets = [Detection(i, d.image_id, d.cls, d.score, d.x, d.y, d.w, d.h) for i, d in enumerate(dets)]
    if cfg["out"] == "-":
        from .evaluation import detection_to_record

        json.dump([detection_to_record(d, manifest.classes.names) for d in dets], sys.stdout, indent=1)
        sys.stdout.write("\n")
    else:
        write_detections(dets, manifest.classes.names, cfg["out"])
    return EXIT_OK


def _load_ground_truth(path):
    from .evaluation import ground_truth_from_records, ground_truth_from_slides
    from .model import CANONICAL_CLASSES, manifest_from_dict

    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "slides" in data:
        manifest = manifest_from_dict(data, base_dir=str(Path(path).parent))
        return ground_truth_from_slides(manifest.slides), list(manifest.classes.names), manifest.slides
    if not isinstance(data, list):
        raise errors.ParseError(f"{path}: expected a manifest or a list of ground-truth records")
    names = list(CANONICAL_CLASSES)
    for r in data:
        if isinstance(r.get("class"), str) and r["class"] not in names:
            names.append(r["class"])
    return ground_truth_from_records(data, names), names, None


def cmd_eval(cfg):
    from .evaluation import detections_from_records, match_and_ap, restrict_to_screened

    _require(cfg, "gt", "dets")
    gts, names, slides = _load_ground_truth(cfg["gt"])
    records = json.loads(Path(cfg["dets"]).read_text(encoding="utf-8"))
    for r in records:
        if isinstance(r.get("class"), str) and r["class"] not in names:
            names.append(r["class"])
    try:
        dets = detections_from_records(records, names)
    except (KeyError, TypeError, ValueError) as exc:
        raise errors.ParseError(f"{cfg['dets']}: malformed detection record: {exc}") from None
    if slides is not None and not cfg["all_detections"]:
        dets = restrict_to_screened(dets, slides)
    report = match_and_ap(dets, gts, cfg["iou"], class_names=names)
    with _output(cfg["out"]) as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")
    if cfg["figure"]:
        from .plotting import plot_pr_curves

        plot_pr_curves(report, names, cfg["figure"])
    return EXIT_OK


def cmd_report(cfg):
    from .report import parse_row_spec, table_row, write_table_csv

    _require(cfg, "row")
    rows = []
    for spec in cfg["row"]:
        try:
            mode, backbone, bs, path = parse_row_spec(spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows.append(table_row(mode, backbone, bs, json.loads(Path(path).read_text(encoding="utf-8"))))
    with _output(cfg["csv"]) as fh:
        write_table_csv(rows, fh, precision=cfg["precision"])
    if cfg["figure"]:
        from .plotting import plot_table
        from .report import TABLE_LABELS

        plot_table(rows, TABLE_LABELS, cfg["figure"])
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "pull": cmd_pull, "push": cmd_push, "sample": cmd_sample,
    "trainsim": cmd_trainsim, "infer": cmd_infer, "eval": cmd_eval, "report": cmd_report,
}


def _setup_logging(args):
    handler = logging.FileHandler(args.log) if args.log else logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _setup_logging(args)
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "log", "verbose", "command")}
    try:
        cfg = resolve(args.command, flags, args.config)
        shown = {k: ("***" if k == "token" and v else v) for k, v in cfg.items()}
        log.info("config %s %s", args.command, json.dumps(shown, sort_keys=True))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"slidesampler {args.command}: {exc}\n")
        return EXIT_USAGE
    except (errors.TransportError, errors.AuthError, errors.PartialUpload) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_TRANSPORT
    except (errors.SlideSamplerError, OSError, ValueError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
