"""Command-line entry point: dataset synthesis, training, translation,
evaluation, and cross-run comparison reports.

Every command exits 0 on success and writes a single-line JSON error record
to stderr on failure, with distinct exit codes per error class:

    2  usage (unknown flag / bad invocation)
    3  configuration error
    4  data, checkpoint, or shape error
    5  runtime error
    6  output directory already locked by another run
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, models, trainer
from .data import (KIND_CLASSIFICATION, SynthSpec, load_bundle, load_manifest,
                   pixels_from_uint8, save_dataset, synthesize_classification_domains,
                   synthesize_segmentation_domains, synthesize_target_eval_bundle,
                   uint8_from_pixels)
from .errors import (CheckpointError, ConfigurationError, DataError, EvalError,
                     InferenceError, MdaggrError)
from .evaluation import batch_to_torch, evaluate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5
EXIT_LOCK = 6

_OVERRIDE_SECTIONS = ("trainer", "weights", "run")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _log(message: str) -> None:
    print(message, flush=True)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigurationError("override %r is not of the form section.key=value" % (text,))
    key, raw = text.split("=", 1)
    if "." not in key:
        raise ConfigurationError("override key %r needs a section prefix" % (key,))
    section, name = key.split(".", 1)
    if section not in _OVERRIDE_SECTIONS:
        raise ConfigurationError("unknown override section %r (expected one of %s)"
                                 % (section, ", ".join(_OVERRIDE_SECTIONS)))
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def _load_train_config(config_path: str | None, mode: str | None, seed: int | None,
                       overrides: list[str]) -> tuple[trainer.TrainConfig, dict]:
    doc = {"trainer": {}, "weights": {}, "run": {}}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError("config file not found: %s" % (path,))
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError("config %s is not valid JSON: %s" % (path, exc))
        for section in _OVERRIDE_SECTIONS:
            doc[section].update(loaded.get(section, {}))
    for text in overrides:
        section, name, value = _parse_override(text)
        doc[section][name] = value
    if mode is not None:
        doc["trainer"]["mode"] = mode
    if seed is not None:
        doc["trainer"]["seed"] = seed

    fields = dict(doc["trainer"])
    if doc["weights"]:
        fields["weights"] = doc["weights"]
    config = trainer.TrainConfig.from_dict(fields)
    return config, doc["run"]


def _hash_inputs(path: Path) -> str:
    """Content hash over a file or a whole directory tree."""
    outer = hashlib.sha256()
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        outer.update(str(f.relative_to(path.parent)).encode())
        outer.update(hashlib.sha256(f.read_bytes()).digest())
    return outer.hexdigest()


class _RunLock:
    """One run per output directory, enforced with an exclusive lock file."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"
        self.acquired = False

    def __enter__(self):
        Path(self.path.parent).mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise _LockHeld("output directory %s is locked by another run"
                            % (self.path.parent,))
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired and self.path.exists():
            self.path.unlink()
        return False


class _LockHeld(MdaggrError):
    pass


def _default_out(value: str | None) -> Path:
    if value is not None:
        return Path(value)
    env = os.environ.get("MDAGGR_OUT")
    if env:
        return Path(env)
    raise ConfigurationError("no --out given and MDAGGR_OUT is not set")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _read_synth_spec(path: str) -> tuple[SynthSpec, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError("synth spec file not found: %s" % (p,))
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError("synth spec %s is not valid JSON: %s" % (p, exc))
    kind = doc.pop("kind", KIND_CLASSIFICATION)
    try:
        spec = SynthSpec(**doc)
    except TypeError as exc:
        raise ConfigurationError("bad synth spec field: %s" % (exc,))
    return spec, kind


def cmd_synth(args) -> int:
    spec, kind = _read_synth_spec(args.spec)
    out = _default_out(args.out)
    _log("[synth] generating %s benchmark: %d sources, %d classes, %d images/domain"
         % (kind, spec.num_sources, spec.num_classes, spec.images_per_domain))
    if kind == KIND_CLASSIFICATION:
        bundles = synthesize_classification_domains(spec)
    else:
        bundles = synthesize_segmentation_domains(spec)
    eval_bundle = synthesize_target_eval_bundle(spec, kind)
    manifest_path = save_dataset(bundles, out, eval_bundle=eval_bundle)
    _log("[synth] wrote %s" % (manifest_path,))
    return EXIT_OK


def cmd_train(args) -> int:
    config, run_meta = _load_train_config(args.config, args.mode, args.seed,
                                          args.override or [])
    out = _default_out(args.out)
    data_path = Path(args.data)
    if data_path.is_file() and data_path.suffix == ".json" and data_path.name != "manifest.json":
        spec, kind = _read_synth_spec(args.data)
        if kind != config.task_kind:
            raise ConfigurationError("data spec kind %r does not match config task_kind %r"
                                     % (kind, config.task_kind))
        data = spec
    else:
        data = load_manifest(data_path)

    with _RunLock(out):
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "tool_version": __version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "config": config.to_dict(),
            "seed": config.seed,
            "label": run_meta.get("label", config.mode),
            "data": str(data_path),
            "input_hash": _hash_inputs(data_path),
        }
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2))
        _log("[train] run manifest written; mode=%s seed=%d" % (config.mode, config.seed))
        state, report = trainer.train(data, config, out_dir=out)
        _log("[train] finished %d round(s); final stage %d" % (state.round + 1, state.stage))
        if report is not None:
            _log("[train] final %s: overall=%.4f micro=%.4f"
                 % (report.task_kind, report.overall, report.micro))
    return EXIT_OK


def cmd_translate(args) -> int:
    payload = models.load_checkpoint(args.checkpoint)
    names = payload.get("source_names", [])
    if args.source not in names:
        raise DataError("checkpoint has no source domain %r (available: %s)"
                        % (args.source, ", ".join(names)))
    index = names.index(args.source)
    config = trainer.TrainConfig.from_dict(payload["config"])
    channels = payload["channels"]
    t_cfg = models.TranslatorConfig(residual_blocks=config.translator_blocks,
                                    base_width=config.translator_width, channels=channels)
    net = models.TranslatorNet(t_cfg)
    net.load_state_dict(payload["components"]["translator_fwd_%d" % index])
    net.eval()

    in_dir = Path(getattr(args, "in"))
    if not in_dir.is_dir():
        raise DataError("input directory not found: %s" % (in_dir,))
    files = sorted(in_dir.glob("*.png"))
    if not files:
        raise DataError("no .png images under %s" % (in_dir,))
    out = _default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log("[translate] adapting %d images from %r" % (len(files), args.source))

    from PIL import Image as PILImage
    import torch
    h, w, c = payload["image_size"]
    for start in range(0, len(files), 32):
        chunk = files[start:start + 32]
        rasters = []
        for f in chunk:
            arr = np.asarray(PILImage.open(f))
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.shape != (h, w, c):
                raise DataError("image %s has shape %r, expected %r"
                                % (f, arr.shape, (h, w, c)))
            rasters.append(pixels_from_uint8(arr))
        batch = batch_to_torch(np.stack(rasters))
        with torch.no_grad():
            adapted = net(batch).numpy().transpose(0, 2, 3, 1)
        for f, img in zip(chunk, adapted):
            raster = uint8_from_pixels(img)
            if raster.shape[2] == 1:
                raster = raster[:, :, 0]
            PILImage.fromarray(raster).save(out / f.name)
    _log("[translate] wrote %d adapted images to %s" % (len(files), out))
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    bundle = load_bundle(manifest, args.domain)
    _log("[eval] evaluating %s on domain %r (%d samples)"
         % (args.checkpoint, args.domain, bundle.count))
    report = evaluate(args.checkpoint, bundle)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    _log("[eval] overall=%.4f micro=%.4f -> %s" % (report.overall, report.micro, report_path))
    return EXIT_OK


def cmd_report(args) -> int:
    groups: dict[str, list[dict]] = {}
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        manifest_path = run_dir / "run_manifest.json"
        report_path = run_dir / "report.json"
        if not manifest_path.is_file():
            raise DataError("run manifest missing: %s" % (manifest_path,))
        if not report_path.is_file():
            raise DataError("run report missing: %s" % (report_path,))
        manifest = json.loads(manifest_path.read_text())
        report = json.loads(report_path.read_text())
        label = manifest.get("label", manifest["config"]["mode"])
        groups.setdefault(label, []).append({
            "seed": manifest["seed"], "overall": report["overall"],
            "micro": report["micro"], "run": str(run_dir)})

    summary = {}
    for label, rows in sorted(groups.items()):
        overall = np.array([r["overall"] for r in rows], dtype=np.float64)
        micro = np.array([r["micro"] for r in rows], dtype=np.float64)
        summary[label] = {
            "runs": len(rows),
            "seeds": [r["seed"] for r in rows],
            "overall_mean": float(overall.mean()),
            "overall_std": float(overall.std(ddof=1)) if len(rows) > 1 else 0.0,
            "micro_mean": float(micro.mean()),
            "micro_std": float(micro.std(ddof=1)) if len(rows) > 1 else 0.0,
        }

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps({"groups": summary}, indent=2))
    _log("%-20s %5s %18s %18s" % ("variant", "runs", "overall (mean+/-sd)", "micro (mean+/-sd)"))
    for label, row in sorted(summary.items()):
        _log("%-20s %5d %9.4f +/- %.4f %9.4f +/- %.4f"
             % (label, row["runs"], row["overall_mean"], row["overall_std"],
                row["micro_mean"], row["micro_std"]))
    _log("[report] wrote %s" % (out_path,))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mdaggr",
                     description="Multi-source adversarial domain aggregation at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--spec", required=True, help="synthesis spec JSON")
    p.add_argument("--out", default=None, help="dataset output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the three-stage training protocol")
    p.add_argument("--config", default=None, help="train config JSON")
    p.add_argument("--data", required=True, help="dataset directory or synth spec JSON")
    p.add_argument("--mode", choices=[trainer.MODE_MADAN, trainer.MODE_MADAN_PLUS],
                   default=None)
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config key (sections: trainer, weights, run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="emit adapted images for one source domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source domain name")
    p.add_argument("--in", required=True, help="directory of input images")
    p.add_argument("--out", default=None, help="directory for adapted images")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one labeled domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--domain", required=True)
    p.add_argument("--report", required=True, help="where to write the metric report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate runs into a comparison table")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="summary JSON path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except _LockHeld as exc:
        return _fail(EXIT_LOCK, "lock", str(exc))
    except ConfigurationError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (DataError, CheckpointError, EvalError, InferenceError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except MdaggrError as exc:
        return _fail(EXIT_RUNTIME, "runtime", str(exc))
    except KeyboardInterrupt:
        return _fail(EXIT_RUNTIME, "interrupted", "interrupted")


if __name__ == "__main__":
    sys.exit(main())
