"""Command-line entry point (``stainforge``).

Exit codes: 0 success, 1 usage or config error, 2 data / checkpoint error,
3 numeric failure. Errors are written to stderr as one line::

    stainforge: error: <kind>: <message>
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import resource
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .codec import identity_codec, pretrain_tiny_ae, replicate_channels, to_model_range
from .data import (DataError, PatchRecord, deoverlap, filter_by_coverage, filter_empty_by_ssim, generate_synthetic,
                   ingest_directory, read_image, write_directory, write_image)
from .denoiser import MarkerPanel, init_params
from .metrics import evaluate
from .sampler import SamplerConfig, predict
from .tensor import NumericError
from .trainer import prepare_latents, stage1_train, stage2_finetune

log = logging.getLogger("stainforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Overlay colours by marker index (RGB); wraps after 12 markers.
PALETTE = np.array([
    (0.20, 0.40, 1.00), (1.00, 0.20, 0.20), (0.20, 1.00, 0.20), (1.00, 0.85, 0.10),
    (1.00, 0.20, 1.00), (0.10, 1.00, 1.00), (1.00, 0.55, 0.10), (0.60, 0.30, 1.00),
    (0.55, 1.00, 0.30), (1.00, 0.45, 0.65), (0.30, 0.75, 1.00), (0.85, 0.85, 0.85),
])


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc.strerror}") from exc
    return out


def _records_from(cfg: cfgmod.ExperimentConfig, data_dir, split: str) -> list[PatchRecord]:
    panel = cfg.resolved_panel()
    if data_dir:
        records = [r for r in ingest_directory(data_dir, panel) if r.split == split]
    elif cfg.dataset.source == "directory":
        if not cfg.dataset.directory:
            raise DataError("dataset.source is 'directory' but dataset.directory is unset")
        records = [r for r in ingest_directory(cfg.dataset.directory, panel, cfg.dataset.patch_size, cfg.dataset.overlap) if r.split == split]
    else:
        s = cfg.dataset.synth
        n, offset = (s.n_train, 0) if split == "train" else (s.n_test, s.n_train)
        records = generate_synthetic(cfg.synth_spec(), n, offset, split)
    if not records:
        raise DataError(f"no {split} records available")
    return records


def _write_config(cfg, out: Path) -> None:
    cfgmod.save(cfg, out / "config.yaml")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out or cfg.out_dir)
    spec = cfg.synth_spec()
    if args.n is not None:
        records = generate_synthetic(spec, args.n, 0, args.split)
    else:
        s = cfg.dataset.synth
        records = generate_synthetic(spec, s.n_train, 0, "train")
        if s.n_test:
            records += generate_synthetic(spec, s.n_test, s.n_train, "test")
    manifest = write_directory(records, out, spec.panel(), spec.bit_depth, cfg.filter_rules())
    _write_config(cfg, out)
    print(json.dumps({"out": str(out), "count": manifest["count"], "splits": manifest["splits"]}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    root = args.data or cfg.dataset.directory
    if not root:
        raise UsageError("ingest needs --data or dataset.directory")
    panel = cfg.resolved_panel()
    records = ingest_directory(root, panel, args.patch_size or cfg.dataset.patch_size, cfg.dataset.overlap if args.overlap is None else args.overlap)
    out = _out_dir(args.out or cfg.out_dir)
    manifest = write_directory(records, out, panel, cfg.dataset.synth.bit_depth, cfg.filter_rules())
    print(json.dumps({"out": str(out), "count": manifest["count"]}))
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _load_config(args)
    if not args.data:
        raise UsageError("filter needs --data")
    panel = cfg.resolved_panel()
    rules = cfg.filter_rules()
    records = ingest_directory(args.data, panel)
    n0 = len(records)
    records = filter_by_coverage(records, rules)
    n_cov = n0 - len(records)
    if cfg.dataset.filters.min_center_distance > 0:
        records = deoverlap(records, cfg.dataset.filters.min_center_distance)
    excluded = {}
    for marker in (args.markers.split(",") if args.markers else []):
        records, excluded[marker] = filter_empty_by_ssim(records, marker, rules.empty_ssim_threshold)
    out = _out_dir(args.out or cfg.out_dir)
    write_directory(records, out, panel, cfg.dataset.synth.bit_depth, rules)
    summary = {"input": n0, "kept": len(records), "coverage_excluded": n_cov, "empty_excluded": excluded}
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["filter"] = summary
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(json.dumps(summary))
    return EXIT_OK


def _save_every(out: Path, stage: int, every: int, codec, cfg_dict):
    if every <= 0:
        return None

    def hook(step, params, state):
        if step % every == 0:
            return save_checkpoint(out / f"stage{stage}_step{step}.ckpt", params, stage, state, codec, cfg_dict)
        return None

    return hook


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out or cfg.out_dir)
    stage = args.stage
    panel = MarkerPanel(cfg.resolved_panel())
    # the output location does not affect the model, so it stays out of the checkpoint's config hash
    cfg_dict = {k: v for k, v in cfgmod.to_dict(cfg).items() if k != "out_dir"}
    resume = None
    if args.resume:
        ck = load_checkpoint(args.resume, panel)
        if ck.stage != stage:
            raise DataError(f"cannot resume stage {stage} from a stage-{ck.stage} checkpoint")
        params, codec, resume = ck.params, ck.codec, ck.optimizer
    elif stage == 2:
        init = Path(args.checkpoint) if args.checkpoint else out / "stage1.ckpt"
        if not init.exists():
            raise DataError(f"stage 2 needs a stage-1 checkpoint; {init} does not exist (train --stage 1 first)")
        ck = load_checkpoint(init, panel)
        if ck.stage != 1:
            raise DataError(f"{init} is a stage-{ck.stage} checkpoint, stage 2 starts from stage 1")
        params, codec = ck.params, ck.codec
    else:
        params = init_params(3 if cfg.codec.kind == "identity" else 4, cfg.denoiser.width, cfg.denoiser.emb_dim, cfg.seed,
                             cfg.denoiser.groups, panel)
        codec = None
    records = _records_from(cfg, args.data, "train")
    if codec is None:
        if cfg.codec.kind == "identity":
            codec = identity_codec()
        elif cfg.codec.kind == "tiny_ae":
            imgs = [r.source for r in records] + [replicate_channels(m) for r in records for m in r.markers.values()]
            codec = pretrain_tiny_ae(to_model_range(np.stack(imgs)), cfg.codec.pretrain_epochs, cfg.seed)
            if not codec.usable:
                raise DataError("tiny_ae codec needs codec.pretrain_epochs > 0")
        else:
            raise UsageError(f"unknown codec kind {cfg.codec.kind!r}")
    data = prepare_latents(records, codec, panel)
    if stage == 1:
        scfg = cfg.stage1_config()
        every = cfg.stage1.checkpoint_every
        fn = stage1_train
    else:
        scfg = cfg.stage2_config()
        every = cfg.stage2.checkpoint_every
        fn = stage2_finetune
    if args.steps is not None:
        scfg.steps = args.steps
    log_path = out / f"stage{stage}.log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    params, trace = fn(scfg, data, codec, params, panel, resume=resume, log_path=log_path,
                       on_step=_save_every(out, stage, every, codec, cfg_dict))
    ckpt = save_checkpoint(out / f"stage{stage}.ckpt", params, stage, trace.optimizer, codec, cfg_dict)
    _write_config(cfg, out)
    print(json.dumps({"checkpoint": str(ckpt), "steps": trace.optimizer.step, "log": str(log_path),
                      "final_loss": trace.records[-1]["loss"] if trace.records else None}))
    return EXIT_OK


def _input_images(paths) -> list[tuple[str, np.ndarray]]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            base = p / "source" if (p / "source").is_dir() else p
            files += sorted(f for f in base.iterdir() if f.suffix.lower() in (".png", ".tif", ".tiff"))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"input {p} does not exist")
    if not files:
        raise DataError("no input images found")
    out = []
    for f in files:
        img = read_image(f)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        out.append((f.stem, img))
    return out


def overlay(images: list[np.ndarray], marker_indices) -> np.ndarray:
    """Additive pseudo-colour composite [3, H, W] of single-channel images."""
    comp = np.zeros((3,) + images[0].shape[-2:])
    for img, m in zip(images, marker_indices):
        comp += PALETTE[m % len(PALETTE)][:, None, None] * img.reshape(img.shape[-2:])
    return np.clip(comp, 0.0, 1.0)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    if not args.checkpoint:
        raise UsageError("infer needs --checkpoint")
    if not args.input:
        raise UsageError("infer needs --input")
    header, _ = read_header(args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    panel = ck.panel
    if args.markers:
        names = args.markers.split(",")
        unknown = [n for n in names if n not in panel.names]
        if unknown:
            raise UsageError(f"unknown marker(s) {unknown}; checkpoint panel is {list(panel.names)}")
        sel = [panel.index(n) for n in names]
    else:
        sel = list(range(panel.M))
    mode = args.mode.replace("-", "_") if args.mode else None
    scfg = cfg.sampler_config(ck.stage, mode, args.steps, args.ensemble)
    if scfg.mode == "single_step" and (args.steps is not None or args.ensemble is not None):
        print("stainforge: warning: single-step mode ignores --steps/--ensemble", file=sys.stderr)
    inputs = _input_images(args.input)
    out = _out_dir(args.out or cfg.out_dir)
    shapes = {img.shape for _, img in inputs}
    written = 0
    for shape in shapes:
        group = [(i, img) for i, img in inputs if img.shape == shape]
        preds = predict(ck.params, ck.codec, np.stack([img for _, img in group]), panel, scfg, markers=sel)
        for (ident, _), pred in zip(group, preds):
            for k, m in enumerate(sel):
                write_image(out / f"{ident}__{panel.names[m]}.png", pred[k])
                written += 1
            write_image(out / f"{ident}__overlay.png", overlay(list(pred), sel))
    print(json.dumps({"out": str(out), "images": written, "mode": scfg.mode, "stage": header["stage"]}))
    return EXIT_OK


def _read_predictions(pred_dir: Path) -> dict[str, dict[str, np.ndarray]]:
    preds: dict[str, dict[str, np.ndarray]] = {}
    for f in sorted(pred_dir.iterdir()):
        if f.suffix.lower() not in (".png", ".tif", ".tiff") or "__" not in f.stem:
            continue
        ident, marker = f.stem.rsplit("__", 1)
        if marker == "overlay":
            continue
        preds.setdefault(ident, {})[marker] = read_image(f)[:1]
    return preds


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if not args.pred or not args.gt:
        raise UsageError("evaluate needs --pred and --gt")
    preds = _read_predictions(Path(args.pred))
    if not preds:
        raise DataError(f"no '<id>__<marker>' prediction files in {args.pred}")
    markers = sorted({m for p in preds.values() for m in p})
    if args.markers:
        markers = args.markers.split(",")
    gt_records = {r.id: r.markers for r in ingest_directory(args.gt, markers)}
    common = sorted(set(preds) & set(gt_records))
    if not common:
        raise DataError("prediction and ground-truth ids do not intersect")
    missing = sorted(set(preds) - set(gt_records))
    if missing:
        raise DataError(f"predictions without ground truth: {','.join(missing[:20])}")
    report = evaluate(preds, gt_records, markers, cfg.metrics.empty_ssim_threshold, cfg.metrics.data_range)
    out = _out_dir(args.out or cfg.out_dir)
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "report.json").write_text(report.to_json())
    print(report.to_text())
    return EXIT_OK


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench(params, codec, sources: np.ndarray, panel, T: int = 1000, ddim_steps: int = 50, ensemble: int = 10, seed: int = 0) -> dict:
    """Seconds per (source, marker) sample for single-step vs DDIM x ensemble."""
    panel = panel if isinstance(panel, MarkerPanel) else MarkerPanel(panel)
    n = len(sources) * panel.M
    rows = {}
    for name, scfg in (("single_step", SamplerConfig.single_step(T)),
                       ("ddim", SamplerConfig(mode="ddim", ddim_steps=ddim_steps, ensemble=ensemble, seed=seed, T=T))):
        predict(params, codec, sources[:1], panel, SamplerConfig.single_step(T))  # warm caches
        tic = time.perf_counter()
        predict(params, codec, sources, panel, scfg)
        rows[name] = {"ddim_steps": scfg.ddim_steps, "ensemble": scfg.ensemble, "sec_per_sample": (time.perf_counter() - tic) / n,
                      "peak_rss_mb": _peak_rss_mb()}
    rows["ratio"] = rows["ddim"]["sec_per_sample"] / rows["single_step"]["sec_per_sample"]
    return rows


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    if not args.checkpoint:
        raise UsageError("bench needs --checkpoint")
    ck = load_checkpoint(args.checkpoint)
    if args.input:
        sources = np.stack([img for _, img in _input_images(args.input)][: args.n])
    else:
        sources = np.stack([r.source for r in _records_from(cfg, None, "test")][: args.n])
    rows = bench(ck.params, ck.codec, sources, ck.panel, cfg.stage1.T, args.steps or 50, args.ensemble or 10, cfg.seed)
    lines = [f"{'mode':<14}{'DDIM steps':>11}{'Ensemble':>10}{'sec/sample':>12}{'peak RSS MB':>13}"]
    for name in ("single_step", "ddim"):
        r = rows[name]
        lines.append(f"{name:<14}{r['ddim_steps']:>11}{r['ensemble']:>10}{r['sec_per_sample']:>12.4f}{r['peak_rss_mb']:>13.1f}")
    lines.append(f"speed-up of single_step: {rows['ratio']:.1f}x")
    text = "\n".join(lines)
    if args.out:
        out = _out_dir(args.out)
        (out / "bench.txt").write_text(text + "\n")
        (out / "bench.json").write_text(json.dumps(rows, indent=1))
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stainforge", description="Marker-conditioned diffusion for virtual multiplex staining.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    sp = common(sub.add_parser("gen-synth", help="write a synthetic paired corpus"))
    sp.add_argument("--n", type=int, help="write N records into one split instead of the configured train/test sizes")
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_gen_synth)

    sp = common(sub.add_parser("ingest", help="tile a source/ + markers/ directory into patches"))
    sp.add_argument("--data")
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--overlap", type=float)
    sp.set_defaults(func=cmd_ingest)

    sp = common(sub.add_parser("filter", help="apply coverage / empty-patch / overlap curation"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--markers", help="drop patches whose channel for these markers is empty")
    sp.set_defaults(func=cmd_filter)

    sp = common(sub.add_parser("train", help="run training stage 1 or 2"))
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--data", help="corpus directory (default: synthetic data from the config)")
    sp.add_argument("--checkpoint", help="stage-1 checkpoint to fine-tune (stage 2)")
    sp.add_argument("--resume", help="checkpoint of the same stage to continue from")
    sp.add_argument("--steps", type=int, help="train up to this optimizer step")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("infer", help="predict marker images"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", nargs="+")
    sp.add_argument("--markers")
    sp.add_argument("--mode", choices=("ddim", "single-step", "single_step"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ensemble", type=int)
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("evaluate", help="score predictions against ground truth"))
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--markers")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("bench", help="time single-step vs DDIM x ensemble inference"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", nargs="+")
    sp.add_argument("--n", type=int, default=2, help="number of sources to time")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ensemble", type=int)
    sp.set_defaults(func=cmd_bench)
    return p


def _fail(kind: str, exc, code: int) -> int:
    msg = str(exc).replace("\n", " ").strip() or type(exc).__name__
    print(f"stainforge: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("STAINFORGE_THREADS")
    try:
        limit = threadpool_limits(int(threads)) if threads else contextlib.nullcontext()
    except ValueError:
        return _fail("usage", f"STAINFORGE_THREADS must be an integer, got {threads!r}", EXIT_USAGE)
    with limit:
        try:
            return args.func(args)
        except (UsageError, cfgmod.ConfigError) as exc:
            return _fail("usage", exc, EXIT_USAGE)
        except (NumericError, FloatingPointError) as exc:
            return _fail("numeric", exc, EXIT_NUMERIC)
        except (DataError, CheckpointError, FileNotFoundError, KeyError, OSError) as exc:
            return _fail("data", exc, EXIT_DATA)
        except ValueError as exc:
            return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
