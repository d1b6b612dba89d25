"""``spectraforge`` command line.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import RANGES, augment_pair, sample_affine
from .calibration import FLAT_EPSILON, calibrate, fit_distortion, load_corners
from .hypercube import (
    CubeFormatError,
    SpectralCube,
    header_path,
    load_cube,
    load_mask_png,
    save_cube,
    save_mask_png,
)
from .registration import pair_samples
from .simulate import SynthConfig, synth_dataset, write_dataset
from .spectral import DEFAULT_LEDS, build_projection, load_led_table, project_cube
from .spotmask import SPOT_RATIO, inpaint_spectral, spot_mask
from .tensornet import NetworkConfig, build_network, load_checkpoint
from .training import (
    RAW,
    DatasetManifest,
    TrainConfig,
    evaluate,
    load_samples,
    restore,
    sample_metrics,
    summarize,
    train_stage,
)

log = logging.getLogger("spectraforge")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_report(path, report: dict) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"spectraforge {args.command}: the --seed flag is required (randomized command)")
    return args.seed


def _led_specs(path):
    return DEFAULT_LEDS if path is None else load_led_table(path)


# subcommands -----------------------------------------------------------------


def cmd_info(args) -> int:
    hdr = json.loads(header_path(args.cube).read_text())
    cube = load_cube(args.cube)
    info = {
        "path": str(args.cube),
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "raw": cube.raw,
        "byte_order": hdr["byte_order"],
        "value_type": hdr["value_type"],
        "wavelength_range_nm": [float(cube.wavelengths[0]), float(cube.wavelengths[-1])],
        "min": float(cube.data.min()),
        "max": float(cube.data.max()),
    }
    if args.json:
        _write_report("-", info)
    else:
        for k, v in info.items():
            print(f"{k}: {v}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    raw = load_cube(args.raw)
    white = load_cube(args.white)
    dark = load_cube(args.dark) if args.dark else None
    model = None
    if args.corners:
        model = fit_distortion(load_corners(args.corners, args.pitch), image_size=(raw.width, raw.height))
    cube, mask = calibrate(raw, white, model, dark, args.epsilon)
    save_cube(cube, args.out)
    if args.mask_out:
        save_mask_png(mask, args.mask_out)
    report = {
        "out": str(args.out),
        "valid_fraction": float(mask.bits.mean()),
        "distortion": None if model is None else model.to_dict(),
        "dark_subtracted": dark is not None,
    }
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


def cmd_mask(args) -> int:
    cube = load_cube(args.input)
    mask = spot_mask(cube, args.spot_ratio)
    save_mask_png(mask, args.mask_out)
    if args.inpaint_out:
        save_cube(inpaint_spectral(cube, mask), args.inpaint_out)
    report = {
        "bands": [
            {"band": b, "wavelength_nm": float(cube.wavelengths[b]), "spot_pixels": int((~mask.bits[b]).sum())}
            for b in range(cube.bands)
        ],
        "spot_ratio": args.spot_ratio,
    }
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


def cmd_align(args) -> int:
    ours = load_cube(args.ours)
    ref = load_cube(args.ref)
    mask = load_mask_png(args.ours_mask) if args.ours_mask else None
    pair = pair_samples(ours, ref, args.factor, args.band, mask, args.multi_band, not args.reject_border)
    out = Path(args.out_pair)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(pair.input, out / "input.hsc")
    save_cube(pair.ground_truth, out / "gt.hsc")
    mm = pair.mismatch
    save_cube(SpectralCube(mm.astype(np.float32), [1.0], raw=True), out / "mismatch.hsc")
    report = pair.match.as_dict()
    report["mismatch"] = pair.mismatch_stats()
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


def cmd_project(args) -> int:
    gt = load_cube(args.gt)
    proj = build_projection(_led_specs(args.leds), gt.wavelengths, args.mode)
    save_cube(project_cube(gt, proj), args.out)
    return EXIT_OK


def _eval_pair(args) -> dict:
    gt = load_cube(args.gt)
    pred = load_cube(args.pred)
    if gt.data.shape != pred.data.shape:
        raise CubeFormatError(f"gt {gt.shape} and pred {pred.shape} differ")
    seg = load_mask_png(args.seg) if args.seg else None
    row = sample_metrics(gt.data, pred.data, seg, Path(args.pred).stem)
    return {"samples": [row], "summary": summarize([row])}


def _eval_model(args) -> dict:
    manifest = DatasetManifest.load(args.manifest)
    ck = load_checkpoint(args.checkpoint)
    cfg = NetworkConfig.from_dict(ck.config["network"])
    model = build_network(cfg, np.random.default_rng(0))
    restore(model, ck)
    ids = manifest.test if args.split == "test" else manifest.train
    data = load_samples(manifest, ids)
    return evaluate(model, data, ids, source=RAW)


def cmd_eval(args) -> int:
    pair_mode = args.gt is not None or args.pred is not None
    model_mode = args.manifest is not None or args.checkpoint is not None
    if pair_mode == model_mode:
        raise UsageError("eval needs either --gt/--pred or --manifest/--checkpoint")
    if pair_mode and (args.gt is None or args.pred is None):
        raise UsageError("eval pair mode needs both --gt and --pred")
    if model_mode and (args.manifest is None or args.checkpoint is None):
        raise UsageError("eval model mode needs both --manifest and --checkpoint")
    report = _eval_pair(args) if pair_mode else _eval_model(args)
    _write_report(args.report, report)
    return EXIT_OK


def cmd_augment(args) -> int:
    seed = _require_seed(args)
    if args.count < 1:
        raise UsageError("--count must be positive")
    inp = load_cube(args.input)
    gt = load_cube(args.gt)
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for k in range(args.count):
        params = sample_affine(rng)
        a, g, m = augment_pair(inp, gt, params=params, warp_gt=not args.no_gt_warp)
        save_cube(a, out / f"aug_{k:04d}_input.hsc")
        save_cube(g, out / f"aug_{k:04d}_gt.hsc")
        save_mask_png(m, out / f"aug_{k:04d}_mask.png")
        items.append({"index": k, "params": dict(zip(RANGES, params.as_tuple())),
                      "valid_fraction": float(m.bits.mean())})
    if args.report:
        _write_report(args.report, {"seed": seed, "count": args.count, "items": items})
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = _require_seed(args)
    if args.count < 2:
        raise UsageError("--count must be at least 2")
    cfg = SynthConfig.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SynthConfig()
    samples = synth_dataset(cfg, args.count, seed)
    path = write_dataset(samples, args.out, seed, args.test_count, cfg)
    if args.report:
        m = DatasetManifest.load(path)
        _write_report(args.report, {"manifest": str(path), "config": cfg.to_dict(), **m.to_dict()})
    return EXIT_OK


def _load_train_config(path, stage: str, seed: int, epochs: int | None):
    d = json.loads(Path(path).read_text()) if path else {}
    net = d.get("network", "tiny")
    if net == "tiny":
        net_cfg = NetworkConfig.tiny()
    elif net == "full":
        net_cfg = NetworkConfig.full()
    else:
        net_cfg = NetworkConfig.from_dict(net)
    train_kw = dict(d.get(stage, {}))
    train_kw["seed"] = seed
    if epochs is not None:
        train_kw["epochs"] = epochs
    return net_cfg, TrainConfig.for_stage(stage, **train_kw)


def cmd_train(args) -> int:
    seed = _require_seed(args)
    manifest = DatasetManifest.load(args.manifest)
    net_cfg, cfg = _load_train_config(args.config, args.stage, seed, args.epochs)
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
    if args.delta_vs_gt:
        cfg.delta_vs_gt = True
    model = build_network(net_cfg, np.random.default_rng(seed))
    if args.init:
        restore(model, load_checkpoint(args.init))
    data = load_samples(manifest, manifest.train)
    if not data:
        raise UsageError("manifest has no training samples")
    gt0 = next(iter(data.values())).ground_truth
    proj = build_projection(_led_specs(args.leds), gt0.wavelengths)
    result = train_stage(model, data, manifest.train, cfg, proj, args.out, args.resume)
    report = {
        "stage": cfg.stage,
        "seed": seed,
        "epochs": cfg.epochs,
        "steps": result.steps,
        "history": result.history,
        "final_loss": result.history[-1] if result.history else None,
        "network": net_cfg.to_dict(),
        "train": cfg.to_dict(),
    }
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spectraforge", description="Active-illumination hyperspectral reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("info", help="print a cube header")
    s.add_argument("cube", type=Path)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("calibrate", help="flat field, optional dark frame and undistortion")
    s.add_argument("--raw", required=True, type=Path)
    s.add_argument("--white", required=True, type=Path)
    s.add_argument("--dark", type=Path)
    s.add_argument("--corners", type=Path, help="obs_x obs_y board_i board_j per line")
    s.add_argument("--pitch", type=float, default=1.0)
    s.add_argument("--epsilon", type=float, default=FLAT_EPSILON)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--mask-out", type=Path)
    s.add_argument("--report")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("mask", help="mask LED spots and optionally inpaint across bands")
    s.add_argument("--in", dest="input", required=True, type=Path)
    s.add_argument("--mask-out", required=True, type=Path)
    s.add_argument("--inpaint-out", type=Path)
    s.add_argument("--spot-ratio", type=float, default=SPOT_RATIO)
    s.add_argument("--report")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("align", help="register our cube into the reference cube")
    s.add_argument("--ours", required=True, type=Path)
    s.add_argument("--ref", required=True, type=Path)
    s.add_argument("--factor", required=True, type=float)
    s.add_argument("--band", type=int, default=None, help="our band to match (default nearest 660 nm)")
    s.add_argument("--ours-mask", type=Path)
    s.add_argument("--multi-band", action="store_true")
    s.add_argument("--reject-border", action="store_true", help="fail when the match touches the border")
    s.add_argument("--out-pair", required=True, type=Path)
    s.add_argument("--report")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("project", help="project a fine-grained cube onto LED bands")
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--leds", type=Path, help="LED table (default: built-in 8 LEDs)")
    s.add_argument("--mode", choices=("gaussian", "nearest"), default="gaussian")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--gt", type=Path)
    s.add_argument("--pred", type=Path)
    s.add_argument("--seg", type=Path)
    s.add_argument("--manifest", type=Path)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--split", choices=("test", "train"), default="test")
    s.add_argument("--report", default="-")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("augment", help="write randomly augmented copies of a pair")
    s.add_argument("--in", dest="input", required=True, type=Path)
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--no-gt-warp", action="store_true")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--report")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--spec", type=Path, help="JSON synthesis settings")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--test-count", type=int, default=None)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--report")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--config", type=Path, help="JSON with 'network' and per-stage settings")
    s.add_argument("--stage", choices=("pretrain", "main"), required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--leds", type=Path)
    s.add_argument("--resume", type=Path, help="continue an interrupted run")
    s.add_argument("--init", type=Path, help="start from another run's weights")
    s.add_argument("--delta-vs-gt", action="store_true", help="delta losses compare against ground-truth deltas")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--report")
    s.set_defaults(func=cmd_train)
    return p


def _setup_logging() -> None:
    level = os.environ.get("SPECTRAFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"spectraforge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"spectraforge: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
