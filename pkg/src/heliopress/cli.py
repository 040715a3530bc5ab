"""``heliopress`` command line: train, compress, decompress, evaluate, rd-sweep,
gen-synthetic, split-months, selftest."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import codec
from .data import (
    filename_for,
    hourly_timestamps,
    month_split,
    read_manifest,
    synthetic_sun,
    timestamp_from_filename,
)
from .imageio import ImageFormatError, atomic_write, encode_pgm, read_image, write_image
from .metrics import msssim_db, ms_ssim, perc_distance, psnr
from .model import ArchConfig, CodecModel, WeightFileError, model_from_bytes, model_to_bytes
from .train import LAMBDA_GRID, ConfigError, DivergenceError, TrainConfig, evaluate, train

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_DIGEST, EXIT_CORRUPT = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("heliopress")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration: flag > file > default

FLAG_TO_TRAIN = {"lam": "lam", "epochs": "epochs", "seed": "seed"}


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, f"config: file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config: {path} is not valid TOML ({exc})") from exc
    unknown = set(raw) - {"arch", "train"}
    if unknown:
        raise CliError(EXIT_CONFIG, f"config: unknown section [{sorted(unknown)[0]}]")
    return raw


def effective_config(args) -> tuple[ArchConfig, TrainConfig]:
    raw = load_config_file(getattr(args, "config", None))
    arch_vals = dict(raw.get("arch", {}))
    train_vals = dict(raw.get("train", {}))
    for flag, key in FLAG_TO_TRAIN.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_vals[key] = value
    if getattr(args, "gan", False):
        train_vals["gan_enabled"] = True
    arch_names = {f.name for f in fields(ArchConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    for section, vals, names in (("arch", arch_vals, arch_names), ("train", train_vals, train_names)):
        bad = set(vals) - names
        if bad:
            raise CliError(EXIT_CONFIG, f"{section}.{sorted(bad)[0]}: unknown option")
    try:
        arch = ArchConfig(**arch_vals)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"arch: {exc}") from exc
    try:
        cfg = TrainConfig(**train_vals)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"train.{exc}") from exc
    except TypeError as exc:
        raise CliError(EXIT_CONFIG, f"train: {exc}") from exc
    return arch, cfg


def echo_config(arch: ArchConfig, cfg: TrainConfig, out) -> None:
    print(json.dumps({"arch": arch.as_dict(), "train": asdict(cfg)}, sort_keys=True), file=out)


# ---------------------------------------------------------------------------
# helpers

def _load_model(path: str) -> CodecModel:
    try:
        return model_from_bytes(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"model file {path} not found") from exc
    except WeightFileError as exc:
        raise CliError(EXIT_DATA, f"model file {path}: {exc}") from exc


def _read_image(path: str) -> np.ndarray:
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"image {path} not found") from exc
    except ImageFormatError as exc:
        raise CliError(EXIT_DATA, f"image {path}: {exc}") from exc


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if h < size or w < size:
        raise CliError(EXIT_DATA, f"image {h}x{w} smaller than crop {size}")
    t, l = (h - size) // 2, (w - size) // 2
    return img[t:t + size, l:l + size]


def _synthetic_sets(n: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train set plus a held-out set drawn from a disjoint seed stream."""
    return synthetic_sun(seed, size, n), synthetic_sun(seed + 1_000_003, size, max(4, n // 10))


def _dataset(args, crop: int) -> tuple[list[np.ndarray] | np.ndarray, np.ndarray]:
    if args.synthetic:
        return _synthetic_sets(args.synthetic, crop, args.seed or 0)
    if not args.data:
        raise CliError(EXIT_DATA, "no data: pass --data DIR or --synthetic N")
    root = Path(args.data)
    if not root.is_dir():
        raise CliError(EXIT_DATA, f"data directory {root} does not exist")
    rejected: list = []
    tr, te = month_split(sorted(str(p) for p in root.glob("*.pgm")), rejected)
    for rec, why in rejected:
        print(f"warning: skipped {rec}: {why}", file=sys.stderr)
    if not len(tr):
        raise CliError(EXIT_DATA, f"no training images (January-August) in {root}")
    train_imgs = [_read_image(p) for p in tr.paths]
    test_imgs = [_center_crop(_read_image(p), crop) for p in te.paths]
    for p, img in zip(tr.paths, train_imgs):
        if min(img.shape) < crop:
            raise CliError(EXIT_DATA, f"{p}: {img.shape} smaller than crop {crop}")
    shapes = {i.shape for i in train_imgs}
    data = np.stack(train_imgs) if len(shapes) == 1 else [i for i in train_imgs]
    return data, (np.stack(test_imgs) if test_imgs else np.zeros((0, crop, crop)))


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    arch, cfg = effective_config(args)
    echo_config(arch, cfg, sys.stdout)
    data, eval_data = _dataset(args, cfg.crop)
    model = CodecModel.initialize(arch, seed=cfg.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".jsonl")
    tmp_log = log_path.with_name(f".{log_path.name}.partial")
    try:
        result = train(model, data, cfg, eval_data=eval_data, log_path=tmp_log)
    except DivergenceError as exc:
        tmp_log.unlink(missing_ok=True)
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write log {log_path}: {exc}") from exc
    atomic_write(out, model_to_bytes(result.model))
    tmp_log.replace(log_path)
    last = result.log[-1]
    print(json.dumps({"model": str(out), "log": str(log_path), "digest": model.digest().hex(),
                      "final": last}, default=str))
    return EXIT_OK


def cmd_compress(args) -> int:
    model = _load_model(args.model)
    img = _read_image(args.input)
    bs = codec.compress_image(model, img)
    blob = bs.to_bytes()
    atomic_write(args.output, blob)
    h, w = img.shape
    print(json.dumps({"bytes": len(blob), "bpp": 8.0 * len(blob) / (h * w),
                      "payload_bpp": 8.0 * len(bs.payload) / (h * w), "width": w, "height": h}))
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = _load_model(args.model)
    try:
        blob = Path(args.input).read_bytes()
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"bitstream {args.input} not found") from exc
    try:
        x_hat = codec.decompress_image(model, blob)
    except codec.WrongModelError as exc:
        raise CliError(EXIT_DIGEST, str(exc)) from exc
    except codec.CorruptStreamError as exc:
        raise CliError(EXIT_CORRUPT, f"corrupt stream: {exc}") from exc
    write_image(args.output, x_hat, bits=args.bits)
    report = {"width": x_hat.shape[1], "height": x_hat.shape[0]}
    if args.reference:
        report["psnr_db"] = psnr(_read_image(args.reference), x_hat)
    print(json.dumps(report))
    return EXIT_OK


def _eval_images(args, crop: int = 64) -> np.ndarray:
    if args.synthetic:
        return _synthetic_sets(args.synthetic, crop, args.seed or 0)[1]
    _, test = _dataset(args, crop)
    if not len(test):
        raise CliError(EXIT_DATA, "no test images (September-December)")
    return test


def _coded_metrics(model: CodecModel, images: np.ndarray) -> dict:
    """Per-image means with bpp from the actual bitstream size."""
    bpps, psnrs, msdb, percs = [], [], [], []
    for img in images:
        blob = codec.compress_image(model, img).to_bytes()
        x_hat = codec.decompress_image(model, blob)
        bpps.append(8.0 * len(blob) / img.size)
        psnrs.append(psnr(img, x_hat))
        msdb.append(msssim_db(ms_ssim(img, x_hat, allow_reduced=True)))
        percs.append(perc_distance(img[None, None], x_hat[None, None]).item())
    return {"bpp": float(np.mean(bpps)), "psnr_db": float(np.mean(psnrs)),
            "msssim_db": float(np.mean(msdb)), "perc": float(np.mean(percs))}


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    images = _eval_images(args)
    report = _coded_metrics(model, images)
    ev = evaluate(model, images)
    report["estimated_bpp"] = ev.bpp
    report["images"] = len(images)
    print(json.dumps(report))
    return EXIT_OK


def sweep_model_path(models_dir: str | Path, lam: float) -> Path:
    return Path(models_dir) / f"model_lambda_{lam:.4f}.sdw"


def format_sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lambda", "bpp", "psnr_db", "msssim_db", "perc"])
    for r in sorted(rows, key=lambda r: r["lambda"]):
        writer.writerow([f"{r['lambda']:.6f}", *(f"{r[k]:.6f}" for k in ("bpp", "psnr_db", "msssim_db", "perc"))])
    return buf.getvalue()


def cmd_rd_sweep(args) -> int:
    lambdas = sorted(args.lambdas or LAMBDA_GRID)
    models_dir = Path(args.models_dir)
    rows = []
    for lam in lambdas:
        path = sweep_model_path(models_dir, lam)
        if args.train_first:
            arch, cfg = effective_config(argparse.Namespace(**{**vars(args), "lam": lam}))
            data, eval_data = _dataset(args, cfg.crop)
            models_dir.mkdir(parents=True, exist_ok=True)
            try:
                res = train(CodecModel.initialize(arch, seed=cfg.seed), data, cfg, eval_data=eval_data)
            except DivergenceError as exc:
                raise CliError(EXIT_DIVERGED, f"lambda {lam}: training diverged: {exc}") from exc
            atomic_write(path, model_to_bytes(res.model))
        elif not path.exists():
            raise CliError(EXIT_DATA, f"missing model for lambda {lam}: {path}")
        model = _load_model(str(path))
        rows.append({"lambda": lam, **_coded_metrics(model, _eval_images(args))})
        print(f"lambda={lam:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in rows[-1].items() if k != "lambda"),
              file=sys.stderr)
    text = format_sweep_csv(rows)
    atomic_write(args.output, text.encode())
    if args.report_monotone:
        bpps = [r["bpp"] for r in sorted(rows, key=lambda r: r["lambda"])]
        mono = all(a <= b for a, b in zip(bpps, bpps[1:]))
        print(f"bpp non-decreasing in lambda: {mono}")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot create {out}: {exc}") from exc
    if args.size % 64:
        raise CliError(EXIT_CONFIG, f"size: must be a multiple of 64 (got {args.size})")
    stamps = hourly_timestamps(args.count, span_year=args.span_year)
    images = synthetic_sun(args.seed, args.size, args.count)
    try:
        for ts, img in zip(stamps, images):
            atomic_write(out / filename_for(ts, args.wavelength), encode_pgm(img, bits=args.bits))
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write to {out}: {exc}") from exc
    print(json.dumps({"files": args.count, "dir": str(out), "first": filename_for(stamps[0], args.wavelength)
                      if stamps else None}))
    return EXIT_OK


def cmd_split_months(args) -> int:
    src = Path(args.source)
    if src.is_dir():
        records = sorted(str(p) for p in src.glob("*.pgm"))
    elif src.is_file():
        records = read_manifest(src)
    else:
        raise CliError(EXIT_DATA, f"{src} is neither a directory nor a manifest file")
    rejected: list = []
    tr, te = month_split(records, rejected)
    report = {
        "train": [{"path": p, "timestamp": t.isoformat()} for p, t in tr.records],
        "test": [{"path": p, "timestamp": t.isoformat()} for p, t in te.records],
        "rejected": [{"record": str(r), "reason": why} for r, why in rejected],
        "train_months": sorted(tr.months()),
        "test_months": sorted(te.months()),
    }
    text = json.dumps(report, indent=1)
    if args.output:
        atomic_write(args.output, text.encode())
    print(json.dumps({"train": len(tr), "test": len(te), "rejected": len(rejected),
                      "train_months": report["train_months"], "test_months": report["test_months"]}))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_table, run_selftest

    results = run_selftest(seed=args.seed or 0)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_SELFTEST


# ---------------------------------------------------------------------------

def _positive_float(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heliopress", description="Learned codec for solar images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common_train(sp):
        sp.add_argument("--config", help="TOML file with [arch] and [train] tables")
        sp.add_argument("--lambda", dest="lam", type=_positive_float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--synthetic", type=int, metavar="N", help="train on N generated images")
        sp.add_argument("--data", help="directory of AIA_<wl>_<YYYYMMDD>_<HHMM>.pgm files")
        sp.add_argument("--gan", action="store_true", help="enable the adversarial term")

    sp = sub.add_parser("train", help="train one model")
    common_train(sp)
    sp.add_argument("--out", required=True, help="output .sdw weight file")
    sp.add_argument("--log", help="JSONL log path (default: <out>.jsonl)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compress", help="image -> SDC bitstream")
    sp.add_argument("model")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help="SDC bitstream -> image")
    sp.add_argument("model")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--reference", help="original image; prints PSNR")
    sp.add_argument("--bits", type=int, choices=(8, 16), default=16)
    sp.set_defaults(func=cmd_decompress)

    sp = sub.add_parser("evaluate", help="coded metrics of a model on test images")
    sp.add_argument("model")
    sp.add_argument("--data")
    sp.add_argument("--synthetic", type=int, metavar="N")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("rd-sweep", help="one CSV row per lambda")
    common_train(sp)
    sp.add_argument("--models-dir", required=True)
    sp.add_argument("--lambdas", type=_positive_float, nargs="+")
    sp.add_argument("--train-first", action="store_true")
    sp.add_argument("--report-monotone", action="store_true")
    sp.add_argument("--output", required=True, help="CSV path")
    sp.set_defaults(func=cmd_rd_sweep)

    sp = sub.add_parser("gen-synthetic", help="write synthetic PGM files with hourly timestamps")
    sp.add_argument("out_dir")
    sp.add_argument("--count", type=int, default=24)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bits", type=int, choices=(8, 16), default=16)
    sp.add_argument("--wavelength", type=int, default=171)
    sp.add_argument("--span-year", action="store_true", help="spread timestamps over one year")
    sp.set_defaults(func=cmd_gen_synthetic)

    sp = sub.add_parser("split-months", help="train/test partition by calendar month")
    sp.add_argument("source", help="directory of PGM files or manifest CSV (path,timestamp)")
    sp.add_argument("--output", help="write the full partition as JSON")
    sp.set_defaults(func=cmd_split_months)

    sp = sub.add_parser("selftest", help="gradient checks, coder round trips, attention oracles")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, which is our config code too
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
