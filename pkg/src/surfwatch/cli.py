"""Command-line entry point.

Exit codes: 0 success / no anomaly, 1 anomaly found (detect, watch --once),
2 operational error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import queue
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit
from .config import AppConfig, ConfigError, load_config, override
from .imagecore import ImageLoadError, load_image, save_image, save_mask
from .postprocess import detect_pair
from .preprocess import (
    DatasetError,
    DatasetManifest,
    IMAGE_SUFFIXES,
    build_dataset,
    prepare_region,
)
from .trainer import (
    CheckpointError,
    ModelCheckpoint,
    TrainingError,
    calibrate,
    calibration_images,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("surfwatch")

EXIT_OK, EXIT_ANOMALY, EXIT_ERROR = 0, 1, 2


class CommandError(RuntimeError):
    pass


def checkpoint_path(ckpt_dir: Path, region: int) -> Path:
    return ckpt_dir / f"region{region}.ckpt"


def _app_config(args) -> AppConfig:
    cfg = load_config(args.config)
    cfg = override(cfg, seed=args.seed)
    cfg = dataclasses.replace(cfg, train=override(cfg.train, seed=args.seed))
    return cfg


def _checkpoints(args, cfg: AppConfig) -> dict[int, ModelCheckpoint]:
    """Region index -> checkpoint from --checkpoint files or the checkpoint dir."""
    paths = [Path(p) for p in (args.checkpoint or [])]
    if not paths:
        ckpt_dir = Path(args.checkpoint_dir or cfg.paths.checkpoint_dir)
        paths = sorted(ckpt_dir.glob("region*.ckpt"))
    if not paths:
        raise CommandError("no checkpoints found")
    out = {}
    for p in paths:
        c = load_checkpoint(p)
        out[c.region_index] = c
    if args.region is not None:
        if args.region not in out:
            raise CommandError(f"no checkpoint for region {args.region}")
        out = {args.region: out[args.region]}
    return out


# ---------------------------------------------------------------- commands


def cmd_build_dataset(args, cfg: AppConfig) -> int:
    region = dataclasses.replace(cfg.region, region_index=args.region)
    source = Path(args.data_dir or cfg.paths.data_dir)
    if not source.is_dir():
        raise CommandError(f"{source}: not a directory")
    ds = cfg.dataset
    manifest = build_dataset(
        source, args.exclusions or cfg.paths.exclusions, region,
        n_aug_per_image=ds.n_aug_per_image, held_out=ds.held_out, seed=cfg.seed,
        max_ev=ds.max_ev, max_kelvin=ds.max_kelvin, held_out_policy=ds.held_out_policy,
    )
    out = Path(args.out or Path(cfg.paths.output_dir) / "manifest.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    print(f"train: {len(manifest.train_items)}, held-out: {len(manifest.held_out)}, "
          f"excluded: {len(manifest.excluded)}")
    print(f"manifest: {out} sha256={manifest.fingerprint()[:16]}")
    return EXIT_OK


def cmd_train(args, cfg: AppConfig) -> int:
    manifest = DatasetManifest.load(args.manifest)
    spec = manifest.region_spec
    if args.region is not None:
        regions = [args.region]
    elif spec.region_index is not None:
        regions = [spec.region_index]
    else:
        regions = list(range(spec.n_regions))
    ckpt_dir = Path(args.out or cfg.paths.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for region in regions:
        log_path = ckpt_dir / f"region{region}_erec.csv"
        with log_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "E_rec"])

            def progress(epoch, loss, e_rec):
                writer.writerow([epoch, repr(e_rec)])
                fh.flush()
                log.info("region %d epoch %d loss %.4f E_rec %.3f%%", region, epoch, loss, e_rec)

            try:
                ckpt = train(manifest, region, cfg.network, cfg.train, progress=progress)
            except TrainingError as exc:
                print(f"region {region}: training failed: {exc}", file=sys.stderr)
                failures += 1
                continue
        clean = calibration_images(manifest, region, cfg.dataset.calibration_images)
        calibrate(ckpt, clean, cfg.postprocess)
        save_checkpoint(ckpt, checkpoint_path(ckpt_dir, region))
        print(f"region {region}: E_rec {ckpt.final_e_rec:.3f}% "
              f"tau_ms {ckpt.calibration['tau_ms']:.4f} tau_ssim {ckpt.calibration['tau_ssim']:.4f} "
              f"-> {checkpoint_path(ckpt_dir, region)}")
    return EXIT_ERROR if failures else EXIT_OK


def _region_inputs(img: np.ndarray, spec, regions) -> dict[int, np.ndarray]:
    if img.shape[:2] == (spec.target_height, spec.target_width):
        if len(regions) != 1:
            raise CommandError("tile-sized input is ambiguous with several region models; pass --region")
        return {regions[0]: img}
    return {r: prepare_region(img, spec, r) for r in regions}


def _detect_one(path: Path, ckpts: dict, nets: dict, cfg: AppConfig, out_dir: Path, dump: bool) -> list:
    img = load_image(path)
    spec = dataclasses.replace(cfg.region, target_width=next(iter(ckpts.values())).network_config.input_width,
                               target_height=next(iter(ckpts.values())).network_config.input_height)
    reports = []
    for region, tile in _region_inputs(img, spec, sorted(ckpts)).items():
        reports.append(_detect_tile(tile, region, ckpts[region], nets, cfg, str(path)))
        stem = f"{path.stem}_r{region}"
        reports[-1].save(out_dir, stem, dump_intermediates=dump)
    return reports


def _thresholds(ckpt: ModelCheckpoint, cfg: AppConfig):
    pp = cfg.postprocess
    cal = ckpt.calibration or {}
    tau_ms = pp.tau_ms if pp.tau_ms is not None else cal.get("tau_ms")
    tau_ssim = pp.tau_ssim if pp.tau_ssim is not None else cal.get("tau_ssim")
    if tau_ms is None or tau_ssim is None:
        raise CommandError(f"region {ckpt.region_index}: no thresholds configured or calibrated")
    return dataclasses.replace(pp, tau_ms=tau_ms, tau_ssim=tau_ssim)


def _detect_tile(tile, region, ckpt, nets, cfg, source):
    from .model import reconstruct

    if region not in nets:
        nets[region] = ckpt.build_model()
    x_hat = reconstruct(nets[region], tile)
    return detect_pair(tile, x_hat, _thresholds(ckpt, cfg), source=source, region_index=region)


def cmd_detect(args, cfg: AppConfig) -> int:
    ckpts = _checkpoints(args, cfg)
    out_dir = Path(args.out or cfg.paths.output_dir)
    nets: dict = {}
    found, errors = False, 0
    for p in args.images:
        path = Path(p)
        try:
            reports = _detect_one(path, ckpts, nets, cfg, out_dir, args.dump_intermediates)
        except (ImageLoadError, ValueError, CommandError) as exc:
            print(f"{path}: error: {exc}", file=sys.stderr)
            errors += 1
            continue
        for rep in reports:
            flag = "ANOMALY" if rep.anomaly_present else "ok"
            print(f"{path} region {rep.region_index}: {flag} ({int(rep.mask.sum())} px)")
            found |= rep.anomaly_present
    if errors:
        return EXIT_ERROR
    return EXIT_ANOMALY if found else EXIT_OK


def _held_out_normals(manifest: DatasetManifest, region: int) -> list[np.ndarray]:
    spec = manifest.region_spec
    return [prepare_region(load_image(Path(manifest.source_dir) / f), spec, region) for f in manifest.held_out]


def cmd_inject(args, cfg: AppConfig) -> int:
    out_dir = Path(args.out or Path(cfg.paths.output_dir) / "evalset")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        region = args.region if args.region is not None else (manifest.region_spec.region_index or 0)
        normals = _held_out_normals(manifest, region)
        names = [Path(f).stem for f in manifest.held_out]
    else:
        normals = [load_image(p) for p in args.images]
        names = [Path(p).stem for p in args.images]
    if not normals:
        raise CommandError("no normal images to inject into")
    items = evalkit.evaluation_set(normals, seed=cfg.seed, names=names)
    index = []
    for it in items:
        img_path = out_dir / f"{it['name']}.png"
        save_image(it["image"], img_path)
        entry = {"name": it["name"], "category": it["category"], "image": img_path.name, "truth": None}
        if it["truth"] is not None:
            truth_path = out_dir / f"{it['name']}_truth.png"
            save_mask(it["truth"], truth_path)
            entry["truth"] = truth_path.name
        index.append(entry)
    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    n_anom = sum(e["truth"] is not None for e in index)
    print(f"evaluation set: {len(index)} images ({n_anom} anomalous, {len(index) - n_anom} clean) -> {out_dir}")
    return EXIT_OK


def run_evaluation(normals, names, ckpt: ModelCheckpoint, cfg: AppConfig, seed: int,
                   panel_dir: Path | None = None) -> evalkit.EvalResult:
    from .model import reconstruct

    net = ckpt.build_model()
    pp = _thresholds(ckpt, cfg)
    items = evalkit.evaluation_set(normals, seed=seed, names=names)
    reports = []
    for it in items:
        x_hat = reconstruct(net, it["image"])
        rep = detect_pair(it["image"], x_hat, pp, source=it["name"], region_index=ckpt.region_index)
        reports.append(rep)
        if panel_dir is not None:
            panel_dir.mkdir(parents=True, exist_ok=True)
            save_image(evalkit.make_panel(it["image"], x_hat, rep, it["truth"]), panel_dir / f"{it['name']}.png")
    return evalkit.evaluate_detection(reports, [it["truth"] for it in items],
                                      labels=[it["category"] for it in items],
                                      names=[it["name"] for it in items])


def cmd_evaluate(args, cfg: AppConfig) -> int:
    manifest = DatasetManifest.load(args.manifest)
    ckpts = _checkpoints(args, cfg)
    out_dir = Path(args.out or Path(cfg.paths.output_dir) / "evaluation")
    out_dir.mkdir(parents=True, exist_ok=True)
    for region, ckpt in sorted(ckpts.items()):
        normals = _held_out_normals(manifest, region)
        names = [Path(f).stem for f in manifest.held_out]
        result = run_evaluation(normals, names, ckpt, cfg, cfg.seed,
                                panel_dir=out_dir / f"panels_r{region}" if args.panels else None)
        result.save(out_dir / f"eval_r{region}.json")
        print(f"region {region}: {len(result.per_image)} images")
        print(result.table())
    return EXIT_OK


# ---------------------------------------------------------------- watch


class Watcher:
    """Poll a directory; route each new frame to every region model.

    One scanner (the caller of :meth:`scan`), a pool of workers running the
    region detectors, and a single writer appending to the alert log.
    """

    def __init__(self, watch_dir: Path, ckpts: dict, cfg: AppConfig, out_dir: Path, workers: int):
        self.watch_dir = watch_dir
        self.ckpts = ckpts
        self.cfg = cfg
        self.out_dir = out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        self.alert_log = out_dir / "alerts.jsonl"
        self.ledger_path = out_dir / "processed.jsonl"
        self.processed = self._read_ledger()
        self.nets = {r: c.build_model() for r, c in ckpts.items()}
        self.pool = ThreadPoolExecutor(max_workers=max(1, workers))
        self.records: queue.Queue = queue.Queue()
        self.lock = threading.Lock()

    def _read_ledger(self) -> set[str]:
        if not self.ledger_path.exists():
            return set()
        done = set()
        for line in self.ledger_path.read_text().splitlines():
            if line.strip():
                done.add(json.loads(line)["file"])
        return done

    def _write(self, path: Path, records: list[dict]) -> None:
        with self.lock:
            with self.alert_log.open("a") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            with self.ledger_path.open("a") as fh:
                fh.write(json.dumps({"file": path.name, "time": time.time()}) + "\n")
            self.processed.add(path.name)

    def pending(self) -> list[Path]:
        return sorted(p for p in self.watch_dir.iterdir()
                      if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and p.name not in self.processed)

    def process(self, path: Path) -> list[dict]:
        try:
            img = load_image(path)
            any_ckpt = next(iter(self.ckpts.values()))
            spec = dataclasses.replace(self.cfg.region, target_width=any_ckpt.network_config.input_width,
                                       target_height=any_ckpt.network_config.input_height)
            tiles = _region_inputs(img, spec, sorted(self.ckpts))
        except Exception as exc:  # never let one bad file stop the watcher
            log.error("%s: skipped: %s", path, exc)
            rec = [{"file": path.name, "error": str(exc)}]
            self._write(path, rec)
            return rec
        futures = {r: self.pool.submit(_detect_tile, tile, r, self.ckpts[r], self.nets, self.cfg, str(path))
                   for r, tile in tiles.items()}
        records = []
        for r in sorted(futures):
            try:
                rep = futures[r].result()
                rec = {"file": path.name, **rep.to_dict()}
                if rep.anomaly_present:
                    rep.save(self.out_dir / "masks", f"{path.stem}_r{r}")
            except Exception as exc:
                log.error("%s region %d: %s", path, r, exc)
                rec = {"file": path.name, "region_index": r, "error": str(exc)}
            records.append(rec)
        self._write(path, records)
        return records

    def scan(self) -> list[dict]:
        out = []
        for path in self.pending():
            out.extend(self.process(path))
        return out

    def close(self):
        self.pool.shutdown(wait=True)


def cmd_watch(args, cfg: AppConfig) -> int:
    ckpts = _checkpoints(args, cfg)
    watch_dir = Path(args.watch_dir or cfg.paths.data_dir)
    if not watch_dir.is_dir():
        raise CommandError(f"{watch_dir}: not a directory")
    watcher = Watcher(watch_dir, ckpts, cfg, Path(args.out or cfg.paths.output_dir), args.workers or cfg.workers)
    interval = args.interval if args.interval is not None else cfg.watch_interval
    try:
        if args.once:
            records = watcher.scan()
            return EXIT_ANOMALY if any(r.get("anomaly_present") for r in records) else EXIT_OK
        while True:
            for rec in watcher.scan():
                if rec.get("anomaly_present"):
                    log.warning("ANOMALY %s region %s", rec["file"], rec.get("region_index"))
            time.sleep(interval)
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        watcher.close()


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--region", type=int)
    common.add_argument("--out")
    common.add_argument("--dump-config", help="write the effective configuration to this path")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    ckpt.add_argument("--checkpoint-dir")

    p = argparse.ArgumentParser(prog="surfwatch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-dataset", parents=[common], help="build a training manifest")
    s.add_argument("--data-dir")
    s.add_argument("--exclusions")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", parents=[common], help="train region models")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common, ckpt], help="detect anomalies in images")
    s.add_argument("images", nargs="+")
    s.add_argument("--dump-intermediates", action="store_true")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("inject", parents=[common], help="build the synthetic evaluation set")
    s.add_argument("--manifest")
    s.add_argument("images", nargs="*")
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("evaluate", parents=[common, ckpt], help="run detection on the evaluation set")
    s.add_argument("--manifest", required=True)
    s.add_argument("--panels", action="store_true", help="write side-by-side panels")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("watch", parents=[common, ckpt], help="poll a directory for new frames")
    s.add_argument("--watch-dir")
    s.add_argument("--interval", type=float)
    s.add_argument("--workers", type=int)
    s.add_argument("--once", action="store_true", help="process pending files and exit")
    s.set_defaults(func=cmd_watch)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = _app_config(args)
        if args.dump_config:
            cfg.dump(args.dump_config)
        return args.func(args, cfg)
    except (ConfigError, CommandError, DatasetError, CheckpointError, TrainingError,
            ImageLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
