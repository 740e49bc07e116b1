#!/usr/bin/env python3
"""Train the desk-scale model, then score anomaly detection over several seeds.

    python3 scripts/desk_experiment.py --work /tmp/desk --seeds 5
    python3 scripts/desk_experiment.py --work /tmp/desk --reuse   # skip training
"""
import argparse
import dataclasses
import json
import time
from pathlib import Path

import torch

from surfwatch.evalkit import CATEGORIES
from surfwatch.experiments import (
    DeskConfig,
    build_desk_dataset,
    evaluate_seed,
    held_out_normals,
    summarize,
    train_desk_model,
    validation_images,
)
from surfwatch.preprocess import DatasetManifest
from surfwatch.trainer import calibrate, load_checkpoint, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="desk_run")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--contrast", type=float)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--reuse", action="store_true", help="load work/model.ckpt instead of training")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = DeskConfig()
    if args.epochs:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    if args.contrast:
        cfg = dataclasses.replace(cfg, contrast=args.contrast)
    work = Path(args.work)
    ckpt_path = work / "model.ckpt"
    if args.reuse and ckpt_path.exists():
        manifest = DatasetManifest.load(work / "manifest.json")
        # thresholds depend on the postprocess config, so recalibrate
        ckpt = calibrate(load_checkpoint(ckpt_path), validation_images(manifest), cfg.postprocess)
    else:
        manifest = build_desk_dataset(work, cfg)
        t0 = time.time()

        def progress(epoch, loss, e_rec):
            if epoch % 10 == 0 or epoch == cfg.train.epochs:
                print(f"epoch {epoch:4d}  loss {loss:.4f}  E_rec {e_rec:.3f}%  ({time.time() - t0:.0f}s)", flush=True)

        ckpt = train_desk_model(manifest, cfg, progress)
        save_checkpoint(ckpt, ckpt_path)
    print(f"held-out E_rec {ckpt.final_e_rec:.3f}%  calibration {ckpt.calibration}")

    normals, names = held_out_normals(manifest)
    net = ckpt.build_model()
    results = []
    for seed in range(args.seeds):
        res, _ = evaluate_seed(ckpt, normals, names, seed, cfg, net=net)
        results.append(res)
        print(f"-- seed {seed}")
        print(res.table())
    summary = summarize(results)
    print(f"\n{'class':<14}{'all-det':>8}{'det':>7}{'iou':>7}{'ms':>7}{'ssim':>7}")
    for c in CATEGORIES:
        s = summary[c]
        print(f"{c:<14}{s['all_detected_frac']:>8.2f}{s['detected_rate']:>7.2f}{s['iou']:>7.3f}"
              f"{s['ms_rate']:>7.2f}{s['ssim_rate']:>7.2f}")
    print("false alarms per seed:", summary["false_alarms"])
    (work / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
