"""Sweep blob noise and teacher weight decay; record student/teacher accuracies.

Writes calibration/blobs_calibration.csv. The defaults in
``ExperimentConfig`` (noise 1.6, teacher weight decay 5e-3) come from this
sweep: the baseline student lands in the low 80s and the teacher clears it.

    python scripts/calibrate_blobs.py [--sigmas 1.6,1.7,1.8] [--wds 2e-3,5e-3,1e-2]
"""
import argparse
import csv
import os

import numpy as np

from nkdlab.experiments import ExperimentConfig, baseline_jobs, distill_jobs, load_datasets, run_jobs, tfnkd_jobs
from nkdlab.losses import DEFAULT_STRATEGY
from nkdlab.training import CE, build_teacher_cache, mean_target_prob, train
from nkdlab.experiments import model_specs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sigmas", default="1.6,1.7,1.8")
    ap.add_argument("--wds", default="2e-3,5e-3,1e-2")
    ap.add_argument("--out", default="calibration/blobs_calibration.csv")
    args = ap.parse_args()

    rows = []
    for sigma in map(float, args.sigmas.split(",")):
        for wd in map(float, args.wds.split(",")):
            cfg = ExperimentConfig(blob_noise_sigma=sigma, teacher_weight_decay=wd)
            datasets = load_datasets(cfg)
            tspec, _ = model_specs(cfg, datasets[0])
            teacher = train(tspec, *datasets, CE(), cfg.train_config(cfg.teacher_seed, teacher=True))
            cache = build_teacher_cache(teacher.params, datasets[0])
            jobs = (baseline_jobs(cfg, datasets)
                    + distill_jobs(cfg, datasets, cache, modes=("soft", "distributed", "nkd", "perfect"))
                    + tfnkd_jobs(cfg, datasets, [DEFAULT_STRATEGY]))
            outcomes = run_jobs(jobs)
            row = {"noise_sigma": sigma, "teacher_weight_decay": wd,
                   "teacher_top1": teacher.final().top1,
                   "teacher_mean_target_prob": mean_target_prob(cache, datasets[0])}
            for label in dict.fromkeys(o.label for o in outcomes):
                acc = np.array([o.top1 for o in outcomes if o.label == label])
                row[f"{label}_mean"] = acc.mean()
                row[f"{label}_std"] = acc.std()
            print(row, flush=True)
            rows.append(row)

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
