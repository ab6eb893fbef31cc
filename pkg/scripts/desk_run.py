# scripts/desk_run.py
"""
Desk-scale experiment end to end: teachers -> distillation -> evaluation
(distilled vs random selection vs full data, three architectures) -> image export.

    python -m scripts.desk_run [configs/desk.ini]
"""
from __future__ import annotations

import sys
from pathlib import Path

import pandas as pd

from ddprune import cli
from ddprune import log as logmod
from ddprune.distill import SMOOTHING_WINDOW


def main(argv: list[str] | None = None) -> int:
    logmod.setup()
    argv = sys.argv[1:] if argv is None else argv
    config = Path(argv[0] if argv else "configs/desk.ini")
    cfg = cli.load_config(config)
    out = cfg.output_dir

    cli.cmd_train_teachers(config)
    distilled_path = cli.cmd_distill(config)
    cli.cmd_eval(config)
    cli.cmd_export_images(distilled_path, out / "distilled.ppm", out / cli.ZCA_FILE, autoscale=True)

    report = pd.read_csv(out / cli.DISTILL_REPORT_FILE)
    smooth = report["L"].rolling(SMOOTHING_WINDOW, min_periods=1).mean()
    if len(smooth) >= SMOOTHING_WINDOW:
        print(f"[desk_run] smoothed L at t={SMOOTHING_WINDOW}: {smooth.iloc[SMOOTHING_WINDOW - 1]:.4f} "
              f"-> t={len(smooth)}: {smooth.iloc[-1]:.4f}")
    print(f"[desk_run] floor triggered on {int(report['floor_triggered'].sum())} of {len(report)} steps")

    ev = pd.read_csv(out / cli.EVAL_CSV_FILE)
    gen = ev[(ev["method"] == "Distilled")].iloc[0]
    rand = ev[(ev["method"] == "Random") & (ev["arch"] == gen["arch"])]
    if not rand.empty:
        gap = 100 * (gen["mean"] - rand.iloc[0]["mean"])
        print(f"[desk_run] {gen['arch']}: distilled {100 * gen['mean']:.1f}% vs random {100 * rand.iloc[0]['mean']:.1f}% "
              f"(gap {gap:+.1f} points)")
    print((out / cli.EVAL_TABLE_FILE).read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
