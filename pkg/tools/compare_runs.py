#!/usr/bin/env python3
"""Side-by-side table of runs under one root: final smoothed loss per curve + eval means."""
import sys
from pathlib import Path

from lorun.curves import final_smoothed, read_loss_csv
from lorun.fileio import read_rows, write_rows

HDR = ["run", "curve", "steps", "final_ema_loss", "psnr", "ssim", "baseline_psnr", "baseline_ssim"]


def eval_means(run: Path) -> dict:
    # eval.csv (or <curve>_eval.csv) from `lorun eval`; the "mean" row
    out = {}
    for p in sorted(run.glob("*eval.csv")):
        means = [r for r in read_rows(p) if r.get("id") == "mean"]
        if means:
            key = p.stem[:-len("_eval")] if p.stem.endswith("_eval") else ""
            out[key] = means[0]
    return out


def collect(root: Path):
    rows = []
    for run in sorted(p for p in root.iterdir() if p.is_dir()):
        evals = eval_means(run)
        for lp in sorted(run.glob("*_loss.csv")):
            curve = lp.stem[:-len("_loss")]
            hist = read_loss_csv(lp)
            m = evals.get(curve) or evals.get("") or {}
            rows.append({
                "run": run.name,
                "curve": curve,
                "steps": len(hist),
                "final_ema_loss": f"{final_smoothed(hist):.6g}",
                **{k: m.get(k, "") for k in HDR[4:]},
            })
    return rows


def main(root):
    root = Path(root)
    rows = collect(root)
    if not rows:
        print("No *_loss.csv found under", root)
        sys.exit(1)

    # lowest smoothed loss first
    rows.sort(key=lambda r: float(r["final_ema_loss"]))

    widths = [max(len(str(r[h])) for r in rows + [{h: h}]) for h in HDR]
    line = " | ".join(h.ljust(w) for h, w in zip(HDR, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print(" | ".join(str(r[h]).ljust(w) for h, w in zip(HDR, widths)))

    csv_path = root / "comparison.csv"
    write_rows(csv_path, HDR, rows)
    print("\n[+] wrote:", csv_path)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: python3 tools/compare_runs.py <RUNS_ROOT>")
        sys.exit(2)
    main(sys.argv[1])
