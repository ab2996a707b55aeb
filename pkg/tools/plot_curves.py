#!/usr/bin/env python3
"""
Loss curves of one or more runs (raw + EMA-smoothed) into a single PNG.
- input: --runs <dir> [<dir> ...]  every *_loss.csv found in them
- output: --png curves.png, final smoothed loss per curve on stdout
"""
import argparse
from pathlib import Path
from typing import List, Tuple

import matplotlib
matplotlib.use("Agg")  # headless
import matplotlib.pyplot as plt

from lorun.curves import EMA_LAMBDA, ema_smooth, read_loss_csv


def collect(run_dirs: List[str]) -> List[Tuple[str, List[Tuple[int, float]]]]:
    curves = []
    for d in run_dirs:
        for p in sorted(Path(d).glob("*_loss.csv")):
            hist = read_loss_csv(p)
            if hist:
                curves.append((f"{Path(d).name}/{p.stem[:-len('_loss')]}", hist))
    return curves


def draw_png(curves, out_path: Path, lam: float, log_y: bool = False) -> None:
    plt.figure(figsize=(8, 5))
    for label, hist in curves:
        steps = [s for s, _ in hist]
        loss = [v for _, v in hist]
        line, = plt.plot(steps, ema_smooth(loss, lam), label=label)
        plt.plot(steps, loss, alpha=0.2, color=line.get_color())
    plt.xlabel("step")
    plt.ylabel("loss")
    if log_y:
        plt.yscale("log")
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_path)
    plt.close()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", nargs="+", required=True, help="run dirs holding *_loss.csv")
    ap.add_argument("--png", default="curves.png", help="output png path")
    ap.add_argument("--lam", type=float, default=EMA_LAMBDA, help="EMA weight of the newest loss")
    ap.add_argument("--log-y", action="store_true")
    args = ap.parse_args()

    curves = collect(args.runs)
    if not curves:
        print("[plot] ERR: no *_loss.csv under", " ".join(args.runs))
        raise SystemExit(1)
    draw_png(curves, Path(args.png), args.lam, args.log_y)
    print(f"[plot] saved PNG: {args.png}")

    print("\ncurve\tsteps\tfinal_ema")
    for label, hist in curves:
        print(f"{label}\t{len(hist)}\t{ema_smooth([v for _, v in hist], args.lam)[-1]:.6g}")


if __name__ == "__main__":
    main()
