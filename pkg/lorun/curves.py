# loss curves: step,loss CSVs and EMA smoothing (ema = (1 - lam) * ema + lam * x)
import csv
from pathlib import Path
from typing import List, Sequence, Tuple

from .errors import FormatError

EMA_LAMBDA = 0.2


def read_loss_csv(path) -> List[Tuple[int, float]]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["step", "loss"]:
            raise FormatError(f"{path}: expected header step,loss, got {reader.fieldnames}", 0)
        for r in reader:
            rows.append((int(r["step"]), float(r["loss"])))
    return rows


def ema_smooth(values: Sequence[float], lam: float = EMA_LAMBDA) -> List[float]:
    out = []
    ema = None
    for v in values:
        ema = v if ema is None else (1.0 - lam) * ema + lam * v
        out.append(ema)
    return out


def final_smoothed(history: Sequence[Tuple[int, float]], lam: float = EMA_LAMBDA) -> float:
    if not history:
        return float("nan")
    return ema_smooth([v for _, v in history], lam)[-1]
