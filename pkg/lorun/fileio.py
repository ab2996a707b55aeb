"""On-disk formats.

TensorFile (little-endian):
    b"LRTN" | version u8 | dtype u8 (0=f32, 1=f64) | ndim u8 | ndim x u32 dims | payload

Checkpoint:
    b"LRCK" | version u8 | u32 header length | header JSON (utf-8, sorted keys)
    | u32 entry count | entries sorted by name: u16 name length | name | u64 body length | TensorFile body

Writes go to "<path>.tmp" and are renamed into place.
"""
import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import log
from .errors import ContractError, FormatError

TENSOR_MAGIC = b"LRTN"
CKPT_MAGIC = b"LRCK"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


# ---------- TensorFile ----------

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dt not in _DTYPE_CODES:
        raise ContractError(f"tensor files hold float32/float64, got {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack("<BBB", FORMAT_VERSION, _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, end: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; returns (array, offset past it)."""
    end = len(buf) if end is None else end
    if end - offset < 7:
        raise FormatError("truncated tensor header", offset)
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}", offset)
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    pos = offset + 7
    if end - pos < 4 * ndim:
        raise FormatError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if end - pos < nbytes:
        raise FormatError(f"payload needs {nbytes} bytes, {end - pos} left", pos)
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    atomic_write(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, pos = decode_tensor(buf)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return arr


# ---------- Checkpoint ----------

@dataclass
class Checkpoint:
    header: dict
    tensors: Dict[str, np.ndarray]
    history: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def phase(self) -> str:
        return str(self.header.get("phase", ""))

    def group(self, prefix: str, strip: bool = True) -> Dict[str, np.ndarray]:
        return {(n[len(prefix):] if strip else n): a for n, a in self.tensors.items() if n.startswith(prefix)}

    def backbone(self) -> Dict[str, np.ndarray]:
        return self.group("backbone.")

    def operator_state(self) -> Dict[str, np.ndarray]:
        return self.group("op.", strip=False)

    def stage_scalars(self, k: int) -> Dict[str, np.ndarray]:
        return {key: self.tensors[f"stage{k}.{key}_raw"] for key in ("rho", "lambda", "mu")
                if f"stage{k}.{key}_raw" in self.tensors}

    def adapter_names(self) -> List[str]:
        return sorted(n for n in self.tensors if n.endswith((".lora_A", ".lora_B")))


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = dict(ckpt.header)
    header.setdefault("schema_version", SCHEMA_VERSION)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<BI", FORMAT_VERSION, len(hb)), hb, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        nb = name.encode("utf-8")
        body = encode_tensor(ckpt.tensors[name])
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(body)), body]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 9:
        raise FormatError("truncated checkpoint header", 4)
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 9
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad checkpoint header: {e}", pos) from None
    pos += hlen
    if len(buf) - pos < 4:
        raise FormatError("missing entry count", pos)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise FormatError("truncated entry name length", pos)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8", errors="strict")
        if name in tensors:
            raise FormatError(f"duplicate entry {name!r}", pos)
        pos += nlen
        if len(buf) - pos < 8:
            raise FormatError("truncated entry length", pos)
        (blen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        arr, end = decode_tensor(buf, pos, pos + blen)
        if end != pos + blen:
            raise FormatError(f"entry {name!r} body length mismatch", pos)
        tensors[name] = arr
        pos = end
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return Checkpoint(header, tensors)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))
    log.info("io", f"checkpoint {path} ({len(ckpt.tensors)} tensors, phase={ckpt.phase})")


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------- PGM ----------

def _pgm_tokens(buf: bytes, count: int, pos: int) -> Tuple[List[int], int]:
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("expected an integer in PGM data", start)
        out.append(int(buf[start:pos]))
    return out, pos


def read_pgm(path) -> Tuple[np.ndarray, int]:
    """(pixels as integer array H x W, maxval) from a P5 or P2 file."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise FormatError(f"not a PGM file (magic {magic!r})", 0)
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"bad PGM geometry {w}x{h} maxval {maxval}", 2)
    if magic == b"P2":
        vals, _ = _pgm_tokens(buf, w * h, pos)
        return np.array(vals, dtype=np.int64).reshape(h, w), maxval
    pos += 1  # single whitespace after maxval
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dt.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"PGM raster needs {need} bytes, {len(buf) - pos} left", pos)
    raster = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos)
    return raster.astype(np.int64).reshape(h, w), maxval


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ContractError(f"PGM needs a 2-d array, got {pixels.shape}")
    h, w = pixels.shape
    body = np.clip(pixels, 0, 255).astype(np.uint8).tobytes()
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + body)


# ---------- CSV ----------

def write_rows(path, fieldnames: List[str], rows: List[dict], comment: Optional[str] = None) -> None:
    """CSV with a header row; an optional leading "# comment" line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_rows(path) -> List[Dict[str, str]]:
    """Rows of a CSV written by write_rows; "#" comment lines are skipped."""
    with Path(path).open("r", encoding="utf-8") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def write_loss_csv(path, history: List[Tuple[int, float]]) -> None:
    write_rows(path, ["step", "loss"], [{"step": s, "loss": f"{v:.9g}"} for s, v in history])


def write_matrix_csv(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in mat:
            w.writerow([f"{float(v):.9g}" for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with Path(path).open("r", encoding="utf-8") as f:
        rows = [[float(v) for v in row] for row in csv.reader(f) if row]
    return np.array(rows, dtype=np.float64)


# ---------- heatmaps ----------

def as_matrix(t: np.ndarray) -> np.ndarray:
    """2-d view: matrices as-is, conv kernels (O, I, k, k) as (O*k, I*k) blocks."""
    t = np.asarray(t)
    if t.size == 0:
        raise ContractError("cannot render an empty tensor")
    if t.ndim == 2:
        return t
    if t.ndim == 4:
        O, I, kh, kw = t.shape
        return t.transpose(0, 2, 1, 3).reshape(O * kh, I * kw)
    return t.reshape(t.shape[0] if t.ndim > 1 else 1, -1)


def _suffixed(stem: Path, ext: str) -> Path:
    # stems carry dotted weight names, so append rather than replace
    return stem.with_name(stem.name + ext)


def export_heatmap(mat: np.ndarray, stem, png: bool = False) -> Dict[str, Path]:
    """<stem>.csv with raw values, <stem>.pgm scaled min->0, max->255, optional <stem>.png."""
    m = as_matrix(mat).astype(np.float64)
    stem = Path(stem)
    out = {"csv": _suffixed(stem, ".csv"), "pgm": _suffixed(stem, ".pgm")}
    write_matrix_csv(out["csv"], m)
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        gray = np.rint((m - lo) / (hi - lo) * 255.0)
    else:
        gray = np.zeros_like(m)
    write_pgm(out["pgm"], gray)
    if png:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            plt.figure(figsize=(4, 4))
            plt.imshow(m, cmap="coolwarm")
            plt.colorbar()
            plt.title(stem.name)
            plt.tight_layout()
            plt.savefig(_suffixed(stem, ".png"))
            plt.close()
            out["png"] = _suffixed(stem, ".png")
        except Exception as e:
            log.warn("io", f"heatmap png skipped: {e}")
    return out
