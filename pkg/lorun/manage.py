"""Adapter management over checkpoints: swap task adapters, merge them into weights, render them."""
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import log
from .errors import CheckpointSchemaError
from .fileio import Checkpoint, as_matrix, export_heatmap
from .lora import merge
from .training import load_model


def _check_same_backbone(a: Checkpoint, b: Checkpoint) -> None:
    wa, wb = a.backbone(), b.backbone()
    if not wa or not wb:
        raise CheckpointSchemaError("both checkpoints need backbone.* tensors")
    bad = sorted(n for n in set(wa) | set(wb) if n not in wa or n not in wb or wa[n].shape != wb[n].shape)
    if bad:
        raise CheckpointSchemaError("backbones are not name/shape compatible", names=["backbone." + n for n in bad])
    differ = [n for n in wa if not np.array_equal(wa[n], wb[n])]
    if differ:
        log.warn("lora", f"backbone values differ in {len(differ)} tensors; keeping the target's backbone")


def swap_adapters(target: Checkpoint, donor: Checkpoint) -> Checkpoint:
    """target's backbone with everything else (adapters, stage scalars, operator, header) from donor."""
    if not donor.adapter_names():
        raise CheckpointSchemaError("donor checkpoint has no LoRA adapters")
    _check_same_backbone(target, donor)
    tensors = {n: a.copy() for n, a in target.tensors.items() if n.startswith("backbone.")}
    tensors.update({n: a.copy() for n, a in donor.tensors.items() if not n.startswith("backbone.")})
    log.info("lora", f"swapped in {len(donor.adapter_names())} adapter tensors "
                     f"(task {donor.header.get('operator', {}).get('kind', '?')})")
    return Checkpoint(dict(donor.header), tensors, list(donor.history))


def merge_adapters(ckpt: Checkpoint) -> Checkpoint:
    """Fold each stage's delta into its own copy of the backbone: a Block-K checkpoint without adapters."""
    model = load_model(ckpt)
    if model.mode != "lorun":
        raise CheckpointSchemaError(f"merge needs a LoRA checkpoint, got {model.mode}")
    tensors = {n: a.copy() for n, a in ckpt.tensors.items()
               if not n.startswith("backbone.") and not n.endswith((".lora_A", ".lora_B"))}
    for k in range(1, model.K + 1):
        stage = model.adapters[k - 1]
        for name, w in model.backbone.items():
            a = stage.get(name)
            tensors[f"stage{k}.backbone.{name}"] = merge(w.data, a) if a is not None else w.data.copy()
    header = dict(ckpt.header)
    header.update(strategy="block_k", merged_from=ckpt.phase)
    header.pop("ranks", None)
    log.info("lora", f"merged {model.K} adapter sets into per-stage weights")
    return Checkpoint(header, tensors, list(ckpt.history))


def inspect_adapters(ckpt: Checkpoint, out_dir, png: bool = False) -> List[Dict[str, object]]:
    """One heatmap per adapter delta, plus a summary row (rank, Frobenius norm, max |dW|)."""
    model = load_model(ckpt)
    if model.mode != "lorun":
        raise CheckpointSchemaError(f"inspect needs a LoRA checkpoint, got {model.mode}")
    out = Path(out_dir)
    rows = []
    for k, stage in enumerate(model.adapters, start=1):
        for target, a in sorted(stage.items()):
            d = a.delta().data
            paths = export_heatmap(as_matrix(d), out / f"stage{k}.{target}", png=png)
            rows.append({"stage": k, "target": target, "rank": a.rank,
                         "fro_norm": float(np.linalg.norm(d)), "max_abs": float(np.abs(d).max()),
                         "csv": str(paths["csv"])})
    log.info("lora", f"{len(rows)} heatmaps -> {out}")
    return rows
