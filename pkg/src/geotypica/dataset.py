"""Patch extraction, train/val splitting and manifests for rendered views.

Views are tiled into fixed-size patches on an overlapping stride grid
(default 512 px with 50% overlap -> 256 px stride), with a final row/column
anchored at the far edge so every source pixel lands in at least one patch.
Splitting assigns whole views to train or val -- overlapping patches from
one view share pixels, so patch-level splits would leak.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "Patch",
    "PatchSet",
    "tile_offsets",
    "tile",
    "split",
    "write_patchset",
    "write_manifest",
    "read_manifest",
]

PATCH_SIZE = 512
OVERLAP = 0.5
TRAIN_FRACTION = 0.8


class DatasetError(Exception):
    pass


@dataclass
class Patch:
    rgb: np.ndarray            # (P, P, 3) uint8
    label: np.ndarray          # (P, P) uint8
    view_id: str
    x: int                     # pixel offset of the patch's left edge
    y: int


@dataclass
class PatchSet:
    patches: list[Patch]
    split: dict[int, str]      # patch index -> "train" | "val"
    seed: int

    def counts(self) -> dict[str, int]:
        out = {"train": 0, "val": 0}
        for s in self.split.values():
            out[s] += 1
        return out


def tile_offsets(extent: int, patch: int, stride: int) -> list[int]:
    """Stride-grid offsets plus an edge-anchored final offset if needed."""
    if extent < patch:
        raise DatasetError(f"view extent {extent} smaller than patch {patch}")
    offsets = [i * stride for i in range((extent - patch) // stride + 1)]
    if offsets[-1] + patch < extent:
        offsets.append(extent - patch)
    return offsets


def tile(rgb: np.ndarray, label: np.ndarray, view_id: str,
         patch: int = PATCH_SIZE, overlap: float = OVERLAP) -> list[Patch]:
    """Cut one rendered view into aligned RGB/label patches."""
    if rgb.shape[:2] != label.shape[:2]:
        raise DatasetError("rgb and label dimensions differ")
    if not 0.0 <= overlap < 1.0:
        raise DatasetError(f"overlap {overlap} outside [0, 1)")
    h, w = label.shape[:2]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    xs = tile_offsets(w, patch, stride)
    ys = tile_offsets(h, patch, stride)
    patches = []
    for y in ys:
        for x in xs:
            patches.append(Patch(
                rgb=rgb[y:y + patch, x:x + patch].copy(),
                label=label[y:y + patch, x:x + patch].copy(),
                view_id=view_id, x=x, y=y,
            ))
    return patches


def split(patches: list[Patch], train_fraction: float = TRAIN_FRACTION,
          rng: np.random.Generator | None = None, seed: int = 0) -> PatchSet:
    """Assign whole views to train/val, approaching the target patch split.

    Views are shuffled deterministically, then added to the training side
    while it stays under the target; at least one view remains in val.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(patches) < 5:
        raise DatasetError(f"need at least 5 patches to split, got {len(patches)}")
    views: dict[str, list[int]] = {}
    for i, p in enumerate(patches):
        views.setdefault(p.view_id, []).append(i)
    if len(views) < 2:
        raise DatasetError("need at least 2 source views to split without leakage")
    if rng is None:
        from .seeds import rng_for

        rng = rng_for(seed, "dataset-split")
    order = sorted(views)
    rng.shuffle(order)
    target = train_fraction * len(patches)
    assignment: dict[int, str] = {}
    train_count = 0
    train_views = 0
    for k, view in enumerate(order):
        nv = len(views[view])
        can_take = (len(order) - k - 1) >= 1 or train_views == 0  # leave >= 1 view for val
        if (len(order) - k - 1) < 1:
            can_take = False
        take = False
        if can_take:
            if train_count + nv <= target:
                take = True
            elif abs(train_count + nv - target) < abs(train_count - target):
                take = True  # overshooting lands closer to the target
            if train_views == 0:
                take = True  # train side must not be empty
        side = "train" if take else "val"
        for i in views[view]:
            assignment[i] = side
        if take:
            train_count += nv
            train_views += 1
    return PatchSet(patches=patches, split=assignment, seed=seed)


def _patch_name(p: Patch) -> str:
    return f"{p.view_id}_{p.x:05d}_{p.y:05d}.png"


def write_patchset(patchset: PatchSet, out_dir: Path) -> list[dict]:
    """Persist patches as PNGs under out/{train,val}/{rgb,label}/."""
    from PIL import Image

    out_dir = Path(out_dir)
    records = []
    for side in ("train", "val"):
        for kind in ("rgb", "label"):
            (out_dir / side / kind).mkdir(parents=True, exist_ok=True)
    for i, patch in enumerate(patchset.patches):
        side = patchset.split[i]
        name = _patch_name(patch)
        rgb_path = out_dir / side / "rgb" / name
        label_path = out_dir / side / "label" / name
        Image.fromarray(patch.rgb, mode="RGB").save(rgb_path)
        Image.fromarray(patch.label, mode="L").save(label_path)
        records.append({
            "path_rgb": str(rgb_path.relative_to(out_dir)),
            "path_label": str(label_path.relative_to(out_dir)),
            "split": side,
            "view_id": patch.view_id,
            "x": patch.x,
            "y": patch.y,
            "seed": patchset.seed,
        })
    return records


def write_manifest(records: list[dict], out_dir: Path) -> Path:
    """One JSON line per patch, sorted for byte-stable output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.jsonl"
    ordered = sorted(records, key=lambda r: (r["view_id"], r["y"], r["x"]))
    lines = [json.dumps(r, sort_keys=True) for r in ordered]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Path) -> list[dict]:
    records = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as ex:
            raise DatasetError(f"manifest line {i + 1}: invalid JSON ({ex})") from ex
    return records


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
