"""Material library and hue-space texture domain randomization.

Albedos are linear RGB in [0,1], either constants or small bitmap textures.
Domain randomization shifts only the hue channel: RGB -> HSV, H' = (H + dH)
mod 360, back to RGB. Saturation and value are untouched, so object
structure and shading survive while color identity is randomized. One shift
is drawn per material *instance*, never per pixel, which keeps objects
internally coherent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geodata import LandUse

__all__ = [
    "MaterialError",
    "Material",
    "MaterialLibrary",
    "MaterialInstance",
    "load_material_manifest",
    "pick_material",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "hue_shift",
    "instantiate",
    "randomize_instances",
]

CLASS_TAGS = ("ground", "building", "road", "tree")
FULL_HUE_RANGE = (-180.0, 180.0)


class MaterialError(Exception):
    pass


@dataclass(frozen=True)
class Material:
    id: str
    albedo: tuple[float, float, float] | None   # constant linear RGB
    texture: str | None                          # path to an RGB bitmap
    texture_scale: float                         # meters per texture tile
    land_use_tags: frozenset[str]
    class_tag: str

    def __post_init__(self):
        if (self.albedo is None) == (self.texture is None):
            raise MaterialError(f"material {self.id}: exactly one of albedo/texture required")
        if self.albedo is not None and not all(0.0 <= c <= 1.0 for c in self.albedo):
            raise MaterialError(f"material {self.id}: albedo channels must be in [0,1]")
        if not self.land_use_tags:
            raise MaterialError(f"material {self.id}: needs at least one land-use tag")
        if self.class_tag not in CLASS_TAGS:
            raise MaterialError(f"material {self.id}: unknown class tag {self.class_tag!r}")


@dataclass
class MaterialLibrary:
    materials: dict[str, Material]
    base_dir: Path | None = None

    def tagged(self, land_use: LandUse, class_tag: str | None = None) -> list[Material]:
        out = [
            m for m in self.materials.values()
            if land_use.value in m.land_use_tags
            and (class_tag is None or m.class_tag == class_tag)
        ]
        out.sort(key=lambda m: m.id)
        return out


@dataclass(frozen=True)
class MaterialInstance:
    """A material bound to one scene object, with its DR hue shift."""

    material_id: str
    albedo: tuple[float, float, float] | None
    texture: str | None
    texture_scale: float
    class_tag: str
    hue_shift_deg: float = 0.0


def load_material_manifest(text: str, base_dir: Path | None = None) -> MaterialLibrary:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as ex:
        raise MaterialError(f"invalid material manifest JSON: {ex}") from ex
    if doc.get("format") != "geotypica-materials":
        raise MaterialError(f"unexpected format tag {doc.get('format')!r}")
    mats: dict[str, Material] = {}
    for i, m in enumerate(doc.get("materials", [])):
        try:
            mid = str(m["id"])
            tags = frozenset(str(t) for t in m["tags"])
            cls = str(m["class"])
        except (KeyError, TypeError) as ex:
            raise MaterialError(f"material #{i}: malformed record ({ex})") from ex
        if mid in mats:
            raise MaterialError(f"material #{i}: duplicate id {mid!r}")
        albedo = m.get("albedo")
        if albedo is not None:
            albedo = tuple(float(c) for c in albedo)
            if len(albedo) != 3:
                raise MaterialError(f"material {mid}: albedo must have 3 channels")
        texture = m.get("texture")
        mats[mid] = Material(
            id=mid, albedo=albedo, texture=texture,
            texture_scale=float(m.get("texture_scale", 4.0)),
            land_use_tags=tags, class_tag=cls,
        )
    if not mats:
        raise MaterialError("material manifest lists no materials")
    return MaterialLibrary(materials=mats, base_dir=base_dir)


def pick_material(library: MaterialLibrary, land_use: LandUse,
                  rng: np.random.Generator, class_tag: str | None = None) -> Material:
    """Uniform draw among materials tagged with ``land_use`` (and class)."""
    candidates = library.tagged(land_use, class_tag)
    if not candidates:
        raise MaterialError(
            f"no material tagged for land use {land_use.value!r}"
            + (f" and class {class_tag!r}" if class_tag else ""))
    return candidates[int(rng.integers(len(candidates)))]


# ---------------------------------------------------------------------------
# HSV hue shift (hexcone model on linear RGB)

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV; input shape (..., 3), H in degrees [0, 360)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    h = np.zeros_like(maxc)
    mask = delta > 0
    rm = mask & (maxc == r)
    gm = mask & (maxc == g) & ~rm
    bm = mask & ~rm & ~gm
    h[rm] = np.mod((g[rm] - b[rm]) / delta[rm], 6.0)
    h[gm] = (b[gm] - r[gm]) / delta[gm] + 2.0
    h[bm] = (r[bm] - g[bm]) / delta[bm] + 4.0
    h *= 60.0
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 360.0) / 60.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def hue_shift(albedo, shift_deg: float) -> np.ndarray:
    """Shift the hue of a constant or bitmap albedo; S and V preserved.

    A shift that is a multiple of 360 returns the input unchanged, so a zero
    (or full-turn) shift is byte-identical downstream.
    """
    arr = np.asarray(albedo, dtype=np.float64)
    shift = math.fmod(float(shift_deg), 360.0)
    if shift == 0.0:
        return arr.copy()
    hsv = rgb_to_hsv(arr)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 360.0)
    out = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def instantiate(material: Material, hue_shift_deg: float = 0.0) -> MaterialInstance:
    return MaterialInstance(
        material_id=material.id,
        albedo=material.albedo,
        texture=material.texture,
        texture_scale=material.texture_scale,
        class_tag=material.class_tag,
        hue_shift_deg=float(hue_shift_deg),
    )


def randomize_instances(instances, rng: np.random.Generator,
                        hue_range: tuple[float, float] = FULL_HUE_RANGE):
    """New instance list with one hue shift drawn per instance.

    Only appearance changes; geometry and class tags are untouched by
    construction (instances carry no geometry).
    """
    lo, hi = float(hue_range[0]), float(hue_range[1])
    if not (-180.0 <= lo <= hi <= 180.0):
        raise MaterialError(f"hue range {hue_range} outside [-180, 180]")
    out = []
    for inst in instances:
        dh = float(rng.uniform(lo, hi)) if hi > lo else lo
        out.append(replace(inst, hue_shift_deg=dh))
    return out


def effective_albedo(instance: MaterialInstance) -> np.ndarray | None:
    """Constant albedo after the instance's hue shift (None for textures)."""
    if instance.albedo is None:
        return None
    return hue_shift(np.array(instance.albedo), instance.hue_shift_deg)
