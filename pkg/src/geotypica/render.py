"""Synthetic view generation: paired RGB images and semantic label masks.

One primary ray per pixel hits the scene; the first hit is shaded with a
Lambertian BRDF under a sun delta-light plus uniform ambient:

    L = (albedo / pi) * E_sun * (max(0, sun . n) * V_shadow + ambient)

V_shadow comes from a single shadow ray. The label mask records the class of
the same first hit, so labels are pixel-exact and independent of appearance.
Tone mapping is linear with a fixed exposure calibrated so a 0.5-albedo
sunlit horizontal surface at 60 deg elevation lands on pixel value 180.

Cameras follow the satellite model: perspective pinhole at altitude
gsd * focal_px above mean terrain, azimuth uniform in [0, 360), off-nadir
within [0, 10] deg. Sun states are drawn along the physical solar paths of
the target latitude (uniform day-of-year and hour angle, standard
declination), rejecting elevations at or below 5 deg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .materials import MaterialInstance, hue_shift, randomize_instances
from .scenegen import SceneBounds, SceneModel
from .tracer import BVH, render_kernel

__all__ = [
    "RenderError",
    "Camera",
    "SunState",
    "RenderOutput",
    "RenderConfig",
    "DEFAULT_FOCAL_PX",
    "DEFAULT_AMBIENT",
    "solar_declination",
    "solar_position",
    "sample_camera",
    "sample_sun",
    "compute_exposure",
    "prepare_scene",
    "render",
    "render_batch",
]

DEFAULT_FOCAL_PX = 5000.0
DEFAULT_AMBIENT = 0.25
DEFAULT_SUN_IRRADIANCE = (1.0, 0.97, 0.92)
SUN_MIN_ELEVATION_DEG = 5.0
SKY_RGB = np.array([158, 197, 233], dtype=np.uint8)
EARTH_TILT_DEG = 23.44
# exposure calibration surface: albedo 0.5, horizontal, sun at 60 deg
_CAL_ALBEDO = 0.5
_CAL_ELEVATION_DEG = 60.0
_CAL_PIXEL = 180.0


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class Camera:
    center: tuple[float, float, float]
    azimuth_deg: float            # compass direction the view tilts toward
    off_nadir_deg: float
    width: int
    height: int
    gsd: float
    focal_px: float

    def __post_init__(self):
        if not 0.0 <= self.off_nadir_deg <= 10.0:
            raise RenderError(f"off-nadir {self.off_nadir_deg} outside [0, 10] deg")
        if self.gsd <= 0:
            raise RenderError("gsd must be positive")

    def rotation(self) -> np.ndarray:
        """World-from-camera basis; columns are (right, up, forward)."""
        a = math.radians(self.azimuth_deg)
        o = math.radians(self.off_nadir_deg)
        # nadir frame: right=east(+x), up=north(+y), forward=down(-z)
        right = np.array([1.0, 0.0, 0.0])
        up = np.array([0.0, 1.0, 0.0])
        fwd = np.array([0.0, 0.0, -1.0])
        # tilt toward the aim azimuth, then spin the frame to that compass angle
        rx = np.array([[1, 0, 0],
                       [0, math.cos(o), -math.sin(o)],
                       [0, math.sin(o), math.cos(o)]])
        rz = np.array([[math.cos(-a), -math.sin(-a), 0],
                       [math.sin(-a), math.cos(-a), 0],
                       [0, 0, 1]])
        m = rz @ rx
        return np.stack([m @ right, m @ up, m @ fwd], axis=1)

    def ground_footprint(self, ground_z: float) -> np.ndarray:
        """Ground intersections of the four image corner rays."""
        rot = self.rotation()
        cx, cy, cz = self.center
        corners = []
        for px, py in ((-self.width / 2, self.height / 2),
                       (self.width / 2, self.height / 2),
                       (self.width / 2, -self.height / 2),
                       (-self.width / 2, -self.height / 2)):
            d = rot @ np.array([px, py, self.focal_px])
            if d[2] >= 0:
                raise RenderError("corner ray does not reach the ground")
            t = (ground_z - cz) / d[2]
            corners.append((cx + t * d[0], cy + t * d[1]))
        return np.asarray(corners)

    def as_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center],
            "azimuth_deg": float(self.azimuth_deg),
            "off_nadir_deg": float(self.off_nadir_deg),
            "width": self.width,
            "height": self.height,
            "gsd": self.gsd,
            "focal_px": self.focal_px,
        }


@dataclass(frozen=True)
class SunState:
    azimuth_deg: float
    elevation_deg: float
    irradiance: tuple[float, float, float] = DEFAULT_SUN_IRRADIANCE
    ambient: float = DEFAULT_AMBIENT

    def __post_init__(self):
        if not 0.0 < self.elevation_deg <= 90.0:
            raise RenderError(f"sun elevation {self.elevation_deg} must be in (0, 90]")
        if any(c <= 0 for c in self.irradiance):
            raise RenderError("sun irradiance channels must be positive")

    def direction(self) -> np.ndarray:
        """Unit vector pointing toward the sun."""
        el = math.radians(self.elevation_deg)
        az = math.radians(self.azimuth_deg)
        return np.array([
            math.cos(el) * math.sin(az),   # east
            math.cos(el) * math.cos(az),   # north
            math.sin(el),
        ])

    def as_dict(self) -> dict:
        return {
            "azimuth_deg": float(self.azimuth_deg),
            "elevation_deg": float(self.elevation_deg),
            "irradiance": [float(c) for c in self.irradiance],
            "ambient": float(self.ambient),
        }


@dataclass
class RenderOutput:
    rgb: np.ndarray               # (H, W, 3) uint8
    labels: np.ndarray            # (H, W) uint8; 0 ground 1 building 2 road 3 tree
    metadata: dict
    linear: np.ndarray | None = None  # (H, W, 3) float64 pre-quantization radiance


@dataclass
class RenderConfig:
    gsd: float = 0.3
    image_size: int = 512
    focal_px: float = DEFAULT_FOCAL_PX
    off_nadir_range: tuple[float, float] = (0.0, 10.0)
    hue_range: tuple[float, float] = (-180.0, 180.0)
    ambient: float = DEFAULT_AMBIENT
    latitude: float = 40.0
    irradiance: tuple[float, float, float] = DEFAULT_SUN_IRRADIANCE
    supersample: bool = False
    scene_name: str = "scene"


# ---------------------------------------------------------------------------
# solar geometry

def solar_declination(day_of_year: float) -> float:
    """Declination in degrees; day 80 is the spring equinox."""
    return EARTH_TILT_DEG * math.sin(2.0 * math.pi * (day_of_year - 80.0) / 365.0)


def solar_position(latitude_deg: float, declination_deg: float,
                   hour_angle_deg: float) -> tuple[float, float]:
    """(elevation, azimuth) in degrees for the given solar coordinates."""
    lat = math.radians(latitude_deg)
    dec = math.radians(declination_deg)
    ha = math.radians(hour_angle_deg)
    sin_el = math.sin(lat) * math.sin(dec) + math.cos(lat) * math.cos(dec) * math.cos(ha)
    sin_el = min(1.0, max(-1.0, sin_el))
    el = math.asin(sin_el)
    az = math.atan2(-math.cos(dec) * math.sin(ha),
                    math.cos(lat) * math.sin(dec) - math.sin(lat) * math.cos(dec) * math.cos(ha))
    return math.degrees(el), math.degrees(az) % 360.0


def sample_sun(rng: np.random.Generator, latitude: float,
               irradiance=DEFAULT_SUN_IRRADIANCE, ambient: float = DEFAULT_AMBIENT) -> SunState:
    """Sun drawn uniformly over the year's solar paths, elevation > 5 deg."""
    if abs(latitude) > 70.0:
        raise RenderError(f"latitude {latitude} outside supported band [-70, 70]")
    while True:
        day = float(rng.uniform(0.0, 365.0))
        hour_angle = float(rng.uniform(-180.0, 180.0))
        el, az = solar_position(latitude, solar_declination(day), hour_angle)
        if el > SUN_MIN_ELEVATION_DEG:
            return SunState(azimuth_deg=az, elevation_deg=el,
                            irradiance=tuple(irradiance), ambient=float(ambient))


def sample_camera(bounds: SceneBounds, rng: np.random.Generator, gsd: float,
                  image_size: int | tuple[int, int],
                  focal_px: float = DEFAULT_FOCAL_PX,
                  off_nadir_range: tuple[float, float] = (0.0, 10.0),
                  max_tries: int = 100) -> Camera:
    """Random view whose ground footprint lies fully inside the scene bounds."""
    if isinstance(image_size, int):
        width = height = image_size
    else:
        width, height = image_size
    lo, hi = off_nadir_range
    if not 0.0 <= lo <= hi <= 10.0:
        raise RenderError(f"off-nadir range {off_nadir_range} outside [0, 10]")
    altitude = gsd * focal_px
    for _ in range(max_tries):
        x = float(rng.uniform(bounds.min_x, bounds.max_x))
        y = float(rng.uniform(bounds.min_y, bounds.max_y))
        azimuth = float(rng.uniform(0.0, 360.0))
        off_nadir = float(rng.uniform(lo, hi))
        cam = Camera(center=(x, y, bounds.mean_z + altitude), azimuth_deg=azimuth,
                     off_nadir_deg=off_nadir, width=width, height=height,
                     gsd=gsd, focal_px=focal_px)
        fp = cam.ground_footprint(bounds.mean_z)
        if (fp[:, 0].min() >= bounds.min_x and fp[:, 0].max() <= bounds.max_x
                and fp[:, 1].min() >= bounds.min_y and fp[:, 1].max() <= bounds.max_y):
            return cam
    raise RenderError(
        f"no camera footprint of {width}x{height}px at gsd {gsd} fits inside the "
        f"{bounds.width:.0f}x{bounds.height:.0f} m scene; provide a larger input extent")


def compute_exposure(sun: SunState) -> float:
    """Fixed linear exposure from the declared calibration rule."""
    e_mean = sum(sun.irradiance) / 3.0
    radiance = (_CAL_ALBEDO / math.pi) * e_mean * (
        math.sin(math.radians(_CAL_ELEVATION_DEG)) + sun.ambient)
    return (_CAL_PIXEL / 255.0) / radiance


# ---------------------------------------------------------------------------
# scene preparation + rendering

@dataclass
class PreparedScene:
    """Geometry and acceleration state shared across views of one scene."""

    scene: SceneModel
    bvh: BVH
    tri_class: np.ndarray
    tri_material: np.ndarray
    texture_cache: dict = field(default_factory=dict)

    def instance_tables(self, instances: list[MaterialInstance]):
        """Per-instance albedo/texture tables with DR hue shifts applied."""
        k = len(instances)
        albedo = np.zeros((k, 3), np.float64)
        tex_id = np.full(k, -1, np.int32)
        scale = np.ones(k, np.float64)
        tex_blobs = []
        tex_meta = []
        for idx, inst in enumerate(instances):
            scale[idx] = inst.texture_scale
            if inst.texture is None:
                albedo[idx] = hue_shift(np.asarray(inst.albedo), inst.hue_shift_deg)
            else:
                img = self._load_texture(inst.texture)
                shifted = hue_shift(img, inst.hue_shift_deg)
                tex_id[idx] = len(tex_blobs)
                tex_meta.append(shifted.shape[:2])
                tex_blobs.append(shifted.reshape(-1))
        if tex_blobs:
            tex_data = np.concatenate(tex_blobs)
            tex_off = np.zeros(len(tex_blobs), np.int64)
            off = 0
            for i, blob in enumerate(tex_blobs):
                tex_off[i] = off
                off += blob.size
            tex_h = np.array([m[0] for m in tex_meta], np.int64)
            tex_w = np.array([m[1] for m in tex_meta], np.int64)
        else:
            tex_data = np.zeros(1, np.float64)
            tex_off = np.zeros(1, np.int64)
            tex_w = np.ones(1, np.int64)
            tex_h = np.ones(1, np.int64)
        return albedo, tex_id, scale, tex_data, tex_off, tex_w, tex_h

    def _load_texture(self, path: str) -> np.ndarray:
        if path not in self.texture_cache:
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            self.texture_cache[path] = arr
        return self.texture_cache[path]


def prepare_scene(scene: SceneModel) -> PreparedScene:
    if len(scene.triangles) == 0:
        raise RenderError("scene has no geometry")
    return PreparedScene(
        scene=scene,
        bvh=BVH(scene.vertices, scene.triangles),
        tri_class=np.ascontiguousarray(scene.tri_class, dtype=np.uint8),
        tri_material=np.ascontiguousarray(scene.tri_material, dtype=np.int32),
    )


def render(scene: SceneModel | PreparedScene, camera: Camera, sun: SunState,
           instances: list[MaterialInstance] | None = None,
           supersample: bool = False, keep_linear: bool = False,
           exposure: float | None = None, metadata: dict | None = None) -> RenderOutput:
    """Render one RGB/label pair.

    ``instances`` overrides the scene's material instances (used by the DR
    path); geometry and class tags always come from the scene itself.
    """
    prep = scene if isinstance(scene, PreparedScene) else prepare_scene(scene)
    instances = instances if instances is not None else prep.scene.materials
    if len(instances) != len(prep.scene.materials):
        raise RenderError("instance table length does not match the scene")
    albedo, tex_id, scale, tex_data, tex_off, tex_w, tex_h = prep.instance_tables(instances)

    if exposure is None:
        exposure = compute_exposure(sun)
    h, w = camera.height, camera.width
    out_rgb = np.zeros((h, w, 3), np.uint8)
    out_label = np.zeros((h, w), np.uint8)
    out_linear = np.zeros((h, w, 3), np.float64) if keep_linear else np.zeros((1, 1, 3))

    render_kernel(
        w, h,
        np.asarray(camera.center, np.float64), camera.rotation(), float(camera.focal_px),
        *prep.bvh.kernel_args(), prep.tri_class, prep.tri_material,
        albedo, tex_id, scale, tex_data, tex_off, tex_w, tex_h,
        sun.direction(), np.asarray(sun.irradiance, np.float64),
        float(sun.ambient), float(exposure), SKY_RGB,
        bool(supersample), bool(keep_linear),
        out_rgb, out_label, out_linear,
    )
    meta = {
        "camera": camera.as_dict(),
        "sun": sun.as_dict(),
        "exposure": float(exposure),
        "supersample": bool(supersample),
    }
    if metadata:
        meta.update(metadata)
    return RenderOutput(rgb=out_rgb, labels=out_label, metadata=meta,
                        linear=out_linear if keep_linear else None)


def render_batch(scene: SceneModel, n_views: int, master_seed: int,
                 config: RenderConfig, keep_linear: bool = False) -> list[RenderOutput]:
    """n independent views; each reproducible from (master seed, view index).

    Per view, child streams derive the camera, the sun, and one DR hue shift
    per material instance, so permuting or subsetting view indices never
    changes an individual output.
    """
    from .seeds import rng_for

    if n_views < 1:
        raise RenderError("n_views must be >= 1")
    prep = prepare_scene(scene)
    outputs = []
    for view in range(n_views):
        cam = sample_camera(scene.bounds, rng_for(master_seed, "view", view, "camera"),
                            config.gsd, config.image_size, config.focal_px,
                            config.off_nadir_range)
        sun = sample_sun(rng_for(master_seed, "view", view, "sun"), config.latitude,
                         config.irradiance, config.ambient)
        instances = randomize_instances(scene.materials,
                                        rng_for(master_seed, "view", view, "dr"),
                                        config.hue_range)
        out = render(prep, cam, sun, instances=instances,
                     supersample=config.supersample, keep_linear=keep_linear,
                     metadata={"scene": config.scene_name, "view_index": view,
                               "master_seed": int(master_seed)})
        outputs.append(out)
    return outputs
