"""Scene instancing: buildings, trees and roads assembled into one tagged mesh.

Buildings are prisms extruded from lot footprints (inset by the land-use
setback), with heights quantized to whole floors drawn from a discrete
uniform level range. Roof shapes are a small grammar: flat caps, or gable /
hip ridges raised 15% above the eaves. Trees are placed by Bridson
dart-throwing so no two crowns sit closer than the Poisson radius derived
from the land-use tree density. Roads are class-width rectangles per edge
plus intersection disks (or roundabout rings) at nodes of degree >= 3.

The assembled SceneModel is a single triangle soup where every triangle
carries a semantic class id and a material-instance index; it serializes to
a deterministic binary container (docs/formats.md) for golden tests.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon

from .geodata import (
    LandUse,
    ROAD_CLASS_SIDEWALK,
    RoadClass,
    StreetNetwork,
    TerrainGrid,
    sample_elevation,
)
from .layout import LandUseParams, Lot, polygon_area
from .materials import Material, MaterialInstance, MaterialLibrary, instantiate, pick_material

__all__ = [
    "SceneError",
    "CLASS_GROUND",
    "CLASS_BUILDING",
    "CLASS_ROAD",
    "CLASS_TREE",
    "CLASS_NAMES",
    "BuildingSpec",
    "TreeInstance",
    "RoadPiece",
    "SceneBounds",
    "SceneModel",
    "sample_building",
    "extrude_building",
    "place_trees",
    "classify_intersection",
    "build_roads",
    "assemble_city",
    "triangulate_polygon",
    "mesh_volume",
    "is_watertight",
    "scene_to_bytes",
    "scene_from_bytes",
]

CLASS_GROUND = 0
CLASS_BUILDING = 1
CLASS_ROAD = 2
CLASS_TREE = 3
CLASS_NAMES = {CLASS_GROUND: "ground", CLASS_BUILDING: "building",
               CLASS_ROAD: "road", CLASS_TREE: "tree"}

ROOF_RIDGE_RATIO = 0.15      # ridge rises 15% of building height above eaves
SIDEWALK_WIDTH = 1.5
ROAD_LIFT = 0.4              # roads float this far above terrain to avoid z-fights
ROAD_CHUNK = 30.0            # long segments are cut into strips for terrain following
ROUNDABOUT_INNER_RATIO = 0.4
TREE_SEGMENTS = 8
BRIDSON_TRIES = 30

# Roof-shape and extra-feature probabilities per land use. The paper-side
# feature list is {roof type, chimney, stairs, curtain wall}; only roof
# shapes alter geometry here, the rest are appearance/metadata tags.
FEATURE_TABLE = {
    LandUse.residential: {
        "roof": (("flat", 0.30), ("gable", 0.50), ("hip", 0.20)),
        "curtain_wall": 0.02, "chimney": 0.35, "stairs": 0.15,
    },
    LandUse.commercial: {
        "roof": (("flat", 0.85), ("gable", 0.10), ("hip", 0.05)),
        "curtain_wall": 0.60, "chimney": 0.05, "stairs": 0.30,
    },
    LandUse.green: {
        "roof": (("flat", 1.0),),
        "curtain_wall": 0.0, "chimney": 0.0, "stairs": 0.0,
    },
}

TREE_SPECIES = ("oak", "maple", "pine")


class SceneError(Exception):
    pass


@dataclass
class BuildingSpec:
    footprint: np.ndarray            # (n, 2) CCW
    height: float
    levels: int
    base_elevation: float
    material: Material
    features: frozenset[str]         # roof_* plus optional extras
    lot_id: str


@dataclass
class TreeInstance:
    position: tuple[float, float]
    crown_radius: float
    height: float
    species: str
    lot_id: str


@dataclass
class RoadPiece:
    kind: str                        # "segment" | "intersection"
    rings: list[tuple[np.ndarray, str]]  # (CCW ring, role); role: carriageway|sidewalk
    road_class: RoadClass | None
    has_sidewalk: bool
    intersection_type: str | None    # crossing | junction | roundabout
    ref_id: int                      # edge id or node id


@dataclass(frozen=True)
class SceneBounds:
    min_x: float
    min_y: float
    max_x: float
    max_y: float
    mean_z: float

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y


@dataclass
class SceneModel:
    vertices: np.ndarray             # (n, 3) float64
    triangles: np.ndarray            # (m, 3) int32
    tri_class: np.ndarray            # (m,) uint8
    tri_material: np.ndarray         # (m,) int32 into materials
    materials: list[MaterialInstance]
    bounds: SceneBounds
    buildings: list[BuildingSpec] = field(default_factory=list)
    trees: list[TreeInstance] = field(default_factory=list)
    roads: list[RoadPiece] = field(default_factory=list)
    terrain: TerrainGrid | None = None
    skipped_buildings: int = 0

    def class_histogram(self) -> dict[str, int]:
        counts = np.bincount(self.tri_class, minlength=4)
        return {CLASS_NAMES[c]: int(counts[c]) for c in range(4)}


# ---------------------------------------------------------------------------
# polygon triangulation (ear clipping)

def triangulate_polygon(ring: np.ndarray) -> np.ndarray:
    """Ear-clip a simple CCW polygon into (n-2, 3) vertex-index triples."""
    pts = np.asarray(ring, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise SceneError("cannot triangulate a polygon with < 3 vertices")
    if polygon_area(pts) < 0:
        raise SceneError("triangulate_polygon expects a CCW ring")
    idx = list(range(n))
    tris = []
    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 4 * n * n:
            raise SceneError("ear clipping failed (degenerate polygon?)")
        clipped = False
        m = len(idx)
        for k in range(m):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % m]
            a, b, c = pts[i0], pts[i1], pts[i2]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= 1e-12:
                continue  # reflex or collinear corner
            ear = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                if _point_in_tri(pts[j], a, b, c):
                    ear = False
                    break
            if ear:
                tris.append((i0, i1, i2))
                idx.pop(k)
                clipped = True
                break
        if not clipped:
            # fall back: drop the sharpest collinear corner
            best_k, best_abs = 0, None
            m = len(idx)
            for k in range(m):
                a, b, c = pts[idx[k - 1]], pts[idx[k]], pts[idx[(k + 1) % m]]
                cr = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
                if best_abs is None or cr < best_abs:
                    best_abs, best_k = cr, k
            idx.pop(best_k)
    tris.append(tuple(idx))
    return np.asarray(tris, dtype=np.int64)


def _point_in_tri(p, a, b, c) -> bool:
    d1 = (p[0] - a[0]) * (b[1] - a[1]) - (p[1] - a[1]) * (b[0] - a[0])
    d2 = (p[0] - b[0]) * (c[1] - b[1]) - (p[1] - b[1]) * (c[0] - b[0])
    d3 = (p[0] - c[0]) * (a[1] - c[1]) - (p[1] - c[1]) * (a[0] - c[0])
    has_neg = (d1 < 0) or (d2 < 0) or (d3 < 0)
    has_pos = (d1 > 0) or (d2 > 0) or (d3 > 0)
    return not (has_neg and has_pos)


# ---------------------------------------------------------------------------
# buildings

def sample_building(lot: Lot, params: LandUseParams, priors,
                    library: MaterialLibrary, rng: np.random.Generator) -> BuildingSpec | None:
    """Draw one building for a building-designated lot.

    Returns None when the setback-inset footprint vanishes (lot too thin).
    Level bounds come from the land-use params unless attribute records
    intersect the lot, in which case the records' level range wins.
    """
    if lot.designation != "building":
        raise SceneError(f"lot {lot.id} is not designated for a building")
    poly = Polygon(lot.boundary)
    inset = poly.buffer(-params.setback, join_style="mitre", mitre_limit=4.0)
    footprint = _largest_poly(inset)
    if footprint is None or footprint.area < 1.0:
        return None

    gmin, gmax = params.level_range
    prior_levels = []
    for rec in priors or ():
        if _record_touches(rec, poly):
            if rec.levels is not None:
                prior_levels.append(rec.levels)
            elif rec.height is not None:
                prior_levels.append(max(1, round(rec.height / params.level_height)))
    if prior_levels:
        gmin, gmax = min(prior_levels), max(prior_levels)

    levels = int(rng.integers(gmin, gmax + 1))
    height = params.level_height * levels

    table = FEATURE_TABLE[params.land_use]
    roofs, probs = zip(*table["roof"])
    roof = str(rng.choice(roofs, p=np.asarray(probs) / sum(probs)))
    features = {f"roof_{roof}"}
    for feat in ("curtain_wall", "chimney", "stairs"):
        if rng.random() < table[feat]:
            features.add(feat)

    material = pick_material(library, params.land_use, rng, class_tag="building")
    ring = np.asarray(footprint.exterior.coords[:-1], dtype=np.float64)
    if polygon_area(ring) < 0:
        ring = ring[::-1].copy()
    return BuildingSpec(
        footprint=ring, height=height, levels=levels, base_elevation=0.0,
        material=material, features=frozenset(features), lot_id=lot.id,
    )


def _largest_poly(geom) -> Polygon | None:
    if geom.is_empty:
        return None
    if isinstance(geom, Polygon):
        return geom
    polys = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]
    return max(polys, key=lambda g: g.area) if polys else None


def _record_touches(rec, poly: Polygon) -> bool:
    if poly.contains(Point(rec.position)):
        return True
    if rec.footprint is not None:
        return poly.intersects(Polygon(rec.footprint))
    return False


def extrude_building(spec: BuildingSpec):
    """Watertight prism (plus roof) mesh for one building.

    Returns (vertices (v,3), triangles (t,3)); outward normals, bottom cap
    included so the solid is closed. Gable and hip roofs need a convex quad
    footprint; anything else falls back to a flat roof.
    """
    ring = np.asarray(spec.footprint, dtype=np.float64)
    if len(ring) < 3:
        raise SceneError("building footprint needs >= 3 vertices")
    if not Polygon(ring).is_valid:
        raise SceneError("self-intersecting building footprint")
    if polygon_area(ring) <= 0:
        raise SceneError("building footprint must be CCW with positive area")

    z0 = spec.base_elevation
    z1 = z0 + spec.height
    n = len(ring)
    roof = "flat"
    for f in spec.features:
        if f.startswith("roof_"):
            roof = f[5:]
    if roof in ("gable", "hip") and not _is_convex_quad(ring):
        roof = "flat"

    verts = [(x, y, z0) for x, y in ring] + [(x, y, z1) for x, y in ring]
    tris: list[tuple[int, int, int]] = []
    # walls (CCW footprint => these wind outward)
    for i in range(n):
        j = (i + 1) % n
        bi, bj, ti, tj = i, j, n + i, n + j
        tris.append((bi, bj, tj))
        tris.append((bi, tj, ti))
    # bottom cap, wound downward
    cap = triangulate_polygon(ring)
    for a, b, c in cap:
        tris.append((int(c), int(b), int(a)))

    if roof == "flat":
        for a, b, c in cap:
            tris.append((n + int(a), n + int(b), n + int(c)))
    else:
        quad = _ends_last_quad(ring)
        # reindex so ends are edges (q1->q2) and (q3->q0)
        t = [n + q for q in quad]
        p = ring[quad]
        z_r = z1 + ROOF_RIDGE_RATIO * spec.height
        m12 = (p[1] + p[2]) / 2.0
        m30 = (p[3] + p[0]) / 2.0
        if roof == "gable":
            r1 = m12
            r2 = m30
        else:  # hip: pull ridge inward by half the mean end length
            end_len = (np.hypot(*(p[2] - p[1])) + np.hypot(*(p[0] - p[3]))) / 2.0
            axis = m30 - m12
            axis_len = float(np.hypot(*axis))
            inset = min(end_len / 2.0, 0.45 * axis_len)
            u = axis / axis_len
            r1 = m12 + u * inset
            r2 = m30 - u * inset
        i_r1 = len(verts)
        verts.append((r1[0], r1[1], z_r))
        i_r2 = len(verts)
        verts.append((r2[0], r2[1], z_r))
        # long planes over edges q0->q1 and q2->q3
        tris.append((t[0], t[1], i_r1))
        tris.append((t[0], i_r1, i_r2))
        tris.append((t[2], t[3], i_r2))
        tris.append((t[2], i_r2, i_r1))
        # end faces over q1->q2 and q3->q0 (gable walls / hip slopes)
        tris.append((t[1], t[2], i_r1))
        tris.append((t[3], t[0], i_r2))

    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


def _is_convex_quad(ring: np.ndarray) -> bool:
    if len(ring) != 4:
        return False
    for i in range(4):
        a, b, c = ring[i - 1], ring[i], ring[(i + 1) % 4]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if cross <= 1e-9:
            return False
    return True


def _ends_last_quad(ring: np.ndarray) -> list[int]:
    """Rotate quad indices so the two shorter opposite edges are
    (1->2) and (3->0)."""
    lens = [float(np.hypot(*(ring[(i + 1) % 4] - ring[i]))) for i in range(4)]
    if lens[0] + lens[2] < lens[1] + lens[3]:
        return [1, 2, 3, 0]
    return [0, 1, 2, 3]


def ridge_geometry(spec: BuildingSpec):
    """Ridge endpoints and height for gable/hip specs (None for flat)."""
    ring = np.asarray(spec.footprint, dtype=np.float64)
    roof = next((f[5:] for f in spec.features if f.startswith("roof_")), "flat")
    if roof not in ("gable", "hip") or not _is_convex_quad(ring):
        return None
    quad = _ends_last_quad(ring)
    p = ring[quad]
    m12 = (p[1] + p[2]) / 2.0
    m30 = (p[3] + p[0]) / 2.0
    z_r = spec.base_elevation + spec.height * (1.0 + ROOF_RIDGE_RATIO)
    if roof == "hip":
        end_len = (np.hypot(*(p[2] - p[1])) + np.hypot(*(p[0] - p[3]))) / 2.0
        axis = m30 - m12
        axis_len = float(np.hypot(*axis))
        inset = min(end_len / 2.0, 0.45 * axis_len)
        u = axis / axis_len
        return (m12 + u * inset, m30 - u * inset, z_r)
    return (m12, m30, z_r)


# ---------------------------------------------------------------------------
# trees (Bridson poisson-disk darts)

def poisson_radius(tree_density: float) -> float:
    """Disk radius giving roughly ``tree_density`` accepted darts per m^2."""
    if tree_density <= 0:
        return math.inf
    return math.sqrt(1.0 / (math.pi * tree_density))


def place_trees(lot: Lot, params: LandUseParams, rng: np.random.Generator) -> list[TreeInstance]:
    """Poisson-disk tree placement strictly inside a green lot.

    Bridson's grid-accelerated dart throwing: every accepted pair of centers
    is at least the Poisson radius apart (exact, no tolerance).
    """
    if lot.designation != "green":
        raise SceneError(f"lot {lot.id} is not designated green")
    r = poisson_radius(params.tree_density)
    if not math.isfinite(r):
        return []
    poly = Polygon(lot.boundary)
    if poly.area <= 0:
        return []
    minx, miny, maxx, maxy = poly.bounds
    width, height = maxx - minx, maxy - miny
    if width <= 0 or height <= 0:
        return []

    cell = r / math.sqrt(2.0)
    gw = max(1, math.ceil(width / cell))
    gh = max(1, math.ceil(height / cell))
    grid: list[int | None] = [None] * (gw * gh)
    points: list[tuple[float, float]] = []
    active: list[int] = []

    def cell_of(p):
        cx = min(int((p[0] - minx) / cell), gw - 1)
        cy = min(int((p[1] - miny) / cell), gh - 1)
        return cx, cy

    def fits(p):
        cx, cy = cell_of(p)
        for dx in range(-2, 3):
            for dy in range(-2, 3):
                x, y = cx + dx, cy + dy
                if 0 <= x < gw and 0 <= y < gh:
                    k = grid[x + y * gw]
                    if k is not None:
                        q = points[k]
                        if math.hypot(p[0] - q[0], p[1] - q[1]) < r:
                            return False
        return True

    def accept(p):
        cx, cy = cell_of(p)
        grid[cx + cy * gw] = len(points)
        active.append(len(points))
        points.append(p)

    # initial dart inside the polygon
    start = None
    for _ in range(64):
        p = (minx + rng.random() * width, miny + rng.random() * height)
        if poly.contains(Point(p)):
            start = p
            break
    if start is None:
        return []
    accept(start)

    while active:
        pick = int(rng.integers(len(active)))
        base = points[active[pick]]
        placed = False
        for _ in range(BRIDSON_TRIES):
            ang = rng.random() * 2.0 * math.pi
            dist = r * (1.0 + rng.random())
            p = (base[0] + dist * math.cos(ang), base[1] + dist * math.sin(ang))
            if not (minx <= p[0] < maxx and miny <= p[1] < maxy):
                continue
            if not fits(p):
                continue
            if not poly.contains(Point(p)):
                continue
            accept(p)
            placed = True
            break
        if not placed:
            active.pop(pick)

    trees = []
    for p in points:
        crown = r * rng.uniform(0.30, 0.48)
        height_m = rng.uniform(6.0, 14.0)
        species = TREE_SPECIES[int(rng.integers(len(TREE_SPECIES)))]
        trees.append(TreeInstance(position=p, crown_radius=float(crown),
                                  height=float(height_m), species=species, lot_id=lot.id))
    return trees


def tree_mesh(tree: TreeInstance, base_z: float):
    """Closed double-cone crown: apex at the top, flare at 40% height."""
    k = TREE_SEGMENTS
    cx, cy = tree.position
    flare_z = base_z + 0.4 * tree.height
    top_z = base_z + tree.height
    verts = [(cx, cy, base_z - 0.2), (cx, cy, top_z)]
    for i in range(k):
        a = 2.0 * math.pi * i / k
        verts.append((cx + tree.crown_radius * math.cos(a),
                      cy + tree.crown_radius * math.sin(a), flare_z))
    tris = []
    for i in range(k):
        a = 2 + i
        b = 2 + (i + 1) % k
        tris.append((0, b, a))   # lower cone, outward
        tris.append((1, a, b))   # upper cone, outward
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


# ---------------------------------------------------------------------------
# roads

def classify_intersection(network: StreetNetwork, node_id: int) -> str:
    """Intersection type from node degree and incident-edge geometry."""
    incident = [e for e in network.edges.values() if node_id in (e.a, e.b)]
    degree = len(incident)
    if degree < 3:
        raise SceneError(f"node {node_id} has degree {degree}; not an intersection")
    if degree == 3:
        return "junction"
    if degree >= 5:
        return "roundabout"
    # degree 4: right-angle grid crossings keep plain markings
    x0, y0 = network.node_pos(node_id)
    angles = []
    for e in incident:
        other = e.b if e.a == node_id else e.a
        x1, y1 = network.node_pos(other)
        angles.append(math.degrees(math.atan2(y1 - y0, x1 - x0)) % 360.0)
    angles.sort()
    gaps = [(angles[(i + 1) % 4] - angles[i]) % 360.0 for i in range(4)]
    if all(65.0 <= g <= 115.0 for g in gaps):
        return "crossing"
    major = {RoadClass.primary, RoadClass.trunk, RoadClass.motorway}
    if any(e.road_class in major for e in incident):
        return "roundabout"
    return "junction"


def _segment_rings(ax, ay, bx, by, width, with_sidewalk):
    """Carriageway rectangle plus optional sidewalk strips for one edge."""
    dx, dy = bx - ax, by - ay
    length = math.hypot(dx, dy)
    if length <= 0:
        return None
    ux, uy = dx / length, dy / length
    nx, ny = -uy, ux
    h = width / 2.0
    rings = []

    def rect(off_lo, off_hi):
        return np.array([
            (ax + nx * off_lo, ay + ny * off_lo),
            (bx + nx * off_lo, by + ny * off_lo),
            (bx + nx * off_hi, by + ny * off_hi),
            (ax + nx * off_hi, ay + ny * off_hi),
        ], dtype=np.float64)

    carr = rect(-h, h)
    if polygon_area(carr) < 0:
        carr = carr[::-1].copy()
    rings.append((carr, "carriageway"))
    if with_sidewalk:
        for lo, hi in ((h, h + SIDEWALK_WIDTH), (-h - SIDEWALK_WIDTH, -h)):
            sw = rect(lo, hi)
            if polygon_area(sw) < 0:
                sw = sw[::-1].copy()
            rings.append((sw, "sidewalk"))
    return rings


def _disk_ring(cx, cy, radius, segments=32):
    ang = np.linspace(0.0, 2.0 * math.pi, segments, endpoint=False)
    return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)


def build_roads(network: StreetNetwork) -> tuple[list[RoadPiece], int]:
    """Road pieces for every edge and every node of degree >= 3.

    Returns (pieces, skipped_zero_length). Segment rectangles end exactly at
    the node positions; intersection disks sized to the widest incident road
    cover the joints so the union has no gaps along shared boundaries.
    """
    pieces: list[RoadPiece] = []
    skipped = 0
    for eid in sorted(network.edges):
        e = network.edges[eid]
        ax, ay = network.node_pos(e.a)
        bx, by = network.node_pos(e.b)
        w = e.full_width()
        rings = _segment_rings(ax, ay, bx, by, w, ROAD_CLASS_SIDEWALK[e.road_class])
        if rings is None:
            skipped += 1
            continue
        pieces.append(RoadPiece(kind="segment", rings=rings, road_class=e.road_class,
                                has_sidewalk=ROAD_CLASS_SIDEWALK[e.road_class],
                                intersection_type=None, ref_id=eid))

    degree: dict[int, int] = {}
    widest: dict[int, float] = {}
    for e in network.edges.values():
        if network.edge_length(e.id) <= 0:
            continue
        for v in (e.a, e.b):
            degree[v] = degree.get(v, 0) + 1
            widest[v] = max(widest.get(v, 0.0), e.full_width())
    for nid in sorted(degree):
        if degree[nid] < 3:
            continue
        itype = classify_intersection(network, nid)
        cx, cy = network.node_pos(nid)
        w = widest[nid]
        if itype == "roundabout":
            outer = w
            rings = [(_disk_ring(cx, cy, outer), "carriageway"),
                     (_disk_ring(cx, cy, outer * ROUNDABOUT_INNER_RATIO), "island")]
        else:
            rings = [(_disk_ring(cx, cy, w / 2.0), "carriageway")]
        pieces.append(RoadPiece(kind="intersection", rings=rings, road_class=None,
                                has_sidewalk=False, intersection_type=itype, ref_id=nid))
    return pieces, skipped


def _chunked_rect_mesh(ring: np.ndarray, z_at):
    """Triangulate a road rectangle as strips so it can follow the terrain."""
    a, b, c, d = ring            # a->b long side, d->c its opposite
    length = float(np.hypot(*(b - a)))
    nseg = max(1, int(math.ceil(length / ROAD_CHUNK)))
    verts = []
    tris = []
    for i in range(nseg + 1):
        t = i / nseg
        p = a + (b - a) * t
        q = d + (c - d) * t
        verts.append((p[0], p[1], z_at(p)))
        verts.append((q[0], q[1], z_at(q)))
    for i in range(nseg):
        p0, q0, p1, q1 = 2 * i, 2 * i + 1, 2 * i + 2, 2 * i + 3
        tris.append((p0, p1, q1))
        tris.append((p0, q1, q0))
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


def _ring_mesh(outer: np.ndarray, inner: np.ndarray, z_at):
    """Annulus strip between two same-length concentric rings."""
    k = len(outer)
    verts = [(p[0], p[1], z_at(p)) for p in outer] + [(p[0], p[1], z_at(p)) for p in inner]
    tris = []
    for i in range(k):
        j = (i + 1) % k
        tris.append((i, j, k + j))
        tris.append((i, k + j, k + i))
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


def _polygon_mesh(ring: np.ndarray, z_at):
    verts = np.array([(p[0], p[1], z_at(p)) for p in ring], dtype=np.float64)
    tris = triangulate_polygon(ring)
    return verts, tris


# ---------------------------------------------------------------------------
# terrain + assembly

def terrain_mesh(terrain: TerrainGrid):
    nrows, ncols = terrain.shape
    ox, oy = terrain.origin
    cs = terrain.cell_size
    xs = ox + np.arange(ncols) * cs
    ys = oy + np.arange(nrows) * cs
    xx, yy = np.meshgrid(xs, ys)
    verts = np.stack([xx.ravel(), yy.ravel(), terrain.elevations.ravel()], axis=1)
    tris = []
    for i in range(nrows - 1):
        for j in range(ncols - 1):
            v00 = i * ncols + j
            v01 = v00 + 1
            v10 = v00 + ncols
            v11 = v10 + 1
            tris.append((v00, v01, v11))
            tris.append((v00, v11, v10))
    return verts, np.asarray(tris, dtype=np.int64)


def flat_ground_mesh(bounds: SceneBounds, margin: float = 30.0, cells: int = 8):
    xs = np.linspace(bounds.min_x - margin, bounds.max_x + margin, cells + 1)
    ys = np.linspace(bounds.min_y - margin, bounds.max_y + margin, cells + 1)
    xx, yy = np.meshgrid(xs, ys)
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    tris = []
    for i in range(cells):
        for j in range(cells):
            v00 = i * (cells + 1) + j
            v01 = v00 + 1
            v10 = v00 + cells + 1
            v11 = v10 + 1
            tris.append((v00, v01, v11))
            tris.append((v00, v11, v10))
    return verts, np.asarray(tris, dtype=np.int64)


class _MeshAccumulator:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.tris: list[np.ndarray] = []
        self.classes: list[np.ndarray] = []
        self.mats: list[np.ndarray] = []
        self._voffset = 0

    def add(self, verts, tris, class_id, material_index):
        tris = np.asarray(tris, dtype=np.int64)
        self.verts.append(np.asarray(verts, dtype=np.float64))
        self.tris.append(tris + self._voffset)
        self.classes.append(np.full(len(tris), class_id, dtype=np.uint8))
        self.mats.append(np.full(len(tris), material_index, dtype=np.int32))
        self._voffset += len(verts)

    def build(self):
        if not self.verts:
            return (np.zeros((0, 3)), np.zeros((0, 3), np.int32),
                    np.zeros(0, np.uint8), np.zeros(0, np.int32))
        return (np.concatenate(self.verts),
                np.concatenate(self.tris).astype(np.int32),
                np.concatenate(self.classes),
                np.concatenate(self.mats))


def assemble_city(buildings: list[BuildingSpec], trees: list[TreeInstance],
                  roads: list[RoadPiece], terrain: TerrainGrid | None,
                  library: MaterialLibrary, rng: np.random.Generator,
                  bounds: SceneBounds | None = None,
                  skipped_buildings: int = 0) -> SceneModel:
    """Combine components into one class-tagged triangle mesh.

    Building bases snap to the lowest sampled terrain elevation under their
    footprint; roads and trees sit on the terrain surface. Every triangle
    gets exactly one semantic class and one material instance.
    """
    if bounds is None:
        bounds = _derive_bounds(buildings, trees, roads, terrain)

    def ground_z(p) -> float:
        if terrain is None:
            return 0.0
        return sample_elevation(terrain, p)

    materials: list[MaterialInstance] = []

    def add_instance(material: Material) -> int:
        materials.append(instantiate(material))
        return len(materials) - 1

    acc = _MeshAccumulator()

    ground_mat = add_instance(pick_material(library, LandUse.green, rng, class_tag="ground"))
    if terrain is not None:
        gv, gt = terrain_mesh(terrain)
    else:
        gv, gt = flat_ground_mesh(bounds)
    acc.add(gv, gt, CLASS_GROUND, ground_mat)

    if roads:
        road_mat = add_instance(pick_material(library, LandUse.residential, rng,
                                              class_tag="road"))
        sidewalk_candidates = [m for m in library.tagged(LandUse.residential, "road")
                               if "sidewalk" in m.land_use_tags or "concrete" in m.id]
        if sidewalk_candidates:
            sidewalk_mat = add_instance(sidewalk_candidates[0])
        else:
            sidewalk_mat = road_mat
        for piece in roads:
            if piece.kind == "intersection" and piece.intersection_type == "roundabout":
                outer = piece.rings[0][0]
                inner = piece.rings[1][0]
                v, t = _ring_mesh(outer, inner, lambda p: ground_z(p) + ROAD_LIFT)
                acc.add(v, t, CLASS_ROAD, road_mat)
                continue
            for ring, role in piece.rings:
                mat = sidewalk_mat if role == "sidewalk" else road_mat
                if piece.kind == "segment" and len(ring) == 4:
                    v, t = _chunked_rect_mesh(ring, lambda p: ground_z(p) + ROAD_LIFT)
                else:
                    v, t = _polygon_mesh(ring, lambda p: ground_z(p) + ROAD_LIFT)
                acc.add(v, t, CLASS_ROAD, mat)

    placed_buildings = []
    for spec in buildings:
        base = min(ground_z(p) for p in spec.footprint)
        spec.base_elevation = float(base)
        v, t = extrude_building(spec)
        acc.add(v, t, CLASS_BUILDING, add_instance(spec.material))
        placed_buildings.append(spec)

    if trees:
        for tree in trees:
            mat = pick_material(library, LandUse.green, rng, class_tag="tree")
            v, t = tree_mesh(tree, ground_z(tree.position))
            acc.add(v, t, CLASS_TREE, add_instance(mat))

    vertices, triangles, tri_class, tri_material = acc.build()
    if len(triangles) and (tri_class > CLASS_TREE).any():
        raise SceneError("assembly produced an unclassified triangle")
    return SceneModel(
        vertices=vertices, triangles=triangles, tri_class=tri_class,
        tri_material=tri_material, materials=materials, bounds=bounds,
        buildings=placed_buildings, trees=list(trees), roads=list(roads),
        terrain=terrain, skipped_buildings=skipped_buildings,
    )


def _derive_bounds(buildings, trees, roads, terrain) -> SceneBounds:
    xs: list[float] = []
    ys: list[float] = []
    for spec in buildings:
        xs.extend(spec.footprint[:, 0])
        ys.extend(spec.footprint[:, 1])
    for tree in trees:
        xs.append(tree.position[0])
        ys.append(tree.position[1])
    for piece in roads:
        for ring, _ in piece.rings:
            xs.extend(ring[:, 0])
            ys.extend(ring[:, 1])
    mean_z = terrain.mean_elevation() if terrain is not None else 0.0
    if terrain is not None:
        nrows, ncols = terrain.shape
        xs += [terrain.origin[0], terrain.origin[0] + (ncols - 1) * terrain.cell_size]
        ys += [terrain.origin[1], terrain.origin[1] + (nrows - 1) * terrain.cell_size]
    if not xs:
        xs = [0.0, 1.0]
        ys = [0.0, 1.0]
    return SceneBounds(min(xs), min(ys), max(xs), max(ys), mean_z)


# ---------------------------------------------------------------------------
# mesh checks + serialization

def mesh_volume(verts: np.ndarray, tris: np.ndarray) -> float:
    """Signed volume via the divergence theorem (positive for outward normals)."""
    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def is_watertight(tris: np.ndarray) -> bool:
    """True when every undirected edge is shared by exactly two triangles."""
    edges: dict[tuple[int, int], int] = {}
    for a, b, c in np.asarray(tris):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            edges[key] = edges.get(key, 0) + 1
    return all(count == 2 for count in edges.values())


_MAGIC = b"GTSC\x01\n"


def scene_to_bytes(scene: SceneModel) -> bytes:
    """Deterministic binary container: JSON header + raw arrays.

    Field order and array dtypes are fixed (docs/formats.md), so equal
    scenes serialize to equal bytes.
    """
    header = {
        "counts": {
            "vertices": int(len(scene.vertices)),
            "triangles": int(len(scene.triangles)),
            "materials": len(scene.materials),
            "buildings": len(scene.buildings),
            "trees": len(scene.trees),
            "roads": len(scene.roads),
            "skipped_buildings": scene.skipped_buildings,
        },
        "bounds": [scene.bounds.min_x, scene.bounds.min_y, scene.bounds.max_x,
                   scene.bounds.max_y, scene.bounds.mean_z],
        "materials": [
            {
                "material_id": m.material_id,
                "albedo": list(m.albedo) if m.albedo is not None else None,
                "texture": m.texture,
                "texture_scale": m.texture_scale,
                "class_tag": m.class_tag,
                "hue_shift_deg": m.hue_shift_deg,
            }
            for m in scene.materials
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = [
        _MAGIC,
        struct.pack("<I", len(head)),
        head,
        np.ascontiguousarray(scene.vertices, dtype=np.float64).tobytes(),
        np.ascontiguousarray(scene.triangles, dtype=np.int32).tobytes(),
        np.ascontiguousarray(scene.tri_class, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(scene.tri_material, dtype=np.int32).tobytes(),
    ]
    return b"".join(blob)


def scene_from_bytes(data: bytes) -> SceneModel:
    if not data.startswith(_MAGIC):
        raise SceneError("not a scene container (bad magic)")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    nv = header["counts"]["vertices"]
    nt = header["counts"]["triangles"]
    verts = np.frombuffer(data, dtype=np.float64, count=nv * 3, offset=off).reshape(nv, 3).copy()
    off += nv * 3 * 8
    tris = np.frombuffer(data, dtype=np.int32, count=nt * 3, offset=off).reshape(nt, 3).copy()
    off += nt * 3 * 4
    tri_class = np.frombuffer(data, dtype=np.uint8, count=nt, offset=off).copy()
    off += nt
    tri_material = np.frombuffer(data, dtype=np.int32, count=nt, offset=off).copy()
    off += nt * 4
    if off != len(data):
        raise SceneError("trailing bytes after scene payload")
    mats = [
        MaterialInstance(
            material_id=m["material_id"],
            albedo=tuple(m["albedo"]) if m["albedo"] is not None else None,
            texture=m["texture"],
            texture_scale=m["texture_scale"],
            class_tag=m["class_tag"],
            hue_shift_deg=m["hue_shift_deg"],
        )
        for m in header["materials"]
    ]
    b = header["bounds"]
    return SceneModel(
        vertices=verts, triangles=tris, tri_class=tri_class, tri_material=tri_material,
        materials=mats, bounds=SceneBounds(*b),
        skipped_buildings=header["counts"].get("skipped_buildings", 0),
    )
