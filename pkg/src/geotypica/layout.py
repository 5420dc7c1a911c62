"""City layout: enclosed plots from the street graph, lots from plots.

Plot extraction walks the planar subdivision induced by the street edges
with a half-edge (DCEL) traversal: outgoing edges are sorted by angle at
every node, faces are traced with the interior on the left, and the outer
face (negative signed area) is discarded. Crossing edges are planarized
first by inserting intersection nodes.

Lot subdivision recursively bisects each plot across the long axis of its
oriented bounding box, with the cut position jittered in [0.4, 0.6] of the
axis, until every piece is under the land-use maximum area. Undersized
pieces are merged into a neighbor. Green areas are then allocated smallest
first until the Green Area Ratio is met.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import shapely
from shapely.geometry import LineString, Point, Polygon
from shapely.ops import split as shapely_split
from shapely.ops import unary_union

from .geodata import LandUse, ROAD_CLASS_WIDTHS, StreetNetwork, infer_land_use

__all__ = [
    "LayoutError",
    "Plot",
    "Lot",
    "LandUseParams",
    "PlotExtraction",
    "extract_plots",
    "subdivide_plot",
    "allocate_green",
    "polygon_area",
    "dump_polygons_geojson",
]

# Faces and lots thinner than this are geometric noise, not parcels.
SLIVER_AREA_M2 = 1.0
SLIVER_MIN_ANGLE_DEG = 2.0
CUT_JITTER = (0.4, 0.6)
CUT_RETRIES = 8


class LayoutError(Exception):
    pass


@dataclass
class Plot:
    id: int
    boundary: np.ndarray          # (n, 2) CCW, no closing repeat
    land_use: LandUse
    bounding_edge_ids: tuple[int, ...]
    area: float


@dataclass
class Lot:
    id: str
    parent_plot_id: int
    boundary: np.ndarray          # (n, 2) CCW
    area: float
    designation: str | None = None  # "building" | "green"


@dataclass(frozen=True)
class LandUseParams:
    land_use: LandUse
    min_lot_area: float
    max_lot_area: float
    gar: float
    level_height: float
    level_range: tuple[int, int]
    tree_density: float           # trees per m^2 of green lot
    setback: float

    def __post_init__(self):
        if not 0 < self.min_lot_area <= self.max_lot_area:
            raise ValueError(f"need 0 < min_lot_area <= max_lot_area, got "
                             f"({self.min_lot_area}, {self.max_lot_area})")
        if not 0.0 <= self.gar <= 1.0:
            raise ValueError(f"GAR must be in [0, 1], got {self.gar}")
        if not self.level_height > 0:
            raise ValueError("level_height must be > 0")
        if not 1 <= self.level_range[0] <= self.level_range[1]:
            raise ValueError(f"bad level range {self.level_range}")
        if self.tree_density < 0:
            raise ValueError("tree_density must be >= 0")
        if self.setback < 0:
            raise ValueError("setback must be >= 0")


def polygon_area(points) -> float:
    """Signed shoelace area; positive for CCW rings."""
    pts = np.asarray(points, dtype=np.float64)
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _poly_to_ring(poly: Polygon) -> np.ndarray:
    ring = np.asarray(poly.exterior.coords[:-1], dtype=np.float64)
    if polygon_area(ring) < 0:
        ring = ring[::-1].copy()
    return ring


# ---------------------------------------------------------------------------
# planarization + face tracing

def _planarize(network: StreetNetwork):
    """Split crossing/touching edges at their intersection points.

    Returns (positions, segments, crossing_count) where segments are
    (node_a, node_b, original_edge_id) over an expanded node table.
    """
    positions: dict[int, tuple[float, float]] = {
        nid: (n.x, n.y) for nid, n in network.nodes.items()
    }
    next_id = max(positions) + 1 if positions else 0
    edge_list = sorted(network.edges.values(), key=lambda e: e.id)
    lines = [LineString([positions[e.a], positions[e.b]]) for e in edge_list]

    # parameter t of every split point per edge
    splits: list[dict[float, tuple[float, float]]] = [dict() for _ in edge_list]
    tree = shapely.STRtree(lines)
    pairs = tree.query(lines, predicate="intersects")
    crossings = 0
    for i, j in zip(*pairs):
        if i >= j:
            continue
        ea, eb = edge_list[i], edge_list[j]
        if {ea.a, ea.b} & {eb.a, eb.b}:
            continue  # shared endpoint, no crossing
        inter = lines[i].intersection(lines[j])
        if inter.is_empty:
            continue
        pts = []
        if inter.geom_type == "Point":
            pts = [inter]
        elif inter.geom_type == "MultiPoint":
            pts = list(inter.geoms)
        else:
            # collinear overlap: treat endpoints of the overlap as splits
            pts = [Point(c) for c in inter.coords] if hasattr(inter, "coords") else []
        for p in pts:
            crossings += 1
            for k, line in ((i, lines[i]), (j, lines[j])):
                t = line.project(p, normalized=True)
                if 1e-9 < t < 1 - 1e-9:
                    splits[k][round(t, 12)] = (p.x, p.y)

    # merge split points into the node table (dedup by exact quantized position)
    pos_index: dict[tuple[float, float], int] = {}
    for nid, (x, y) in positions.items():
        pos_index[(round(x, 9), round(y, 9))] = nid

    segments: list[tuple[int, int, int]] = []
    for k, e in enumerate(edge_list):
        if not splits[k]:
            segments.append((e.a, e.b, e.id))
            continue
        chain = [e.a]
        for t in sorted(splits[k]):
            x, y = splits[k][t]
            key = (round(x, 9), round(y, 9))
            nid = pos_index.get(key)
            if nid is None:
                nid = next_id
                next_id += 1
                pos_index[key] = nid
                positions[nid] = (x, y)
            chain.append(nid)
        chain.append(e.b)
        for a, b in zip(chain, chain[1:]):
            if a != b:
                segments.append((a, b, e.id))
    return positions, segments, crossings


def _trace_faces(positions, segments):
    """Trace all faces of the planar graph; returns list of
    (vertex_cycle, edge_id_set, signed_area)."""
    # outgoing half-edges per node, sorted by angle
    half_edges = []  # (a, b, orig_edge_id)
    for a, b, eid in segments:
        half_edges.append((a, b, eid))
        half_edges.append((b, a, eid))
    out_at: dict[int, list[int]] = {}
    for idx, (a, b, _) in enumerate(half_edges):
        out_at.setdefault(a, []).append(idx)
    angle = {}
    for idx, (a, b, _) in enumerate(half_edges):
        ax, ay = positions[a]
        bx, by = positions[b]
        angle[idx] = math.atan2(by - ay, bx - ax)
    for node, lst in out_at.items():
        lst.sort(key=lambda idx: angle[idx])

    # next half-edge: the one clockwise from the twin at the head node
    twin = {}
    for idx in range(0, len(half_edges), 2):
        twin[idx] = idx + 1
        twin[idx + 1] = idx
    nxt = {}
    for idx, (a, b, _) in enumerate(half_edges):
        lst = out_at[b]
        pos = lst.index(twin[idx])
        nxt[idx] = lst[pos - 1]  # previous in CCW order == next clockwise

    faces = []
    seen = [False] * len(half_edges)
    for start in range(len(half_edges)):
        if seen[start]:
            continue
        cycle = []
        eids = set()
        h = start
        while not seen[h]:
            seen[h] = True
            cycle.append(half_edges[h][0])
            eids.add(half_edges[h][2])
            h = nxt[h]
        pts = [positions[v] for v in cycle]
        faces.append((cycle, eids, polygon_area(pts)))
    return faces


def _prune_spurs(cycle: list[int]) -> list[int]:
    """Remove bridge-edge backtracks (v, w, v) so the boundary is simple."""
    out: list[int] = []
    for v in cycle:
        if len(out) >= 2 and out[-2] == v:
            out.pop()
        else:
            out.append(v)
    # the cycle is circular: also prune across the seam
    changed = True
    while changed and len(out) >= 3:
        changed = False
        if out[0] == out[-1]:
            out.pop()
            changed = True
        elif len(out) >= 3 and out[-2] == out[0]:
            out.pop()
            out.pop()
            changed = True
    return out


@dataclass
class PlotExtraction:
    plots: list[Plot]
    face_count: int          # bounded faces found, before road insets
    crossing_count: int      # intersection nodes inserted by planarization
    dropped_count: int       # faces lost to the road inset or sliver filter


def extract_plots(network: StreetNetwork, inset_roads: bool = True) -> PlotExtraction:
    """All bounded faces of the street graph, inset away from their roads.

    Dangling (bridge) edges bound no plot; the outer face is excluded. Each
    face is shrunk by subtracting the bounding edges' half-width buffers so
    later building footprints cannot overlap carriageways.
    """
    if not network.edges:
        raise LayoutError("cannot extract plots from an empty network")
    positions, segments, crossings = _planarize(network)
    faces = _trace_faces(positions, segments)

    node_degree: dict[int, int] = {}
    node_max_width: dict[int, float] = {}
    for a, b, eid in segments:
        w = network.edges[eid].full_width()
        for v in (a, b):
            node_degree[v] = node_degree.get(v, 0) + 1
            node_max_width[v] = max(node_max_width.get(v, 0.0), w)

    plots: list[Plot] = []
    dropped = 0
    face_count = 0
    next_plot_id = 0
    for cycle, eids, area in sorted(
            (f for f in _faces_bounded(faces)), key=lambda f: _face_key(f, positions)):
        face_count += 1
        verts = _prune_spurs(cycle)
        if len(verts) < 3:
            dropped += 1
            continue
        ring = [positions[v] for v in verts]
        poly = Polygon(ring)
        if not poly.is_valid or poly.area < SLIVER_AREA_M2:
            dropped += 1
            continue
        geom = poly
        if inset_roads:
            buffers = []
            for eid in sorted(eids):
                e = network.edges.get(eid)
                if e is None:
                    continue
                w = e.full_width()
                seg = LineString([network.node_pos(e.a), network.node_pos(e.b)])
                buffers.append(seg.buffer(w / 2.0, cap_style="square", quad_segs=4))
            for v in verts:
                if node_degree.get(v, 0) >= 3:
                    buffers.append(Point(positions[v]).buffer(node_max_width[v] / 2.0,
                                                              quad_segs=8))
            if buffers:
                geom = poly.difference(unary_union(buffers))
        geom = _largest_polygon(geom)
        if geom is None or geom.area < SLIVER_AREA_M2:
            dropped += 1
            continue
        land_use = infer_land_use(network, eids)
        plots.append(Plot(
            id=next_plot_id,
            boundary=_poly_to_ring(geom),
            land_use=land_use,
            bounding_edge_ids=tuple(sorted(eids)),
            area=float(geom.area),
        ))
        next_plot_id += 1
    return PlotExtraction(plots=plots, face_count=face_count,
                          crossing_count=crossings, dropped_count=dropped)


def _faces_bounded(faces):
    for cycle, eids, area in faces:
        if area > 1e-9:
            yield (cycle, eids, area)


def _face_key(face, positions):
    # deterministic ordering: lexicographic min vertex position, then area
    cycle, _, area = face
    return (min((positions[v][0], positions[v][1]) for v in cycle), area)


def _largest_polygon(geom) -> Polygon | None:
    if geom.is_empty:
        return None
    if isinstance(geom, Polygon):
        return geom
    polys = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]
    if not polys:
        return None
    return max(polys, key=lambda g: g.area)


# ---------------------------------------------------------------------------
# lot subdivision

def _obb(poly: Polygon):
    """Oriented bounding box as (center, long_axis_unit, long_len, short_axis_unit)."""
    rect = poly.minimum_rotated_rectangle
    if rect.geom_type != "Polygon":  # degenerate (line/point)
        return None
    corners = np.asarray(rect.exterior.coords[:4], dtype=np.float64)
    e0 = corners[1] - corners[0]
    e1 = corners[2] - corners[1]
    l0 = float(np.hypot(*e0))
    l1 = float(np.hypot(*e1))
    if l0 <= 0 or l1 <= 0:
        return None
    center = np.asarray(rect.centroid.coords[0])
    if l0 >= l1:
        return center, e0 / l0, l0, e1 / l1, l1
    return center, e1 / l1, l1, e0 / l0, l0


def _split_once(poly: Polygon, t: float) -> list[Polygon]:
    """Cut ``poly`` perpendicular to its OBB long axis at fraction ``t``."""
    obb = _obb(poly)
    if obb is None:
        return [poly]
    center, axis_u, long_len, cut_u, short_len = obb
    offset = (t - 0.5) * long_len
    cut_center = center + axis_u * offset
    half = short_len + long_len  # long enough to fully cross
    cut = LineString([cut_center - cut_u * half, cut_center + cut_u * half])
    try:
        pieces = shapely_split(poly, cut)
    except Exception:
        return [poly]
    polys = [g for g in pieces.geoms if isinstance(g, Polygon) and g.area > 1e-12]
    return polys if len(polys) >= 2 else [poly]


def _min_interior_angle(ring: np.ndarray) -> float:
    n = len(ring)
    best = 180.0
    for i in range(n):
        a = ring[i - 1] - ring[i]
        b = ring[(i + 1) % n] - ring[i]
        na = np.hypot(*a)
        nb = np.hypot(*b)
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        cosv = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
        best = min(best, math.degrees(math.acos(cosv)))
    return best


def _is_sliver(poly: Polygon) -> bool:
    if poly.area < SLIVER_AREA_M2:
        return True
    ring = _poly_to_ring(poly)
    return _min_interior_angle(ring) < SLIVER_MIN_ANGLE_DEG


def subdivide_plot(plot: Plot, params: LandUseParams, rng: np.random.Generator) -> list[Lot]:
    """Split a plot into lots respecting the land-use area band.

    Deterministic for a given (plot, params, rng state). Plots under the
    minimum lot area come back as a single (undersized) lot.
    """
    poly = Polygon(plot.boundary)
    if poly.area < params.min_lot_area:
        return [Lot(f"{plot.id}-0", plot.id, plot.boundary.copy(), float(poly.area))]

    leaves: list[Polygon] = []

    def bisect(p: Polygon):
        if p.area <= params.max_lot_area:
            leaves.append(p)
            return
        pieces = None
        for _ in range(CUT_RETRIES):
            t = rng.uniform(*CUT_JITTER)
            cand = _split_once(p, t)
            if len(cand) < 2:
                continue
            if all(c.area >= params.min_lot_area for c in cand) or p.area < 2 * params.min_lot_area:
                pieces = cand
                break
            if pieces is None:
                pieces = cand  # keep a fallback split
        if pieces is None or len(pieces) < 2:
            leaves.append(p)  # unsplittable (degenerate geometry)
            return
        for c in sorted(pieces, key=lambda g: (g.centroid.x, g.centroid.y)):
            bisect(c)

    bisect(poly)

    # merge undersized pieces and slivers into a neighbor
    for _ in range(3):
        changed = False
        leaves.sort(key=lambda g: (g.area, g.centroid.x, g.centroid.y))
        i = 0
        while i < len(leaves):
            p = leaves[i]
            if p.area >= params.min_lot_area and not _is_sliver(p):
                i += 1
                continue
            neighbors = []
            for j, q in enumerate(leaves):
                if j == i:
                    continue
                shared = p.intersection(q).length
                if shared > 1e-9:
                    neighbors.append((shared, j))
            if not neighbors:
                i += 1
                continue
            fitting = [(s, j) for s, j in neighbors
                       if leaves[j].area + p.area <= params.max_lot_area]
            pick = max(fitting or neighbors, key=lambda sj: sj[0])[1]
            merged = _largest_polygon(leaves[pick].union(p))
            if merged is None:
                i += 1
                continue
            leaves[pick] = merged
            leaves.pop(i)
            changed = True
        # merged lots may now exceed the maximum; re-split those
        oversized = [p for p in leaves if p.area > params.max_lot_area * (1 + 1e-9)]
        if oversized:
            leaves = [p for p in leaves if p.area <= params.max_lot_area * (1 + 1e-9)]
            for p in oversized:
                bisect(p)
            changed = True
        if not changed:
            break

    leaves.sort(key=lambda g: (g.centroid.x, g.centroid.y))
    return [
        Lot(f"{plot.id}-{k}", plot.id, _poly_to_ring(p), float(p.area))
        for k, p in enumerate(leaves)
    ]


def allocate_green(lots: list[Lot], gar: float) -> list[Lot]:
    """Designate the smallest lots green until the GAR share is reached.

    Ascending accumulation makes the selection minimal: dropping its largest
    member would fall below the requirement. Remaining lots become building
    lots. GAR equality counts as satisfied.
    """
    if not lots:
        raise LayoutError("allocate_green needs at least one lot")
    if any(l.designation is not None for l in lots):
        raise LayoutError("allocate_green expects undesignated lots")
    total = sum(l.area for l in lots)
    target = gar * total
    ordered = sorted(lots, key=lambda l: (l.area, l.id))
    green_ids = set()
    acc = 0.0
    for lot in ordered:
        if acc >= target - 1e-9 * max(total, 1.0):
            break
        green_ids.add(lot.id)
        acc += lot.area
    return [
        replace(l, designation="green" if l.id in green_ids else "building")
        for l in lots
    ]


def dump_polygons_geojson(named_rings) -> str:
    """Debug dump of (name, ring) pairs as a GeoJSON FeatureCollection."""
    import json

    features = []
    for name, ring in named_rings:
        coords = [[float(x), float(y)] for x, y in ring]
        coords.append(coords[0])
        features.append({
            "type": "Feature",
            "properties": {"name": str(name)},
            "geometry": {"type": "Polygon", "coordinates": [coords]},
        })
    return json.dumps({"type": "FeatureCollection", "features": features}, sort_keys=True)
