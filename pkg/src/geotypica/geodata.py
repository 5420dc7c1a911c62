"""Input geodata: street networks, building attribute records, terrain grids.

Everything downstream works in projected planar meters. Longitude/latitude
inputs are projected onto a local tangent plane around a reference point
(equirectangular), which keeps distance distortion below 0.5% within ~10 km
of the reference for |lat| < 70 deg -- plenty for city-scale scenes.

The street network file format is a strict JSON document described in
docs/formats.md; the terrain raster is an ASCII grid with an affine-origin
header. Both parsers reject trailing garbage and report the offending
feature on error.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeodataError",
    "ParseError",
    "EmptyNetworkError",
    "OutOfBoundsError",
    "RoadClass",
    "LandUse",
    "Node",
    "Edge",
    "StreetNetwork",
    "BuildingAttributeRecord",
    "TerrainGrid",
    "ROAD_CLASS_WIDTHS",
    "ROAD_CLASS_WEIGHTS",
    "ROAD_CLASS_SIDEWALK",
    "METERS_PER_DEGREE",
    "NODE_MERGE_TOLERANCE",
    "parse_street_network",
    "parse_building_records",
    "serialize_street_network",
    "project_to_local",
    "infer_land_use",
    "load_terrain_asc",
    "sample_elevation",
    "height_from_levels",
]


class GeodataError(Exception):
    """Base class for geodata input failures."""


class ParseError(GeodataError):
    """Malformed input document; message carries the feature/line context."""


class EmptyNetworkError(GeodataError):
    """Document parsed but yielded zero usable edges."""


class OutOfBoundsError(GeodataError):
    """Query point outside the supported domain."""


class RoadClass(str, enum.Enum):
    motorway = "motorway"
    trunk = "trunk"
    primary = "primary"
    secondary = "secondary"
    residential = "residential"
    service = "service"


class LandUse(str, enum.Enum):
    residential = "residential"
    commercial = "commercial"
    green = "green"


# Full carriageway widths in meters per road class. Used both for road-piece
# geometry and for insetting plots away from their bounding streets.
ROAD_CLASS_WIDTHS: dict[RoadClass, float] = {
    RoadClass.motorway: 24.0,
    RoadClass.trunk: 18.0,
    RoadClass.primary: 14.0,
    RoadClass.secondary: 10.0,
    RoadClass.residential: 8.0,
    RoadClass.service: 5.0,
}

# Importance weights behind the residential/commercial split. A plot is
# commercial when the length-weighted mean of its bounding edges' weights
# reaches COMMERCIAL_THRESHOLD.
ROAD_CLASS_WEIGHTS: dict[RoadClass, float] = {
    RoadClass.motorway: 4.0,
    RoadClass.trunk: 4.0,
    RoadClass.primary: 3.0,
    RoadClass.secondary: 2.0,
    RoadClass.residential: 1.0,
    RoadClass.service: 1.0,
}

COMMERCIAL_THRESHOLD = 2.0

ROAD_CLASS_SIDEWALK: dict[RoadClass, bool] = {
    RoadClass.motorway: False,
    RoadClass.trunk: False,
    RoadClass.primary: True,
    RoadClass.secondary: True,
    RoadClass.residential: True,
    RoadClass.service: False,
}

# Meridian arc length of one degree on the projection sphere.
EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0

# Node positions closer than this are merged during parsing (float noise in
# exported geodata, not real geometry).
NODE_MERGE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Edge:
    id: int
    a: int
    b: int
    road_class: RoadClass
    width: float | None = None

    def full_width(self) -> float:
        return self.width if self.width is not None else ROAD_CLASS_WIDTHS[self.road_class]


@dataclass
class StreetNetwork:
    """Planar street graph in projected meters."""

    nodes: dict[int, Node]
    edges: dict[int, Edge]
    unknown_class_count: int = 0
    merged_node_count: int = 0

    def node_pos(self, node_id: int) -> tuple[float, float]:
        n = self.nodes[node_id]
        return (n.x, n.y)

    def edge_length(self, edge_id: int) -> float:
        e = self.edges[edge_id]
        ax, ay = self.node_pos(e.a)
        bx, by = self.node_pos(e.b)
        return math.hypot(bx - ax, by - ay)

    def degree(self, node_id: int) -> int:
        return sum(1 for e in self.edges.values() if node_id in (e.a, e.b))

    def bounds(self) -> tuple[float, float, float, float]:
        xs = [n.x for n in self.nodes.values()]
        ys = [n.y for n in self.nodes.values()]
        return (min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class BuildingAttributeRecord:
    position: tuple[float, float]
    levels: int | None = None
    height: float | None = None
    footprint: tuple[tuple[float, float], ...] | None = None


@dataclass
class TerrainGrid:
    """Single-band elevation raster; ``origin`` is the position of knot [0,0]
    (south-west sample), rows run south to north."""

    origin: tuple[float, float]
    cell_size: float
    elevations: np.ndarray  # (nrows, ncols) float64, row 0 = southmost

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        if self.elevations.ndim != 2 or self.elevations.size == 0:
            raise GeodataError("terrain grid must be a non-empty 2D array")
        if not self.cell_size > 0:
            raise GeodataError(f"terrain cell_size must be > 0, got {self.cell_size}")
        if not np.isfinite(self.elevations).all():
            raise GeodataError("terrain grid contains non-finite elevations")

    @property
    def shape(self) -> tuple[int, int]:
        return self.elevations.shape

    def mean_elevation(self) -> float:
        return float(self.elevations.mean())


def project_to_local(lonlat_points, reference) -> list[tuple[float, float]]:
    """Project lon/lat degrees to local tangent-plane meters around ``reference``.

    Equirectangular: x = cos(lat_ref) * dlon * M, y = dlat * M, with M the
    meridian meters-per-degree. The reference point maps to (0, 0).
    """
    ref_lon, ref_lat = float(reference[0]), float(reference[1])
    _check_lonlat(ref_lon, ref_lat, "reference")
    cos_ref = math.cos(math.radians(ref_lat))
    out = []
    for lon, lat in lonlat_points:
        _check_lonlat(lon, lat, "point")
        x = (lon - ref_lon) * METERS_PER_DEGREE * cos_ref
        y = (lat - ref_lat) * METERS_PER_DEGREE
        out.append((x, y))
    return out


def _check_lonlat(lon: float, lat: float, what: str) -> None:
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise OutOfBoundsError(f"{what} has non-finite coordinates ({lon}, {lat})")
    if not -180.0 <= lon <= 180.0:
        raise OutOfBoundsError(f"{what} longitude {lon} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise OutOfBoundsError(f"{what} latitude {lat} outside [-90, 90]")


def _load_json_document(document: str) -> dict:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as ex:
        raise ParseError(f"invalid JSON: {ex}") from ex
    if not isinstance(doc, dict):
        raise ParseError("top level must be a JSON object")
    return doc


def _document_positions(doc: dict) -> dict[int, tuple[float, float]]:
    """Raw node id -> planar position, projecting lonlat documents."""
    crs = doc.get("crs")
    if crs not in ("local-meters", "lonlat"):
        raise ParseError(f"unsupported crs {crs!r} (expected 'local-meters' or 'lonlat')")
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, list):
        raise ParseError("missing 'nodes' array")
    positions: dict[int, tuple[float, float]] = {}
    lonlats = []
    ids = []
    seen: set[int] = set()
    for i, n in enumerate(raw_nodes):
        try:
            nid = int(n["id"])
            x = float(n["x"])
            y = float(n["y"])
        except (KeyError, TypeError, ValueError) as ex:
            raise ParseError(f"node #{i}: malformed record ({ex})") from ex
        if nid in seen:
            raise ParseError(f"node #{i}: duplicate node id {nid}")
        seen.add(nid)
        if crs == "local-meters":
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(f"node #{i} (id {nid}): non-finite position")
            positions[nid] = (x, y)
        else:
            ids.append(nid)
            lonlats.append((x, y))
    if crs == "lonlat":
        ref = doc.get("reference")
        if not (isinstance(ref, list) and len(ref) == 2):
            raise ParseError("crs 'lonlat' requires a 'reference' [lon, lat] entry")
        try:
            projected = project_to_local(lonlats, ref)
        except OutOfBoundsError as ex:
            raise ParseError(str(ex)) from ex
        positions = dict(zip(ids, projected))
    return positions


def parse_street_network(document: str) -> StreetNetwork:
    """Parse the documented JSON network grammar into a StreetNetwork.

    Nodes closer than NODE_MERGE_TOLERANCE are merged (lowest id wins).
    Unknown road classes fall back to ``residential`` and are counted in
    ``unknown_class_count``. Raises ParseError naming the offending feature,
    or EmptyNetworkError when no edges survive.
    """
    doc = _load_json_document(document)
    if doc.get("format") != "geotypica-network":
        raise ParseError(f"unexpected format tag {doc.get('format')!r}")
    positions = _document_positions(doc)

    # Merge duplicate positions. Quantized hashing finds candidates, exact
    # distance confirms; lowest node id becomes canonical.
    remap: dict[int, int] = {}
    buckets: dict[tuple[int, int], list[int]] = {}
    merged = 0
    q = NODE_MERGE_TOLERANCE
    for nid in sorted(positions):
        x, y = positions[nid]
        cx, cy = round(x / q), round(y / q)
        target = None
        for bx in (cx - 1, cx, cx + 1):
            for by in (cy - 1, cy, cy + 1):
                for other in buckets.get((bx, by), ()):
                    ox, oy = positions[other]
                    if math.hypot(x - ox, y - oy) <= q:
                        target = other
                        break
                if target is not None:
                    break
            if target is not None:
                break
        if target is None:
            buckets.setdefault((cx, cy), []).append(nid)
            remap[nid] = nid
        else:
            remap[nid] = target
            merged += 1

    nodes = {
        nid: Node(nid, positions[nid][0], positions[nid][1])
        for nid in sorted(positions)
        if remap[nid] == nid
    }

    raw_edges = doc.get("edges")
    if not isinstance(raw_edges, list):
        raise ParseError("missing 'edges' array")
    edges: dict[int, Edge] = {}
    unknown = 0
    for i, e in enumerate(raw_edges):
        try:
            eid = int(e["id"])
            ref = e["nodes"]
            cls_raw = e["road_class"]
        except (KeyError, TypeError, ValueError) as ex:
            raise ParseError(f"edge #{i}: malformed record ({ex})") from ex
        if eid in edges:
            raise ParseError(f"edge #{i}: duplicate edge id {eid}")
        if not (isinstance(ref, list) and len(ref) == 2):
            raise ParseError(f"edge id {eid}: 'nodes' must list exactly two node ids")
        a, b = int(ref[0]), int(ref[1])
        for nid in (a, b):
            if nid not in remap:
                raise ParseError(f"edge id {eid} references missing node {nid}")
        a, b = remap[a], remap[b]
        if a == b:
            raise ParseError(f"edge id {eid} joins a node to itself after merging")
        try:
            cls = RoadClass(cls_raw)
        except ValueError:
            cls = RoadClass.residential
            unknown += 1
        width = e.get("width")
        if width is not None:
            width = float(width)
            if not (math.isfinite(width) and width > 0):
                raise ParseError(f"edge id {eid}: bad width {width}")
        edges[eid] = Edge(eid, a, b, cls, width)

    if not edges:
        raise EmptyNetworkError("document contains no edges")
    return StreetNetwork(nodes=nodes, edges=edges, unknown_class_count=unknown,
                         merged_node_count=merged)


def parse_building_records(document: str) -> list[BuildingAttributeRecord]:
    """Parse the ``records`` array of a network or attributes document."""
    doc = _load_json_document(document)
    if doc.get("format") not in ("geotypica-network", "geotypica-attributes"):
        raise ParseError(f"unexpected format tag {doc.get('format')!r}")
    raw = doc.get("records", [])
    if not isinstance(raw, list):
        raise ParseError("'records' must be an array")
    crs = doc.get("crs", "local-meters")
    ref = doc.get("reference")
    records = []
    for i, r in enumerate(raw):
        try:
            pos = r["position"]
            px, py = float(pos[0]), float(pos[1])
        except (KeyError, TypeError, ValueError, IndexError) as ex:
            raise ParseError(f"record #{i}: malformed position ({ex})") from ex
        footprint = r.get("footprint")
        if crs == "lonlat":
            (px, py), = project_to_local([(px, py)], ref)
            if footprint is not None:
                footprint = project_to_local([(float(p[0]), float(p[1])) for p in footprint], ref)
        levels = r.get("levels")
        if levels is not None:
            levels = int(levels)
            if levels < 1:
                raise ParseError(f"record #{i}: levels must be >= 1, got {levels}")
        height = r.get("height")
        if height is not None:
            height = float(height)
            if not (math.isfinite(height) and height > 0):
                raise ParseError(f"record #{i}: bad height {height}")
        if footprint is not None:
            footprint = tuple((float(p[0]), float(p[1])) for p in footprint)
            if len(footprint) < 3:
                raise ParseError(f"record #{i}: footprint needs >= 3 vertices")
        records.append(BuildingAttributeRecord((px, py), levels, height, footprint))
    return records


def serialize_street_network(network: StreetNetwork) -> str:
    """Serialize back to the documented grammar (always local-meters).

    parse(serialize(parse(x))) is graph-isomorphic to parse(x).
    """
    doc = {
        "format": "geotypica-network",
        "version": 1,
        "crs": "local-meters",
        "nodes": [
            {"id": n.id, "x": n.x, "y": n.y}
            for n in sorted(network.nodes.values(), key=lambda n: n.id)
        ],
        "edges": [
            {
                "id": e.id,
                "nodes": [e.a, e.b],
                "road_class": e.road_class.value,
                **({"width": e.width} if e.width is not None else {}),
            }
            for e in sorted(network.edges.values(), key=lambda e: e.id)
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def infer_land_use(network: StreetNetwork, bounding_edge_ids,
                   weights: dict[RoadClass, float] | None = None,
                   threshold: float = COMMERCIAL_THRESHOLD) -> LandUse:
    """Classify a plot from the road classes bounding it.

    Length-weighted mean of the bounding edges' class weights; commercial
    when the mean reaches ``threshold``. Deterministic and independent of
    edge ordering. Plots with no classed bounding edges default residential.
    """
    weights = weights if weights is not None else ROAD_CLASS_WEIGHTS
    total_len = 0.0
    total_w = 0.0
    for eid in sorted(set(bounding_edge_ids)):
        e = network.edges.get(eid)
        if e is None:
            continue
        length = network.edge_length(eid)
        total_len += length
        total_w += weights[e.road_class] * length
    if total_len <= 0.0:
        return LandUse.residential
    return LandUse.commercial if total_w / total_len >= threshold else LandUse.residential


def load_terrain_asc(text: str) -> TerrainGrid:
    """Parse an ASCII elevation raster (Arc-style header, see docs/formats.md).

    Rows in the file run north to south; they are flipped so row 0 of the
    grid is the southmost. The knot origin is the center of the lower-left
    cell. NODATA cells and trailing garbage are rejected.
    """
    tokens = text.split()
    header: dict[str, float | None] = {}
    idx = 0
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"):
        if idx >= len(tokens) or tokens[idx].lower() != key.lower():
            if key == "NODATA_value":  # optional trailer of the header
                header[key] = None
                continue
            found = tokens[idx] if idx < len(tokens) else "<eof>"
            raise ParseError(f"terrain header: expected {key!r}, found {found!r}")
        if idx + 1 >= len(tokens):
            raise ParseError(f"terrain header truncated after {key!r}")
        try:
            header[key] = float(tokens[idx + 1])
        except ValueError as ex:
            raise ParseError(f"terrain header: bad value for {key!r}") from ex
        idx += 2
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    if ncols < 1 or nrows < 1:
        raise ParseError("terrain grid must have at least one cell")
    values = tokens[idx:]
    if len(values) != ncols * nrows:
        raise ParseError(
            f"terrain data has {len(values)} values, expected {ncols * nrows}"
            " (trailing garbage or truncation)")
    try:
        data = np.array([float(v) for v in values], dtype=np.float64)
    except ValueError as ex:
        raise ParseError(f"terrain data: non-numeric value ({ex})") from ex
    nodata = header.get("NODATA_value")
    if nodata is not None and (data == nodata).any():
        raise ParseError("terrain grid contains NODATA cells")
    grid = data.reshape(nrows, ncols)[::-1].copy()  # row 0 = south
    cs = header["cellsize"]
    origin = (header["xllcorner"] + cs / 2.0, header["yllcorner"] + cs / 2.0)
    return TerrainGrid(origin=origin, cell_size=cs, elevations=grid)


def sample_elevation(terrain: TerrainGrid, xy) -> float:
    """Bilinear elevation at planar ``xy``.

    Queries up to one cell beyond the knot extent are clamped to the border;
    farther out raises OutOfBoundsError. Continuous across cell boundaries.
    """
    x, y = float(xy[0]), float(xy[1])
    nrows, ncols = terrain.shape
    cs = terrain.cell_size
    u = (x - terrain.origin[0]) / cs
    v = (y - terrain.origin[1]) / cs
    if not (-1.0 <= u <= ncols) or not (-1.0 <= v <= nrows):
        raise OutOfBoundsError(
            f"elevation query ({x}, {y}) outside grid (u={u:.3f}, v={v:.3f})")
    u = min(max(u, 0.0), ncols - 1.0)
    v = min(max(v, 0.0), nrows - 1.0)
    j0 = min(int(u), ncols - 2) if ncols > 1 else 0
    i0 = min(int(v), nrows - 2) if nrows > 1 else 0
    fu = u - j0
    fv = v - i0
    e = terrain.elevations
    if ncols == 1:
        z0 = z1 = e[i0, 0]
    else:
        z0 = e[i0, j0] * (1 - fu) + e[i0, j0 + 1] * fu
        z1 = (e[min(i0 + 1, nrows - 1), j0] * (1 - fu)
              + e[min(i0 + 1, nrows - 1), min(j0 + 1, ncols - 1)] * fu)
    if nrows == 1:
        return float(z0)
    return float(z0 * (1 - fv) + z1 * fv)


LEVEL_HEIGHT_M = 3.0


def height_from_levels(levels: int) -> float:
    """Floor count to height in meters at 3 m per floor."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    return LEVEL_HEIGHT_M * levels
