#!/usr/bin/env python3
"""Regenerate the bundled sample inputs under src/geotypica/data/.

Deterministic; commit the outputs. The sample network is a ~1 km^2 downtown
grid with jittered intersections, a primary cross axis, dead-end service
stubs and building attribute records, stored in lon/lat to exercise the
projection path. The smoke network is the minimal 3x3-node grid.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parent.parent / "src" / "geotypica" / "data"

METERS_PER_DEGREE = 6_371_000.0 * math.pi / 180.0
REF = (-83.0, 40.0)  # lon, lat


def to_lonlat(x: float, y: float) -> tuple[float, float]:
    lon = REF[0] + x / (METERS_PER_DEGREE * math.cos(math.radians(REF[1])))
    lat = REF[1] + y / METERS_PER_DEGREE
    return (round(lon, 9), round(lat, 9))


def connected(nodes: set[int], edges: list[tuple[int, int]]) -> bool:
    if not nodes:
        return True
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = set()
    stack = [next(iter(nodes))]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(adj[n])
    return seen == nodes


def make_sample_network() -> dict:
    rng = np.random.default_rng(20240521)
    n = 10
    spacing = 100.0
    pos = {}
    for r in range(n):
        for c in range(n):
            jitter = rng.uniform(-6.0, 6.0, 2)
            # keep the outer ring straight so the hull stays tidy
            if r in (0, n - 1) or c in (0, n - 1):
                jitter = np.zeros(2)
            pos[r * n + c] = (c * spacing + jitter[0], r * spacing + jitter[1])

    def road_class(a, b):
        ra, ca = divmod(a, n)
        rb, cb = divmod(b, n)
        if ca == cb == 4 or ra == rb == 5:
            return "primary"
        if ra == rb and ra in (0, n - 1):
            return "secondary"
        if ca == cb and ca in (0, n - 1):
            return "secondary"
        return "residential"

    edges = []
    for r in range(n):
        for c in range(n):
            v = r * n + c
            if c < n - 1:
                edges.append((v, v + 1))
            if r < n - 1:
                edges.append((v, v + n))

    # carve out some blocks for irregularity, keeping the graph connected
    nodes_set = set(pos)
    removable = [e for e in edges if road_class(*e) == "residential"]
    rng.shuffle(removable)
    removed = 0
    for e in removable:
        if removed >= 14:
            break
        trial = [x for x in edges if x != e]
        if connected(nodes_set, trial):
            edges = trial
            removed += 1

    # dead-end service stubs (dangling edges bound no plot)
    next_id = n * n
    stubs = []
    for anchor, (dx, dy) in ((12, (0.0, -45.0)), (47, (45.0, 0.0)), (85, (0.0, 40.0))):
        pos[next_id] = (pos[anchor][0] + dx, pos[anchor][1] + dy)
        stubs.append((anchor, next_id, "service"))
        next_id += 1

    node_records = []
    for nid in sorted(pos):
        lon, lat = to_lonlat(*pos[nid])
        node_records.append({"id": nid, "x": lon, "y": lat})
    edge_records = []
    for eid, (a, b) in enumerate(sorted(edges)):
        edge_records.append({"id": eid, "nodes": [a, b], "road_class": road_class(a, b)})
    for a, b, cls in stubs:
        edge_records.append({"id": len(edge_records), "nodes": [a, b], "road_class": cls})

    # building attribute records: tall near the primary axis, low outside
    records = []
    for _ in range(46):
        x = float(rng.uniform(60, 840))
        y = float(rng.uniform(60, 840))
        near_axis = abs(x - 400) < 160 or abs(y - 500) < 160
        if near_axis:
            levels = int(rng.integers(3, 9))
        else:
            levels = int(rng.integers(1, 3))
        lon, lat = to_lonlat(x, y)
        rec = {"position": [lon, lat], "levels": levels}
        if rng.random() < 0.2:
            rec = {"position": [lon, lat], "height": round(float(levels * 3.0 + rng.uniform(-0.5, 0.5)), 2)}
        records.append(rec)

    return {
        "format": "geotypica-network",
        "version": 1,
        "crs": "lonlat",
        "reference": list(REF),
        "nodes": node_records,
        "edges": edge_records,
        "records": records,
    }


def make_smoke_network() -> dict:
    spacing = 150.0
    nodes = [{"id": 3 * r + c, "x": c * spacing, "y": r * spacing}
             for r in range(3) for c in range(3)]
    edges = []
    eid = 0
    for r in range(3):
        for c in range(3):
            v = 3 * r + c
            if c < 2:
                edges.append({"id": eid, "nodes": [v, v + 1], "road_class": "residential"})
                eid += 1
            if r < 2:
                edges.append({"id": eid, "nodes": [v, v + 3], "road_class": "residential"})
                eid += 1
    return {
        "format": "geotypica-network",
        "version": 1,
        "crs": "local-meters",
        "nodes": nodes,
        "edges": edges,
    }


def make_terrain() -> str:
    ncols = nrows = 16
    cellsize = 90.0
    xll = yll = -150.0
    rows = []
    for i in range(nrows):  # file rows top (north) to bottom
        y = yll + cellsize * (nrows - 1 - i) + cellsize / 2
        row = []
        for j in range(ncols):
            x = xll + cellsize * j + cellsize / 2
            z = 210.0 + 6.0 * math.sin(x / 210.0) * math.cos(y / 260.0) + 3.0 * math.sin(y / 150.0)
            row.append(f"{z:.3f}")
        rows.append(" ".join(row))
    header = (f"ncols {ncols}\nnrows {nrows}\nxllcorner {xll}\nyllcorner {yll}\n"
              f"cellsize {cellsize}\nNODATA_value -9999\n")
    return header + "\n".join(rows) + "\n"


def make_materials() -> dict:
    every = ["residential", "commercial", "green"]
    mats = [
        {"id": "brick_red", "albedo": [0.45, 0.23, 0.18], "tags": ["residential"], "class": "building"},
        {"id": "vinyl_beige", "albedo": [0.62, 0.58, 0.50], "tags": ["residential"], "class": "building"},
        {"id": "roof_shingle_gray", "albedo": [0.35, 0.35, 0.38], "tags": ["residential"], "class": "building"},
        {"id": "concrete_panel", "albedo": [0.55, 0.55, 0.57], "tags": ["commercial"], "class": "building"},
        {"id": "glass_curtain", "albedo": [0.35, 0.45, 0.60], "tags": ["commercial"], "class": "building"},
        {"id": "roof_membrane_white", "albedo": [0.72, 0.72, 0.74], "tags": ["commercial"], "class": "building"},
        {"id": "asphalt", "albedo": [0.09, 0.09, 0.10], "tags": every, "class": "road"},
        {"id": "concrete_sidewalk", "albedo": [0.45, 0.45, 0.44], "tags": every + ["sidewalk"], "class": "road"},
        {"id": "grass", "texture": "grass.png", "texture_scale": 6.0, "tags": every, "class": "ground"},
        {"id": "soil", "albedo": [0.30, 0.24, 0.18], "tags": every, "class": "ground"},
        {"id": "foliage_dark", "albedo": [0.08, 0.20, 0.07], "tags": every, "class": "tree"},
        {"id": "foliage_olive", "albedo": [0.15, 0.25, 0.10], "tags": every, "class": "tree"},
    ]
    return {"format": "geotypica-materials", "version": 1, "materials": mats}


def make_grass_png(path: Path) -> None:
    from PIL import Image

    rng = np.random.default_rng(7)
    base = np.array([0.13, 0.30, 0.10])
    img = base[None, None, :] + rng.normal(0.0, 0.025, (32, 32, 3))
    img = np.clip(img, 0.0, 1.0)
    Image.fromarray((img * 255).astype(np.uint8), mode="RGB").save(path)


def land_use_params(kind: str) -> dict:
    if kind == "sample":
        return {
            "residential": {"min_lot_area": 250, "max_lot_area": 1500, "gar": 0.30,
                            "level_height": 3.0, "level_range": [1, 3],
                            "tree_density": 0.012, "setback": 3.0},
            "commercial": {"min_lot_area": 600, "max_lot_area": 4500, "gar": 0.15,
                           "level_height": 3.0, "level_range": [2, 8],
                           "tree_density": 0.006, "setback": 4.0},
            "green": {"min_lot_area": 150, "max_lot_area": 4000, "gar": 1.0,
                      "level_height": 3.0, "level_range": [1, 1],
                      "tree_density": 0.015, "setback": 2.0},
        }
    return {
        "residential": {"min_lot_area": 250, "max_lot_area": 1400, "gar": 0.30,
                        "level_height": 3.0, "level_range": [1, 2],
                        "tree_density": 0.012, "setback": 3.0},
        "commercial": {"min_lot_area": 600, "max_lot_area": 4500, "gar": 0.15,
                       "level_height": 3.0, "level_range": [2, 5],
                       "tree_density": 0.006, "setback": 4.0},
        "green": {"min_lot_area": 150, "max_lot_area": 4000, "gar": 1.0,
                  "level_height": 3.0, "level_range": [1, 1],
                  "tree_density": 0.015, "setback": 2.0},
    }


def main() -> int:
    DATA.mkdir(parents=True, exist_ok=True)
    (DATA / "sample_network.json").write_text(
        json.dumps(make_sample_network(), indent=1), encoding="utf-8")
    (DATA / "smoke_network.json").write_text(
        json.dumps(make_smoke_network(), indent=1), encoding="utf-8")
    (DATA / "sample_terrain.asc").write_text(make_terrain(), encoding="utf-8")
    (DATA / "sample_materials.json").write_text(
        json.dumps(make_materials(), indent=1), encoding="utf-8")
    make_grass_png(DATA / "grass.png")

    sample_config = {
        "name": "sample",
        "inputs": {"network": "sample_network.json", "terrain": "sample_terrain.asc",
                   "materials": "sample_materials.json"},
        "land_use_params": land_use_params("sample"),
        "render": {"gsd": 0.3, "image_size": 640, "n_views": 5, "focal_px": 5000,
                   "off_nadir_range": [0, 10], "hue_range": [-180, 180],
                   "ambient": 0.25, "latitude": 40.0, "supersample": False},
        "dataset": {"patch": 512, "overlap": 0.5, "train_fraction": 0.8},
        "seed": 1234,
    }
    (DATA / "sample_config.json").write_text(
        json.dumps(sample_config, indent=1), encoding="utf-8")

    smoke_config = {
        "name": "smoke",
        "inputs": {"network": "smoke_network.json", "materials": "sample_materials.json"},
        "land_use_params": land_use_params("smoke"),
        "render": {"gsd": 0.3, "image_size": 512, "n_views": 5, "focal_px": 5000,
                   "off_nadir_range": [0, 0.5], "hue_range": [-180, 180],
                   "ambient": 0.25, "latitude": 40.0, "supersample": False},
        "dataset": {"patch": 512, "overlap": 0.5, "train_fraction": 0.8},
        "seed": 7,
    }
    (DATA / "smoke_config.json").write_text(
        json.dumps(smoke_config, indent=1), encoding="utf-8")
    print(f"sample data written to {DATA}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
