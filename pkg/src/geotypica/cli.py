"""Config-driven pipeline orchestration.

    geotypica <command> --config <file> [--seed N] [--out DIR] [--jobs N]

Commands: generate (scene model), render (RGB/label views), tile (patches +
manifest), evaluate (metrics report), all (generate -> render -> tile).
Every artifact is reproducible from (config, master seed); the run report
records counts, wall times and a sha256 per artifact. Exit codes: 0 ok,
2 config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import geodata, layout, metrics, render, scenegen
from .materials import load_material_manifest
from .seeds import rng_for

log = logging.getLogger("geotypica")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


class ConfigError(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class PipelineConfig:
    name: str
    network_path: Path
    materials_path: Path
    terrain_path: Path | None
    attributes_path: Path | None
    land_use_params: dict[geodata.LandUse, layout.LandUseParams]
    render: render.RenderConfig
    n_views: int
    patch: int
    overlap: float
    train_fraction: float
    seed: int


def load_config(path: Path, seed_override: int | None = None) -> PipelineConfig:
    """Parse and validate a config file, reporting every violation at once."""
    errors: list[str] = []
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as ex:
        raise ConfigError([f"cannot read config {path}: {ex}"]) from ex
    base = Path(path).parent

    def get(section, key, default=None, required=False):
        if key not in section:
            if required:
                errors.append(f"missing required key {key!r}")
                return None
            return default
        return section[key]

    inputs = doc.get("inputs", {})
    network_rel = get(inputs, "network", required=True)
    materials_rel = get(inputs, "materials", required=True)
    terrain_rel = inputs.get("terrain")
    attributes_rel = inputs.get("attributes")

    def resolve(rel, what):
        if rel is None:
            return None
        p = (base / rel).resolve()
        if not p.exists():
            errors.append(f"{what} file not found: {p}")
        return p

    network_path = resolve(network_rel, "network")
    materials_path = resolve(materials_rel, "materials")
    terrain_path = resolve(terrain_rel, "terrain")
    attributes_path = resolve(attributes_rel, "attributes")

    lup: dict[geodata.LandUse, layout.LandUseParams] = {}
    raw_params = doc.get("land_use_params", {})
    for lu in geodata.LandUse:
        if lu.value not in raw_params:
            errors.append(f"land_use_params missing entry for {lu.value!r}")
            continue
        p = raw_params[lu.value]
        try:
            lup[lu] = layout.LandUseParams(
                land_use=lu,
                min_lot_area=float(p["min_lot_area"]),
                max_lot_area=float(p["max_lot_area"]),
                gar=float(p["gar"]),
                level_height=float(p.get("level_height", 3.0)),
                level_range=(int(p["level_range"][0]), int(p["level_range"][1])),
                tree_density=float(p["tree_density"]),
                setback=float(p["setback"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as ex:
            errors.append(f"land_use_params[{lu.value}]: {ex}")

    r = doc.get("render", {})
    gsd = float(r.get("gsd", 0.3))
    image_size = int(r.get("image_size", 512))
    n_views = int(r.get("n_views", 1))
    focal_px = float(r.get("focal_px", render.DEFAULT_FOCAL_PX))
    off_nadir = tuple(r.get("off_nadir_range", (0.0, 10.0)))
    hue_range = tuple(r.get("hue_range", (-180.0, 180.0)))
    ambient = float(r.get("ambient", render.DEFAULT_AMBIENT))
    latitude = float(r.get("latitude", 40.0))
    supersample = bool(r.get("supersample", False))
    if gsd <= 0:
        errors.append(f"render.gsd must be > 0, got {gsd}")
    if n_views < 1:
        errors.append(f"render.n_views must be >= 1, got {n_views}")
    if image_size < 32:
        errors.append(f"render.image_size must be >= 32, got {image_size}")
    if not (0.0 <= off_nadir[0] <= off_nadir[1] <= 10.0):
        errors.append(f"render.off_nadir_range {off_nadir} outside [0, 10]")
    if not (-180.0 <= hue_range[0] <= hue_range[1] <= 180.0):
        errors.append(f"render.hue_range {hue_range} outside [-180, 180]")
    if not (0.0 <= ambient <= 1.0):
        errors.append(f"render.ambient {ambient} outside [0, 1]")
    if abs(latitude) > 70.0:
        errors.append(f"render.latitude {latitude} outside [-70, 70]")

    d = doc.get("dataset", {})
    patch = int(d.get("patch", 512))
    overlap = float(d.get("overlap", 0.5))
    train_fraction = float(d.get("train_fraction", 0.8))
    if patch < 16:
        errors.append(f"dataset.patch must be >= 16, got {patch}")
    if not (0.0 <= overlap < 1.0):
        errors.append(f"dataset.overlap {overlap} outside [0, 1)")
    if not (0.0 < train_fraction < 1.0):
        errors.append(f"dataset.train_fraction {train_fraction} outside (0, 1)")
    if patch > image_size:
        errors.append(f"dataset.patch {patch} exceeds render.image_size {image_size}")

    seed = int(doc.get("seed", 0)) if seed_override is None else int(seed_override)
    if errors:
        raise ConfigError(errors)
    return PipelineConfig(
        name=str(doc.get("name", "scene")),
        network_path=network_path,
        materials_path=materials_path,
        terrain_path=terrain_path,
        attributes_path=attributes_path,
        land_use_params=lup,
        render=render.RenderConfig(
            gsd=gsd, image_size=image_size, focal_px=focal_px,
            off_nadir_range=(float(off_nadir[0]), float(off_nadir[1])),
            hue_range=(float(hue_range[0]), float(hue_range[1])),
            ambient=ambient, latitude=latitude, supersample=supersample,
            scene_name=str(doc.get("name", "scene")),
        ),
        n_views=n_views,
        patch=patch,
        overlap=overlap,
        train_fraction=train_fraction,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# stages

@dataclass
class RunReport:
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def record(self, stage: str, seconds: float, **counts):
        self.stages[stage] = {"seconds": round(seconds, 3), **counts}

    def add_artifact(self, path: Path, root: Path):
        self.artifacts[str(Path(path).relative_to(root))] = ds.file_sha256(path)

    def write(self, out_dir: Path):
        path = Path(out_dir) / "report.json"
        path.write_text(json.dumps({"stages": self.stages, "artifacts": self.artifacts},
                                   sort_keys=True, indent=1), encoding="utf-8")
        return path


def stage_generate(cfg: PipelineConfig, out_dir: Path, report: RunReport) -> scenegen.SceneModel:
    t0 = time.perf_counter()
    network = geodata.parse_street_network(cfg.network_path.read_text(encoding="utf-8"))
    records = geodata.parse_building_records(cfg.network_path.read_text(encoding="utf-8"))
    if cfg.attributes_path is not None:
        records += geodata.parse_building_records(cfg.attributes_path.read_text(encoding="utf-8"))
    terrain = None
    if cfg.terrain_path is not None:
        terrain = geodata.load_terrain_asc(cfg.terrain_path.read_text(encoding="utf-8"))
    library = load_material_manifest(cfg.materials_path.read_text(encoding="utf-8"),
                                     base_dir=cfg.materials_path.parent)
    # resolve texture paths relative to the manifest
    for m in list(library.materials.values()):
        if m.texture is not None and not Path(m.texture).is_absolute():
            library.materials[m.id] = type(m)(
                id=m.id, albedo=m.albedo,
                texture=str((cfg.materials_path.parent / m.texture).resolve()),
                texture_scale=m.texture_scale, land_use_tags=m.land_use_tags,
                class_tag=m.class_tag)

    extraction = layout.extract_plots(network)
    if extraction.crossing_count:
        log.info("planarized %d edge crossings", extraction.crossing_count)

    buildings: list[scenegen.BuildingSpec] = []
    trees: list[scenegen.TreeInstance] = []
    lots_total = 0
    skipped = 0
    for plot in extraction.plots:
        params = cfg.land_use_params[plot.land_use]
        lots = layout.subdivide_plot(plot, params, rng_for(cfg.seed, "plot", plot.id))
        lots = layout.allocate_green(lots, params.gar)
        lots_total += len(lots)
        for k, lot in enumerate(lots):
            if lot.designation == "building":
                spec = scenegen.sample_building(
                    lot, params, records, library, rng_for(cfg.seed, "building", plot.id, k))
                if spec is None:
                    skipped += 1
                else:
                    buildings.append(spec)
            else:
                trees.extend(scenegen.place_trees(
                    lot, params, rng_for(cfg.seed, "trees", plot.id, k)))

    roads, zero_len = build_roads_logged(network)
    minx, miny, maxx, maxy = network.bounds()
    bounds = scenegen.SceneBounds(minx, miny, maxx, maxy,
                                  terrain.mean_elevation() if terrain else 0.0)
    scene = scenegen.assemble_city(buildings, trees, roads, terrain, library,
                                   rng_for(cfg.seed, "assembly"), bounds=bounds,
                                   skipped_buildings=skipped)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_path = out_dir / f"{cfg.name}.gtsc"
    scene_path.write_bytes(scenegen.scene_to_bytes(scene))
    report.add_artifact(scene_path, out_dir)
    report.record("generate", time.perf_counter() - t0,
                  plots=len(extraction.plots), lots=lots_total,
                  buildings=len(buildings), trees=len(trees), roads=len(roads),
                  skipped_buildings=skipped, zero_length_edges=zero_len,
                  triangles=int(len(scene.triangles)))
    log.info("generate: %d plots, %d lots, %d buildings, %d trees, %d road pieces",
             len(extraction.plots), lots_total, len(buildings), len(trees), len(roads))
    return scene


def build_roads_logged(network):
    pieces, skipped = scenegen.build_roads(network)
    if skipped:
        log.warning("skipped %d zero-length edges", skipped)
    return pieces, skipped


def stage_render(cfg: PipelineConfig, out_dir: Path, report: RunReport,
                 scene: scenegen.SceneModel | None = None) -> list[Path]:
    from PIL import Image

    t0 = time.perf_counter()
    if scene is None:
        scene_path = out_dir / f"{cfg.name}.gtsc"
        if not scene_path.exists():
            raise FileNotFoundError(f"scene not generated yet: {scene_path}")
        scene = scenegen.scene_from_bytes(scene_path.read_bytes())
    views_dir = out_dir / "views"
    views_dir.mkdir(parents=True, exist_ok=True)
    outputs = render.render_batch(scene, cfg.n_views, cfg.seed, cfg.render)
    paths = []
    for i, out in enumerate(outputs):
        stem = f"{cfg.name}_{i:05d}"
        rgb_path = views_dir / f"{stem}.rgb.png"
        label_path = views_dir / f"{stem}.label.png"
        meta_path = views_dir / f"{stem}.meta.json"
        Image.fromarray(out.rgb, mode="RGB").save(rgb_path)
        Image.fromarray(out.labels, mode="L").save(label_path)
        meta_path.write_text(json.dumps(out.metadata, sort_keys=True, indent=1),
                             encoding="utf-8")
        for p in (rgb_path, label_path, meta_path):
            report.add_artifact(p, out_dir)
        paths.extend([rgb_path, label_path])
    report.record("render", time.perf_counter() - t0, views=len(outputs))
    log.info("render: %d views of %dx%d px", len(outputs),
             cfg.render.image_size, cfg.render.image_size)
    return paths


def stage_tile(cfg: PipelineConfig, out_dir: Path, report: RunReport) -> Path:
    from PIL import Image

    t0 = time.perf_counter()
    views_dir = out_dir / "views"
    rgb_paths = sorted(views_dir.glob(f"{cfg.name}_*.rgb.png"))
    if not rgb_paths:
        raise FileNotFoundError(f"no rendered views under {views_dir}")
    patches = []
    for rgb_path in rgb_paths:
        label_path = views_dir / rgb_path.name.replace(".rgb.png", ".label.png")
        view_id = rgb_path.name[: -len(".rgb.png")]
        rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
        label = np.asarray(Image.open(label_path).convert("L"))
        patches.extend(ds.tile(rgb, label, view_id, cfg.patch, cfg.overlap))
    patchset = ds.split(patches, cfg.train_fraction, seed=cfg.seed)
    data_dir = out_dir / "dataset"
    records = ds.write_patchset(patchset, data_dir)
    manifest = ds.write_manifest(records, data_dir)
    for rec in records:
        report.add_artifact(data_dir / rec["path_rgb"], out_dir)
        report.add_artifact(data_dir / rec["path_label"], out_dir)
    report.add_artifact(manifest, out_dir)
    counts = patchset.counts()
    report.record("tile", time.perf_counter() - t0, patches=len(patches), **counts)
    log.info("tile: %d patches (%d train / %d val)", len(patches),
             counts["train"], counts["val"])
    return manifest


def run_evaluate(pred: Path, gt: Path, positive_class: int) -> dict:
    from PIL import Image

    def load_masks(path: Path) -> list[np.ndarray]:
        path = Path(path)
        if path.is_dir():
            files = sorted(path.glob("*.png"))
            if not files:
                raise FileNotFoundError(f"no .png masks under {path}")
            return [np.asarray(Image.open(f).convert("L")) for f in files]
        return [np.asarray(Image.open(path).convert("L"))]

    preds = load_masks(pred)
    gts = load_masks(gt)
    if len(preds) != len(gts):
        raise ValueError(f"pred has {len(preds)} masks, gt has {len(gts)}")
    cm = metrics.ConfusionMatrix()
    for p, g in zip(preds, gts):
        metrics.accumulate(cm, p, g, positive_class)
    return cm.report()


# ---------------------------------------------------------------------------
# entry point

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geotypica",
        description="Geo-typical synthetic overhead imagery generator")
    parser.add_argument("command",
                        choices=["generate", "render", "tile", "evaluate", "all"])
    parser.add_argument("--config", type=Path, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker threads for rendering (default: all cores)")
    parser.add_argument("--pred", type=Path, help="evaluate: predicted mask file/dir")
    parser.add_argument("--gt", type=Path, help="evaluate: ground-truth mask file/dir")
    parser.add_argument("--positive-class", type=int, default=1,
                        help="evaluate: positive class id (default 1 = building)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("GEOTYPICA_LOG", "info").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)

    if args.jobs is not None:
        if args.jobs < 1:
            print("--jobs must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        import numba

        numba.set_num_threads(args.jobs)

    if args.command == "evaluate":
        if args.pred is None or args.gt is None:
            print("evaluate requires --pred and --gt", file=sys.stderr)
            return EXIT_CONFIG
        try:
            result = run_evaluate(args.pred, args.gt, args.positive_class)
        except Exception as ex:
            print(f"stage evaluate failed: {ex}", file=sys.stderr)
            return EXIT_STAGE
        print(json.dumps(result, sort_keys=True, indent=1))
        return EXIT_OK

    if args.config is None:
        print(f"{args.command} requires --config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed_override=args.seed)
    except ConfigError as ex:
        print("config errors:", file=sys.stderr)
        for e in ex.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    scene = None
    try:
        if args.command in ("generate", "all"):
            scene = stage_generate(cfg, out_dir, report)
        if args.command in ("render", "all"):
            stage_render(cfg, out_dir, report, scene=scene)
        if args.command in ("tile", "all"):
            stage_tile(cfg, out_dir, report)
    except Exception as ex:
        stage = {"generate": "generate", "render": "render", "tile": "tile",
                 "all": "pipeline"}[args.command]
        log.error("stage %s failed: %s", stage, ex)
        print(f"stage {stage} failed: {ex}", file=sys.stderr)
        return EXIT_STAGE
    report_path = report.write(out_dir)
    log.info("report written to %s", report_path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
