"""Stage functions chained by the `pipeline` subcommand.

Each stage writes into a run directory and drops a marker file so a rerun
with the same directory skips completed work.
"""

import json
import os
import time

from . import dataset as ds
from . import geo, imagery, inference, rendering
from .config import ConfigError
from .network import Checkpoint, train as train_network
from .segmentation import segment


def make_run_dir(cfg, out=None, root="runs"):
    if out:
        path = out
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = os.path.join(root, f"{stamp}-{cfg.config_hash}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "run.json"), "w") as f:
        json.dump({"config_hash": cfg.config_hash, "seed": cfg.seed,
                   "artifact_version": 1}, f, indent=2)
    return path


def _done(run_dir, stage):
    return os.path.join(run_dir, f".{stage}.done")


def stage_complete(run_dir, stage):
    return os.path.exists(_done(run_dir, stage))


def mark_complete(run_dir, stage):
    with open(_done(run_dir, stage), "w") as f:
        f.write("ok\n")


def build_provider(cfg):
    if cfg.provider.provider == "synthetic":
        if not cfg.provider.styles_file:
            raise ConfigError("synthetic provider needs a styles_file")
        styles = imagery.load_styles(cfg.provider.styles_file)
        return imagery.SyntheticProvider(styles, cfg.provider.city_styles,
                                         seed=cfg.seed)
    if cfg.provider.provider == "remote":
        if not cfg.provider.base_url:
            raise ConfigError("remote provider needs a base_url")
        return imagery.RemoteProvider(cfg.provider.base_url,
                                      api_key_env=cfg.provider.api_key_env,
                                      rate_limit_rps=cfg.provider.rate_limit_rps)
    raise ConfigError(f"unknown provider type {cfg.provider.provider!r}")


def training_cities(cfg):
    cities = geo.load_cities(cfg.cities_file)
    return [c for c in cities if c.id != cfg.evaluation_city_id], cities


def load_mask(cfg):
    if cfg.water_mask_file:
        return geo.WaterMask.from_geojson(cfg.water_mask_file)
    return geo.WaterMask()


def stage_fetch(cfg, run_dir, source):
    """Sample disk locations per training city and store usable imagery."""
    stage = f"fetch-{source}"
    img_root = os.path.join(run_dir, "images", source)
    if stage_complete(run_dir, stage):
        return img_root
    provider = build_provider(cfg)
    mask = load_mask(cfg)
    cache = imagery.ImageCache(os.path.join(run_dir, "cache"))
    train_cities, _ = training_cities(cfg)
    for city in train_cities:
        out_dir = os.path.join(img_root, city.id)
        os.makedirs(out_dir, exist_ok=True)
        pairs, _ = imagery.sample_with_replacement(
            provider, city, cfg.images_per_city, source=source,
            mask=mask, seed=cfg.seed, cache=cache, zoom=cfg.zoom,
            size=cfg.image_size)
        locs = []
        for i, (loc, img) in enumerate(pairs):
            img.save(os.path.join(out_dir, f"{i:05d}.png"))
            locs.append(loc)
        geo.save_locations(os.path.join(out_dir, "locations.csv"), locs)
    mark_complete(run_dir, stage)
    return img_root


def stage_segment(cfg, run_dir, source):
    """Segment street-level imagery in place of the raw tiles."""
    stage = f"segment-{source}"
    in_root = os.path.join(run_dir, "images", source)
    out_root = os.path.join(run_dir, "images", f"{source}-segmented")
    if stage_complete(run_dir, stage):
        return out_root
    for city_id in sorted(os.listdir(in_root)):
        src_dir = os.path.join(in_root, city_id)
        if not os.path.isdir(src_dir):
            continue
        dst_dir = os.path.join(out_root, city_id)
        os.makedirs(dst_dir, exist_ok=True)
        for name in sorted(os.listdir(src_dir)):
            if not name.endswith(".png"):
                continue
            img = imagery.RasterImage.load(os.path.join(src_dir, name))
            segment(img, cfg.segmentation).image.save(os.path.join(dst_dir, name))
    mark_complete(run_dir, stage)
    return out_root


def stage_dataset(cfg, run_dir, source, img_root):
    stage = f"dataset-{source}"
    manifest_path = os.path.join(run_dir, f"manifest-{source}.csv")
    if stage_complete(run_dir, stage):
        return ds.DatasetManifest.load(manifest_path), manifest_path
    train_cities, _ = training_cities(cfg)
    image_dirs = {c.id: os.path.join(img_root, c.id) for c in train_cities}
    manifest = ds.build_manifest(image_dirs, train_cities,
                                 val_fraction=cfg.val_fraction,
                                 seed=cfg.seed, source=source)
    manifest.save(manifest_path)
    mark_complete(run_dir, stage)
    return manifest, manifest_path


def stage_train(cfg, run_dir, source, manifest):
    stage = f"train-{source}"
    train_dir = os.path.join(run_dir, f"train-{source}")
    ckpt_path = os.path.join(train_dir, "checkpoint.bin")
    if stage_complete(run_dir, stage):
        return Checkpoint.load(ckpt_path), ckpt_path
    ckpt, _ = train_network(manifest, cfg.architecture, cfg.optimizer,
                            seed=cfg.seed, out_dir=train_dir)
    mark_complete(run_dir, stage)
    return ckpt, ckpt_path


def stage_infer(cfg, run_dir, source, ckpt, manifest):
    stage = f"infer-{source}"
    records_path = os.path.join(run_dir, f"records-{source}.csv")
    meta_path = os.path.join(run_dir, f"records-{source}.meta.json")
    if stage_complete(run_dir, stage):
        with open(meta_path) as f:
            meta = json.load(f)
        return inference.load_records(records_path,
                                      city_id=cfg.evaluation_city_id or ""), meta
    if not cfg.evaluation_bbox or not cfg.evaluation_city_id:
        raise ConfigError("inference needs evaluation.city_id and evaluation.bbox")
    provider = build_provider(cfg)
    mask = load_mask(cfg)
    cache = imagery.ImageCache(os.path.join(run_dir, "cache"))
    grid = geo.make_grid(cfg.evaluation_bbox, cfg.grid_spacing_m, mask=mask,
                         city_id=cfg.evaluation_city_id)
    items = []
    for loc in grid:
        request = imagery.ImageryRequest(location=loc,
                                         source=imagery.ImageSource(source),
                                         zoom=cfg.zoom, width=cfg.image_size,
                                         height=cfg.image_size)
        try:
            img = imagery.fetch_image(provider, request, cache=cache)
        except imagery.NoImageryError:
            items.append((loc, None))
            continue
        if imagery.quality_check(img) != "ok":
            items.append((loc, None))
            continue
        if source in cfg.segment_sources:
            img = segment(img, cfg.segmentation).image
        items.append((loc, img))
    inference.attach_class_index(ckpt, manifest.class_index)
    records, skipped = inference.predict(ckpt, items, threshold=cfg.threshold,
                                         evaluation_city_id=cfg.evaluation_city_id)
    inference.save_records(records_path, records)
    meta = {"grid_points": len(grid), "skipped_no_imagery": skipped,
            "evaluated": len(records), "threshold": cfg.threshold}
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2)
    mark_complete(run_dir, stage)
    return records, meta


def stage_report(cfg, run_dir, source, records, ckpt_path):
    report_path = os.path.join(run_dir, f"report-{source}.json")
    table = inference.topk_table(records, k=cfg.top_k, threshold=cfg.threshold)
    report = {"source": source, "threshold": cfg.threshold,
              "evaluated": table.evaluated,
              "top_k": [{"city_id": cid, "share_percent": share}
                        for cid, share in table.rows]}
    if cfg.target_city_id:
        like = inference.likeness(records, cfg.target_city_id,
                                  threshold=cfg.threshold)
        report["likeness"] = {
            "target_city_id": like.target_city_id,
            "matches_unfiltered": like.matches_unfiltered,
            "matches_filtered": like.matches_filtered,
            "evaluated": like.evaluated,
            "pct_unfiltered": like.pct_unfiltered,
            "pct_filtered": like.pct_filtered}
    with open(ckpt_path, "rb") as f:
        import hashlib
        report["checkpoint_sha256"] = hashlib.sha256(f.read()).hexdigest()
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2)
    return report, report_path


def stage_render(cfg, run_dir, source, records):
    map_path = os.path.join(run_dir, f"map-{source}.png")
    legend_path = os.path.join(run_dir, "legend.csv")
    _, all_cities = training_cities(cfg)
    lat_min, lon_min, lat_max, lon_max = cfg.evaluation_bbox
    canvas = rendering.MapCanvas(bbox=(lat_min, lon_min, lat_max, lon_max))
    png, warnings = rendering.render_prediction_map(
        records, all_cities, canvas, target_city_id=cfg.target_city_id)
    with open(map_path, "wb") as f:
        f.write(png)
    rendering.write_legend(legend_path, all_cities)
    return map_path, warnings


def run_pipeline(cfg, out=None):
    """All stages for every configured source; returns a summary dict."""
    run_dir = make_run_dir(cfg, out=out)
    summary = {"run_dir": run_dir, "sources": {}}
    for source in cfg.sources:
        img_root = stage_fetch(cfg, run_dir, source)
        if source in cfg.segment_sources:
            img_root = stage_segment(cfg, run_dir, source)
        manifest, _ = stage_dataset(cfg, run_dir, source, img_root)
        ckpt, ckpt_path = stage_train(cfg, run_dir, source, manifest)
        records, meta = stage_infer(cfg, run_dir, source, ckpt, manifest)
        report, report_path = stage_report(cfg, run_dir, source, records, ckpt_path)
        map_path, warnings = stage_render(cfg, run_dir, source, records)
        summary["sources"][source] = {
            "images": img_root, "checkpoint": ckpt_path,
            "report": report_path, "map": map_path,
            "inference": meta, "render_warnings": warnings}
    return summary
