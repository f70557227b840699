"""Command-line entry points for every pipeline stage."""

import functools
import json
import os
import sys

import click

from . import dataset as ds
from . import geo, imagery, inference, pipeline, rendering
from .config import ConfigError, load_run_config
from .network import (ArchitectureConfig, Checkpoint, DivergedError,
                      InceptionBlockSpec, OptimizerConfig, evaluate,
                      train as train_network)
from .segmentation import SegmentationParams, segment as segment_image

EXIT_CONFIG = 1
EXIT_PROVIDER = 2
EXIT_DIVERGED = 3
EXIT_CONTAMINATION = 4


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except inference.ContaminationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONTAMINATION)
        except DivergedError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DIVERGED)
        except (imagery.ProviderUnavailableError,
                imagery.ResamplingExhaustedError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PROVIDER)
        except (ConfigError, geo.GeoError, ds.DatasetError,
                inference.InferenceError, rendering.RenderingError,
                FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
    return wrapper


class _Group(click.Group):
    """Group whose usage errors (unknown subcommand, bad flags) exit with
    the config error code instead of click's default 2."""

    def main(self, *args, **kwargs):
        kwargs.setdefault("standalone_mode", False)
        try:
            return super().main(*args, **kwargs)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)
        except click.Abort:
            sys.exit(EXIT_CONFIG)
        except click.UsageError as exc:
            exc.show()
            sys.exit(EXIT_CONFIG)


@click.group(cls=_Group)
def main():
    """City-likeness pipeline: sample, train, and map urban imagery."""


@main.command(name="pipeline")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", default=None, help="Run directory (default runs/<stamp>-<hash>).")
@handle_errors
def run_pipeline_cmd(config_path, seed, out):
    """Run every stage end to end from a run config."""
    cfg = load_run_config(config_path, seed_override=seed)
    summary = pipeline.run_pipeline(cfg, out=out)
    click.echo(json.dumps(summary, indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--city", "city_id", default=None,
              help="Sample this city's disk; default samples all training cities.")
@click.option("--grid", is_flag=True, help="Emit the evaluation grid instead.")
@click.option("--n", default=100, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def sample(config_path, city_id, grid, n, seed, out):
    """Write a locations CSV: population-scaled disk samples or the grid."""
    cfg = load_run_config(config_path, seed_override=seed)
    mask = pipeline.load_mask(cfg)
    if grid:
        if not cfg.evaluation_bbox:
            raise ConfigError("config lacks evaluation.bbox")
        locs = geo.make_grid(cfg.evaluation_bbox, cfg.grid_spacing_m, mask=mask,
                             city_id=cfg.evaluation_city_id or "")
    else:
        cities = geo.load_cities(cfg.cities_file)
        if city_id:
            cities = [c for c in cities if c.id == city_id]
            if not cities:
                raise ConfigError(f"city {city_id!r} not in the cities file")
        locs = []
        for c in cities:
            r = geo.radius_for_population(c.population)
            locs.extend(geo.sample_disk((c.lat, c.lon), r, n, mask=mask,
                                        seed=cfg.seed, city_id=c.id))
    geo.save_locations(out, locs)
    click.echo(f"wrote {len(locs)} locations to {out}")


@main.command()
@click.option("--styles", "styles_path", required=True, type=click.Path())
@click.option("--style", "style_id", required=True)
@click.option("--n", default=10, show_default=True)
@click.option("--source", default="map", show_default=True,
              type=click.Choice(["map", "satellite", "streetview"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def synth(styles_path, style_id, n, source, seed, out):
    """Render synthetic tiles for one style into a directory."""
    styles = imagery.load_styles(styles_path)
    if style_id not in styles:
        raise ConfigError(f"style {style_id!r} not in {styles_path}")
    os.makedirs(out, exist_ok=True)
    rng_locs = geo.sample_disk((0.0, 0.0), 3.0, n, seed=seed, city_id=style_id)
    for i, loc in enumerate(rng_locs):
        img = imagery.synth_city_image(styles[style_id], loc, source, seed=seed)
        img.save(os.path.join(out, f"{i:05d}.png"))
    click.echo(f"wrote {n} tiles to {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--locations", "locations_path", required=True, type=click.Path())
@click.option("--source", default="map", show_default=True)
@click.option("--cache", "cache_dir", default="cache", show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def fetch(config_path, locations_path, source, cache_dir, out):
    """Fetch imagery for a locations CSV through the configured provider."""
    cfg = load_run_config(config_path)
    provider = pipeline.build_provider(cfg)
    cache = imagery.ImageCache(cache_dir)
    locs = geo.load_locations(locations_path)
    os.makedirs(out, exist_ok=True)
    ok = 0
    for i, loc in enumerate(locs):
        request = imagery.ImageryRequest(
            location=loc, source=imagery.ImageSource(source), zoom=cfg.zoom,
            width=cfg.image_size, height=cfg.image_size)
        try:
            img = imagery.fetch_image(provider, request, cache=cache)
        except imagery.NoImageryError:
            continue
        img.save(os.path.join(out, f"{i:05d}.png"))
        ok += 1
    click.echo(f"fetched {ok}/{len(locs)} images into {out}")


@main.command(name="segment")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--spatial", default=6.0, show_default=True)
@click.option("--range", "range_radius", default=4.5, show_default=True)
@click.option("--min-density", default=50, show_default=True)
@handle_errors
def segment_cmd(in_dir, out_dir, spatial, range_radius, min_density):
    """Mean-shift segment every PNG in a directory."""
    params = SegmentationParams(spatial_radius=spatial, range_radius=range_radius,
                                min_density=min_density)
    os.makedirs(out_dir, exist_ok=True)
    count = 0
    for name in sorted(os.listdir(in_dir)):
        if not name.lower().endswith(".png"):
            continue
        img = imagery.RasterImage.load(os.path.join(in_dir, name))
        segment_image(img, params).image.save(os.path.join(out_dir, name))
        count += 1
    click.echo(f"segmented {count} images into {out_dir}")


@main.command(name="dataset")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--images", "img_root", required=True, type=click.Path(exists=True))
@click.option("--source", default="map", show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def dataset_cmd(config_path, img_root, source, out):
    """Build the train/val manifest from per-city image directories."""
    cfg = load_run_config(config_path)
    train_cities, _ = pipeline.training_cities(cfg)
    image_dirs = {c.id: os.path.join(img_root, c.id) for c in train_cities
                  if os.path.isdir(os.path.join(img_root, c.id))}
    manifest = ds.build_manifest(image_dirs, train_cities,
                                 val_fraction=cfg.val_fraction,
                                 seed=cfg.seed, source=source)
    manifest.save(out)
    click.echo(f"manifest: {len(manifest.rows)} rows, "
               f"{len(manifest.class_index)} classes -> {out}")


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@handle_errors
def train_cmd(config_path, manifest_path, out, seed):
    """Train the classifier; writes checkpoint.bin and metrics.csv."""
    cfg = load_run_config(config_path, seed_override=seed)
    manifest = ds.DatasetManifest.load(manifest_path)
    def log(row):
        click.echo(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} "
                   f"top1 {row['val_top1']:.3f} top5 {row['val_top5']:.3f}")
    train_network(manifest, cfg.architecture, cfg.optimizer, seed=cfg.seed,
                  out_dir=out, log=log)
    click.echo(f"checkpoint written to {os.path.join(out, 'checkpoint.bin')}")


@main.command(name="eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="val", show_default=True)
@handle_errors
def eval_cmd(ckpt_path, manifest_path, split):
    ckpt = Checkpoint.load(ckpt_path)
    manifest = ds.DatasetManifest.load(manifest_path)
    top1, top5 = evaluate(ckpt, manifest, split=split)
    click.echo(json.dumps({"split": split, "top1": top1, "top5": top5}))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--source", default="map", show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def infer(config_path, ckpt_path, manifest_path, source, out):
    """Score the evaluation grid and write a records CSV."""
    cfg = load_run_config(config_path)
    ckpt = Checkpoint.load(ckpt_path)
    manifest = ds.DatasetManifest.load(manifest_path)
    run_dir = os.path.dirname(os.path.abspath(out)) or "."
    records, meta = pipeline.stage_infer(cfg, run_dir, source, ckpt, manifest)
    generated = os.path.join(run_dir, f"records-{source}.csv")
    if os.path.abspath(generated) != os.path.abspath(out):
        os.replace(generated, out)
    click.echo(json.dumps(meta))


@main.command()
@click.option("--records", "records_path", required=True, type=click.Path())
@click.option("--target", "target_city_id", required=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--k", default=20, show_default=True)
@click.option("--out", default=None, type=click.Path())
@handle_errors
def report(records_path, target_city_id, threshold, k, out):
    """Likeness report and top-K table from a records CSV."""
    if not os.path.exists(records_path):
        raise ConfigError(f"records file not found (run `infer` first): "
                          f"{records_path}")
    records = inference.load_records(records_path)
    like = inference.likeness(records, target_city_id, threshold=threshold)
    table = inference.topk_table(records, k=k, threshold=threshold)
    payload = {
        "threshold": threshold,
        "likeness": {"target_city_id": like.target_city_id,
                     "matches_unfiltered": like.matches_unfiltered,
                     "matches_filtered": like.matches_filtered,
                     "evaluated": like.evaluated,
                     "pct_unfiltered": like.pct_unfiltered,
                     "pct_filtered": like.pct_filtered},
        "top_k": [{"city_id": cid, "share_percent": share}
                  for cid, share in table.rows]}
    text = json.dumps(payload, indent=2)
    if out:
        with open(out, "w") as f:
            f.write(text)
    click.echo(text)


@main.group()
def render():
    """PNG rendering: prediction maps and galleries."""


@render.command(name="map")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--cities", "cities_path", required=True, type=click.Path(exists=True))
@click.option("--bbox", nargs=4, type=float, required=True,
              help="lat_min lon_min lat_max lon_max")
@click.option("--target", "target_city_id", default=None)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def render_map(records_path, cities_path, bbox, target_city_id, out):
    records = inference.load_records(records_path)
    cities = geo.load_cities(cities_path)
    canvas = rendering.MapCanvas(bbox=tuple(bbox))
    png, warnings = rendering.render_prediction_map(records, cities, canvas,
                                                    target_city_id=target_city_id)
    with open(out, "wb") as f:
        f.write(png)
    click.echo(json.dumps(warnings))


@render.command(name="gallery")
@click.option("--dir", "img_dir", required=True, type=click.Path(exists=True))
@click.option("--cols", default=3, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def render_gallery_cmd(img_dir, cols, out):
    images = [imagery.RasterImage.load(os.path.join(img_dir, n))
              for n in sorted(os.listdir(img_dir)) if n.lower().endswith(".png")]
    png = rendering.render_gallery(images, columns=cols)
    with open(out, "wb") as f:
        f.write(png)
    click.echo(f"gallery of {len(images)} images -> {out}")


@main.command()
@click.option("--checkpoint", "ckpt_path", default=None, type=click.Path())
@click.option("--classes", "classes_path", default=None, type=click.Path())
@click.option("--styles", "styles_path", default=None, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@handle_errors
def serve(ckpt_path, classes_path, styles_path, host, port):
    """Run the HTTP service wrapping the trained model."""
    import uvicorn

    from .service import create_app
    app = create_app(checkpoint_path=ckpt_path, class_index_path=classes_path,
                     styles_path=styles_path)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
