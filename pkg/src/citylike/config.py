"""Run configuration: a single JSON file drives the whole pipeline."""

import hashlib
import json
import os
from dataclasses import dataclass, field

from .network import ArchitectureConfig, InceptionBlockSpec, OptimizerConfig
from .segmentation import SegmentationParams


class ConfigError(Exception):
    pass


@dataclass
class ProviderConfig:
    provider: str = "synthetic"  # "synthetic" | "remote"
    styles_file: str = None
    city_styles: dict = field(default_factory=dict)
    base_url: str = None
    api_key_env: str = None
    rate_limit_rps: float = 10.0


@dataclass
class RunConfig:
    cities_file: str
    provider: ProviderConfig
    architecture: ArchitectureConfig
    optimizer: OptimizerConfig
    water_mask_file: str = None
    images_per_city: int = 1000
    sources: tuple = ("map",)
    image_size: int = 256
    zoom: int = 16
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    segment_sources: tuple = ("streetview",)
    val_fraction: float = 0.25
    threshold: float = 0.5
    top_k: int = 20
    evaluation_city_id: str = None
    evaluation_bbox: tuple = None  # lat_min, lon_min, lat_max, lon_max
    grid_spacing_m: float = 400.0
    target_city_id: str = None
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self):
        payload = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


def load_run_config(path, seed_override=None):
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        prov_raw = raw.get("provider", {})
        provider = ProviderConfig(
            provider=prov_raw.get("provider", "synthetic"),
            styles_file=resolve(prov_raw.get("styles_file")),
            city_styles=prov_raw.get("city_styles", {}),
            base_url=prov_raw.get("base_url"),
            api_key_env=prov_raw.get("api_key_env"),
            rate_limit_rps=prov_raw.get("rate_limit_rps", 10.0))
        arch_raw = dict(raw["architecture"])
        if "blocks" in arch_raw:
            arch_raw["blocks"] = tuple(InceptionBlockSpec(**b)
                                       for b in arch_raw["blocks"])
        arch = ArchitectureConfig(**arch_raw)
        opt = OptimizerConfig(**raw.get("optimizer", {}))
        seg = SegmentationParams(**raw.get("segmentation", {}))
        sampling = raw.get("sampling", {})
        inference = raw.get("inference", {})
        evaluation = raw.get("evaluation", {})
        cfg = RunConfig(
            cities_file=resolve(raw["cities_file"]),
            water_mask_file=resolve(raw.get("water_mask_file")),
            provider=provider,
            architecture=arch,
            optimizer=opt,
            images_per_city=sampling.get("images_per_city", 1000),
            sources=tuple(sampling.get("sources", ["map"])),
            image_size=sampling.get("size", 256),
            zoom=sampling.get("zoom", 16),
            segmentation=seg,
            segment_sources=tuple(raw.get("segment_sources", ["streetview"])),
            val_fraction=raw.get("dataset", {}).get("val_fraction", 0.25),
            threshold=inference.get("threshold", 0.5),
            top_k=inference.get("k", 20),
            evaluation_city_id=evaluation.get("city_id"),
            evaluation_bbox=tuple(evaluation["bbox"]) if "bbox" in evaluation else None,
            grid_spacing_m=evaluation.get("spacing_m", 400.0),
            target_city_id=evaluation.get("target_city_id"),
            seed=raw.get("seed", 0),
            raw=raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    if seed_override is not None:
        cfg.seed = seed_override
    for label, f in (("cities_file", cfg.cities_file),
                     ("water_mask_file", cfg.water_mask_file),
                     ("styles_file", cfg.provider.styles_file)):
        if f is not None and not os.path.exists(f):
            raise ConfigError(f"{label} does not exist: {f}")
    return cfg
