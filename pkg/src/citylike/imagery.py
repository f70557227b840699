"""Image acquisition: remote map/satellite/street-view providers and an
offline procedural generator, with a disk cache and quality filtering."""

import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from PIL import Image

from .geo import (CityRecord, SampleLocation, SamplingPolicy, WaterMask,
                  radius_for_population, sample_disk)


class ImageryError(Exception):
    pass


class ProviderUnavailableError(ImageryError):
    pass


class NoImageryError(ImageryError):
    """The provider has no image at the requested location."""


class ResamplingExhaustedError(ImageryError):
    pass


class ImageSource(str, Enum):
    map = "map"
    satellite = "satellite"
    streetview = "streetview"


@dataclass(frozen=True)
class ImageryRequest:
    location: SampleLocation
    source: ImageSource = ImageSource.map
    zoom: int = 16
    width: int = 256
    height: int = 256
    pitch: float = 0.0
    fov: float = 90.0
    heading: int = 0

    def __post_init__(self):
        if self.zoom < 0:
            raise ImageryError(f"zoom must be >= 0, got {self.zoom}")
        if not 0 <= self.heading <= 359:
            raise ImageryError(f"heading must be in [0, 359], got {self.heading}")

    def cache_key(self):
        payload = json.dumps({
            "lat": round(self.location.lat, 7),
            "lon": round(self.location.lon, 7),
            "city": self.location.city_id,
            "source": self.source.value,
            "zoom": self.zoom, "w": self.width, "h": self.height,
            "pitch": self.pitch, "fov": self.fov, "heading": self.heading,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class RasterImage:
    """8-bit RGB raster; pixels is an (H, W, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageryError(f"expected (H, W, 3) pixels, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.min() < 0 or arr.max() > 255:
                raise ImageryError("pixel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        self.pixels = arr

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def to_png_bytes(self):
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path):
        Image.fromarray(self.pixels, mode="RGB").save(path, format="PNG")

    @classmethod
    def load(cls, path):
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB")))


DEFAULT_PALETTE = {
    "road": (0, 0, 0),
    "transit": (255, 140, 0),
    "green": (70, 160, 60),
    "water": (90, 150, 230),
    "background": (255, 255, 255),
}


@dataclass(frozen=True)
class StyleSpec:
    style_id: str
    block_size_m: float = 120.0
    road_angle: float = 0.0
    green_fraction: float = 0.15
    water_fraction: float = 0.0
    transit_density: float = 0.2
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def __post_init__(self):
        for name in ("green_fraction", "water_fraction", "transit_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ImageryError(f"{name} must be in [0, 1], got {v}")
        for key, rgb in self.palette.items():
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise ImageryError(f"bad palette color for {key!r}: {rgb}")


def load_styles(path):
    with open(path) as f:
        raw = json.load(f)
    styles = {}
    for entry in raw["styles"] if isinstance(raw, dict) else raw:
        entry = dict(entry)
        if "palette" in entry:
            entry["palette"] = {k: tuple(v) for k, v in entry["palette"].items()}
        spec = StyleSpec(**entry)
        styles[spec.style_id] = spec
    return styles


def _location_seed(location, source, heading, seed):
    payload = (f"{location.lat:.7f},{location.lon:.7f},{location.city_id},"
               f"{source},{heading},{seed}")
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:8], "little")


def synth_city_image(style, location, source=ImageSource.map, seed=0,
                     width=256, height=256, heading=0):
    """Procedural tile whose palette statistics follow the style.

    Water and green coverage are painted to an exact pixel budget so the
    rendered fractions track the style spec; road layout varies with the
    source and with a location-derived seed.
    """
    if isinstance(source, str):
        source = ImageSource(source)
    rng = np.random.default_rng(_location_seed(location, source.value, heading, seed))
    pal = {k: np.array(v, dtype=np.uint8) for k, v in style.palette.items()}
    n_total = width * height

    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:, :] = pal["background"]

    water_px = int(round(style.water_fraction * n_total))
    if water_px >= n_total:
        img[:, :] = pal["water"]
        return RasterImage(img)

    # Road lattice: parallel line families rotated by road_angle, spacing
    # scaled from block_size_m (tile covers ~400 m at zoom 16).
    spacing = max(4, int(round(style.block_size_m / 400.0 * width)))
    angle = math.radians(style.road_angle + (heading if source is ImageSource.streetview else 0))
    ca, sa = math.cos(angle), math.sin(angle)
    yy, xx = np.mgrid[0:height, 0:width]
    u = xx * ca + yy * sa
    v = -xx * sa + yy * ca
    phase_u = float(rng.integers(0, spacing))
    phase_v = float(rng.integers(0, spacing))
    road_width = {ImageSource.map: 2, ImageSource.satellite: 5,
                  ImageSource.streetview: 3}[source]
    road_mask = ((np.mod(u - phase_u, spacing) < road_width)
                 | (np.mod(v - phase_v, spacing) < road_width))
    if source is ImageSource.streetview:
        # Street-level view: only the road family ahead, widening toward
        # the bottom of the frame to fake perspective.
        widen = 1 + (yy / height) * 3
        road_mask = np.mod(u - phase_u, spacing) < road_width * widen
    img[road_mask] = pal["road"]

    # Transit lines: a sparser subset of the lattice.
    if style.transit_density > 0:
        t_spacing = max(spacing, int(round(spacing / max(style.transit_density, 1e-6))))
        transit_mask = np.mod(u - phase_u + spacing // 2, t_spacing) < max(1, road_width - 1)
        img[transit_mask] = pal["transit"]

    # Green space: seeded rectangles painted until the pixel budget is met.
    green_px = int(round(style.green_fraction * n_total))
    green_px = min(green_px, n_total - water_px)
    water_rows = -(-water_px // width) if water_px else 0  # rows the band can touch
    if green_px > 0:
        usable_h = max(1, height - water_rows)
        green_px = min(green_px, usable_h * width)
        painted = np.zeros((height, width), dtype=bool)
        count = 0
        guard = 0
        while count < green_px and guard < 10_000:
            guard += 1
            side = int(rng.integers(8, max(9, width // 3)))
            side = min(side, usable_h)
            y0 = int(rng.integers(0, max(1, usable_h - side + 1)))
            x0 = int(rng.integers(0, max(1, width - side + 1)))
            sub = painted[y0:y0 + side, x0:x0 + side]
            fresh = np.argwhere(~sub)
            need = green_px - count
            if len(fresh) > need:
                fresh = fresh[:need]
            painted[y0 + fresh[:, 0], x0 + fresh[:, 1]] = True
            count += len(fresh)
        img[painted] = pal["green"]

    # Water: bottom band painted last so its pixel count is exact.
    if water_px > 0:
        flat = img.reshape(-1, 3)
        flat[n_total - water_px:] = pal["water"]

    if source is ImageSource.satellite:
        # Coarse block texture distinguishes satellite tiles from maps
        # without leaving the palette.
        tex = rng.random((height // 8 + 1, width // 8 + 1)) < 0.08
        tex = np.kron(tex, np.ones((8, 8), dtype=bool))[:height, :width]
        bg = np.all(img == pal["background"], axis=2)
        img[tex & bg] = pal["road"]

    return RasterImage(img)


def quality_check(img):
    """'ok' or 'unusable'. Unusable: very dark frames, or frames dominated
    by a single color (tunnels, indoor shots, blank tiles)."""
    px = img.pixels.astype(np.float64)
    luma = 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]
    if luma.mean() < 20.0:
        return "unusable"
    flat = img.pixels.reshape(-1, 3)
    packed = (flat[:, 0].astype(np.uint32) << 16) | (flat[:, 1].astype(np.uint32) << 8) | flat[:, 2]
    _, counts = np.unique(packed, return_counts=True)
    if counts.max() / flat.shape[0] > 0.98:
        return "unusable"
    return "ok"


class SyntheticProvider:
    """Offline provider: each city id maps to a StyleSpec."""

    def __init__(self, styles, city_styles=None, seed=0):
        self.styles = styles
        self.city_styles = city_styles or {}
        self.seed = seed

    def style_for(self, city_id):
        style_id = self.city_styles.get(city_id, city_id)
        if style_id not in self.styles:
            raise NoImageryError(f"no style configured for city {city_id!r}")
        return self.styles[style_id]

    def get(self, request):
        style = self.style_for(request.location.city_id)
        return synth_city_image(style, request.location, request.source,
                                seed=self.seed, width=request.width,
                                height=request.height, heading=request.heading)


class RemoteProvider:
    """HTTP tile/street-view provider with bounded retries and rate limiting.

    The endpoint must accept lat/lon/zoom/size query parameters and return
    a PNG body; 404 means no imagery at the location.
    """

    def __init__(self, base_url, api_key_env=None, rate_limit_rps=10.0,
                 retries=3, timeout=10.0, client=None):
        import httpx
        self.base_url = base_url.rstrip("/")
        self.api_key = os.environ.get(api_key_env) if api_key_env else None
        self.min_interval = 1.0 / rate_limit_rps if rate_limit_rps else 0.0
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)
        self._last_request = 0.0

    def get(self, request):
        import httpx
        params = {
            "lat": request.location.lat, "lon": request.location.lon,
            "zoom": request.zoom, "width": request.width, "height": request.height,
            "source": request.source.value, "heading": request.heading,
            "pitch": request.pitch, "fov": request.fov,
        }
        if self.api_key:
            params["key"] = self.api_key
        last_error = None
        for _ in range(self.retries):
            wait = self.min_interval - (time.monotonic() - self._last_request)
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()
            try:
                resp = self._client.get(self.base_url, params=params)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code == 404:
                raise NoImageryError(
                    f"no {request.source.value} imagery at "
                    f"({request.location.lat:.5f}, {request.location.lon:.5f})")
            if resp.status_code != 200:
                last_error = RuntimeError(f"HTTP {resp.status_code}")
                continue
            with Image.open(io.BytesIO(resp.content)) as im:
                return RasterImage(np.asarray(im.convert("RGB")))
        raise ProviderUnavailableError(
            f"provider failed after {self.retries} attempts: {last_error}")


class ImageCache:
    """PNG disk cache under cache/<source>/<request-hash>.png."""

    def __init__(self, root):
        self.root = root

    def path_for(self, request):
        return os.path.join(self.root, request.source.value,
                            request.cache_key() + ".png")

    def get(self, request):
        path = self.path_for(request)
        if os.path.exists(path):
            return RasterImage.load(path)
        return None

    def put(self, request, image):
        path = self.path_for(request)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        image.save(tmp)
        os.replace(tmp, path)
        return path


def fetch_image(provider, request, cache=None):
    """Fetch through the cache; identical requests return identical images."""
    if cache is not None:
        hit = cache.get(request)
        if hit is not None:
            return hit
    image = provider.get(request)
    if image.width != request.width or image.height != request.height:
        raise ImageryError(
            f"provider returned {image.width}x{image.height}, "
            f"expected {request.width}x{request.height}")
    if cache is not None:
        cache.put(request, image)
    return image


def sample_with_replacement(provider, city, n, source=ImageSource.map,
                            policy=SamplingPolicy(), mask=None, seed=0,
                            cache=None, zoom=16, size=256,
                            attempt_factor=10):
    """Draw disk locations for a city and fetch until n usable images.

    Unusable or missing images are replaced by fresh draws. Street-view
    requests carry independent random headings.
    """
    if isinstance(source, str):
        source = ImageSource(source)
    if n < 0:
        raise ImageryError(f"sample count must be >= 0, got {n}")
    r_km = radius_for_population(city.population, policy)
    city_hash = int.from_bytes(hashlib.sha256(city.id.encode()).digest()[:4], "little")
    rng = np.random.default_rng(np.random.SeedSequence([seed, city_hash]))
    budget = max(1, attempt_factor * n) if n else 0
    out = []
    attempts = 0
    draw_seed = seed
    while len(out) < n:
        if attempts >= budget:
            raise ResamplingExhaustedError(
                f"{city.id}: {len(out)}/{n} usable images after {attempts} attempts")
        attempts += 1
        draw_seed += 1
        loc = sample_disk((city.lat, city.lon), r_km, 1, mask=mask,
                          seed=np.random.SeedSequence([seed, draw_seed]),
                          city_id=city.id)[0]
        heading = int(rng.integers(0, 360)) if source is ImageSource.streetview else 0
        request = ImageryRequest(location=loc, source=source, zoom=zoom,
                                 width=size, height=size, heading=heading)
        try:
            image = fetch_image(provider, request, cache=cache)
        except NoImageryError:
            continue
        if quality_check(image) != "ok":
            continue
        out.append((loc, image))
    return out, attempts
