"""Geodesic math and location sampling.

Training cities get population-scaled circular sampling areas; evaluation
cities get fixed-spacing grids. Both exclude points falling inside water
polygons.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

EARTH_RADIUS_KM = 6371.0088  # IUGG mean radius
METERS_PER_DEG_LAT = 111_320.0


class GeoError(ValueError):
    pass


class SamplingExhaustedError(GeoError):
    pass


class LocationKind(str, Enum):
    disk = "disk"
    grid = "grid"


@dataclass(frozen=True)
class CityRecord:
    id: str
    name: str
    country: str
    lat: float
    lon: float
    population: int

    def __post_init__(self):
        _check_latlon(self.lat, self.lon)
        if self.population < 1:
            raise GeoError(f"population must be >= 1, got {self.population}")


@dataclass(frozen=True)
class SamplingPolicy:
    base_area_km2: float = 28.27
    base_population: int = 300_000
    exponent: float = 0.85
    earth_radius_km: float = EARTH_RADIUS_KM
    min_radius_km: float = 1.5

    def __post_init__(self):
        if min(self.base_area_km2, self.base_population, self.exponent,
               self.earth_radius_km, self.min_radius_km) <= 0:
            raise GeoError("sampling policy constants must be positive")
        if not 0 < self.exponent <= 1:
            raise GeoError("exponent must lie in (0, 1]")


@dataclass(frozen=True)
class SampleLocation:
    lat: float
    lon: float
    city_id: str
    kind: LocationKind

    def __post_init__(self):
        _check_latlon(self.lat, self.lon)


@dataclass
class WaterMask:
    """Polygons of water to exclude, as closed rings of (lat, lon)."""

    polygons: list = field(default_factory=list)

    def __post_init__(self):
        normalized = []
        for ring in self.polygons:
            ring = [(float(a), float(b)) for a, b in ring]
            if len(ring) >= 2 and ring[0] == ring[-1]:
                ring = ring[:-1]
            if len(ring) < 3:
                raise GeoError("water polygon rings need at least 3 vertices")
            normalized.append(ring)
        self.polygons = normalized

    @property
    def empty(self):
        return not self.polygons

    def contains(self, lat, lon):
        return any(point_in_ring(lat, lon, ring) for ring in self.polygons)

    @classmethod
    def from_geojson(cls, path):
        """Accepts Polygon, MultiPolygon, Feature, or FeatureCollection.

        GeoJSON stores [lon, lat]; rings are converted to (lat, lon).
        """
        with open(path) as f:
            obj = json.load(f)
        rings = []
        _collect_geojson_rings(obj, rings)
        return cls(polygons=rings)


def _collect_geojson_rings(obj, out):
    t = obj.get("type")
    if t == "FeatureCollection":
        for feat in obj.get("features", []):
            _collect_geojson_rings(feat, out)
    elif t == "Feature":
        if obj.get("geometry"):
            _collect_geojson_rings(obj["geometry"], out)
    elif t == "Polygon":
        for ring in obj["coordinates"]:
            out.append([(lat, lon) for lon, lat in ring])
    elif t == "MultiPolygon":
        for poly in obj["coordinates"]:
            for ring in poly:
                out.append([(lat, lon) for lon, lat in ring])
    else:
        raise GeoError(f"unsupported GeoJSON type: {t!r}")


def _check_latlon(lat, lon):
    if not (-90.0 <= lat <= 90.0):
        raise GeoError(f"latitude out of range: {lat}")
    if not (-180.0 <= lon <= 180.0):
        raise GeoError(f"longitude out of range: {lon}")


def point_in_ring(lat, lon, ring):
    """Even-odd ray casting in the lat/lon plane."""
    inside = False
    n = len(ring)
    for i in range(n):
        y1, x1 = ring[i]
        y2, x2 = ring[(i + 1) % n]
        if (y1 > lat) != (y2 > lat):
            x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
            if lon < x_cross:
                inside = not inside
    return inside


def radius_for_population(p, policy=SamplingPolicy()):
    """Sampling-disk radius in km for a city of population p.

    r = sqrt(base_area/pi * (p/base_population)^exponent), floored at
    policy.min_radius_km.
    """
    if p <= 0:
        raise GeoError(f"population must be positive, got {p}")
    r = math.sqrt(policy.base_area_km2 / math.pi
                  * (p / policy.base_population) ** policy.exponent)
    return max(r, policy.min_radius_km)


def haversine_km(a, b, radius_km=EARTH_RADIUS_KM):
    """Great-circle distance between (lat, lon) points, in km."""
    lat1, lon1 = a
    lat2, lon2 = b
    _check_latlon(lat1, lon1)
    _check_latlon(lat2, lon2)
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * radius_km * math.asin(min(1.0, math.sqrt(h)))


def destination_point(lat, lon, bearing_rad, distance_km, radius_km=EARTH_RADIUS_KM):
    """Point reached from (lat, lon) travelling distance_km along a bearing."""
    delta = distance_km / radius_km
    phi1 = math.radians(lat)
    lam1 = math.radians(lon)
    sin_phi2 = (math.sin(phi1) * math.cos(delta)
                + math.cos(phi1) * math.sin(delta) * math.cos(bearing_rad))
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(math.sin(bearing_rad) * math.sin(delta) * math.cos(phi1),
                             math.cos(delta) - math.sin(phi1) * sin_phi2)
    lat2 = math.degrees(phi2)
    lon2 = (math.degrees(lam2) + 540.0) % 360.0 - 180.0
    return lat2, lon2


def sample_disk(center, r_km, n, mask=None, seed=0, city_id="",
                max_reject_fraction=0.999):
    """Uniform-over-area samples on a geodesic disk, outside the water mask.

    Distance from the centre is drawn as r*sqrt(u) so density is uniform
    per unit area; curvature is handled by the spherical destination
    formula. Deterministic for a fixed seed.
    """
    if r_km <= 0:
        raise GeoError(f"radius must be positive, got {r_km}")
    if n < 0:
        raise GeoError(f"sample count must be >= 0, got {n}")
    mask = mask or WaterMask()
    rng = np.random.default_rng(seed)
    out = []
    budget = max(1000, int(n / (1.0 - max_reject_fraction)))
    attempts = 0
    clat, clon = center
    _check_latlon(clat, clon)
    while len(out) < n:
        if attempts >= budget:
            raise SamplingExhaustedError(
                f"rejected {attempts - len(out)} of {attempts} draws; "
                "water mask may cover the sampling disk")
        attempts += 1
        u, v = rng.random(), rng.random()
        d = r_km * math.sqrt(u)
        bearing = 2.0 * math.pi * v
        lat, lon = destination_point(clat, clon, bearing, d)
        if mask.contains(lat, lon):
            continue
        out.append(SampleLocation(lat=lat, lon=lon, city_id=city_id,
                                  kind=LocationKind.disk))
    return out


def make_grid(bbox, spacing_m, mask=None, city_id=""):
    """Axis-aligned lattice over a bbox, anchored at the southwest corner.

    Longitude spacing is widened by 1/cos(mean latitude) so east-west
    ground distance stays near spacing_m.
    """
    lat_min, lon_min, lat_max, lon_max = bbox
    _check_latlon(lat_min, lon_min)
    _check_latlon(lat_max, lon_max)
    if lat_max < lat_min or lon_max < lon_min:
        raise GeoError("bbox max must not be below min")
    if spacing_m <= 0:
        raise GeoError(f"grid spacing must be positive, got {spacing_m}")
    mask = mask or WaterMask()

    dlat = spacing_m / METERS_PER_DEG_LAT
    mean_lat = 0.5 * (lat_min + lat_max)
    cos_lat = max(1e-9, math.cos(math.radians(mean_lat)))
    dlon = dlat / cos_lat

    n_lat = int(math.floor((lat_max - lat_min) / dlat + 1e-9)) + 1
    n_lon = int(math.floor((lon_max - lon_min) / dlon + 1e-9)) + 1

    out = []
    for i in range(n_lat):
        lat = lat_min + i * dlat
        for j in range(n_lon):
            lon = lon_min + j * dlon
            if mask.contains(lat, lon):
                continue
            out.append(SampleLocation(lat=lat, lon=lon, city_id=city_id,
                                      kind=LocationKind.grid))
    return out


CITIES_HEADER = ["id", "name", "country", "lat", "lon", "population"]
LOCATIONS_HEADER = ["city_id", "kind", "lat", "lon"]


def load_cities(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(CITIES_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise GeoError(f"cities file missing columns: {sorted(missing)}")
        return [CityRecord(id=row["id"], name=row["name"], country=row["country"],
                           lat=float(row["lat"]), lon=float(row["lon"]),
                           population=int(row["population"]))
                for row in reader]


def save_locations(path, locations):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOCATIONS_HEADER)
        for loc in locations:
            w.writerow([loc.city_id, loc.kind.value,
                        repr(loc.lat), repr(loc.lon)])


def load_locations(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [SampleLocation(lat=float(row["lat"]), lon=float(row["lon"]),
                               city_id=row["city_id"],
                               kind=LocationKind(row["kind"]))
                for row in reader]
