"""PNG output: the latitude/longitude city color scheme, prediction maps
with target-city markers, and image galleries."""

import colorsys
import csv
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .imagery import RasterImage


class RenderingError(Exception):
    pass


@dataclass(frozen=True)
class MapCanvas:
    width: int = 800
    height: int = 800
    bbox: tuple = (-90.0, -180.0, 90.0, 180.0)  # lat_min, lon_min, lat_max, lon_max
    dot_radius: int = 3
    marker_radius: int = 8
    background: tuple = (255, 255, 255)

    def __post_init__(self):
        lat_min, lon_min, lat_max, lon_max = self.bbox
        if lat_max <= lat_min or lon_max <= lon_min:
            raise RenderingError(f"degenerate bbox: {self.bbox}")

    def project(self, lat, lon):
        """Equirectangular placement; returns (x, y) or None outside bbox."""
        lat_min, lon_min, lat_max, lon_max = self.bbox
        if not (lat_min <= lat <= lat_max and lon_min <= lon <= lon_max):
            return None
        x = (lon - lon_min) / (lon_max - lon_min) * (self.width - 1)
        y = (lat_max - lat) / (lat_max - lat_min) * (self.height - 1)
        return x, y


def city_color(city):
    """Deterministic RGB from the city's centroid.

    Hue tracks longitude, brightness tracks latitude, saturation fixed.
    """
    hue = (city.lon + 180.0) / 360.0
    value = 0.35 + 0.60 * (city.lat + 90.0) / 180.0
    r, g, b = colorsys.hsv_to_rgb(hue % 1.0, 0.8, value)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def write_legend(path, cities):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["city_id", "name", "r", "g", "b"])
        for city in sorted(cities, key=lambda c: c.id):
            r, g, b = city_color(city)
            w.writerow([city.id, city.name, r, g, b])


def _star(draw, cx, cy, radius, fill):
    pts = []
    for i in range(10):
        ang = -np.pi / 2 + i * np.pi / 5
        r = radius if i % 2 == 0 else radius * 0.4
        pts.append((cx + r * np.cos(ang), cy + r * np.sin(ang)))
    draw.polygon(pts, fill=fill)


def render_prediction_map(records, cities, canvas=MapCanvas(), target_city_id=None):
    """One colored dot per filtered record; target-city matches get a black
    star. Returns (png_bytes, warnings) where warnings counts skipped
    out-of-bbox records."""
    color_by_id = {c.id: city_color(c) for c in cities}
    im = Image.new("RGB", (canvas.width, canvas.height), canvas.background)
    draw = ImageDraw.Draw(im)
    skipped = 0
    markers = []
    for rec in records:
        if not rec.passes_filter:
            continue
        pos = canvas.project(rec.location.lat, rec.location.lon)
        if pos is None:
            skipped += 1
            continue
        x, y = pos
        color = color_by_id.get(rec.predicted_city_id, (128, 128, 128))
        r = canvas.dot_radius
        draw.ellipse([x - r, y - r, x + r, y + r], fill=color)
        if target_city_id is not None and rec.predicted_city_id == target_city_id:
            markers.append((x, y))
    for x, y in markers:
        _star(draw, x, y, canvas.marker_radius, (0, 0, 0))
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue(), {"skipped_outside_bbox": skipped,
                            "markers_drawn": len(markers)}


def render_gallery(images, columns=3, gutter=4, background=(255, 255, 255)):
    """Row-major montage with a uniform gutter; all tiles must match in size."""
    if not images:
        raise RenderingError("gallery needs at least one image")
    w, h = images[0].width, images[0].height
    for img in images:
        if img.width != w or img.height != h:
            raise RenderingError(
                f"mixed tile sizes: expected {w}x{h}, got {img.width}x{img.height}")
    columns = min(columns, len(images))
    rows = (len(images) + columns - 1) // columns
    total_w = columns * w + (columns + 1) * gutter
    total_h = rows * h + (rows + 1) * gutter
    out = Image.new("RGB", (total_w, total_h), background)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        x = gutter + c * (w + gutter)
        y = gutter + r * (h + gutter)
        out.paste(Image.fromarray(img.pixels, mode="RGB"), (x, y))
    buf = io.BytesIO()
    out.save(buf, format="PNG")
    return buf.getvalue()


def gallery_cell_origin(index, columns, tile_w, tile_h, gutter=4):
    r, c = divmod(index, columns)
    return (gutter + c * (tile_w + gutter), gutter + r * (tile_h + gutter))
