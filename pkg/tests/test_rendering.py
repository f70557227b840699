import colorsys
import io

import numpy as np
import pytest
from PIL import Image

from citylike.geo import CityRecord, LocationKind, SampleLocation
from citylike.imagery import RasterImage
from citylike.inference import PredictionRecord
from citylike.rendering import (MapCanvas, RenderingError, city_color,
                                gallery_cell_origin, render_gallery,
                                render_prediction_map, write_legend)


def city_at(lat, lon, cid="c"):
    return CityRecord(id=cid, name=cid.title(), country="TST", lat=lat,
                      lon=lon, population=500_000)


def rec(cid, lat, lon, prob=0.9):
    return PredictionRecord(
        location=SampleLocation(lat=lat, lon=lon, city_id="eval",
                                kind=LocationKind.grid),
        predicted_city_id=cid, probability=prob, passes_filter=prob >= 0.5)


class TestCityColor:
    def test_formula_endpoints(self):
        # lon -180 -> hue 0; lat -90 -> value 0.35; lat 90 -> value 0.95.
        r, g, b = city_color(city_at(-90.0, -180.0))
        er, eg, eb = [int(round(v * 255))
                      for v in colorsys.hsv_to_rgb(0.0, 0.8, 0.35)]
        assert (r, g, b) == (er, eg, eb)
        r2, _, _ = city_color(city_at(90.0, -180.0))
        assert r2 == int(round(0.95 * 255))

    def test_matches_direct_hsv(self):
        city = city_at(12.5, 37.25)
        hue = (37.25 + 180) / 360
        value = 0.35 + 0.60 * (12.5 + 90) / 180
        expected = tuple(int(round(v * 255))
                         for v in colorsys.hsv_to_rgb(hue, 0.8, value))
        assert city_color(city) == expected

    def test_distinct_over_spread_centroids(self):
        rng = np.random.default_rng(11)
        cities = [city_at(float(rng.uniform(-60, 60)),
                          float(rng.uniform(-180, 180)), cid=f"c{i}")
                  for i in range(200)]
        colors = {city_color(c) for c in cities}
        assert len(colors) >= 0.99 * len(cities)

    def test_deterministic(self):
        c = city_at(-37.8136, 144.9631)
        assert city_color(c) == city_color(c)

    def test_legend_rows(self, tmp_path):
        cities = [city_at(10, 20, "bbb"), city_at(-5, 5, "aaa")]
        path = str(tmp_path / "legend.csv")
        write_legend(path, cities)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "city_id,name,r,g,b"
        assert lines[1].startswith("aaa,")  # sorted by id
        r, g, b = map(int, lines[2].split(",")[2:])
        assert (r, g, b) == city_color(cities[0])


class TestPredictionMap:
    CANVAS = MapCanvas(width=200, height=100, bbox=(-10.0, -10.0, 10.0, 10.0))

    def test_blank_canvas_dimensions(self):
        png, warnings = render_prediction_map([], [], canvas=self.CANVAS)
        im = Image.open(io.BytesIO(png))
        assert im.size == (200, 100)
        assert warnings == {"skipped_outside_bbox": 0, "markers_drawn": 0}
        assert np.all(np.asarray(im) == 255)

    def test_marker_count_equals_filtered_target_matches(self):
        cities = [city_at(0, 0, "aaa"), city_at(5, 5, "bbb")]
        records = ([rec("aaa", 1, 1), rec("aaa", 2, 2), rec("aaa", 3, 3, prob=0.1),
                    rec("bbb", -1, -1)])
        _, warnings = render_prediction_map(records, cities, canvas=self.CANVAS,
                                            target_city_id="aaa")
        assert warnings["markers_drawn"] == 2

    def test_out_of_bbox_skipped(self):
        records = [rec("aaa", 50.0, 0.0), rec("aaa", 0.0, 0.0)]
        png, warnings = render_prediction_map(records, [city_at(0, 0, "aaa")],
                                              canvas=self.CANVAS)
        assert warnings["skipped_outside_bbox"] == 1

    def test_dot_painted_with_city_color(self):
        city = city_at(0, 0, "aaa")
        png, _ = render_prediction_map([rec("aaa", 0.0, 0.0)], [city],
                                       canvas=self.CANVAS)
        arr = np.asarray(Image.open(io.BytesIO(png)))
        # Center of the canvas gets the dot.
        assert tuple(arr[49, 99]) == city_color(city) or \
            tuple(arr[50, 100]) == city_color(city)

    def test_byte_identical_rerender(self):
        cities = [city_at(0, 0, "aaa"), city_at(5, 5, "bbb")]
        records = [rec("aaa", i * 0.5 - 4, i * 0.4 - 3) for i in range(20)] \
            + [rec("bbb", -i * 0.3, i * 0.2) for i in range(20)]
        a, _ = render_prediction_map(records, cities, canvas=self.CANVAS,
                                     target_city_id="aaa")
        b, _ = render_prediction_map(records, cities, canvas=self.CANVAS,
                                     target_city_id="aaa")
        assert a == b

    def test_degenerate_bbox_rejected(self):
        with pytest.raises(RenderingError):
            MapCanvas(bbox=(5.0, 0.0, 5.0, 10.0))


class TestGallery:
    def tiles(self, n, w=20, h=10):
        rng = np.random.default_rng(n)
        return [RasterImage(rng.integers(0, 256, (h, w, 3)).astype(np.uint8))
                for _ in range(n)]

    def test_six_images_three_columns(self):
        png = render_gallery(self.tiles(6), columns=3)
        im = Image.open(io.BytesIO(png))
        # 3 cols x 2 rows with 4px gutters on all sides and between tiles.
        assert im.size == (3 * 20 + 4 * 4, 2 * 10 + 3 * 4)

    def test_single_image(self):
        png = render_gallery(self.tiles(1), columns=3)
        im = Image.open(io.BytesIO(png))
        assert im.size == (20 + 8, 10 + 8)

    def test_cell_origin_math(self):
        assert gallery_cell_origin(0, 3, 20, 10) == (4, 4)
        assert gallery_cell_origin(2, 3, 20, 10) == (4 + 2 * 24, 4)
        assert gallery_cell_origin(3, 3, 20, 10) == (4, 4 + 14)

    def test_tile_pixels_land_at_cell_origin(self):
        tiles = self.tiles(4)
        png = render_gallery(tiles, columns=2)
        arr = np.asarray(Image.open(io.BytesIO(png)))
        for i, tile in enumerate(tiles):
            x, y = gallery_cell_origin(i, 2, 20, 10)
            assert np.array_equal(arr[y:y + 10, x:x + 20], tile.pixels)

    def test_gutter_is_background(self):
        png = render_gallery(self.tiles(4), columns=2)
        arr = np.asarray(Image.open(io.BytesIO(png)))
        assert np.all(arr[:4, :] == 255)
        assert np.all(arr[:, :4] == 255)

    def test_mixed_sizes_rejected(self):
        tiles = self.tiles(2) + self.tiles(1, w=30)
        with pytest.raises(RenderingError, match="mixed"):
            render_gallery(tiles)

    def test_empty_rejected(self):
        with pytest.raises(RenderingError):
            render_gallery([])

    def test_byte_identical_rerender(self):
        tiles = self.tiles(5)
        assert render_gallery(tiles) == render_gallery(tiles)
