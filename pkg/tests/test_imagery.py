import numpy as np
import pytest

from citylike import imagery
from citylike.geo import CityRecord, LocationKind, SampleLocation
from citylike.imagery import (ImageCache, ImageryRequest, ImageSource,
                              NoImageryError, ProviderUnavailableError,
                              RasterImage, ResamplingExhaustedError,
                              StyleSpec, SyntheticProvider, fetch_image,
                              quality_check, sample_with_replacement,
                              synth_city_image)


def style(**kwargs):
    return StyleSpec(style_id=kwargs.pop("style_id", "s"), **kwargs)


class TestRasterImage:
    def test_shape_validation(self):
        with pytest.raises(imagery.ImageryError):
            RasterImage(np.zeros((8, 8), dtype=np.uint8))

    def test_png_roundtrip(self, tmp_path, mixed_image):
        path = tmp_path / "img.png"
        mixed_image.save(str(path))
        loaded = RasterImage.load(str(path))
        assert np.array_equal(loaded.pixels, mixed_image.pixels)


class TestSynthCityImage:
    def test_deterministic(self, somewhere):
        a = synth_city_image(style(), somewhere, "map", seed=3)
        b = synth_city_image(style(), somewhere, "map", seed=3)
        assert a.to_png_bytes() == b.to_png_bytes()

    def test_zero_green(self, somewhere):
        img = synth_city_image(style(green_fraction=0.0), somewhere, "map")
        green = np.array(imagery.DEFAULT_PALETTE["green"])
        assert np.all(img.pixels == green, axis=2).sum() == 0

    def test_all_water(self, somewhere):
        img = synth_city_image(style(water_fraction=1.0), somewhere, "map")
        assert np.all(img.pixels == np.array(imagery.DEFAULT_PALETTE["water"]))

    @pytest.mark.parametrize("source", ["map", "satellite", "streetview"])
    def test_green_share_tracks_style(self, somewhere, source):
        img = synth_city_image(style(green_fraction=0.3), somewhere, source)
        green = np.array(imagery.DEFAULT_PALETTE["green"])
        share = np.all(img.pixels == green, axis=2).mean()
        assert 0.25 <= share <= 0.35

    def test_sources_render_distinct(self, somewhere):
        s = style(green_fraction=0.2, water_fraction=0.1)
        tiles = [synth_city_image(s, somewhere, src).pixels
                 for src in ("map", "satellite", "streetview")]
        assert not np.array_equal(tiles[0], tiles[1])
        assert not np.array_equal(tiles[0], tiles[2])
        assert not np.array_equal(tiles[1], tiles[2])

    def test_default_dimensions(self, somewhere):
        img = synth_city_image(style(), somewhere, "map")
        assert (img.height, img.width) == (256, 256)


class TestQualityCheck:
    def test_all_black_unusable(self):
        assert quality_check(RasterImage(np.zeros((32, 32, 3), np.uint8))) == "unusable"

    def test_synthetic_tile_ok(self, somewhere):
        img = synth_city_image(style(green_fraction=0.2), somewhere, "map")
        assert quality_check(img) == "ok"

    def test_dominant_color_unusable(self):
        rng = np.random.default_rng(0)
        px = np.full((100, 100, 3), 200, np.uint8)
        noise = rng.integers(0, 256, (100, 3)).astype(np.uint8)
        idx = rng.choice(100 * 100, 100, replace=False)
        px.reshape(-1, 3)[idx] = noise  # 99% one color, 1% noise
        assert quality_check(RasterImage(px)) == "unusable"

    def test_two_tone_ok(self):
        px = np.zeros((32, 32, 3), np.uint8)
        px[:, 16:] = 255
        assert quality_check(RasterImage(px)) == "ok"


class TestFetchAndCache:
    def test_cache_roundtrip(self, tmp_path, somewhere):
        provider = SyntheticProvider({"test": style(style_id="test")})
        cache = ImageCache(str(tmp_path / "cache"))
        request = ImageryRequest(location=somewhere, source=ImageSource.map)
        first = fetch_image(provider, request, cache=cache)
        second = fetch_image(provider, request, cache=cache)
        assert first.to_png_bytes() == second.to_png_bytes()
        assert (tmp_path / "cache" / "map").exists()

    def test_remote_failure_after_retries(self, somewhere, tmp_path):
        class FailingClient:
            calls = 0

            def get(self, url, params=None):
                FailingClient.calls += 1
                import httpx
                raise httpx.ConnectError("down")

        provider = imagery.RemoteProvider("http://example.invalid/tiles",
                                          rate_limit_rps=0, retries=3,
                                          client=FailingClient())
        cache = ImageCache(str(tmp_path / "cache"))
        request = ImageryRequest(location=somewhere, source=ImageSource.map)
        with pytest.raises(ProviderUnavailableError):
            fetch_image(provider, request, cache=cache)
        assert FailingClient.calls == 3
        assert cache.get(request) is None

    def test_remote_404_means_no_imagery(self, somewhere):
        class NotFoundClient:
            def get(self, url, params=None):
                class R:
                    status_code = 404
                    content = b""
                return R()

        provider = imagery.RemoteProvider("http://example.invalid/tiles",
                                          rate_limit_rps=0, client=NotFoundClient())
        request = ImageryRequest(location=somewhere, source=ImageSource.streetview)
        with pytest.raises(NoImageryError):
            provider.get(request)

    def test_heading_range_validated(self, somewhere):
        with pytest.raises(imagery.ImageryError):
            ImageryRequest(location=somewhere, heading=360)


def ok_tile(seed=0):
    rng = np.random.default_rng(seed)
    return RasterImage(rng.integers(30, 256, (16, 16, 3)).astype(np.uint8))


class RecordingProvider:
    """Returns a canned usable image; records requests."""

    def __init__(self, unusable_every=None):
        self.requests = []
        self.unusable_every = unusable_every
        self._tile = ok_tile()
        self._dark = RasterImage(np.zeros((16, 16, 3), np.uint8))

    def get(self, request):
        self.requests.append(request)
        if self.unusable_every and len(self.requests) % self.unusable_every == 0:
            return self._dark
        return self._tile


CITY = CityRecord(id="testcity", name="Test", country="TST", lat=10.0,
                  lon=20.0, population=500_000)


class TestSampleWithReplacement:
    def test_zero(self):
        provider = RecordingProvider()
        pairs, _ = sample_with_replacement(provider, CITY, 0, size=16)
        assert pairs == []

    def test_exact_count(self):
        provider = RecordingProvider()
        pairs, attempts = sample_with_replacement(provider, CITY, 50, size=16)
        assert len(pairs) == 50
        assert attempts == 50

    def test_resampling_replaces_unusable(self):
        # Provider alternates usable/unusable: expect ~2n attempts.
        provider = RecordingProvider(unusable_every=2)
        pairs, attempts = sample_with_replacement(provider, CITY, 100, size=16,
                                                  seed=1)
        assert len(pairs) == 100
        # Binomial(n=attempts, p=0.5) within 3 sigma of 200.
        assert abs(attempts - 200) <= 3 * np.sqrt(200 * 0.5) + 2

    def test_budget_exhaustion(self):
        class AlwaysDark:
            def get(self, request):
                return RasterImage(np.zeros((16, 16, 3), np.uint8))

        with pytest.raises(ResamplingExhaustedError):
            sample_with_replacement(AlwaysDark(), CITY, 5, size=16)

    def test_streetview_headings_seeded_uniform(self):
        from scipy.stats import chisquare
        provider = RecordingProvider()
        sample_with_replacement(provider, CITY, 10_000, source="streetview",
                                size=16, seed=3)
        headings = [r.heading for r in provider.requests]
        bins = np.bincount(np.array(headings) // 10, minlength=36)
        assert chisquare(bins).pvalue > 0.001

    def test_deterministic_locations(self):
        p1, p2 = RecordingProvider(), RecordingProvider()
        a, _ = sample_with_replacement(p1, CITY, 20, size=16, seed=5)
        b, _ = sample_with_replacement(p2, CITY, 20, size=16, seed=5)
        assert [(l.lat, l.lon) for l, _ in a] == [(l.lat, l.lon) for l, _ in b]


class TestStyles:
    def test_fraction_validation(self):
        with pytest.raises(imagery.ImageryError):
            StyleSpec(style_id="x", green_fraction=1.5)

    def test_styles_file(self, tmp_path):
        import json
        path = tmp_path / "styles.json"
        path.write_text(json.dumps({"styles": [
            {"style_id": "a", "green_fraction": 0.2},
            {"style_id": "b", "palette": {"road": [0, 0, 0],
                                          "transit": [255, 140, 0],
                                          "green": [70, 160, 60],
                                          "water": [90, 150, 230],
                                          "background": [240, 240, 240]}}]}))
        styles = imagery.load_styles(str(path))
        assert set(styles) == {"a", "b"}
        assert styles["b"].palette["background"] == (240, 240, 240)
