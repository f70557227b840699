import numpy as np
import pytest

from citylike.geo import LocationKind, SampleLocation
from citylike.imagery import RasterImage, StyleSpec
from citylike.network import ArchitectureConfig, InceptionBlockSpec


@pytest.fixture
def toy_arch():
    """Two-block toy network small enough for finite-difference checks."""
    return ArchitectureConfig(
        num_classes=4, input_size=8, stem_channels=4,
        blocks=(InceptionBlockSpec(b1=3, b3_reduce=2, b3=3, b5_reduce=2,
                                   b5=2, pool_proj=2),
                InceptionBlockSpec(b1=3, b3_reduce=2, b3=3, b5_reduce=2,
                                   b5=2, pool_proj=2)),
        dropout_rate=0.0)


@pytest.fixture
def bench_arch():
    """Config used for the synthetic 10-style training benchmark."""
    return ArchitectureConfig(
        num_classes=10, input_size=56, stem_channels=16,
        blocks=(InceptionBlockSpec(b1=8, b3_reduce=8, b3=12, b5_reduce=6,
                                   b5=6, pool_proj=6, pool_after=True),
                InceptionBlockSpec(b1=12, b3_reduce=8, b3=16, b5_reduce=6,
                                   b5=8, pool_proj=12)),
        dropout_rate=0.2)


@pytest.fixture
def somewhere():
    return SampleLocation(lat=1.5, lon=2.5, city_id="test", kind=LocationKind.disk)


@pytest.fixture
def mixed_image():
    rng = np.random.default_rng(42)
    return RasterImage(rng.integers(0, 256, (64, 64, 3)).astype(np.uint8))


def make_styles(n):
    return [StyleSpec(style_id=f"s{i}", block_size_m=60 + i * 25,
                      road_angle=(i * 17) % 90, green_fraction=(i % 5) * 0.1,
                      water_fraction=(i % 3) * 0.15,
                      transit_density=0.1 + 0.08 * i)
            for i in range(n)]
