"""HTTP service exposing the geodesy, imagery, segmentation, inference,
and rendering operations over JSON. Images travel base64-encoded; map
renders come back as PNG bodies."""

import base64
import io
import json
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from PIL import Image
from pydantic import BaseModel, Field

from . import geo, imagery, inference, rendering
from .network import Checkpoint
from .segmentation import SegmentationParams, segment


class LatLon(BaseModel):
    lat: float = Field(ge=-90, le=90)
    lon: float = Field(ge=-180, le=180)


class RadiusRequest(BaseModel):
    population: int = Field(ge=1)


class RadiusResponse(BaseModel):
    radius_km: float


class HaversineRequest(BaseModel):
    a: LatLon
    b: LatLon


class HaversineResponse(BaseModel):
    distance_km: float


class SampleDiskRequest(BaseModel):
    center: LatLon
    radius_km: float = Field(gt=0)
    n: int = Field(ge=0, le=100_000)
    seed: int = 0
    city_id: str = ""


class LocationOut(BaseModel):
    lat: float
    lon: float
    city_id: str
    kind: str


class SampleDiskResponse(BaseModel):
    locations: List[LocationOut]


class GridRequest(BaseModel):
    bbox: List[float] = Field(min_length=4, max_length=4)
    spacing_m: float = Field(gt=0)
    city_id: str = ""


class SynthRequest(BaseModel):
    style_id: str
    source: str = "map"
    lat: float = 0.0
    lon: float = 0.0
    seed: int = 0
    heading: int = Field(default=0, ge=0, le=359)


class ImagePayload(BaseModel):
    png_base64: str


class SegmentRequest(ImagePayload):
    spatial_radius: float = 6.0
    range_radius: float = 4.5
    min_density: int = 50


class SegmentResponse(BaseModel):
    png_base64: str
    region_count: int


class PredictItem(BaseModel):
    location: LatLon
    png_base64: str


class PredictRequest(BaseModel):
    items: List[PredictItem]
    threshold: float = 0.5


class RecordOut(BaseModel):
    lat: float
    lon: float
    predicted_city_id: str
    probability: float
    passes_filter: bool


class PredictResponse(BaseModel):
    records: List[RecordOut]


class RecordIn(BaseModel):
    lat: float
    lon: float
    predicted_city_id: str
    probability: float = Field(ge=0, le=1)


class LikenessRequest(BaseModel):
    records: List[RecordIn]
    target_city_id: str
    threshold: float = 0.5


class LikenessResponse(BaseModel):
    target_city_id: str
    matches_unfiltered: int
    matches_filtered: int
    evaluated: int
    pct_unfiltered: float
    pct_filtered: float


class TopKRequest(BaseModel):
    records: List[RecordIn]
    k: int = 20
    threshold: float = 0.5


class TopKRow(BaseModel):
    city_id: str
    share_percent: float


class TopKResponse(BaseModel):
    rows: List[TopKRow]
    evaluated: int


class CityIn(BaseModel):
    id: str
    name: str = ""
    country: str = ""
    lat: float
    lon: float
    population: int = 1


class ColorResponse(BaseModel):
    r: int
    g: int
    b: int


class MapRequest(BaseModel):
    records: List[RecordIn]
    cities: List[CityIn]
    bbox: List[float] = Field(min_length=4, max_length=4)
    target_city_id: Optional[str] = None
    threshold: float = 0.5


def _decode_image(b64):
    try:
        data = base64.b64decode(b64)
        with Image.open(io.BytesIO(data)) as im:
            return imagery.RasterImage(np.asarray(im.convert("RGB")))
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"bad image: {exc}") from exc


def _encode_image(img):
    return base64.b64encode(img.to_png_bytes()).decode()


def _to_records(rows, threshold):
    return [inference.PredictionRecord(
        location=geo.SampleLocation(lat=r.lat, lon=r.lon, city_id="",
                                    kind=geo.LocationKind.grid),
        predicted_city_id=r.predicted_city_id,
        probability=r.probability,
        passes_filter=r.probability >= threshold) for r in rows]


def create_app(checkpoint_path=None, class_index_path=None, styles_path=None):
    app = FastAPI(title="citylike", version="0.1.0")
    app.state.checkpoint = None
    app.state.styles = {}
    if checkpoint_path:
        ckpt = Checkpoint.load(checkpoint_path)
        if class_index_path:
            with open(class_index_path) as f:
                inference.attach_class_index(ckpt, json.load(f))
        app.state.checkpoint = ckpt
    if styles_path:
        app.state.styles = imagery.load_styles(styles_path)

    @app.get("/health")
    def health():
        return {"status": "ok",
                "model_loaded": app.state.checkpoint is not None}

    @app.post("/geo/radius", response_model=RadiusResponse)
    def radius(req: RadiusRequest):
        return RadiusResponse(radius_km=geo.radius_for_population(req.population))

    @app.post("/geo/haversine", response_model=HaversineResponse)
    def haversine(req: HaversineRequest):
        d = geo.haversine_km((req.a.lat, req.a.lon), (req.b.lat, req.b.lon))
        return HaversineResponse(distance_km=d)

    @app.post("/geo/sample-disk", response_model=SampleDiskResponse)
    def sample_disk(req: SampleDiskRequest):
        locs = geo.sample_disk((req.center.lat, req.center.lon), req.radius_km,
                               req.n, seed=req.seed, city_id=req.city_id)
        return SampleDiskResponse(locations=[
            LocationOut(lat=l.lat, lon=l.lon, city_id=l.city_id,
                        kind=l.kind.value) for l in locs])

    @app.post("/geo/grid", response_model=SampleDiskResponse)
    def grid(req: GridRequest):
        try:
            locs = geo.make_grid(tuple(req.bbox), req.spacing_m,
                                 city_id=req.city_id)
        except geo.GeoError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return SampleDiskResponse(locations=[
            LocationOut(lat=l.lat, lon=l.lon, city_id=l.city_id,
                        kind=l.kind.value) for l in locs])

    @app.post("/imagery/synth", response_model=ImagePayload)
    def synth(req: SynthRequest):
        style = app.state.styles.get(req.style_id)
        if style is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown style {req.style_id!r}")
        loc = geo.SampleLocation(lat=req.lat, lon=req.lon, city_id=req.style_id,
                                 kind=geo.LocationKind.disk)
        img = imagery.synth_city_image(style, loc, req.source, seed=req.seed,
                                       heading=req.heading)
        return ImagePayload(png_base64=_encode_image(img))

    @app.post("/segment", response_model=SegmentResponse)
    def segment_endpoint(req: SegmentRequest):
        img = _decode_image(req.png_base64)
        params = SegmentationParams(spatial_radius=req.spatial_radius,
                                    range_radius=req.range_radius,
                                    min_density=req.min_density)
        seg = segment(img, params)
        return SegmentResponse(png_base64=_encode_image(seg.image),
                               region_count=seg.region_count)

    @app.post("/predict", response_model=PredictResponse)
    def predict_endpoint(req: PredictRequest):
        ckpt = app.state.checkpoint
        if ckpt is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        items = [(geo.SampleLocation(lat=it.location.lat, lon=it.location.lon,
                                     city_id="", kind=geo.LocationKind.grid),
                  _decode_image(it.png_base64)) for it in req.items]
        records, _ = inference.predict(ckpt, items, threshold=req.threshold)
        return PredictResponse(records=[
            RecordOut(lat=r.location.lat, lon=r.location.lon,
                      predicted_city_id=r.predicted_city_id,
                      probability=r.probability,
                      passes_filter=r.passes_filter) for r in records])

    @app.post("/report/likeness", response_model=LikenessResponse)
    def likeness_endpoint(req: LikenessRequest):
        records = _to_records(req.records, req.threshold)
        if not records:
            raise HTTPException(status_code=422, detail="no records supplied")
        rep = inference.likeness(records, req.target_city_id,
                                 threshold=req.threshold)
        return LikenessResponse(target_city_id=rep.target_city_id,
                                matches_unfiltered=rep.matches_unfiltered,
                                matches_filtered=rep.matches_filtered,
                                evaluated=rep.evaluated,
                                pct_unfiltered=rep.pct_unfiltered,
                                pct_filtered=rep.pct_filtered)

    @app.post("/report/topk", response_model=TopKResponse)
    def topk_endpoint(req: TopKRequest):
        records = _to_records(req.records, req.threshold)
        if not records:
            raise HTTPException(status_code=422, detail="no records supplied")
        table = inference.topk_table(records, k=req.k, threshold=req.threshold)
        return TopKResponse(rows=[TopKRow(city_id=c, share_percent=s)
                                  for c, s in table.rows],
                            evaluated=table.evaluated)

    @app.post("/render/city-color", response_model=ColorResponse)
    def color_endpoint(city: CityIn):
        r, g, b = rendering.city_color(geo.CityRecord(
            id=city.id, name=city.name, country=city.country,
            lat=city.lat, lon=city.lon, population=city.population))
        return ColorResponse(r=r, g=g, b=b)

    @app.post("/render/map")
    def map_endpoint(req: MapRequest):
        records = _to_records(req.records, req.threshold)
        cities = [geo.CityRecord(id=c.id, name=c.name, country=c.country,
                                 lat=c.lat, lon=c.lon, population=c.population)
                  for c in req.cities]
        try:
            canvas = rendering.MapCanvas(bbox=tuple(req.bbox))
        except rendering.RenderingError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        png, _ = rendering.render_prediction_map(records, cities, canvas,
                                                 target_city_id=req.target_city_id)
        return Response(content=png, media_type="image/png")

    return app
