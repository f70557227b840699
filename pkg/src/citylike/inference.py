"""Scoring evaluation-grid imagery with a trained model and aggregating
the results into likeness reports and top-K tables."""

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import center_crop, normalize
from .geo import SampleLocation
from .network import InceptionNet, _topk_hits  # noqa: F401 (topk used in tests)


class InferenceError(Exception):
    pass


class ContaminationError(InferenceError):
    """The evaluation city appears in the model's training classes."""


@dataclass
class PredictionRecord:
    location: SampleLocation
    predicted_city_id: str
    probability: float
    passes_filter: bool


@dataclass
class LikenessReport:
    target_city_id: str
    matches_unfiltered: int
    matches_filtered: int
    evaluated: int
    pct_unfiltered: float
    pct_filtered: float
    threshold: float


@dataclass
class TopKTable:
    rows: list  # (predicted_city_id, share_percent) descending by share
    evaluated: int
    k: int


def round2(x):
    """Round half-up to 2 decimals (report convention)."""
    import decimal
    return float(decimal.Decimal(str(x)).quantize(decimal.Decimal("0.01"),
                                                  rounding=decimal.ROUND_HALF_UP))


def predict(checkpoint, items, threshold=0.5, batch_size=64,
            evaluation_city_id=None):
    """One PredictionRecord per (SampleLocation, RasterImage) pair.

    items may also contain (location, None) entries for grid points without
    imagery; those are omitted from the records but contribute to the
    skipped count. Returns (records, skipped).
    """
    class_ids = sorted(checkpoint.arch_class_index) \
        if hasattr(checkpoint, "arch_class_index") else None
    if class_ids is None:
        raise InferenceError("checkpoint lacks a class index; "
                             "attach one with attach_class_index()")
    if evaluation_city_id is not None and evaluation_city_id in class_ids:
        raise ContaminationError(
            f"evaluation city {evaluation_city_id!r} is among the model's "
            "training classes")
    net = InceptionNet(checkpoint.arch)
    size = checkpoint.arch.input_size
    records = []
    skipped = 0
    present = [(loc, img) for loc, img in items if img is not None]
    skipped = len(items) - len(present)
    for start in range(0, len(present), batch_size):
        chunk = present[start:start + batch_size]
        x = np.stack([normalize(center_crop(img, out=size)) for _, img in chunk])
        probs, _, _ = net.forward(checkpoint.params, checkpoint.stats, x,
                                  train=False)
        # Ties break toward the lower class index via stable argsort.
        best = np.argsort(-probs, axis=1, kind="stable")[:, 0]
        for (loc, _), cls, row in zip(chunk, best, probs):
            p = float(row[cls])
            records.append(PredictionRecord(
                location=loc, predicted_city_id=class_ids[int(cls)],
                probability=p, passes_filter=p >= threshold))
    return records, skipped


def attach_class_index(checkpoint, class_index):
    """Bind the manifest's city_id -> label map to a loaded checkpoint."""
    ordered = sorted(class_index, key=lambda cid: class_index[cid])
    if list(range(len(ordered))) != sorted(class_index.values()):
        raise InferenceError("class index labels must be contiguous from 0")
    if len(ordered) != checkpoint.arch.num_classes:
        raise InferenceError(
            f"class index has {len(ordered)} cities but the model has "
            f"{checkpoint.arch.num_classes} classes")
    checkpoint.arch_class_index = {cid: i for i, cid in enumerate(ordered)}
    return checkpoint


def likeness(records, target_city_id, threshold=0.5, evaluated=None):
    """Counts and percentages of records predicted as the target city."""
    evaluated = len(records) if evaluated is None else evaluated
    if evaluated <= 0:
        raise InferenceError("cannot compute percentages with zero "
                             "evaluated locations")
    unfiltered = sum(1 for r in records if r.predicted_city_id == target_city_id)
    filtered = sum(1 for r in records
                   if r.predicted_city_id == target_city_id
                   and r.probability >= threshold)
    return LikenessReport(
        target_city_id=target_city_id,
        matches_unfiltered=unfiltered,
        matches_filtered=filtered,
        evaluated=evaluated,
        pct_unfiltered=round2(100.0 * unfiltered / evaluated),
        pct_filtered=round2(100.0 * filtered / evaluated),
        threshold=threshold)


def topk_table(records, k=20, threshold=0.5, evaluated=None):
    """Top-k predicted cities by filtered share of evaluated locations."""
    if not records:
        raise InferenceError("topk_table needs at least one record")
    evaluated = len(records) if evaluated is None else evaluated
    tallies = {}
    for r in records:
        if r.probability >= threshold:
            tallies[r.predicted_city_id] = tallies.get(r.predicted_city_id, 0) + 1
    ranked = sorted(tallies.items(), key=lambda kv: (-kv[1], kv[0]))
    rows = [(cid, round2(100.0 * count / evaluated)) for cid, count in ranked[:k]]
    return TopKTable(rows=rows, evaluated=evaluated, k=k)


RECORDS_HEADER = ["lat", "lon", "predicted_city_id", "probability", "passes_filter"]


def save_records(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RECORDS_HEADER)
        for r in records:
            w.writerow([repr(r.location.lat), repr(r.location.lon),
                        r.predicted_city_id, repr(r.probability),
                        str(r.passes_filter).lower()])


def load_records(path, city_id=""):
    from .geo import LocationKind
    with open(path, newline="") as f:
        out = []
        for row in csv.DictReader(f):
            out.append(PredictionRecord(
                location=SampleLocation(lat=float(row["lat"]),
                                        lon=float(row["lon"]),
                                        city_id=city_id,
                                        kind=LocationKind.grid),
                predicted_city_id=row["predicted_city_id"],
                probability=float(row["probability"]),
                passes_filter=row["passes_filter"] == "true"))
    return out
