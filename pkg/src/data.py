# src/data.py
"""Radar frames, precipitation situations, sample windows and the synthetic advection generator.

Frames are H x W arrays in MLdBZ (8-bit dBZ scaled to [0, 1]). The first array
axis is x, the second is y, matching the kernel convention of derivative_ops.
"""
import glob
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from .config import DataConfig
from .errors import DataError, InfeasibleSplitError

logger = logging.getLogger(__name__)

DBZ_MAX = 60.0
BYTE_MAX = 255
RAINY_AREA_FRACTION = 0.07
HEAVY_DBZ = 24.0
HEAVY_AREA_FRACTION = 0.01
SITUATION_GAP = timedelta(hours=24)
FILENAME_FORMAT = "%Y%m%d%H%M"
ISO_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
SPLIT_NAMES = ("train", "validation", "test")


def _utc(ts) -> datetime:
    if isinstance(ts, pd.Timestamp):
        ts = ts.to_pydatetime()
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def frame_filename(ts: datetime) -> str:
    return _utc(ts).strftime(FILENAME_FORMAT) + ".png"


def format_timestamp(ts: datetime) -> str:
    return _utc(ts).strftime(ISO_FORMAT)


def parse_timestamp(text: str) -> datetime:
    return _utc(pd.Timestamp(text).to_pydatetime())


@dataclass(frozen=True)
class RadarFrame:
    timestamp: datetime
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamp", _utc(self.timestamp))
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DataError(f"A radar frame is a 2-D array, got shape {values.shape}")
        if values.size and (values.min() < 0 or values.max() > 1):
            raise DataError(f"MLdBZ values must lie in [0, 1], got [{values.min()}, {values.max()}]")
        object.__setattr__(self, "values", values)


# --- intensity scaling ---------------------------------------------------

def dbz_byte_to_mldbz(raw):
    """8-bit dBZ code (0..255 for 0..60 dBZ) to MLdBZ in [0, 1]."""
    arr = np.asarray(raw)
    if arr.size and (arr.min() < 0 or arr.max() > BYTE_MAX):
        raise DataError(f"8-bit values must lie in [0, {BYTE_MAX}]")
    out = arr.astype(np.float64) / BYTE_MAX
    return float(out) if out.ndim == 0 else out


def mldbz_to_dbz_byte(value):
    arr = np.clip(np.rint(np.asarray(value, dtype=np.float64) * BYTE_MAX), 0, BYTE_MAX).astype(np.uint8)
    return int(arr) if arr.ndim == 0 else arr


def mldbz_to_dbz(value):
    out = np.asarray(value, dtype=np.float64) * DBZ_MAX
    return float(out) if out.ndim == 0 else out


def is_rainy(frame) -> bool:
    """More than 7% of the area non-zero, or more than 1% above 24 dBZ."""
    values = frame.values if isinstance(frame, RadarFrame) else np.asarray(frame)
    if values.size == 0:
        return False
    nonzero = np.count_nonzero(values > 0) / values.size
    heavy = np.count_nonzero(values > HEAVY_DBZ / DBZ_MAX) / values.size
    return bool(nonzero > RAINY_AREA_FRACTION or heavy > HEAVY_AREA_FRACTION)


# --- situations and splits ----------------------------------------------

@dataclass(frozen=True)
class PrecipSituation:
    timestamps: Tuple[datetime, ...]

    @property
    def start(self) -> datetime:
        return self.timestamps[0]

    @property
    def end(self) -> datetime:
        return self.timestamps[-1]

    @property
    def hours(self) -> float:
        return (self.end - self.start).total_seconds() / 3600.0

    def __len__(self) -> int:
        return len(self.timestamps)


def split_situations(rainy_timestamps: Sequence[datetime], gap: timedelta = SITUATION_GAP) -> List[PrecipSituation]:
    """Greedy scan; a gap of at least 24 h between rainy frames starts a new situation."""
    stamps = [_utc(t) for t in rainy_timestamps]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise DataError("Rainy timestamps must be sorted and unique")
    situations: List[PrecipSituation] = []
    current: List[datetime] = []
    for ts in stamps:
        if current and ts - current[-1] >= gap:
            situations.append(PrecipSituation(tuple(current)))
            current = []
        current.append(ts)
    if current:
        situations.append(PrecipSituation(tuple(current)))
    return situations


def situation_stats(situations: Sequence[PrecipSituation]) -> Dict[str, float]:
    hours = [s.hours for s in situations]
    if not hours:
        return {"count": 0, "median_hours": 0.0, "mean_hours": 0.0}
    return {"count": len(hours), "median_hours": float(np.median(hours)), "mean_hours": float(np.mean(hours))}


def split_counts(n: int, ratios: Sequence[float]) -> Tuple[int, ...]:
    """Largest-remainder rounding of n * ratios; every non-zero ratio gets at least one item."""
    if abs(sum(ratios) - 1.0) > 1e-6 or any(r < 0 for r in ratios):
        raise DataError(f"Split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    nonzero = [i for i, r in enumerate(ratios) if r > 0]
    if n < len(nonzero):
        raise InfeasibleSplitError(f"{n} situations cannot fill {len(nonzero)} non-empty splits")

    exact = [n * r for r in ratios]
    counts = [math.floor(x + 1e-9) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1

    for i in nonzero:
        if counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return tuple(counts)


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[PrecipSituation, ...]
    validation: Tuple[PrecipSituation, ...]
    test: Tuple[PrecipSituation, ...]
    seed: int = 0
    ratios: Tuple[float, ...] = (0.72, 0.127, 0.153)

    def __post_init__(self):
        seen: Dict[datetime, str] = {}
        for name in SPLIT_NAMES:
            for situation in getattr(self, name):
                for ts in situation.timestamps:
                    if ts in seen and seen[ts] != name:
                        raise DataError(f"Frame {format_timestamp(ts)} appears in both {seen[ts]} and {name}")
                    seen[ts] = name

    def by_name(self, name: str) -> Tuple[PrecipSituation, ...]:
        if name not in SPLIT_NAMES:
            raise DataError(f"Unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def assign_splits(situations: Sequence[PrecipSituation], ratios: Sequence[float] = (0.72, 0.127, 0.153),
                  seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous partition by ratio."""
    counts = split_counts(len(situations), ratios)
    order = np.random.default_rng(seed).permutation(len(situations))
    shuffled = [situations[i] for i in order]
    parts, start = [], 0
    for count in counts:
        parts.append(tuple(shuffled[start:start + count]))
        start += count
    return DatasetSplit(*parts, seed=seed, ratios=tuple(float(r) for r in ratios))


# --- samples --------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    timestamps: Tuple[datetime, ...]
    tau_in: int

    @property
    def inputs(self) -> Tuple[datetime, ...]:
        return self.timestamps[:self.tau_in]

    @property
    def targets(self) -> Tuple[datetime, ...]:
        return self.timestamps[self.tau_in:]


def make_samples(situation, tau_in: int, tau_out: int, delta_minutes: int = 10) -> List[Sample]:
    """Every window of tau_in + tau_out frames spaced exactly delta_minutes apart."""
    stamps = situation.timestamps if isinstance(situation, PrecipSituation) else tuple(situation)
    delta = timedelta(minutes=delta_minutes)
    width = tau_in + tau_out
    samples: List[Sample] = []
    run_start = 0
    for i in range(1, len(stamps) + 1):
        if i == len(stamps) or stamps[i] - stamps[i - 1] != delta:
            for s in range(run_start, i - width + 1):
                samples.append(Sample(tuple(stamps[s:s + width]), tau_in))
            run_start = i
    return samples


# --- synthetic advection data ---------------------------------------------

@dataclass
class SynthDataset:
    frames: np.ndarray                  # (N, H, W) MLdBZ, quantized to 1/255
    timestamps: List[datetime]
    metadata: Dict = field(default_factory=dict)


def _periodic_offset(coords: np.ndarray, centre: float, size: int) -> np.ndarray:
    return (coords - centre + size / 2.0) % size - size / 2.0


def _render(grid: int, blobs: List[Dict], t: int, velocity: Tuple[float, float], diffusion: float) -> np.ndarray:
    coords = np.arange(grid, dtype=np.float64)
    frame = np.zeros((grid, grid), dtype=np.float64)
    for blob in blobs:
        var0 = blob["sigma"] ** 2
        var = var0 + 2.0 * diffusion * t
        dx = _periodic_offset(coords, blob["x"] + velocity[0] * t, grid)
        dy = _periodic_offset(coords, blob["y"] + velocity[1] * t, grid)
        gauss = np.exp(-(dx[:, None] ** 2 + dy[None, :] ** 2) / (2.0 * var))
        frame += blob["amplitude"] * (var0 / var) * gauss
    return frame


def synth_advection_dataset(config: Optional[DataConfig] = None) -> SynthDataset:
    """Gaussian blobs translating on a periodic grid at a constant velocity, 10-min cadence."""
    config = config or DataConfig()
    grid = config.grid
    rng = np.random.default_rng(config.seed)
    velocity = (float(config.velocity[0]), float(config.velocity[1]))
    start = parse_timestamp(config.start)
    step = timedelta(minutes=10)
    span = step * (config.steps - 1) + timedelta(hours=config.gap_hours)

    frames, timestamps, blob_meta = [], [], []
    for s in range(config.situations):
        blobs = [
            {
                "x": float(rng.uniform(0, grid)),
                "y": float(rng.uniform(0, grid)),
                "sigma": float(rng.uniform(max(1.0, grid / 16), max(1.5, grid / 8))),
                "amplitude": float(rng.uniform(0.4, 0.95)),
            }
            for _ in range(config.blobs)
        ]
        blob_meta.extend({"situation": s, **b} for b in blobs)
        origin = start + s * span
        for t in range(config.steps):
            frame = _render(grid, blobs, t, velocity, config.diffusion)
            if config.noise:
                frame = frame + rng.normal(0.0, config.noise, frame.shape)
            frames.append(np.rint(np.clip(frame, 0.0, 1.0) * BYTE_MAX) / BYTE_MAX)
            timestamps.append(origin + t * step)

    metadata = {
        "config": asdict(config),
        "velocity": list(velocity),
        "delta_minutes": 10,
        "blobs": blob_meta,
    }
    logger.info("Generated %d synthetic frames (%dx%d, %d situations)", len(frames), grid, grid, config.situations)
    return SynthDataset(frames=np.stack(frames), timestamps=timestamps, metadata=metadata)


# --- on-disk archive --------------------------------------------------------

def _read_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"Cannot read frame {path}: {exc}") from None


def build_index(root: str) -> pd.DataFrame:
    """(timestamp, rainy) for every YYYYMMDDHHMM.png under root, time-ordered."""
    rows = []
    for path in sorted(glob.glob(os.path.join(root, "*.png"))):
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            ts = datetime.strptime(stem, FILENAME_FORMAT).replace(tzinfo=timezone.utc)
        except ValueError:
            logger.warning("Skipping %s: name is not a timestamp", path)
            continue
        rows.append({"timestamp": format_timestamp(ts), "rainy": is_rainy(dbz_byte_to_mldbz(_read_png(path)))})
    logger.info("Indexed %d frames under %s", len(rows), root)
    return pd.DataFrame(rows, columns=["timestamp", "rainy"])


class FrameArchive:
    """Frames of one data directory, addressed by timestamp."""

    def __init__(self, root: str, cache_dir: Optional[str] = None):
        self.root = root
        self.cache_dir = cache_dir
        index_path = os.path.join(root, "index.csv")
        if not os.path.exists(index_path):
            raise DataError(f"Missing frame index: {index_path}")
        self.index = pd.read_csv(index_path)
        if list(self.index.columns[:2]) != ["timestamp", "rainy"]:
            raise DataError(f"{index_path} must have columns timestamp, rainy")

    def rainy_timestamps(self) -> List[datetime]:
        rainy = self.index[self.index["rainy"].astype(bool)]
        return sorted(parse_timestamp(t) for t in rainy["timestamp"])

    def load(self, ts: datetime) -> np.ndarray:
        name = frame_filename(ts)
        if self.cache_dir:
            cached = os.path.join(self.cache_dir, name.replace(".png", ".npy"))
            if os.path.exists(cached):
                return np.load(cached)
        path = os.path.join(self.root, name)
        if not os.path.exists(path):
            raise DataError(f"Missing frame file: {path}")
        frame = dbz_byte_to_mldbz(_read_png(path)).astype(np.float32)
        if self.cache_dir:
            os.makedirs(self.cache_dir, exist_ok=True)
            np.save(cached, frame)
        return frame

    def frame(self, ts: datetime) -> RadarFrame:
        return RadarFrame(ts, self.load(ts))

    def stack(self, sample: Sample) -> np.ndarray:
        return np.stack([self.load(ts) for ts in sample.timestamps])

    def stack_samples(self, samples: Sequence[Sample]) -> np.ndarray:
        if not samples:
            return np.zeros((0, 0, 0, 0), dtype=np.float32)
        return np.stack([self.stack(s) for s in samples])


def load_split(root: str) -> DatasetSplit:
    """Rebuilds the DatasetSplit from split.csv / split.json and the index; disjointness is re-verified."""
    csv_path = os.path.join(root, "split.csv")
    json_path = os.path.join(root, "split.json")
    if not os.path.exists(csv_path) or not os.path.exists(json_path):
        raise DataError(f"Missing split manifest under {root}; run the split command first")
    manifest = pd.read_csv(csv_path)
    with open(json_path, "r", encoding="utf-8") as fh:
        info = json.load(fh)

    stamps = FrameArchive(root).rainy_timestamps()
    parts: Dict[str, List[PrecipSituation]] = {name: [] for name in SPLIT_NAMES}
    for row in manifest.itertuples(index=False):
        start, end = parse_timestamp(row.start), parse_timestamp(row.end)
        members = tuple(t for t in stamps if start <= t <= end)
        if len(members) != int(row.frames):
            raise DataError(f"Situation {row.situation} lists {row.frames} frames, the index has {len(members)}")
        if row.split not in parts:
            raise DataError(f"Unknown split {row.split!r} in {csv_path}")
        parts[row.split].append(PrecipSituation(members))
    return DatasetSplit(
        train=tuple(parts["train"]),
        validation=tuple(parts["validation"]),
        test=tuple(parts["test"]),
        seed=int(info.get("seed", 0)),
        ratios=tuple(float(r) for r in info.get("ratios", (0.72, 0.127, 0.153))),
    )


def split_samples(split: DatasetSplit, name: str, tau_in: int, tau_out: int, delta_minutes: int = 10) -> List[Sample]:
    """All sample windows of one split, in situation order."""
    return [s for situation in split.by_name(name) for s in make_samples(situation, tau_in, tau_out, delta_minutes)]
