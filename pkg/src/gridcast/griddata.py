"""Frame movies: storage, calendar indexing, synthetic cities, examples."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import ConfigurationError, FormatError, WindowError

MAGIC = b"GCF1"
VERSION = 1
# magic, version, H, W, C, T, start seconds, interval minutes
_HEADER = struct.Struct("<4sHIIHIQH")
HEADER_SIZE = _HEADER.size
MAX_PAYLOAD = 1 << 40

MINUTES_PER_DAY = 1440


@dataclass(frozen=True)
class ClockIndex:
    hour: int
    weekday: int
    month: int


def clock_index(timestamp: datetime, n_hour_bins: int = 12) -> ClockIndex:
    """Hour bin, weekday (Monday=0) and zero-based month of a UTC time."""
    if n_hour_bins < 1 or MINUTES_PER_DAY % n_hour_bins:
        raise ConfigurationError(f"n_hour_bins={n_hour_bins} must divide {MINUTES_PER_DAY}")
    if timestamp.tzinfo is not None:
        timestamp = timestamp.astimezone(timezone.utc)
    minute = timestamp.hour * 60 + timestamp.minute
    return ClockIndex(
        hour=minute // (MINUTES_PER_DAY // n_hour_bins),
        weekday=timestamp.weekday(),
        month=timestamp.month - 1,
    )


@dataclass(frozen=True, eq=False)
class MovieDataset:
    """A city's frames, stored raw as uint8 [T, H, W, C].

    Normalized float views are produced on demand with :meth:`window`; a full
    float64 copy of a multi-week movie would not fit in memory.
    """

    city_name: str
    raw: np.ndarray
    start_time: datetime
    interval_minutes: int = 5

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.dtype != np.uint8 or raw.ndim != 4:
            raise ValueError(f"raw frames must be uint8 [T,H,W,C], got {raw.dtype} {raw.shape}")
        if raw.shape[0] < 1:
            raise ValueError("a movie needs at least one frame")
        if self.interval_minutes < 1 or MINUTES_PER_DAY % self.interval_minutes:
            raise ValueError(f"interval {self.interval_minutes} must divide a day")
        raw.flags.writeable = False
        object.__setattr__(self, "raw", raw)
        start = self.start_time
        if start.tzinfo is None:
            start = start.replace(tzinfo=timezone.utc)
        object.__setattr__(self, "start_time", start)

    @property
    def shape(self):
        return self.raw.shape

    @property
    def grid(self):
        return self.raw.shape[1], self.raw.shape[2]

    @property
    def channels(self):
        return self.raw.shape[3]

    @property
    def frames_per_day(self):
        return MINUTES_PER_DAY // self.interval_minutes

    @property
    def n_days(self):
        return self.raw.shape[0] // self.frames_per_day

    @property
    def frames(self):
        """All frames normalized to [0, 1]. Allocates T·H·W·C doubles."""
        return self.raw / 255.0

    def window(self, start: int, stop: int) -> np.ndarray:
        if not 0 <= start <= stop <= self.raw.shape[0]:
            raise WindowError(f"frames [{start}, {stop}) outside [0, {self.raw.shape[0]})")
        return self.raw[start:stop] / 255.0

    def frame_index(self, day: int, slot: int) -> int:
        return day * self.frames_per_day + slot

    def time_of(self, frame: int) -> datetime:
        return self.start_time + timedelta(minutes=frame * self.interval_minutes)

    def day_window(self, day: int, start_slot: int, stop_slot: int) -> np.ndarray:
        """Normalized frames for slots [start_slot, stop_slot) of one day."""
        per_day = self.frames_per_day
        if not 0 <= day < self.n_days:
            raise WindowError(f"day {day} outside [0, {self.n_days})")
        if start_slot < 0 or stop_slot > per_day or start_slot > stop_slot:
            raise WindowError(
                f"slots [{start_slot}, {stop_slot}) of day {day} leave the day's {per_day} frames"
            )
        base = day * per_day
        return self.window(base + start_slot, base + stop_slot)


def save_movie(dataset: MovieDataset, path) -> None:
    T, H, W, C = dataset.raw.shape
    start = int(dataset.start_time.timestamp())
    header = _HEADER.pack(MAGIC, VERSION, H, W, C, T, start, dataset.interval_minutes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.raw).tobytes())


def decode_movie(blob: bytes, city_name: str = "city") -> MovieDataset:
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"header needs {HEADER_SIZE} bytes, file has {len(blob)}", len(blob))
    magic, version, H, W, C, T, start, interval = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    for name, value, offset in (("H", H, 6), ("W", W, 10), ("C", C, 14), ("T", T, 16)):
        if value == 0:
            raise FormatError(f"dimension {name} is zero", offset)
    if interval == 0 or MINUTES_PER_DAY % interval:
        raise FormatError(f"interval {interval} does not divide a day", 28)
    size = T * H * W * C
    if size > MAX_PAYLOAD:
        raise FormatError(f"dimensions {T}x{H}x{W}x{C} overflow the payload limit", 6)
    have = len(blob) - HEADER_SIZE
    if have < size:
        raise FormatError(f"truncated payload: need {size} bytes, found {have}", len(blob))
    if have > size:
        raise FormatError(f"{have - size} trailing bytes after payload", HEADER_SIZE + size)
    raw = np.frombuffer(blob, dtype=np.uint8, count=size, offset=HEADER_SIZE).reshape(T, H, W, C)
    return MovieDataset(
        city_name=city_name,
        raw=raw.copy(),
        start_time=datetime.fromtimestamp(start, tz=timezone.utc),
        interval_minutes=interval,
    )


def load_movie(path, city_name: str | None = None) -> MovieDataset:
    from pathlib import Path

    path = Path(path)
    return decode_movie(path.read_bytes(), city_name or path.stem)


def convert_hdf5(src, dst):
    """Converter hook for the challenge's HDF5 files; not implemented.

    A converter reads each day's ``array`` dataset (288 × 495 × 436 × 3 uint8),
    concatenates days in date order and writes a GCF1 file with
    ``interval_minutes=5`` and the first day's midnight as ``start_time``.
    """
    raise NotImplementedError("HDF5 challenge data ingestion is not part of this package")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic city.

    Activity on a road pixel is ``base * hour * week * month`` plus noise. The
    hour profile blends a smooth daily cycle with a per-pixel level for each
    clock hour; ``hour_roughness`` sets the share of the latter. The
    noise is an AR(1) process (``persistence`` is its 5-minute coefficient)
    mixed with white noise, so recent history carries information that the
    calendar alone does not. With ``dropout`` > 0 each on-road reading is
    independently zero with that probability (no probe vehicle present).
    """

    height: int = 64
    width: int = 64
    channels: int = 3
    n_days: int = 30
    road_density: float = 0.2
    hour_amplitude: float = 0.5
    hour_roughness: float = 0.5
    week_amplitude: float = 0.3
    month_amplitude: float = 0.0
    noise: float = 0.08
    persistence: float = 0.95
    dropout: float = 0.0
    seed: int = 0
    start: datetime = field(default=datetime(2019, 1, 7, tzinfo=timezone.utc))
    interval_minutes: int = 5
    city_name: str = "synth"

    def validate(self):
        for name in ("height", "width", "channels", "n_days", "interval_minutes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.road_density < 1:
            raise ConfigurationError(f"road_density must lie in (0, 1), got {self.road_density}")
        if not 0 <= self.hour_roughness <= 1:
            raise ConfigurationError("hour_roughness must lie in [0, 1]")
        for name in ("hour_amplitude", "week_amplitude", "month_amplitude", "noise"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if not 0 <= self.persistence < 1:
            raise ConfigurationError("persistence must lie in [0, 1)")
        if MINUTES_PER_DAY % self.interval_minutes:
            raise ConfigurationError(f"interval {self.interval_minutes} must divide a day")


def road_mask(height, width, density, rng) -> np.ndarray:
    """Boolean mask of straight road segments covering round(density·H·W) pixels."""
    target = max(1, round(density * height * width))
    mask = np.zeros((height, width), dtype=bool)
    steps = ((0, 1), (1, 0), (1, 1), (1, -1))
    count = 0
    while count < target:
        y, x = int(rng.integers(height)), int(rng.integers(width))
        dy, dx = steps[rng.integers(len(steps))]
        for _ in range(int(rng.integers(4, max(5, max(height, width))))):
            if not (0 <= y < height and 0 <= x < width):
                break
            if not mask[y, x]:
                mask[y, x] = True
                count += 1
                if count == target:
                    break
            y, x = y + dy, x + dx
    return mask


def synthesize_city(spec: SynthSpec) -> MovieDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W, C = spec.height, spec.width, spec.channels
    per_day = MINUTES_PER_DAY // spec.interval_minutes
    T = spec.n_days * per_day

    roads = road_mask(H, W, spec.road_density, rng)
    n_road = int(roads.sum())
    base = rng.uniform(0.25, 0.6, size=(n_road, C))
    phase = rng.uniform(0, 2 * np.pi, size=(n_road, 1))
    hourly = rng.uniform(-1, 1, size=(n_road, 24, C))
    week_profile = np.cos(2 * np.pi * np.arange(7) / 7 + rng.uniform(0, 2 * np.pi))
    month_profile = np.cos(2 * np.pi * np.arange(12) / 12 + rng.uniform(0, 2 * np.pi))

    raw = np.zeros((T, H, W, C), dtype=np.uint8)
    ar = np.zeros((n_road, 1))
    innov = spec.noise * np.sqrt(1 - spec.persistence**2)
    day0 = spec.start.replace(tzinfo=spec.start.tzinfo or timezone.utc)
    for d in range(spec.n_days):
        date = day0 + timedelta(days=d)
        calendar = (1 + spec.week_amplitude * week_profile[date.weekday()]) * (
            1 + spec.month_amplitude * month_profile[date.month - 1]
        )
        for s in range(per_day):
            minute = s * spec.interval_minutes
            smooth = np.sin(2 * np.pi * minute / MINUTES_PER_DAY + phase)
            rough = hourly[:, minute // 60]
            hour = 1 + spec.hour_amplitude * ((1 - spec.hour_roughness) * smooth + spec.hour_roughness * rough)
            value = base * hour * calendar
            if spec.noise > 0:
                ar = spec.persistence * ar + innov * rng.standard_normal((n_road, 1))
                value = value + base * ar + spec.noise * rng.standard_normal((n_road, C))
            # readings never drop below one byte unit unless the probe is absent
            value = np.clip(np.rint(value * 255), 1, 255).astype(np.uint8)
            if spec.dropout > 0:
                value[rng.random(n_road) < spec.dropout] = 0
            frame = np.zeros((H, W, C), dtype=np.uint8)
            frame[roads] = value
            raw[d * per_day + s] = frame
    return MovieDataset(spec.city_name, raw, day0, spec.interval_minutes)


@dataclass(frozen=True)
class TrainingExample:
    history: np.ndarray
    targets: np.ndarray
    clock: ClockIndex
    origin: tuple


N_TARGETS = 3


def make_example(dataset: MovieDataset, day: int, slot: int, h: int,
                 n_hour_bins: int = 12) -> TrainingExample:
    """History frames [slot-h, slot) and target frames [slot, slot+3) of one day."""
    if h < 1:
        raise ConfigurationError(f"history length must be >= 1, got {h}")
    if slot - h < 0 or slot + N_TARGETS > dataset.frames_per_day:
        raise WindowError(
            f"window [{slot - h}, {slot + N_TARGETS}) of day {day} is outside the day's "
            f"{dataset.frames_per_day} frames"
        )
    frames = dataset.day_window(day, slot - h, slot + N_TARGETS)
    when = dataset.time_of(dataset.frame_index(day, slot))
    return TrainingExample(
        history=frames[:h],
        targets=frames[h:],
        clock=clock_index(when, n_hour_bins),
        origin=(day, slot),
    )


def default_slots(frames_per_day: int = 288, count: int = 5) -> list[int]:
    """``count`` evenly spaced target slots strictly inside the day."""
    return [round((k + 1) * frames_per_day / (count + 1)) for k in range(count)]
