"""Synthetic segmentation streams with smooth distribution shifts.

Two scenarios: a three-source mixture whose proportions drift stage by
stage (mild A-to-B shift, polarity-inverted C), and a single source
under progressively stronger contrast/affine transforms. Samples are
random ellipse blobs with per-image intensity draws and pixel noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .learner import Sample
from .seeding import rng_for, subseed

STREAM_MAGIC = b"ODXS"
STREAM_VERSION = 1


class StreamFormatError(ValueError):
    """Stage file failed magic/version/dimension validation."""


@dataclass(frozen=True)
class SyntheticSource:
    source_id: str
    fg_mean: float
    fg_spread: float
    bg_mean: float
    bg_spread: float
    axis_range: tuple[float, float]
    noise_sigma: float

    def __post_init__(self):
        if abs(self.fg_mean - self.bg_mean) < 0.2:
            raise ValueError("foreground/background contrast below 0.2")
        if self.axis_range[0] < 1.0 or self.axis_range[0] > self.axis_range[1]:
            raise ValueError("bad ellipse axis range")


# A: bright blob on dark ground; B: lower contrast, larger blobs (mild
# shift from A); C: inverted polarity (strong shift from A).
SOURCE_A = SyntheticSource("A", 0.80, 0.04, 0.20, 0.04, (3.0, 8.0), 0.04)
SOURCE_B = SyntheticSource("B", 0.72, 0.04, 0.26, 0.04, (5.0, 11.0), 0.04)
SOURCE_C = SyntheticSource("C", 0.20, 0.04, 0.80, 0.04, (3.0, 8.0), 0.04)
SOURCES = (SOURCE_A, SOURCE_B, SOURCE_C)
SOURCE_LABEL = {"A": 1, "B": 2, "C": 3}


@dataclass(frozen=True)
class StageSpec:
    stage_index: int
    mixture_weights: tuple[float, float, float] | None
    transform_magnitude: float | None
    n_train: int
    n_test: int
    seed: int

    def __post_init__(self):
        if self.mixture_weights is not None:
            w = self.mixture_weights
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-12:
                raise ValueError(f"mixture weights must be nonnegative and sum to 1: {w}")
        if self.transform_magnitude is not None:
            if not 0.0 <= self.transform_magnitude <= 1.0:
                raise ValueError("transform magnitude outside [0, 1]")


@dataclass(frozen=True)
class Stage:
    spec: StageSpec
    train: list[Sample]
    test: list[Sample]


@dataclass(frozen=True)
class TransformParams:
    contrast_lo: float
    contrast_hi: float
    scale: float
    rotation_deg: float
    translation_px: tuple[float, float]

    def __post_init__(self):
        if not (0.0 <= self.contrast_lo <= 0.1 and 0.9 <= self.contrast_hi <= 1.0):
            raise ValueError("contrast percentiles outside the allowed window")
        if not 0.8 <= self.scale <= 1.2:
            raise ValueError("scale outside [0.8, 1.2]")
        if abs(self.rotation_deg) > 15.0:
            raise ValueError("rotation beyond 15 degrees")
        if max(abs(t) for t in self.translation_px) > 5.0:
            raise ValueError("translation beyond 5 px")


def gen_source_sample(source: SyntheticSource, rng: np.random.Generator,
                      image_size: int = 32, sample_id: int = 0) -> Sample:
    """Random ellipse blob with source-specific intensity statistics.

    Draw order is fixed (center, axes, angle, foreground, background,
    noise field) so a given rng state always yields the same sample.
    """
    h = w = image_size
    margin = int(np.ceil(source.axis_range[1])) + 1
    if 2 * margin >= min(h, w):
        raise ValueError("image too small for the configured blob size")
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    ax = rng.uniform(*source.axis_range)
    bx = rng.uniform(*source.axis_range)
    angle = rng.uniform(0.0, np.pi)
    fg = source.fg_mean + source.fg_spread * rng.standard_normal()
    bg = source.bg_mean + source.bg_spread * rng.standard_normal()

    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    mask = ((u / ax) ** 2 + (v / bx) ** 2 <= 1.0).astype(np.float64)

    image = bg + (fg - bg) * mask
    if source.noise_sigma > 0:
        image = image + source.noise_sigma * rng.standard_normal((h, w))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=image, mask=mask,
                  task_label=SOURCE_LABEL[source.source_id],
                  sample_id=sample_id)


def contrast_stretch(image: np.ndarray, lo_pct: float, hi_pct: float) -> np.ndarray:
    """Rescale so the nearest-rank lo/hi percentiles map to 0 and 1,
    clamped to [0, 1]; constant images pass through unchanged."""
    if not 0.0 <= lo_pct < hi_pct <= 1.0:
        raise ValueError("need 0 <= lo_pct < hi_pct <= 1")
    flat = np.sort(image, axis=None)
    n = flat.size

    def nearest_rank(p: float) -> float:
        if p <= 0.0:
            return flat[0]
        return flat[min(int(np.ceil(p * n)) - 1, n - 1)]

    lo, hi = nearest_rank(lo_pct), nearest_rank(hi_pct)
    if hi <= lo:
        return image.copy()
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


def apply_affine(image: np.ndarray, params: TransformParams,
                 nearest: bool = False) -> np.ndarray:
    """Inverse-mapped affine warp about the image center.

    Bilinear interpolation by default, nearest-neighbor for masks;
    out-of-bounds source coordinates fill with 0.
    """
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dxp, dyp = params.translation_px
    theta = np.deg2rad(params.rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    yt, xt = np.mgrid[0:h, 0:w].astype(np.float64)
    xr = xt - cx - dxp
    yr = yt - cy - dyp
    # inverse rotation then inverse scale
    xs = (cos_t * xr + sin_t * yr) / params.scale + cx
    ys = (-sin_t * xr + cos_t * yr) / params.scale + cy

    if nearest:
        xi = np.rint(xs).astype(np.int64)
        yi = np.rint(ys).astype(np.int64)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.zeros_like(image)
        out[valid] = image[yi[valid], xi[valid]]
        return out

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros_like(image)
    for oy, ox, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi, xi = y0 + oy, x0 + ox
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = np.zeros_like(image)
        vals[valid] = image[yi[valid], xi[valid]]
        out += wgt * vals
    return out


def transform_sample(sample: Sample, magnitude: float,
                     rng: np.random.Generator) -> Sample:
    """Contrast stretch plus a random affine, both scaled by magnitude;
    magnitude 0 returns the sample unchanged (no rng draws)."""
    t = float(magnitude)
    if t == 0.0:
        return sample
    params = TransformParams(
        contrast_lo=0.1 * t,
        contrast_hi=1.0 - 0.1 * t,
        scale=rng.uniform(1.0 - 0.2 * t, 1.0 + 0.2 * t),
        rotation_deg=rng.uniform(-15.0 * t, 15.0 * t),
        translation_px=(rng.uniform(-5.0 * t, 5.0 * t),
                        rng.uniform(-5.0 * t, 5.0 * t)),
    )
    image = contrast_stretch(sample.image, params.contrast_lo, params.contrast_hi)
    image = apply_affine(image, params)
    mask = apply_affine(sample.mask, params, nearest=True)
    return Sample(image=np.clip(image, 0.0, 1.0), mask=mask,
                  task_label=sample.task_label, sample_id=sample.sample_id)


# Mixture drift knots: pure A -> A/B -> A/B/C -> B/C -> pure C.
_MIX_KNOTS = np.array([
    (1.0, 0.0, 0.0),
    (0.6, 0.4, 0.0),
    (0.2, 0.6, 0.2),
    (0.0, 0.4, 0.6),
    (0.0, 0.0, 1.0),
])


def mixture_schedule(n_stages: int) -> list[tuple[float, float, float]]:
    """Per-stage source weights, linearly interpolated along the drift
    knots; 5 stages hit the knots exactly."""
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if n_stages == 1:
        return [tuple(_MIX_KNOTS[0])]
    out = []
    for k in range(n_stages):
        pos = (k / (n_stages - 1)) * (len(_MIX_KNOTS) - 1)
        i = min(int(np.floor(pos)), len(_MIX_KNOTS) - 2)
        frac = pos - i
        w = (1 - frac) * _MIX_KNOTS[i] + frac * _MIX_KNOTS[i + 1]
        out.append(tuple(float(x) for x in w))
    return out


def mixture_counts(weights, n: int) -> list[int]:
    """Largest-remainder apportionment of n samples to the weights."""
    raw = [wi * n for wi in weights]
    counts = [int(np.floor(r)) for r in raw]
    short = n - sum(counts)
    remainders = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def _gen_split(weights, n: int, seed: int, stage_index: int, split: str,
               image_size: int, id_start: int,
               magnitude: float | None = None) -> list[Sample]:
    counts = mixture_counts(weights, n)
    source_seq = [src for src, cnt in zip(SOURCES, counts) for _ in range(cnt)]
    samples = []
    for i, src in enumerate(source_seq):
        rng = rng_for(seed, "stage", stage_index, split, i)
        s = gen_source_sample(src, rng, image_size, sample_id=id_start + i)
        if magnitude is not None:
            s = transform_sample(s, magnitude, rng)
        samples.append(s)
    return samples


def _build_stream(n_stages, n_train, n_test, seed, image_size, weights_fn,
                  magnitude_fn) -> list[Stage]:
    stages = []
    next_id = 1
    for k in range(1, n_stages + 1):
        weights = weights_fn(k)
        magnitude = magnitude_fn(k)
        spec = StageSpec(
            stage_index=k, mixture_weights=weights,
            transform_magnitude=magnitude, n_train=n_train, n_test=n_test,
            seed=subseed(seed, "stage", k) & 0xFFFFFFFFFFFFFFFF,
        )
        train = _gen_split(weights or (1.0, 0.0, 0.0), n_train, seed, k,
                           "train", image_size, next_id, magnitude)
        next_id += n_train
        test = _gen_split(weights or (1.0, 0.0, 0.0), n_test, seed, k,
                          "test", image_size, next_id, magnitude)
        next_id += n_test
        stages.append(Stage(spec=spec, train=train, test=test))
    return stages


def build_shifting_source_stream(n_stages: int, n_train: int, n_test: int,
                                 seed: int, image_size: int = 32) -> list[Stage]:
    """Mixture proportions drift from pure source A to pure source C."""
    schedule = mixture_schedule(n_stages)
    return _build_stream(n_stages, n_train, n_test, seed, image_size,
                         lambda k: schedule[k - 1], lambda k: None)


def build_transformed_stream(n_stages: int, n_train: int, n_test: int,
                             seed: int, image_size: int = 32) -> list[Stage]:
    """Source A under transforms of magnitude (k-1)/(n_stages-1)."""
    if n_stages < 2:
        raise ValueError("transformed stream needs n_stages >= 2")
    return _build_stream(
        n_stages, n_train, n_test, seed, image_size,
        lambda k: None,
        lambda k: (k - 1) / (n_stages - 1))


def build_constant_source_stream(n_stages: int, n_train: int, n_test: int,
                                 seed: int, image_size: int = 32,
                                 source: str = "A") -> list[Stage]:
    """No-shift control: every stage drawn from one fixed source."""
    idx = "ABC".index(source)
    weights = tuple(1.0 if i == idx else 0.0 for i in range(3))
    return _build_stream(n_stages, n_train, n_test, seed, image_size,
                         lambda k: weights, lambda k: None)


def build_stream(scenario: str, n_stages: int, n_train: int, n_test: int,
                 seed: int, image_size: int = 32) -> list[Stage]:
    if scenario == "shifting_source":
        return build_shifting_source_stream(n_stages, n_train, n_test, seed, image_size)
    if scenario == "transformed":
        return build_transformed_stream(n_stages, n_train, n_test, seed, image_size)
    raise ValueError(f"unknown scenario {scenario!r}")


# -- stage file format: little-endian header + raw sample records ----------

_HEADER = struct.Struct("<4sIIIIII")  # magic, version, stage, H, W, n_train, n_test
_STAGE_META = struct.Struct("<ddddQ")  # 3 weights, magnitude (nan if none), seed


def _write_samples(fh, samples: list[Sample]):
    for s in samples:
        fh.write(struct.pack("<QI", s.sample_id, s.task_label))
        fh.write(s.image.astype("<f8").tobytes())
        fh.write(s.mask.astype(np.uint8).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise StreamFormatError("truncated stage file")
    return buf


def _read_samples(fh, count: int, h: int, w: int) -> list[Sample]:
    out = []
    for _ in range(count):
        sid, label = struct.unpack("<QI", _read_exact(fh, 12))
        img = np.frombuffer(_read_exact(fh, 8 * h * w), dtype="<f8").reshape(h, w)
        msk = np.frombuffer(_read_exact(fh, h * w), dtype=np.uint8).reshape(h, w)
        out.append(Sample(image=img.copy(), mask=msk.astype(np.float64),
                          task_label=label, sample_id=sid))
    return out


def export_stream(stages: list[Stage], directory) -> None:
    """One stage_<k>.odxs file per stage."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for st in stages:
        h, w = st.train[0].image.shape
        spec = st.spec
        with open(d / f"stage_{spec.stage_index:02d}.odxs", "wb") as fh:
            fh.write(_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, spec.stage_index,
                                  h, w, len(st.train), len(st.test)))
            wts = spec.mixture_weights or (np.nan, np.nan, np.nan)
            mag = np.nan if spec.transform_magnitude is None else spec.transform_magnitude
            fh.write(_STAGE_META.pack(wts[0], wts[1], wts[2], mag, spec.seed))
            _write_samples(fh, st.train)
            _write_samples(fh, st.test)


def load_stream(directory) -> list[Stage]:
    from pathlib import Path
    d = Path(directory)
    paths = sorted(d.glob("stage_*.odxs"))
    if not paths:
        raise StreamFormatError(f"no stage files under {d}")
    stages = []
    for path in paths:
        with open(path, "rb") as fh:
            magic, version, k, h, w, n_train, n_test = _HEADER.unpack(
                _read_exact(fh, _HEADER.size))
            if magic != STREAM_MAGIC:
                raise StreamFormatError(f"{path.name}: bad magic {magic!r}")
            if version != STREAM_VERSION:
                raise StreamFormatError(f"{path.name}: unsupported version {version}")
            w0, w1, w2, mag, seed = _STAGE_META.unpack(_read_exact(fh, _STAGE_META.size))
            weights = None if np.isnan(w0) else (w0, w1, w2)
            spec = StageSpec(stage_index=k, mixture_weights=weights,
                             transform_magnitude=None if np.isnan(mag) else mag,
                             n_train=n_train, n_test=n_test, seed=seed)
            train = _read_samples(fh, n_train, h, w)
            test = _read_samples(fh, n_test, h, w)
            stages.append(Stage(spec=spec, train=train, test=test))
    return stages
