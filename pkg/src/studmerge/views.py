"""Clip sampling and multi-view augmentation for self-distillation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter


def sample_clip(video: np.ndarray, frames: int = 64, rate: int = 3,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Take ``frames`` frames every ``rate`` frames from a random start.

    The sampled window covers ``frames * rate`` source frames. Videos shorter
    than that are looped.
    """
    if frames < 1 or rate < 1:
        raise ValueError("frames and rate must be >= 1")
    length = video.shape[0]
    window = frames * rate
    if length >= window:
        rng = rng or np.random.default_rng(0)
        start = int(rng.integers(0, length - window + 1))
        idx = start + rate * np.arange(frames)
    else:
        idx = (rate * np.arange(frames)) % length
    return video[idx]


@dataclass
class AugConfig:
    n_global: int = 2
    n_local: int = 8
    local_spatial: float = 3 / 7
    local_temporal: float = 0.5
    global_rates: tuple[int, ...] = (1,)
    local_rates: tuple[int, ...] = (1, 2, 3)
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AugConfig:
        d = dict(d)
        for key in ("global_rates", "local_rates", "blur_sigma"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ViewBatch:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    records: list[dict] = field(default_factory=list)

    @property
    def views(self) -> list[np.ndarray]:
        """Globals first, then locals."""
        return self.globals + self.locals


def solarize(clip: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(clip >= threshold, 1.0 - clip, clip)


def color_jitter(clip: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    mean = clip.mean()
    return np.clip((clip * brightness - mean) * contrast + mean, 0.0, 1.0)


def blur(clip: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(clip, sigma=(0, sigma, sigma, 0), mode="reflect")


def _temporal(clip: np.ndarray, frames: int, rate: int, rng: np.random.Generator):
    length = clip.shape[0]
    start = int(rng.integers(0, max(length - frames * rate, 0) + 1))
    idx = (start + rate * np.arange(frames)) % length
    return clip[idx], start


def _augment(view: np.ndarray, cfg: AugConfig, rng: np.random.Generator, record: dict):
    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        view = color_jitter(view, b, c)
        record["jitter"] = (float(b), float(c))
    if rng.random() < cfg.blur_prob:
        s = rng.uniform(*cfg.blur_sigma)
        view = blur(view, s)
        record["blur_sigma"] = float(s)
    if rng.random() < cfg.solarize_prob:
        view = solarize(view, cfg.solarize_threshold)
        record["solarize"] = cfg.solarize_threshold
    return np.clip(view, 0.0, 1.0)


def view_geometry(clip_shape, cfg: AugConfig) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """``(frames, height, width)`` of global and local views."""
    t, h, w = clip_shape[:3]
    local = (
        max(1, int(round(t * cfg.local_temporal))),
        max(1, int(round(h * cfg.local_spatial))),
        max(1, int(round(w * cfg.local_spatial))),
    )
    return (t, h, w), local


def make_views(clip: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> ViewBatch:
    """Two full-size global views and eight smaller spatio-temporal crops."""
    if clip.ndim == 3:
        clip = clip[..., None]
    (gt, _, _), (lt, lh, lw) = view_geometry(clip.shape, cfg)
    _, h, w, _ = clip.shape
    if lh >= h or lw >= w:
        raise ValueError("local views must be spatially smaller than global views")

    batch = ViewBatch([], [])
    for _ in range(cfg.n_global):
        rate = int(rng.choice(cfg.global_rates))
        view, start = _temporal(clip, gt, rate, rng)
        rec = {"kind": "global", "start": start, "rate": rate, "crop": (0, 0, h, w)}
        batch.globals.append(_augment(view, cfg, rng, rec))
        batch.records.append(rec)
    for _ in range(cfg.n_local):
        rate = int(rng.choice(cfg.local_rates))
        view, start = _temporal(clip, lt, rate, rng)
        y = int(rng.integers(0, h - lh + 1))
        x = int(rng.integers(0, w - lw + 1))
        view = view[:, y:y + lh, x:x + lw]
        rec = {"kind": "local", "start": start, "rate": rate, "crop": (y, x, lh, lw)}
        batch.locals.append(_augment(view, cfg, rng, rec))
        batch.records.append(rec)
    return batch
