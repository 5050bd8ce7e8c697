"""Synthetic multi-site "ultrasound-like" video datasets.

Each clip shows a pulsating bright ellipse with two dark chambers (the
"heart") over a dark background. Sites differ in gain, speckle level, blur,
heart size and beat frequency. Anomalies only appear in test splits:

``frozen``       no contraction
``arrhythmic``   irregular beat timing
``enlarged``     oversized heart
``septal_gap``   dark bridge between the two chambers

Clip file layout (little-endian)::

    8 bytes  magic b"STUDCLIP"
    1 byte   version (1)
    1 byte   rank (4)
    16 bytes dims T, H, W, C as uint32
    ...      float32 voxels, C order
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

ANOMALIES = ("frozen", "arrhythmic", "enlarged", "septal_gap")
CLIP_MAGIC = b"STUDCLIP"
CLIP_VERSION = 1


@dataclass(frozen=True)
class SiteProfile:
    site_id: int
    gain: float = 1.0
    noise_std: float = 0.05
    blur_sigma: float = 0.5
    freq_range: tuple[float, float] = (2.0, 3.0)
    heart_scale: float = 1.0
    background: float = 0.12
    wall: float = 0.75
    chamber: float = 0.25
    pulse: float = 0.15
    frames: int = 48
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "freq_range", tuple(float(f) for f in self.freq_range))
        if not 0.2 <= self.gain <= 3.0:
            raise ValueError(f"gain {self.gain} outside [0.2, 3]")
        if not 0.0 <= self.noise_std <= 0.5:
            raise ValueError(f"noise_std {self.noise_std} outside [0, 0.5]")
        if not 0.0 <= self.blur_sigma <= 5.0:
            raise ValueError(f"blur_sigma {self.blur_sigma} outside [0, 5]")
        lo, hi = self.freq_range
        if not 0.0 < lo <= hi:
            raise ValueError("freq_range must satisfy 0 < lo <= hi")
        if not 0.3 <= self.heart_scale <= 1.5:
            raise ValueError(f"heart_scale {self.heart_scale} outside [0.3, 1.5]")
        if not 0.0 <= self.pulse < 0.5:
            raise ValueError("pulse amplitude must lie in [0, 0.5)")
        if min(self.frames, self.height, self.width) < 1:
            raise ValueError("clip dims must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SiteProfile:
        return cls(**d)


def default_profiles(seed: int = 0) -> list[SiteProfile]:
    """Five sites: 1-3 for training, 4-5 held out with stronger shifts."""
    return [
        SiteProfile(1, gain=1.00, noise_std=0.05, blur_sigma=0.5, freq_range=(2.0, 3.0),
                    heart_scale=1.00, seed=seed),
        SiteProfile(2, gain=0.85, noise_std=0.08, blur_sigma=0.8, freq_range=(2.5, 3.5),
                    heart_scale=0.92, seed=seed),
        SiteProfile(3, gain=1.15, noise_std=0.04, blur_sigma=0.3, freq_range=(1.5, 2.5),
                    heart_scale=1.08, seed=seed),
        SiteProfile(4, gain=0.50, noise_std=0.12, blur_sigma=1.2, freq_range=(2.0, 3.5),
                    heart_scale=0.95, background=0.18, seed=seed),
        SiteProfile(5, gain=1.30, noise_std=0.10, blur_sigma=1.0, freq_range=(1.5, 3.0),
                    heart_scale=1.05, background=0.22, seed=seed),
    ]


def clip_seed(profile: SiteProfile, split: str, index: int, seed: int) -> int:
    """Per-clip seed derived from (dataset seed, site, split, index)."""
    ss = np.random.SeedSequence([seed, profile.site_id, {"train": 0, "test": 1}[split], index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def beat_phase(profile: SiteProfile, anomaly: str | None, rng: np.random.Generator) -> np.ndarray:
    """Phase of the contraction cycle for every frame, in radians."""
    t = profile.frames
    freq = rng.uniform(*profile.freq_range)
    phase0 = rng.uniform(0, 2 * np.pi)
    if anomaly == "arrhythmic":
        steps = rng.uniform(0.0, 2.0, size=t) * (2 * np.pi * freq / t)
        steps[rng.random(t) < 0.25] *= 4.0
        return phase0 + np.concatenate([[0.0], np.cumsum(steps[:-1])])
    return phase0 + 2 * np.pi * freq * np.arange(t) / t


def heart_geometry(profile: SiteProfile, anomaly: str | None, rng: np.random.Generator) -> dict:
    scale = profile.heart_scale * (1.5 if anomaly == "enlarged" else 1.0)
    return {
        "cy": profile.height / 2 + rng.uniform(-2, 2),
        "cx": profile.width / 2 + rng.uniform(-2, 2),
        "a": 0.30 * profile.height * scale,
        "b": 0.22 * profile.width * scale,
        "pulse": 0.0 if anomaly == "frozen" else profile.pulse,
    }


def render_heart(profile: SiteProfile, geom: dict, phase: np.ndarray,
                 septal_gap: bool = False) -> np.ndarray:
    """Noise-free intensities ``(T, H, W)`` before gain."""
    y = np.arange(profile.height)[None, :, None] + 0.5
    x = np.arange(profile.width)[None, None, :] + 0.5
    s = (1.0 + geom["pulse"] * np.sin(phase))[:, None, None]
    a, b = geom["a"] * s, geom["b"] * s
    dy, dx = y - geom["cy"], x - geom["cx"]
    outer = (dy / a) ** 2 + (dx / b) ** 2 <= 1.0
    left = (dy / (0.6 * a)) ** 2 + ((dx + 0.5 * b) / (0.3 * b)) ** 2 <= 1.0
    right = (dy / (0.6 * a)) ** 2 + ((dx - 0.5 * b) / (0.3 * b)) ** 2 <= 1.0
    inner = left | right
    if septal_gap:
        inner = inner | ((np.abs(dx) <= 0.25 * b) & (np.abs(dy) <= 0.4 * a))
    out = np.where(outer, profile.wall, profile.background)
    return np.where(outer & inner, profile.chamber, out)


def generate_clip(profile: SiteProfile, anomaly: str | None = None, seed: int = 0) -> np.ndarray:
    """One ``(T, H, W, 1)`` float32 clip in ``[0, 1]``."""
    if anomaly is not None and anomaly not in ANOMALIES:
        raise ValueError(f"unknown anomaly {anomaly!r}; choose from {ANOMALIES}")
    rng = np.random.default_rng(seed)
    geom = heart_geometry(profile, anomaly, rng)
    phase = beat_phase(profile, anomaly, rng)
    base = render_heart(profile, geom, phase, anomaly == "septal_gap")
    clip = profile.gain * base
    if profile.noise_std > 0:
        texture = gaussian_filter(rng.standard_normal(clip.shape[1:]), 3.0)
        texture /= texture.std() + 1e-12
        speckle = rng.standard_normal(clip.shape)
        # smooth texture only outside the heart, speckle everywhere
        outside = base == profile.background
        texture = 0.5 * profile.noise_std * profile.gain * texture * outside
        clip = clip * (1.0 + profile.noise_std * speckle) + texture
    if profile.blur_sigma > 0:
        clip = gaussian_filter(clip, sigma=(0, profile.blur_sigma, profile.blur_sigma))
    return np.clip(clip, 0.0, 1.0).astype(np.float32)[..., None]


@dataclass
class SiteDataset:
    profile: SiteProfile
    train: list[np.ndarray]
    test: list[np.ndarray]
    test_labels: list[bool]
    manifest: dict = field(default_factory=dict)

    @property
    def site_id(self) -> int:
        return self.profile.site_id


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def site_manifest(profile: SiteProfile, n_train: int, n_test: int, anomaly_rate: float,
                  seed: int) -> dict:
    """Per-clip generation plan; regenerating from it is bit-exact."""
    if n_train < 0 or n_test < 0:
        raise ValueError("clip counts must be >= 0")
    if not 0.0 <= anomaly_rate <= 1.0:
        raise ValueError("anomaly_rate must lie in [0, 1]")
    rng = np.random.default_rng([seed, profile.site_id, 0xA40])
    n_anom = _round_half_up(anomaly_rate * n_test)
    flags = np.zeros(n_test, dtype=bool)
    flags[rng.permutation(n_test)[:n_anom]] = True
    kinds = rng.integers(0, len(ANOMALIES), size=n_test)
    clips = []
    for i in range(n_train):
        clips.append({"file": f"train_{i:04d}.clip", "split": "train", "label": False,
                      "anomaly": None, "seed": clip_seed(profile, "train", i, seed)})
    for i in range(n_test):
        clips.append({"file": f"test_{i:04d}.clip", "split": "test", "label": bool(flags[i]),
                      "anomaly": ANOMALIES[kinds[i]] if flags[i] else None,
                      "seed": clip_seed(profile, "test", i, seed)})
    return {"format": 1, "site_id": profile.site_id, "seed": seed,
            "anomaly_rate": anomaly_rate, "profile": profile.to_dict(), "clips": clips}


def from_manifest(manifest: dict) -> SiteDataset:
    profile = SiteProfile.from_dict(manifest["profile"])
    train, test, labels = [], [], []
    for c in manifest["clips"]:
        clip = generate_clip(profile, c["anomaly"], c["seed"])
        if c["split"] == "train":
            train.append(clip)
        else:
            test.append(clip)
            labels.append(bool(c["label"]))
    return SiteDataset(profile, train, test, labels, manifest)


def generate_site(profile: SiteProfile, n_train: int, n_test: int, anomaly_rate: float,
                  seed: int) -> SiteDataset:
    return from_manifest(site_manifest(profile, n_train, n_test, anomaly_rate, seed))


def pooled(datasets: Sequence[SiteDataset]) -> list[np.ndarray]:
    """Concatenated healthy training clips of several sites."""
    return [c for ds in datasets for c in ds.train]


def write_clip(clip: np.ndarray, path: str | Path) -> None:
    clip = np.asarray(clip, dtype="<f4")
    if clip.ndim == 3:
        clip = clip[..., None]
    header = CLIP_MAGIC + struct.pack("<BB4I", CLIP_VERSION, 4, *clip.shape)
    Path(path).write_bytes(header + clip.tobytes(order="C"))


def read_clip(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    version, rank, *dims = struct.unpack_from("<BB4I", blob, 8)
    if version != CLIP_VERSION or rank != 4:
        raise ValueError(f"{path}: unsupported clip version {version} / rank {rank}")
    n = int(np.prod(dims))
    data = np.frombuffer(blob, dtype="<f4", offset=26)
    if data.size != n:
        raise ValueError(f"{path}: expected {n} voxels, found {data.size}")
    return data.reshape(dims).astype(np.float32)


def save_site(ds: SiteDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr, te = iter(ds.train), iter(ds.test)
    for c in ds.manifest["clips"]:
        write_clip(next(tr) if c["split"] == "train" else next(te), directory / c["file"])
    (directory / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True))
    return directory


def load_site(directory: str | Path) -> SiteDataset:
    """Load a site directory: ``manifest.json`` plus the clip files it lists.

    The manifest only needs ``clips`` entries with ``file``, ``split`` and
    ``label``; a missing ``profile`` is allowed for user-provided clips.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    profile = (SiteProfile.from_dict(manifest["profile"]) if "profile" in manifest
               else SiteProfile(int(manifest.get("site_id", 0))))
    train, test, labels = [], [], []
    for c in manifest["clips"]:
        clip = read_clip(directory / c["file"])
        if c["split"] == "train":
            if c.get("label"):
                raise ValueError(f"{c['file']}: anomalous clip in the training split")
            train.append(clip)
        else:
            test.append(clip)
            labels.append(bool(c["label"]))
    return SiteDataset(profile, train, test, labels, manifest)


def motion_energy(clip: np.ndarray) -> float:
    """Mean absolute frame-to-frame difference."""
    return float(np.abs(np.diff(clip, axis=0)).mean())


def oracle_statistics(clip: np.ndarray) -> np.ndarray:
    """Hand-crafted clip statistics that expose every anomaly type.

    Motion energy, peak bright-area fraction, septum brightness and beat
    regularity (share of the area signal's power in its strongest bins). The
    septum is sampled along the column through the centroid of the bright
    structure, so it follows the per-clip position jitter.
    """
    c = clip[..., 0] if clip.ndim == 4 else clip
    thr = 0.5 * (c.max() + c.min())
    area = (c > thr).mean(axis=(1, 2))
    mean_img = c.mean(axis=0)
    ys, xs = np.nonzero(mean_img > 0.5 * (mean_img.max() + np.median(mean_img)))
    cy, cx = int(round(ys.mean())), int(round(xs.mean()))
    center = mean_img[max(cy - 4, 0):cy + 5, max(cx - 1, 0):cx + 2].mean()
    power = np.abs(np.fft.rfft(area - area.mean()))[1:] ** 2
    top = np.sort(power)[-3:].sum() / (power.sum() + 1e-12)
    return np.array([motion_energy(c), area.max(), center, top])


def perturb_profile(profile: SiteProfile, **changes) -> SiteProfile:
    return replace(profile, **changes)
