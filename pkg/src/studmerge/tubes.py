"""Sparse tube tokenization of video clips.

A clip of shape ``(T, H, W, C)`` is covered by a few families of 3D tubes,
each placed on a coarse stride grid. Every family shares one learnable
``8 x 8 x 8`` base kernel, resampled trilinearly to the family's tube shape.
A token is the inner product of a clip patch with the resampled kernel plus a
fixed sinusoidal encoding of the tube center.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

BASE_KERNEL_SHAPE = (8, 8, 8)

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class TubeConfig:
    """Shape, stride and offset of one tube family (time, height, width)."""

    kernel: Triple
    stride: Triple
    offset: Triple = (0, 0, 0)
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        object.__setattr__(self, "offset", tuple(int(v) for v in self.offset))
        if len(self.kernel) != 3 or len(self.stride) != 3 or len(self.offset) != 3:
            raise ValueError("kernel, stride and offset must have three components")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride components must be >= 1: {self}")
        if min(self.offset) < 0:
            raise ValueError(f"offsets must be >= 0: {self}")
        if not self.label:
            object.__setattr__(
                self, "label", "x".join(str(k) for k in self.kernel)
            )

    def grid(self, dims: Sequence[int]) -> Triple:
        """Number of placements along each axis for clip dims ``(T, H, W)``."""
        counts = []
        for d, k, s, o in zip(dims, self.kernel, self.stride, self.offset):
            if o + k > d:
                raise ValueError(
                    f"tube {self.label} (kernel {self.kernel}, offset {self.offset}) "
                    f"does not fit clip dims {tuple(dims)}"
                )
            counts.append((d - o - k) // s + 1)
        return tuple(counts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TubeConfig:
        return cls(
            kernel=tuple(d["kernel"]),
            stride=tuple(d["stride"]),
            offset=tuple(d.get("offset", (0, 0, 0))),
            label=d.get("label", ""),
        )


def default_tube_configs() -> list[TubeConfig]:
    """Image, video, temporally elongated and spatially focused tubes.

    On a 64x224x224 clip these give 784 + 98 + 98 + 196 = 1176 tokens.
    """
    return [
        TubeConfig((1, 16, 16), (16, 16, 16), label="image"),
        TubeConfig((8, 8, 8), (32, 32, 32), label="video"),
        TubeConfig((16, 4, 4), (32, 32, 32), label="elongated"),
        TubeConfig((2, 16, 16), (16, 32, 32), label="spatial"),
    ]


@dataclass
class TubeSet:
    """Tube families sharing one base kernel of shape ``8x8x8 x C x d``."""

    configs: list[TubeConfig] = field(default_factory=default_tube_configs)
    embed_dim: int = 16
    channels: int = 1
    space_to_depth: bool = False

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if not self.configs:
            raise ValueError("a TubeSet needs at least one tube config")
        labels = [c.label for c in self.configs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"tube labels must be unique: {labels}")

    @property
    def kernel_channels(self) -> int:
        """Channels seen by the kernels (doubled by space-to-depth)."""
        return 2 * self.channels if self.space_to_depth else self.channels

    @property
    def base_kernel_shape(self) -> tuple[int, ...]:
        return (*BASE_KERNEL_SHAPE, self.kernel_channels, self.embed_dim)

    def input_dims(self, clip_shape: Sequence[int]) -> Triple:
        t, h, w = clip_shape[:3]
        if self.space_to_depth:
            return (t, h // 2, w // 2)
        return (t, h, w)

    def token_count(self, clip_dims: Sequence[int]) -> int:
        dims = self.input_dims(clip_dims)
        return sum(token_count(dims, c) for c in self.configs)

    def init_kernel(self, rng: np.random.Generator) -> np.ndarray:
        fan_in = int(np.prod(BASE_KERNEL_SHAPE)) * self.kernel_channels
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=self.base_kernel_shape)

    def to_dict(self) -> dict:
        return {
            "configs": [c.to_dict() for c in self.configs],
            "embed_dim": self.embed_dim,
            "channels": self.channels,
            "space_to_depth": self.space_to_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TubeSet:
        return cls(
            configs=[TubeConfig.from_dict(c) for c in d["configs"]],
            embed_dim=int(d.get("embed_dim", 16)),
            channels=int(d.get("channels", 1)),
            space_to_depth=bool(d.get("space_to_depth", False)),
        )


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (N, d)
    positions: np.ndarray  # (N, 3), tube centers in [0, 1]
    source_labels: list[str]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def token_count(clip_dims: Sequence[int], config: TubeConfig) -> int:
    """Number of tube placements of ``config`` inside a ``(T, H, W)`` clip."""
    nt, nh, nw = config.grid(clip_dims[:3])
    return nt * nh * nw


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1D linear interpolation matrix of shape ``(n_out, n_in)``.

    Endpoints are aligned: output sample ``j`` reads input coordinate
    ``j * (n_in - 1) / (n_out - 1)``. A single output sample reads the
    center of the input.
    """
    if n_out == 1:
        coords = np.array([(n_in - 1) / 2.0])
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(coords).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_kernel(base: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Trilinearly resample the leading three axes of ``base`` to ``target``.

    Trailing axes (channels, embedding) are carried along unchanged.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target must be three positive ints, got {target}")
    if target == base.shape[:3]:
        return base.copy()
    mt, mh, mw = (interp_matrix(n, t) for n, t in zip(base.shape[:3], target))
    return np.einsum("at,bh,cw,thw...->abc...", mt, mh, mw, base, optimize=True)


def resize_kernel_adjoint(grad: np.ndarray, base_shape: Sequence[int]) -> np.ndarray:
    """Transpose of :func:`resize_kernel`; maps a resized-kernel gradient back."""
    base_shape = tuple(base_shape[:3])
    if grad.shape[:3] == base_shape:
        return grad.copy()
    mt, mh, mw = (interp_matrix(n, t) for n, t in zip(base_shape, grad.shape[:3]))
    return np.einsum("at,bh,cw,abc...->thw...", mt, mh, mw, grad, optimize=True)


def space_to_depth(feat: np.ndarray, factor: int = 2, project: bool = True) -> np.ndarray:
    """Fold ``factor x factor`` spatial blocks into channels.

    ``(T, H, W, c)`` becomes ``(T, H/f, W/f, f*f*c)`` with block element
    ``(dy, dx)`` stored at channels ``(dy*f + dx)*c ... + c``. With
    ``project`` (the default) adjacent channel pairs are then averaged, a
    fixed linear map to ``f*f*c/2`` channels.
    """
    if feat.ndim != 4:
        raise ValueError("expected a (T, H, W, C) array")
    t, h, w, c = feat.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {(h, w)} not divisible by {factor}")
    out = feat.reshape(t, h // factor, factor, w // factor, factor, c)
    out = out.transpose(0, 1, 3, 2, 4, 5).reshape(t, h // factor, w // factor, factor * factor * c)
    if project:
        out = 0.5 * (out[..., 0::2] + out[..., 1::2])
    return out


def sinusoidal_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed encoding of normalized 3D positions, shape ``(N, dim)``.

    Feature ``i`` uses axis ``i % 3``; consecutive groups alternate sine and
    cosine with frequencies ``pi * 2**k``.
    """
    positions = np.atleast_2d(positions)
    i = np.arange(dim)
    axis = i % 3
    group = i // 3
    freq = np.pi * 2.0 ** (group // 2)
    phase = freq[None, :] * positions[:, axis]
    return np.where(group % 2 == 0, np.sin(phase), np.cos(phase))


def tube_centers(clip_dims: Sequence[int], config: TubeConfig) -> np.ndarray:
    """Normalized centers of all placements, in row-major (t, h, w) order."""
    axes = []
    for n, d, k, s, o in zip(config.grid(clip_dims), clip_dims, config.kernel,
                             config.stride, config.offset):
        axes.append((o + s * np.arange(n) + k / 2.0) / d)
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def extract_patches(clip: np.ndarray, config: TubeConfig) -> np.ndarray:
    """All tube patches of ``clip``, shape ``(N, kt, kh, kw, C)``."""
    dims = clip.shape[:3]
    grid = config.grid(dims)
    idx = [
        o + s * np.arange(n)[:, None] + np.arange(k)[None, :]
        for n, k, s, o in zip(grid, config.kernel, config.stride, config.offset)
    ]
    patches = clip[np.ix_(idx[0].ravel(), idx[1].ravel(), idx[2].ravel())]
    (nt, nh, nw), (kt, kh, kw) = grid, config.kernel
    patches = patches.reshape(nt, kt, nh, kh, nw, kw, -1)
    return patches.transpose(0, 2, 4, 1, 3, 5, 6).reshape(nt * nh * nw, kt, kh, kw, -1)


def patch_sum(clip: np.ndarray, config: TubeConfig) -> np.ndarray:
    """Sum of all tube patches, shape ``(kt, kh, kw, C)``.

    Equivalent to ``extract_patches(clip, config).sum(0)`` but computed one
    axis at a time, which is what mean pooling over tokens needs.
    """
    out = clip
    for axis, (n, k, s, o) in enumerate(
        zip(config.grid(clip.shape[:3]), config.kernel, config.stride, config.offset)
    ):
        idx = o + s * np.arange(n)[:, None] + np.arange(k)[None, :]
        taken = np.take(out, idx.ravel(), axis=axis)
        shape = list(out.shape)
        shape[axis:axis + 1] = [n, k]
        out = taken.reshape(shape).sum(axis=axis)
    return out


def prepare_clip(clip: np.ndarray, tubes: TubeSet) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim == 3:
        clip = clip[..., None]
    if clip.ndim != 4 or clip.shape[3] != tubes.channels:
        raise ValueError(
            f"clip shape {clip.shape} incompatible with {tubes.channels}-channel tube set"
        )
    if tubes.space_to_depth:
        clip = space_to_depth(clip, 2)
    return clip


def tokenize(clip: np.ndarray, tubes: TubeSet, base_kernel: np.ndarray,
             positional: bool = True) -> TokenSequence:
    """Tokenize one clip with every tube family, concatenating the results."""
    clip = prepare_clip(clip, tubes)
    if base_kernel.shape != tubes.base_kernel_shape:
        raise ValueError(
            f"base kernel shape {base_kernel.shape}, expected {tubes.base_kernel_shape}"
        )
    dims = clip.shape[:3]
    tokens, positions, labels = [], [], []
    for cfg in tubes.configs:
        kernel = resize_kernel(base_kernel, cfg.kernel)
        patches = extract_patches(clip, cfg)
        content = patches.reshape(len(patches), -1) @ kernel.reshape(-1, tubes.embed_dim)
        centers = tube_centers(dims, cfg)
        if positional:
            content = content + sinusoidal_encoding(centers, tubes.embed_dim)
        tokens.append(content)
        positions.append(centers)
        labels.extend([cfg.label] * len(content))
    return TokenSequence(np.concatenate(tokens), np.concatenate(positions), labels)
