"""Small differentiable video encoder: tube tokens, tanh, mean pooling, 2-layer head.

Forward pass for one view::

    tokens  = patches @ resize(base_kernel) + positional encoding
    pooled  = mean(tanh(tokens))                  # the clip feature
    logits  = w2 @ tanh(w1 @ pooled + b1) + b2

Patch extraction does not depend on the parameters, so :func:`view_tokens`
runs it once per view and every later pass reuses the result.

Parameter names::

    tubes.base_kernel   (8, 8, 8, C, d)
    head.w1             (hidden, d)
    head.b1             (hidden,)
    head.w2             (K, hidden)
    head.b2             (K,)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import ParamMap
from .tubes import (
    TubeSet,
    extract_patches,
    prepare_clip,
    resize_kernel,
    resize_kernel_adjoint,
    sinusoidal_encoding,
    tube_centers,
)

KERNEL = "tubes.base_kernel"


@dataclass
class EncoderConfig:
    tubes: TubeSet = field(default_factory=TubeSet)
    hidden_dim: int = 32
    n_prototypes: int = 16

    def to_dict(self) -> dict:
        return {
            "tubes": self.tubes.to_dict(),
            "hidden_dim": self.hidden_dim,
            "n_prototypes": self.n_prototypes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        return cls(
            tubes=TubeSet.from_dict(d["tubes"]) if "tubes" in d else TubeSet(),
            hidden_dim=int(d.get("hidden_dim", 32)),
            n_prototypes=int(d.get("n_prototypes", 16)),
        )


def init_params(config: EncoderConfig, seed: int) -> ParamMap:
    rng = np.random.default_rng([seed, 0xE1C])
    d, h, k = config.tubes.embed_dim, config.hidden_dim, config.n_prototypes
    return ParamMap({
        KERNEL: config.tubes.init_kernel(rng),
        "head.w1": rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d)),
        "head.b1": np.zeros(h),
        "head.w2": rng.normal(0.0, 1.0 / np.sqrt(h), size=(k, h)),
        "head.b2": np.zeros(k),
    })


@dataclass
class ViewTokens:
    """Flattened patches of a batch of views.

    ``patches[c]`` is ``(sum of tokens of family c, V_c)`` over all views,
    ``view_of[c]`` the owning view of each row, ``pos[c]`` the positional
    encodings and ``counts`` the total token count per view.
    """

    patches: list[np.ndarray]
    view_of: list[np.ndarray]
    pos: list[np.ndarray]
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.counts)

    @classmethod
    def stack(cls, items: Sequence[ViewTokens]) -> ViewTokens:
        n = len(items[0].patches)
        offsets = np.cumsum([0] + [len(it) for it in items[:-1]])
        return cls(
            [np.concatenate([it.patches[c] for it in items]) for c in range(n)],
            [np.concatenate([it.view_of[c] + o for it, o in zip(items, offsets)])
             for c in range(n)],
            [np.concatenate([it.pos[c] for it in items]) for c in range(n)],
            np.concatenate([it.counts for it in items]),
        )


def view_tokens(clip: np.ndarray, tubes: TubeSet) -> ViewTokens:
    clip = prepare_clip(clip, tubes)
    dims = clip.shape[:3]
    patches, owners, pos = [], [], []
    for cfg in tubes.configs:
        p = extract_patches(clip, cfg)
        patches.append(p.reshape(len(p), -1))
        owners.append(np.zeros(len(p), dtype=np.intp))
        pos.append(sinusoidal_encoding(tube_centers(dims, cfg), tubes.embed_dim))
    return ViewTokens(patches, owners, pos, np.array([sum(len(p) for p in patches)]))


def _kernels(params: dict, tubes: TubeSet) -> list[np.ndarray]:
    base = params[KERNEL]
    return [resize_kernel(base, c.kernel).reshape(-1, tubes.embed_dim) for c in tubes.configs]


def _pool(values: np.ndarray, owners: np.ndarray, n_views: int) -> np.ndarray:
    out = np.zeros((n_views, values.shape[1]))
    np.add.at(out, owners, values)
    return out


def embed(params: dict, views: ViewTokens, tubes: TubeSet, _cache: list | None = None) -> np.ndarray:
    """Mean-pooled activated token embeddings, shape ``(B, d)``."""
    pooled = np.zeros((len(views), tubes.embed_dim))
    for p, owner, pe, k in zip(views.patches, views.view_of, views.pos, _kernels(params, tubes)):
        act = np.tanh(p @ k + pe)
        if _cache is not None:
            _cache.append(act)
        pooled += _pool(act, owner, len(views))
    return pooled / views.counts[:, None]


def forward(params: dict, views: ViewTokens, tubes: TubeSet):
    """Prototype logits ``(B, K)`` and the cache needed by :func:`backward`."""
    acts: list[np.ndarray] = []
    pooled = embed(params, views, tubes, acts)
    hidden = np.tanh(pooled @ params["head.w1"].T + params["head.b1"])
    logits = hidden @ params["head.w2"].T + params["head.b2"]
    return logits, (views, acts, pooled, hidden)


def backward(params: dict, cache, dlogits: np.ndarray, tubes: TubeSet) -> dict:
    views, acts, pooled, hidden = cache
    grads = {
        "head.w2": dlogits.T @ hidden,
        "head.b2": dlogits.sum(0),
    }
    dz = (dlogits @ params["head.w2"]) * (1.0 - hidden ** 2)
    grads["head.w1"] = dz.T @ pooled
    grads["head.b1"] = dz.sum(0)
    dpooled = (dz @ params["head.w1"]) / views.counts[:, None]

    base_shape = params[KERNEL].shape
    dbase = np.zeros(base_shape)
    for p, owner, act, cfg in zip(views.patches, views.view_of, acts, tubes.configs):
        dtok = dpooled[owner] * (1.0 - act ** 2)
        dk = (p.T @ dtok).reshape(*cfg.kernel, *base_shape[3:])
        dbase += resize_kernel_adjoint(dk, base_shape)
    grads[KERNEL] = dbase
    return grads


def encode_features(params: ParamMap | dict, clips: Sequence[np.ndarray],
                    tubes: TubeSet) -> np.ndarray:
    """Pooled clip features ``(len(clips), d)``, the input to the head."""
    if isinstance(params, ParamMap):
        params = params.to_dict()
    if not clips:
        return np.zeros((0, tubes.embed_dim))
    views = ViewTokens.stack([view_tokens(c, tubes) for c in clips])
    return embed(params, views, tubes)
