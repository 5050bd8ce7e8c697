"""
Sparse tube tokenization
========================

Four tube shapes, each sampled at a large stride, replace the 12544 dense
per-frame 16x16 patches of a 64x224x224 clip with a little over a thousand
tokens. All tubes share one 8x8x8 kernel that is trilinearly resized to the
tube shape.
"""

import numpy as np

from studmerge.tubes import TubeSet, resize_kernel, tokenize

tubes = TubeSet(embed_dim=16)
dims = (64, 224, 224)
dense = 64 * (224 // 16) ** 2

# token count per tube: floor((D - offset - kernel) / stride) + 1 along each axis
for cfg in tubes.configs:
    print(f"{cfg.label:>10}  kernel {cfg.kernel}  stride {cfg.stride}  "
          f"grid {cfg.grid(dims)}  -> {int(np.prod(cfg.grid(dims)))} tokens")
total = tubes.token_count(dims)
print(f"total {total} tokens, {100 * total / dense:.2f}% of {dense} dense patches")

# the shared base kernel is resized per tube; a constant kernel stays constant
base = tubes.init_kernel(np.random.default_rng(0))
print("base kernel", base.shape)
for cfg in tubes.configs:
    print(f"{cfg.label:>10} kernel resized to", resize_kernel(base, cfg.kernel).shape)

# tokenizing a desk-scale clip: tokens carry content plus a sinusoidal position code
clip = np.random.default_rng(1).random((32, 64, 64, 1)).astype(np.float32)
seq = tokenize(clip, tubes, base)
print(f"32x64x64 clip -> {len(seq)} tokens of width {seq.tokens.shape[1]}")
labels, counts = np.unique(seq.source_labels, return_counts=True)
print(dict(zip(labels.tolist(), counts.tolist())))
