"""
Self-distillation on one synthetic site
=======================================

A student encoder learns to match an exponential-moving-average teacher across
augmented global and local views of healthy clips. The teacher entropy shows
whether its outputs collapsed onto one prototype.
"""

import math
from pathlib import Path

from studmerge import pipeline, synth
from studmerge.trainer import train_site

cfg = pipeline.ExperimentConfig.load(Path(__file__).resolve().parents[1] / "configs" / "toy.json")
profile = synth.default_profiles(cfg.seed)[0]
site = synth.generate_site(profile, cfg.synth.n_train, 0, 0.0, cfg.seed)
print(f"site {profile.site_id}: {len(site.train)} healthy clips of shape {site.train[0].shape}")

res = train_site(site.train, pipeline.site_train_config(cfg, profile.site_id))
k = cfg.train.encoder.n_prototypes
for rec in res.log:
    if rec["type"] == "step":
        print(f"step {rec['step']:>2}  lr {rec['lr']:.4f}  loss {rec['loss']:.4f}  "
              f"teacher entropy {rec['teacher_entropy']:.3f} (uniform {math.log(k):.3f})")
print("student checksum", res.student.checksum()[:16])
