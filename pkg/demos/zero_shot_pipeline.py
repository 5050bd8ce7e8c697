"""
Zero-shot anomaly detection across sites
========================================

Three training sites each train their own model on healthy clips. The models
are averaged (model soup) or merged around their geometric median, then
every model scores the test clips of all five sites by KNN distance to that
site's healthy clips. Sites 4 and 5 never contribute training data.
"""

import tempfile
import time
from pathlib import Path

from studmerge import pipeline

cfg = pipeline.ExperimentConfig.load(Path(__file__).resolve().parents[1] / "configs" / "toy.json")
t0 = time.perf_counter()
result = pipeline.run_compare(cfg)
print(pipeline.format_table(result.table))
print(f"\n{time.perf_counter() - t0:.1f} s")

rep = result.merge_reports["divmerge"]
for i, site in enumerate(rep["sites"], start=1):
    print(f"site {i}: divergence {site['divergence_norm']:.4f}  weight {site['alpha']:.4f}  "
          f"retained {site['retained_fraction']:.4f}")

# every artifact (checkpoints, logs, config, report) in one directory
with tempfile.TemporaryDirectory() as tmp:
    out = pipeline.write_compare(result, cfg, tmp)
    print(sorted(p.name for p in out.rglob("*") if p.is_file()))
