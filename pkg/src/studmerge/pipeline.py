"""End-to-end experiment: synthesize sites, train, merge, evaluate, compare."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import divmerge, knn, params, synth
from .params import ParamMap
from .synth import SiteDataset, SiteProfile
from .trainer import TrainConfig, TrainResult, train_site

log = logging.getLogger(__name__)

STRATEGIES = ("centralized", "individual", "model_soup", "divmerge")


@dataclass
class SynthConfig:
    n_train: int = 24
    n_test: int = 20
    anomaly_rate: float = 0.4
    train_sites: list[int] = field(default_factory=lambda: [1, 2, 3])
    heldout_sites: list[int] = field(default_factory=lambda: [4, 5])
    profiles: list[dict] | None = None

    def site_profiles(self, seed: int) -> dict[int, SiteProfile]:
        profs = ([SiteProfile.from_dict(p) for p in self.profiles] if self.profiles
                 else synth.default_profiles(seed))
        return {p.site_id: p for p in profs}


@dataclass
class KnnConfig:
    k: int = 5
    quantile: float = 0.95
    n_clips: int = 4
    calibration_fraction: float = 0.3


@dataclass
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    merge: divmerge.MergeConfig = field(default_factory=divmerge.MergeConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "synth": asdict(self.synth),
            "train": self.train.to_dict(),
            "merge": self.merge.to_dict(),
            "knn": asdict(self.knn),
            "strategies": list(self.strategies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        unknown = set(d) - {"seed", "synth", "train", "merge", "knn", "strategies"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        strategies = list(d.get("strategies", STRATEGIES))
        bad = [s for s in strategies if s not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategies {bad}; choose from {STRATEGIES}")
        return cls(
            seed=int(d.get("seed", 0)),
            synth=SynthConfig(**d.get("synth", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            merge=divmerge.MergeConfig.from_dict(d.get("merge", {})),
            knn=KnnConfig(**d.get("knn", {})),
            strategies=strategies,
        )

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def site_train_config(cfg: ExperimentConfig, site_id: int) -> TrainConfig:
    """Per-site data seed; the initialization is shared by every site."""
    tc = TrainConfig.from_dict(cfg.train.to_dict())
    tc.seed = int(np.random.SeedSequence([cfg.seed, site_id, 0x7A1]).generate_state(1)[0])
    tc.init_seed = cfg.seed
    return tc


def make_sites(cfg: ExperimentConfig) -> dict[int, SiteDataset]:
    profiles = cfg.synth.site_profiles(cfg.seed)
    out = {}
    for sid in [*cfg.synth.train_sites, *cfg.synth.heldout_sites]:
        out[sid] = synth.generate_site(profiles[sid], cfg.synth.n_train, cfg.synth.n_test,
                                       cfg.synth.anomaly_rate, cfg.seed)
    return out


def split_reference(ds: SiteDataset, calibration_fraction: float):
    """Healthy training clips split into (bank videos, calibration videos)."""
    n = len(ds.train)
    n_cal = max(1, int(round(n * calibration_fraction))) if n > 1 else 0
    return ds.train[: n - n_cal], ds.train[n - n_cal:]


@dataclass
class Reference:
    """Feature bank plus the threshold calibrated on held-back healthy clips."""
    bank: knn.FeatureBank
    threshold: float
    k: int


def build_reference(model: ParamMap, ds: SiteDataset, cfg: ExperimentConfig) -> Reference:
    tubes = cfg.train.encoder.tubes
    frames, rate, kc = cfg.train.clip_frames, cfg.train.clip_rate, cfg.knn
    bank_videos, cal_videos = split_reference(ds, kc.calibration_fraction)
    bank = knn.build_bank(model, bank_videos, tubes, kc.n_clips, frames, rate)
    k = min(kc.k, len(bank))
    cal = [knn.knn_scores(bank, knn.extract_features(model, v, kc.n_clips, tubes, frames, rate), k)
           for v in cal_videos] or [np.zeros(1)]
    return Reference(bank, knn.calibrate_threshold(np.concatenate(cal), kc.quantile), k)


def evaluate_site(model: ParamMap, ds: SiteDataset, cfg: ExperimentConfig,
                  reference: Reference | None = None) -> knn.EvalResult:
    """Zero-shot evaluation: healthy clips only serve as KNN reference.

    Without an explicit ``reference`` the bank comes from the evaluated
    site's own healthy training split.
    """
    ref = reference or build_reference(model, ds, cfg)
    kc = cfg.knn
    return knn.evaluate(model, ref.bank, ds.test, ds.test_labels, cfg.train.encoder.tubes,
                        ref.k, ref.threshold, kc.n_clips, cfg.train.clip_frames,
                        cfg.train.clip_rate)


def macro_average(rows: Sequence[knn.Metrics]) -> dict:
    keys = ("accuracy", "precision", "recall", "f1")
    return {k: float(np.mean([getattr(m, k) for m in rows])) for k in keys}


@dataclass
class CompareResult:
    models: dict[str, ParamMap]
    train_logs: dict[str, list[dict]]
    merge_reports: dict[str, dict]
    table: dict[str, dict[str, dict]]

    def report(self) -> dict:
        return {"metrics": self.table, "merge_reports": self.merge_reports,
                "checksums": {k: m.checksum() for k, m in sorted(self.models.items())}}


def train_models(cfg: ExperimentConfig, sites: dict[int, SiteDataset]):
    """Individual site models and, if requested, the centralized model."""
    models, logs = {}, {}
    train_ids = cfg.synth.train_sites
    need_individual = {"individual", "model_soup", "divmerge"} & set(cfg.strategies)
    if need_individual:
        for sid in train_ids:
            res: TrainResult = train_site(sites[sid].train, site_train_config(cfg, sid))
            models[f"individual_site{sid}"] = res.student
            logs[f"individual_site{sid}"] = res.log
    if "centralized" in cfg.strategies:
        # pooled data, same epochs: N times the steps of one site run
        res = train_site(synth.pooled([sites[s] for s in train_ids]), site_train_config(cfg, 0))
        models["centralized"] = res.student
        logs["centralized"] = res.log
    return models, logs


def run_compare(cfg: ExperimentConfig, sites: dict[int, SiteDataset] | None = None,
                eval_sites: Sequence[int] | None = None) -> CompareResult:
    sites = sites or make_sites(cfg)
    models, logs = train_models(cfg, sites)
    individuals = [models[f"individual_site{s}"] for s in cfg.synth.train_sites
                   if f"individual_site{s}" in models]
    reports = {}
    if "model_soup" in cfg.strategies:
        models["model_soup"] = divmerge.model_soup(individuals)
    if "divmerge" in cfg.strategies:
        merged, rep = divmerge.merge(individuals, cfg.merge)
        models["divmerge"] = merged
        reports["divmerge"] = rep.to_dict()

    eval_ids = list(eval_sites) if eval_sites is not None else [
        *cfg.synth.train_sites, *cfg.synth.heldout_sites]
    table: dict[str, dict[str, dict]] = {}
    for name, model in models.items():
        row, external = {}, []
        for sid in eval_ids:
            m = evaluate_site(model, sites[sid], cfg).metrics
            row[f"site{sid}"] = m.to_dict()
            if sid in cfg.synth.heldout_sites:
                external.append(m)
        if external:
            row["heldout_average"] = macro_average(external)
        row["average"] = macro_average([metrics_from(row[f"site{s}"]) for s in eval_ids])
        table[name] = row
    return CompareResult(models, logs, reports, table)


def metrics_from(d: dict) -> knn.Metrics:
    (tn, fp), (fn, tp) = d["confusion"]
    return knn.Metrics(tp, fp, tn, fn)


def format_table(table: dict[str, dict[str, dict]]) -> str:
    """Human-readable F1/accuracy table, one row per model."""
    cols = [c for c in next(iter(table.values())) if c.startswith("site")] + ["average"]
    head = f"{'model':<22}" + "".join(f"{c + ' F1':>16}" for c in cols) + f"{'avg acc':>10}"
    lines = [head, "-" * len(head)]
    for name, row in table.items():
        cells = "".join(f"{100 * row[c]['f1']:>16.2f}" for c in cols)
        lines.append(f"{name:<22}{cells}{100 * row['average']['accuracy']:>10.2f}")
    return "\n".join(lines)


def write_compare(result: CompareResult, cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for name, model in sorted(result.models.items()):
        params.save(model, out / "checkpoints" / f"{name}.ckpt")
    for name, records in sorted(result.train_logs.items()):
        write_log(records, out / "checkpoints" / f"{name}.log.jsonl")
    cfg.dump(out / "config.json")
    (out / "report.json").write_text(json.dumps(result.report(), indent=1, sort_keys=True))
    (out / "table.txt").write_text(format_table(result.table) + "\n")
    return out


def write_log(records: Sequence[dict], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
