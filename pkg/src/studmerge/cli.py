"""Command line entry point: ``studmerge {synth,train,merge,eval,compare}``.

Exit codes: 0 success, 2 invalid arguments or configuration, 1 runtime
failure (missing data, misaligned checkpoints, diverged training, ...).
Machine-readable results go to JSON files; a short human-readable summary
goes to standard output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import divmerge, knn, params, pipeline, synth
from .encoder import init_params
from .pipeline import ExperimentConfig
from .trainer import train_site

log = logging.getLogger("studmerge")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then explicit flags, then ``--config`` (which wins)."""
    flags: dict = {}

    def put(path: str, value):
        if value is None:
            return
        node = flags
        *head, last = path.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[last] = value

    for dest, path in FLAG_PATHS.items():
        put(path, getattr(args, dest, None))
    d = _deep_update(ExperimentConfig().to_dict(), flags)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        d = _deep_update(d, file_cfg)
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(str(e)) from e


# argparse dest -> dotted ExperimentConfig key
FLAG_PATHS = {
    "seed": "seed",
    "n_train": "synth.n_train",
    "n_test": "synth.n_test",
    "anomaly_rate": "synth.anomaly_rate",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr_init",
    "lam": "merge.lam",
    "gamma": "merge.gamma",
    "k": "knn.k",
    "quantile": "knn.quantile",
    "n_clips": "knn.n_clips",
    "strategies": "strategies",
}


def _site_dir(root: Path, site_id: int) -> Path:
    return root / f"site{site_id}"


def _load_site(root: Path, site_id: int) -> synth.SiteDataset:
    path = _site_dir(root, site_id)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset for site {site_id} under {root}")
    return synth.load_site(path)


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _check_model(model: params.ParamMap, cfg: ExperimentConfig) -> None:
    ref = init_params(cfg.train.encoder, 0)
    try:
        params.check_aligned(ref, model)
    except params.AlignmentError as e:
        raise ConfigError(f"checkpoint does not match the configured encoder: {e}") from e


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    profiles = cfg.synth.site_profiles(cfg.seed)
    ids = args.sites or [*cfg.synth.train_sites, *cfg.synth.heldout_sites]
    for sid in ids:
        if sid not in profiles:
            raise ConfigError(f"no profile for site {sid}")
        ds = synth.generate_site(profiles[sid], cfg.synth.n_train, cfg.synth.n_test,
                                 cfg.synth.anomaly_rate, cfg.seed)
        synth.save_site(ds, _site_dir(out, sid))
        print(f"site{sid}: {len(ds.train)} train, {len(ds.test)} test "
              f"({sum(ds.test_labels)} anomalous) -> {_site_dir(out, sid)}")
    cfg.dump(out / "config.json")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    root = Path(args.data)
    sites = [_load_site(root, sid) for sid in args.sites]
    videos = synth.pooled(sites)
    # one site id keeps the per-site seed used by ``compare``; a pooled run uses 0
    tc = pipeline.site_train_config(cfg, args.sites[0] if len(args.sites) == 1 else 0)
    res = train_site(videos, tc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.save(res.student, out)
    pipeline.write_log(res.log, out.with_suffix(".log.jsonl"))
    last = [r for r in res.log if r["type"] == "epoch"][-1]
    print(f"trained on sites {args.sites} ({len(videos)} videos): final loss {last['loss']:.4f}, "
          f"teacher entropy {last['teacher_entropy']:.3f} -> {out} [{res.student.checksum()[:12]}]")
    return EXIT_OK


def cmd_merge(args, cfg: ExperimentConfig) -> int:
    models = [params.load(p) for p in args.checkpoints]
    for path, m in zip(args.checkpoints[1:], models[1:]):
        try:
            params.check_aligned(models[0], m)
        except params.AlignmentError as e:
            raise params.AlignmentError(f"{path}: {e}") from e
    if args.strategy == "soup":
        merged = divmerge.model_soup(models)
        report = {"strategy": "soup", "n_models": len(models)}
    else:
        merged, rep = divmerge.merge(models, cfg.merge)
        report = {"strategy": "divmerge", **rep.to_dict()}
    report["inputs"] = [str(p) for p in args.checkpoints]
    report["checksum"] = merged.checksum()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.save(merged, out)
    _write_json(report, Path(args.report) if args.report else out.with_suffix(".report.json"))
    print(f"merged {len(models)} checkpoints ({args.strategy}) -> {out} [{merged.checksum()[:12]}]")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model = params.load(args.model)
    _check_model(model, cfg)
    root = Path(args.data)
    reference = None
    if args.bank:
        bank = knn.FeatureBank.from_params(params.load(args.bank))
        bank.check_model(model)
        if args.threshold is None:
            raise ConfigError("--bank needs --threshold (calibration data is not stored in a bank)")
        reference = pipeline.Reference(bank, args.threshold, min(cfg.knn.k, len(bank)))
    elif args.bank_site is not None:
        reference = pipeline.build_reference(model, _load_site(root, args.bank_site), cfg)
    if args.save_bank:
        if reference is None:
            raise ConfigError("--save-bank needs --bank-site")
        params.save(reference.bank.to_params(), args.save_bank)

    rows = {}
    for sid in args.sites:
        ds = _load_site(root, sid)
        if not ds.test:
            raise ValueError(f"site {sid} has no test videos")
        res = pipeline.evaluate_site(model, ds, cfg, reference)
        rows[f"site{sid}"] = {**res.metrics.to_dict(), "threshold": res.threshold}
    report = {"model": str(args.model), "model_checksum": model.checksum(), "sites": rows,
              "average": pipeline.macro_average([pipeline.metrics_from(r) for r in rows.values()])}
    if args.out:
        _write_json(report, Path(args.out))
    table = {Path(args.model).stem: {**rows, "average": report["average"]}}
    print(pipeline.format_table(table))
    return EXIT_OK


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    if args.data:
        root = Path(args.data)
        ids = [*cfg.synth.train_sites, *cfg.synth.heldout_sites]
        sites = {sid: _load_site(root, sid) for sid in ids}
    else:
        sites = None
    result = pipeline.run_compare(cfg, sites)
    out = pipeline.write_compare(result, cfg, args.out)
    print(pipeline.format_table(result.table))
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="studmerge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="JSON experiment config; its values override flags")
        sp.add_argument("--seed", type=int, required=seed_required)

    s = sub.add_parser("synth", help="generate synthetic site datasets")
    common(s, seed_required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sites", type=_int_list, help="site ids (default: all configured)")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--anomaly-rate", type=float)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model on one or more sites (pooled)")
    common(t, seed_required=True)
    t.add_argument("--data", required=True, help="directory holding site<N>/ datasets")
    t.add_argument("--sites", type=_int_list, required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="merge site checkpoints")
    common(m)
    m.add_argument("checkpoints", nargs="+")
    m.add_argument("--out", required=True)
    m.add_argument("--strategy", choices=("divmerge", "soup"), default="divmerge")
    m.add_argument("--lambda", dest="lam", type=float)
    m.add_argument("--gamma", type=float)
    m.add_argument("--report", help="report JSON path (default: next to --out)")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="zero-shot KNN evaluation on site test splits")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--sites", type=_int_list, required=True)
    e.add_argument("--bank-site", type=int, help="build one bank from this site for all sites")
    e.add_argument("--bank", help="precomputed bank checkpoint")
    e.add_argument("--threshold", type=float, help="decision threshold for --bank")
    e.add_argument("--save-bank")
    e.add_argument("--k", type=int)
    e.add_argument("--quantile", type=float)
    e.add_argument("--n-clips", type=int)
    e.add_argument("--out", help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="centralized / individual / soup / divmerge table")
    common(c)
    c.add_argument("--out", required=True)
    c.add_argument("--data", help="existing site<N>/ datasets (default: synthesize)")
    c.add_argument("--epochs", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--lambda", dest="lam", type=float)
    c.add_argument("--gamma", type=float)
    c.add_argument("--strategies", type=lambda s: s.split(","))
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"studmerge: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 1
        if args.verbose:
            log.exception("command failed")
        print(f"studmerge: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
