"""``relikin`` command line: generate, train, finetune-hetero, eval, sweep, rerun.

Every command writes ``run_manifest.json`` next to its outputs. The manifest
holds the fully resolved configuration, so ``relikin rerun MANIFEST --out DIR``
repeats the run without consulting the original config file and reproduces
every CSV byte for byte.

Seeding: one ``--seed`` per command (falling back to the seed field of the
config file) feeds named sub-streams: ``init`` for weights, ``shuffle`` and
``train-dropout`` for training, ``split`` for subject splits, ``mc`` for
dropout sampling, ``degrade`` for input noise.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from . import data_io as dio
from . import evaluation as ev
from .config import RunConfig, load_config
from .errors import ConfigError, DataFormatError, RelikinError
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .reliability import NOISE_SIGMAS_MM
from .training import train, warm_start_heteroscedastic
from .uncertainty import KINDS, SamplerConfig, write_prediction_dump

log = logging.getLogger("relikin")

MANIFEST_NAME = "run_manifest.json"
IO_EXIT_CODE = 9


def _resolve_config(args) -> RunConfig:
    if getattr(args, "resolved", None) is not None:
        cfg = RunConfig()
        for section, values in args.resolved.items():
            cfg.values[section] = dict(values)
        return cfg
    return load_config(args.config) if args.config else RunConfig()


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("RELIKIN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _load_splits(corpus_dir: Path, corpus, cfg: RunConfig, seed: int):
    path = corpus_dir / "splits.json"
    if path.exists():
        return dio.load_splits(path)
    return dio.split_subjects(corpus, cfg.ratios(), seed)


def _clips(corpus_dir: Path, split: str, cfg: RunConfig, seed: int):
    corpus = dio.load_corpus(corpus_dir)
    splits = _load_splits(corpus_dir, corpus, cfg, seed)
    return dio.clipset(corpus, splits, split)


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg: RunConfig, out: Path) -> dict:
    gen = cfg.build("generator")
    seed = gen.seed if args.seed is None else args.seed
    gen = replace(gen, seed=seed)
    corpus = dio.generate_corpus(gen)
    ratios = cfg.ratios()
    splits = dio.split_subjects(corpus, ratios, seed)
    dio.save_corpus(corpus, out, splits)
    return {"seed": seed, "config": {"generator": gen.to_dict(), "split": {"ratios": list(ratios)}},
            "outputs": ["manifest.json", "validity.csv", "splits.json"],
            "summary": f"{len(corpus.samples)} clips from {gen.num_studies} studies"}


def _training_setup(args, cfg: RunConfig):
    tcfg = cfg.build("train")
    seed = tcfg.seed if args.seed is None else args.seed
    changes = {"seed": seed}
    if args.max_epochs is not None:
        changes["max_epochs"] = args.max_epochs
    tcfg = replace(tcfg, **changes)
    corpus_dir = Path(args.corpus)
    corpus = dio.load_corpus(corpus_dir)
    splits = _load_splits(corpus_dir, corpus, cfg, seed)
    train_set = dio.clipset(corpus, splits, "train")
    val_set = dio.clipset(corpus, splits, "val")
    return tcfg, seed, corpus, train_set, val_set


def _progress(rec):
    log.info("epoch %d  train %.6g  val %.6g  val mpjpe %.3f mm", rec.epoch, rec.train_loss,
             rec.val_loss, rec.val_mpjpe_mm)


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    tcfg, seed, corpus, train_set, val_set = _training_setup(args, cfg)
    T, K, L = corpus.dims
    model_values = dict(cfg.values["model"])
    model_values.update(input_dim=3 * K, landmark_count=L, seq_len=T, heteroscedastic=False)
    mcfg = ModelConfig.from_dict(model_values)
    params = init_model(mcfg, seed)
    best, history = train(params, train_set, val_set, tcfg, progress=_progress)
    save_checkpoint(best, out / "checkpoint.txt")
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    return {"seed": seed, "config": {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
            "outputs": ["checkpoint.txt", "history.csv"],
            "summary": f"best epoch {history.best_epoch}, stopped at {history.stop_epoch}"}


def cmd_finetune_hetero(args, cfg: RunConfig, out: Path) -> dict:
    tcfg, seed, corpus, train_set, val_set = _training_setup(args, cfg)
    baseline = load_checkpoint(args.baseline)
    params = warm_start_heteroscedastic(baseline)
    best, history = train(params, train_set, val_set, tcfg, progress=_progress)
    save_checkpoint(best, out / "checkpoint.txt")
    (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    return {"seed": seed, "config": {"model": best.config.to_dict(), "train": tcfg.to_dict()},
            "outputs": ["checkpoint.txt", "history.csv"],
            "summary": f"best epoch {history.best_epoch}, stopped at {history.stop_epoch}"}


def _sampler(args, cfg: RunConfig) -> SamplerConfig:
    values = dict(cfg.values["sampler"])
    if args.mc_samples is not None:
        values["num_samples"] = args.mc_samples
    if args.seed is not None:
        values["base_seed"] = args.seed
    try:
        return SamplerConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"sampler: {exc}") from None


def _kinds(args, hetero: bool) -> tuple[str, ...]:
    if args.uncertainty is not None:
        if args.uncertainty in ("ale", "total") and not hetero:
            log.warning("deterministic model: aleatoric variance is zero")
        return (args.uncertainty,)
    return KINDS if hetero else ("epi",)


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    sampler = _sampler(args, cfg)
    params = load_checkpoint(args.checkpoint)
    clips = _clips(Path(args.corpus), args.split, cfg, sampler.base_seed)
    kinds = _kinds(args, params.config.heteroscedastic)
    result = ev.evaluate_clips(params, clips, sampler, args.outlier_mm, kinds, split=args.split,
                               outlier_percentile=args.outlier_percentile)
    outputs = [p.name for p in ev.write_report(result.report, out)]
    if args.dump_predictions:
        write_prediction_dump(result.prediction, clips.clip_ids, out / "predictions",
                              Path(args.corpus))
        outputs.append("predictions/manifest.csv")
    return {"seed": sampler.base_seed,
            "config": {"sampler": asdict(sampler)},
            "outputs": outputs,
            "summary": f"{result.report.n_frames} frames, mean error "
                       f"{result.report.mean_error_mm:.3f} mm"}


def _parse_sigmas(text: str) -> tuple[float, ...]:
    try:
        sigmas = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--sigmas must be comma-separated numbers, got {text!r}") from None
    if not sigmas:
        raise ConfigError("--sigmas is empty")
    if any(s < 0 for s in sigmas):
        raise ConfigError("noise levels must be non-negative")
    return sigmas


def cmd_sweep(args, cfg: RunConfig, out: Path) -> dict:
    sampler = _sampler(args, cfg)
    sigmas = _parse_sigmas(args.sigmas)
    params = load_checkpoint(args.checkpoint)
    clips = _clips(Path(args.corpus), args.split, cfg, sampler.base_seed)
    kind = args.uncertainty or "epi"
    rows = ev.robustness_sweep(params, clips, sigmas, sampler, kind, args.outlier_mm,
                               noise_seed=sampler.base_seed,
                               outlier_percentile=args.outlier_percentile)
    (out / "sweep.csv").write_text(ev.sweep_csv(rows), encoding="utf-8")
    return {"seed": sampler.base_seed, "config": {"sampler": asdict(sampler)},
            "outputs": ["sweep.csv"], "summary": f"{len(rows)} noise levels"}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "finetune-hetero": cmd_finetune_hetero,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relikin", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"relikin {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: $RELIKIN_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a corpus with subject splits")
    g.add_argument("--config", help="key-value config file")

    for name, helptext in (("train", "train the deterministic baseline"),
                           ("finetune-hetero", "warm-start and fine-tune the heteroscedastic model")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--corpus", required=True)
        p.add_argument("--config")
        p.add_argument("--max-epochs", type=int, default=None)
        if name == "finetune-hetero":
            p.add_argument("--baseline", required=True, help="deterministic checkpoint")

    for name in ("eval", "sweep"):
        p = sub.add_parser(name, parents=[common],
                           help="reliability report" if name == "eval" else "input-noise sweep")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--split", default="test", choices=dio.SPLITS)
        p.add_argument("--config")
        p.add_argument("--mc-samples", type=int, default=None)
        p.add_argument("--uncertainty", choices=KINDS, default=None)
        p.add_argument("--outlier-mm", type=float, default=50.0)
        p.add_argument("--outlier-percentile", type=float, default=None,
                       help="use this error percentile as the outlier threshold instead")
        if name == "eval":
            p.add_argument("--dump-predictions", action="store_true")
        else:
            p.add_argument("--sigmas", default=",".join(f"{s:g}" for s in NOISE_SIGMAS_MM))

    r = sub.add_parser("rerun", help="repeat a run from its run_manifest.json")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run(args) -> int:
    if args.command == "rerun":
        return _rerun(args)
    threads = _threads(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args)
    start = time.perf_counter()
    info = COMMANDS[args.command](args, cfg, out)
    duration = time.perf_counter() - start
    info["config"].setdefault("split", {"ratios": list(cfg.ratios())})
    recorded = {k: v for k, v in vars(args).items()
                if k not in ("out", "resolved", "verbose", "threads", "config")}
    recorded["seed"] = info["seed"]
    for key in ("corpus", "checkpoint", "baseline"):
        if recorded.get(key) is not None:
            recorded[key] = str(Path(recorded[key]).resolve())
    manifest = {
        "tool": "relikin",
        "version": __version__,
        "command": args.command,
        "args": recorded,
        "config_file": getattr(args, "config", None),
        "resolved_config": info["config"],
        "seeds": {"run": info["seed"]},
        "threads": threads,
        "out_dir": str(out),
        "outputs": info["outputs"],
        "duration_s": round(duration, 3),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                     encoding="utf-8")
    print(f"relikin {args.command}: {info['summary']} -> {out}")
    return 0


def _rerun(args) -> int:
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise DataFormatError(f"cannot read run manifest: {err}", path=path) from None
    except json.JSONDecodeError as err:
        raise DataFormatError(f"invalid JSON: {err.msg}", path=path, line=err.lineno) from None
    for key in ("command", "args", "resolved_config"):
        if key not in manifest:
            raise DataFormatError("missing key", path=path, field=key)
    if manifest["command"] not in COMMANDS:
        raise DataFormatError(f"unknown command {manifest['command']!r}", path=path,
                              field="command")
    if manifest.get("version") != __version__:
        log.warning("manifest written by relikin %s, running %s", manifest.get("version"),
                    __version__)
    ns = argparse.Namespace(**manifest["args"])
    ns.command = manifest["command"]
    ns.out = args.out
    ns.config = None
    ns.threads = manifest.get("threads")
    ns.verbose = args.verbose
    ns.resolved = manifest["resolved_config"]
    return _run(ns)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except RelikinError as exc:
        print(f"relikin: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"relikin: error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
