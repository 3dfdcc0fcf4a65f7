"""``flora`` command line: data generation, pre-training, training, evaluation,
parameter accounting, the scale sweep and declarative experiments.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys
import time

from . import __version__
from .adapters import ALL_MODALITIES, AdapterError, Modality, init_adapters
from .backbone import ModelConfig, SequenceTooLong, count_params, init_backbone
from .checkpoint import CheckpointError, load_backbone, save_backbone
from .data import DataError, GenConfig, bayes_oracle, generate, read_jsonl
from .experiments import ExperimentSpec, SpecError, run_experiment, scaling_rows
from .metrics import MetricError
from .train import (MODES, NumericFailure, TrainConfig, evaluate, load_model, new_model,
                    pretrain_backbone, save_model, train)

log = logging.getLogger("flora")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def version_string():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def pick(args, cfg, name, default):
    """Flag value if given, else config value, else default. Flags win."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def model_config(cfg, rank=None):
    try:
        c = ModelConfig.from_dict({**ModelConfig().to_dict(), **cfg.get("model", {})})
        return dataclasses.replace(c, adapter_rank=rank) if rank else c
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid model config: {e}") from None


def parse_modalities(text):
    try:
        return frozenset(Modality.parse(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise UsageError(str(e)) from None


class OutputDir:
    """Staging directory swapped into place on success; one manifest per directory."""

    def __init__(self, path, force):
        self.path = os.path.abspath(path)
        if os.path.exists(self.path) and os.listdir(self.path) and not force:
            raise UsageError(f"output {path} exists and is not empty (use --force)")
        self.stage = f"{self.path}.tmp-{os.getpid()}"
        shutil.rmtree(self.stage, ignore_errors=True)
        os.makedirs(self.stage)

    def file(self, name):
        return os.path.join(self.stage, name)

    def commit(self, command, config, seed, inputs, started):
        manifest = {"command": command, "config": config, "seed": seed, "inputs": inputs,
                    "output": self.path, "version": version_string(),
                    "duration_seconds": round(time.time() - started, 3)}
        with open(self.file("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        old = f"{self.path}.old-{os.getpid()}"
        if os.path.exists(self.path):
            os.replace(self.path, old)
        os.replace(self.stage, self.path)
        shutil.rmtree(old, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def dataset_path(path, split):
    return os.path.join(path, f"{split}.jsonl") if os.path.isdir(path) else path


def train_config(args, cfg, mode):
    t = cfg.get("train", {})
    try:
        return TrainConfig(mode=mode, lr=pick(args, t, "lr", TrainConfig.lr),
                           warmup_ratio=pick(args, t, "warmup_ratio", TrainConfig.warmup_ratio),
                           batch_size=pick(args, t, "batch_size", TrainConfig.batch_size),
                           epochs=pick(args, t, "epochs", TrainConfig.epochs),
                           seed=pick(args, t, "seed", 0),
                           weight_decay=t.get("weight_decay", TrainConfig.weight_decay),
                           adapter_dropout=t.get("adapter_dropout", True))
    except ValueError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, out):
    cfg = load_config(args.config).get("data", {})
    try:
        base = GenConfig(seed=pick(args, cfg, "seed", 0),
                         n_samples=pick(args, cfg, "n_samples", 20000),
                         p_missing_audio=pick(args, cfg, "p_missing_audio", 0.0),
                         p_missing_video=pick(args, cfg, "p_missing_video", 0.0),
                         text_flip_prob=cfg.get("text_flip_prob", GenConfig.text_flip_prob),
                         audio_sigma=cfg.get("audio_sigma", GenConfig.audio_sigma),
                         video_sigma=cfg.get("video_sigma", GenConfig.video_sigma),
                         class_balance=cfg.get("class_balance", GenConfig.class_balance))
        test = dataclasses.replace(base, n_samples=pick(args, cfg, "n_test", 2000), stream=1)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    generate(base, out.file("train.jsonl"))
    generate(test, out.file("test.jsonl"))
    oracle = bayes_oracle(base)
    write_json(out.file("calibration.json"), {"config": dataclasses.asdict(base), **oracle})
    log.info("bayes EER text %.4f audio %.4f video %.4f joint %.4f", oracle["eer_text"],
             oracle["eer_audio"], oracle["eer_video"], oracle["eer_joint"])
    return {"data": dataclasses.asdict(base), "n_test": test.n_samples}, base.seed, {}


def cmd_pretrain(args, out):
    cfg = load_config(args.config)
    config = model_config(cfg, args.rank)
    p = cfg.get("pretrain", {})
    seed = pick(args, p, "seed", 0)
    epochs = pick(args, p, "epochs", 2)
    lr = pick(args, p, "lr", 1e-3)
    n_texts = p.get("n_texts", 5000)
    samples = read_jsonl(dataset_path(args.data, "train"))
    texts = [s.text for s in samples[:n_texts]]
    params, curve = pretrain_backbone(config, texts, seed=seed, epochs=epochs, lr=lr,
                                      batch_size=pick(args, p, "batch_size", 64),
                                      warmup_ratio=pick(args, p, "warmup_ratio", 0.1))
    save_backbone(params, config, out.file("backbone.flbb"))
    write_csv(out.file("loss.csv"), ["step", "lr", "loss"], curve)
    resolved = {"model": config.to_dict(), "epochs": epochs, "lr": lr, "n_texts": len(texts)}
    return resolved, seed, {"data": os.path.abspath(args.data)}


def cmd_train(args, out):
    cfg = load_config(args.config)
    mode = pick(args, cfg.get("train", {}), "mode", "flora")
    tcfg = train_config(args, cfg, mode)
    samples = read_jsonl(dataset_path(args.data, "train"))
    if args.backbone is None:
        raise UsageError("--backbone is required")
    before = sha256(args.backbone)
    config, backbone = load_backbone(args.backbone)
    if args.rank:
        config = dataclasses.replace(config, adapter_rank=args.rank)
    model = new_model(config, backbone, mode, tcfg.seed)
    result = train(tcfg, samples, model)
    save_model(model, out.file("model"))
    write_csv(out.file("loss.csv"), ["step", "lr", "loss"], result.curve)
    if sha256(args.backbone) != before:  # the freeze contract
        raise RuntimeError("backbone checkpoint changed during training")
    resolved = {"train": tcfg.to_dict(), "model": config.to_dict(),
                "epoch_losses": result.epoch_losses}
    inputs = {"data": os.path.abspath(args.data), "backbone": os.path.abspath(args.backbone),
              "backbone_sha256": before}
    return resolved, tcfg.seed, inputs


def cmd_eval(args, out):
    present = parse_modalities(args.modalities) if args.modalities else ALL_MODALITIES
    model_dir = os.path.join(args.model, "model") if os.path.isdir(
        os.path.join(args.model, "model")) else args.model
    model = load_model(model_dir, args.backbone, present)
    samples = read_jsonl(dataset_path(args.data, "test"))
    ev = evaluate(model, samples, present, score_path=out.file("scores.tsv"))
    metrics = {"eer": ev["eer"], "fa_at_10": ev["fa_at_10"], "n": ev["n"], "mode": model.mode,
               "present_modalities": sorted(m.tag for m in present), "seed": args.seed or 0}
    write_json(out.file("metrics.json"), metrics)
    write_csv(out.file("det.csv"), ["threshold", "fr", "fa"],
              [(f"{t:.9g}", f"{fr:.9g}", f"{fa:.9g}") for t, fr, fa in ev["det"]])
    log.info("eer %.4f fa@10 %.4f (n=%d)", ev["eer"], ev["fa_at_10"], ev["n"])
    inputs = {"model": os.path.abspath(args.model), "data": os.path.abspath(args.data)}
    resolved = {"mode": model.mode, "present_modalities": metrics["present_modalities"],
                "model": model.config.to_dict()}
    return resolved, args.seed or 0, inputs


def params_table(config, ranks):
    backbone = init_backbone(config, 0)
    rows = []
    for r in ranks:
        c = dataclasses.replace(config, adapter_rank=r)
        adapters = init_adapters(c, ALL_MODALITIES, 0)
        for mode in ("flora", "fft"):
            n = count_params(backbone, adapters if mode == "flora" else None, mode)
            rows.append({"mode": mode, "rank": r if mode == "flora" else "",
                         "frozen": n["frozen_count"], "trainable": n["trainable_count"],
                         "fraction": n["fraction"]})
    return rows


def cmd_params_report(args, out):
    cfg = load_config(args.config)
    config = model_config(cfg)
    ranks = [args.rank] if args.rank else [config.adapter_rank]
    if args.rank_sweep:
        ranks = list(range(1, args.rank_sweep + 1))
    rows = params_table(config, ranks)
    header = ["mode", "rank", "frozen", "trainable", "fraction"]
    print(f"{'mode':<6} {'rank':>4} {'frozen':>10} {'trainable':>10} {'fraction':>9}")
    for r in rows:
        print(f"{r['mode']:<6} {r['rank']!s:>4} {r['frozen']:>10} {r['trainable']:>10} "
              f"{100 * r['fraction']:>8.3f}%")
    write_csv(out.file("params.csv"), header,
              [[r[k] if k != "fraction" else f"{r[k]:.9g}" for k in header] for r in rows])
    return {"model": config.to_dict(), "ranks": ranks}, 0, {}


def _apply_overrides(spec, args):
    over = {k: getattr(args, k) for k in ("seed", "epochs", "lr", "warmup_ratio", "batch_size",
                                          "p_missing_audio", "p_missing_video")
            if getattr(args, k, None) is not None}
    if args.rank:
        over["model"] = {**spec.settings.model, "adapter_rank": args.rank}
    if over:
        spec.settings = dataclasses.replace(spec.settings, **over)
    return spec


def _load_spec(args):
    if args.config is None:
        raise UsageError("--config <spec.json> is required")
    return _apply_overrides(ExperimentSpec.load(args.config), args)


def cmd_scale_sweep(args, out):
    spec = _load_spec(args)
    if spec.experiment != "scaling":
        raise UsageError("scale-sweep needs a scaling spec")
    results = run_experiment(spec)
    rows = scaling_rows(results["runs"])
    header = ["size", "params", "trainable_fraction", "eer", "fa_at_10"]
    write_csv(out.file("sweep.csv"), header,
              [[r["size"], r["params"]] + [f"{r[k]:.9g}" for k in header[2:]] for r in rows])
    write_json(out.file("results.json"), results)
    return results["settings"], spec.settings.seed, {"spec": os.path.abspath(args.config)}


def cmd_experiment(args, out):
    spec = _load_spec(args)
    results = run_experiment(spec)
    write_json(out.file("results.json"), results)
    log.info("summary: %s", json.dumps(results["summary"]))
    return results["settings"], spec.settings.seed, {"spec": os.path.abspath(args.config)}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "params-report": cmd_params_report,
            "scale-sweep": cmd_scale_sweep, "experiment": cmd_experiment}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty --out")

    p = _Parser(prog="flora", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write train/test splits")
    g.add_argument("--n-samples", type=int, dest="n_samples")
    g.add_argument("--n-test", type=int, dest="n_test")
    g.add_argument("--p-missing-audio", type=float)
    g.add_argument("--p-missing-video", type=float)

    def training_flags(q):
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--warmup-ratio", type=float)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--rank", type=int)

    pt = sub.add_parser("pretrain", parents=[common], help="denoising backbone pre-training")
    pt.add_argument("--data", required=True, help="dataset directory or train.jsonl")
    training_flags(pt)

    t = sub.add_parser("train", parents=[common], help="flora / fft / unimodal training")
    t.add_argument("--data", required=True)
    t.add_argument("--backbone", required=True, help="FLBB backbone checkpoint")
    t.add_argument("--mode", choices=MODES)
    training_flags(t)

    e = sub.add_parser("eval", parents=[common], help="score a test split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True, help="directory written by train")
    e.add_argument("--backbone", help="FLBB backbone (adapter modes)")
    e.add_argument("--modalities", help="comma-separated subset of a,v,t")

    r = sub.add_parser("params-report", parents=[common], help="frozen vs trainable counts")
    r.add_argument("--rank", type=int)
    r.add_argument("--rank-sweep", type=int, metavar="MAX_RANK")

    for name in ("scale-sweep", "experiment"):
        x = sub.add_parser(name, parents=[common], help=f"run a {name} spec")
        training_flags(x)
        x.add_argument("--p-missing-audio", type=float)
        x.add_argument("--p-missing-video", type=float)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("FLORA_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = None
    try:
        args = build_parser().parse_args(argv)
        out = OutputDir(args.out, args.force)
        config, seed, inputs = COMMANDS[args.command](args, out)
        out.commit(args.command, config, seed, inputs, started)
        return 0
    except (UsageError, SpecError, AdapterError, SequenceTooLong) as e:
        code, msg = EXIT_USAGE, e
    except (DataError, CheckpointError, MetricError, OSError) as e:
        code, msg = EXIT_DATA, e
    except NumericFailure as e:
        code, msg = EXIT_NUMERIC, e
    if out is not None:
        out.abort()
    print(f"flora: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
