"""Declarative experiment protocols: fusion benefit, missing-modality robustness, scaling.

A spec file is JSON::

    {"experiment": "fusion-benefit",
     "settings": {"seed": 0, "n_train": 20000, ...},
     "runs": [{"name": "flora", "mode": "flora"},
              {"name": "text", "mode": "unimodal-text", "eval": ["t"]}]}

Every run regenerates its data from the seed, so a spec is self-contained.
Backbones are pre-trained once per (model config, seed) and shared by runs.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

from .adapters import Modality
from .backbone import ModelConfig, count_params
from .data import GenConfig, bayes_oracle, generate_samples
from .train import TrainConfig, evaluate, new_model, pretrain_backbone, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("fusion-benefit", "missing-modality", "scaling")


class SpecError(ValueError):
    pass


@dataclass
class Settings:
    seed: int = 0
    n_train: int = 20000
    n_test: int = 2000
    epochs: int = 4
    lr: float = 5e-3
    batch_size: int = 64
    warmup_ratio: float = 0.1
    pretrain_epochs: int = 2
    pretrain_texts: int = 5000
    p_missing_audio: float = 0.0
    p_missing_video: float = 0.0
    model: dict = field(default_factory=dict)

    def gen_config(self, stream):
        missing = (self.p_missing_audio, self.p_missing_video) if stream == 0 else (0.0, 0.0)
        return GenConfig(seed=self.seed, n_samples=self.n_train if stream == 0 else self.n_test,
                         p_missing_audio=missing[0], p_missing_video=missing[1], stream=stream)

    def model_config(self):
        return ModelConfig.from_dict({**ModelConfig().to_dict(), **self.model})


_SETTING_KEYS = {f.name for f in fields(Settings)}
_RUN_KEYS = _SETTING_KEYS | {"name", "mode", "eval"}


def parse_present(text):
    """"a,v,t" or "avt" -> frozenset of modalities."""
    tags = [t for t in text.replace(",", "") if not t.isspace()]
    if not tags:
        raise SpecError("empty modality list")
    try:
        return frozenset(Modality.parse(t) for t in tags)
    except ValueError as e:
        raise SpecError(str(e)) from None


def present_key(present):
    return "".join(m.tag[0] for m in sorted(present))


@dataclass
class ExperimentSpec:
    experiment: str
    runs: list
    settings: Settings = field(default_factory=Settings)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise SpecError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not self.runs:
            raise SpecError("spec has no runs")
        names = [r.get("name") for r in self.runs]
        if None in names or len(set(names)) != len(names):
            raise SpecError("every run needs a unique name")
        for r in self.runs:
            unknown = set(r) - _RUN_KEYS
            if unknown:
                raise SpecError(f"run {r['name']}: unknown keys {sorted(unknown)}")
            try:
                TrainConfig(mode=r.get("mode", "flora"))
            except ValueError as e:
                raise SpecError(f"run {r['name']}: {e}") from None
            for p in r.get("eval", ["avt"]):
                parse_present(p)
        evals = [set(map(present_key, map(parse_present, r.get("eval", ["avt"]))))
                 for r in self.runs]
        if self.experiment == "missing-modality" and any(not {"avt", "at"} <= e for e in evals):
            raise SpecError("missing-modality runs must evaluate on avt and at")
        if self.experiment == "scaling" and len(self.runs) < 3:
            raise SpecError("a scaling spec needs at least 3 model sizes")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d.get("settings", {})) - _SETTING_KEYS
        if unknown:
            raise SpecError(f"unknown settings {sorted(unknown)}")
        try:
            settings = Settings(**d.get("settings", {}))
            ModelConfig.from_dict({**ModelConfig().to_dict(), **settings.model})
        except (TypeError, ValueError) as e:
            raise SpecError(str(e)) from None
        return cls(d.get("experiment"), list(d.get("runs", [])), settings)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as e:
            raise SpecError(f"cannot read spec {path}: {e}") from None

    def run_settings(self, run):
        over = {k: v for k, v in run.items() if k in _SETTING_KEYS}
        if "model" in over:
            over["model"] = {**self.settings.model, **over["model"]}
        return replace(self.settings, **over)


class Runner:
    """Executes runs, caching datasets and pre-trained backbones in memory."""

    def __init__(self):
        self._data = {}
        self._backbones = {}

    def data(self, s):
        cfgs = (s.gen_config(0), s.gen_config(1))
        key = tuple(json.dumps(asdict(c), sort_keys=True) for c in cfgs)
        if key not in self._data:
            self._data[key] = tuple(generate_samples(c) for c in cfgs)
        return self._data[key]

    def backbone(self, s, config, train_set):
        key = (config, s.seed, s.pretrain_epochs, s.pretrain_texts, s.n_train)
        if key not in self._backbones:
            t0 = time.time()
            texts = [x.text for x in train_set[:s.pretrain_texts]]
            self._backbones[key], _ = pretrain_backbone(config, texts, seed=s.seed,
                                                        epochs=s.pretrain_epochs)
            log.info("pre-trained backbone in %.1fs", time.time() - t0)
        return self._backbones[key]

    def run(self, s, run):
        mode = run.get("mode", "flora")
        config = s.model_config()
        train_set, test_set = self.data(s)
        backbone = self.backbone(s, config, train_set)
        model = new_model(config, backbone, mode, s.seed)
        tcfg = TrainConfig(mode=mode, lr=s.lr, warmup_ratio=s.warmup_ratio,
                           batch_size=s.batch_size, epochs=s.epochs, seed=s.seed)
        t0 = time.time()
        result = train(tcfg, train_set, model)
        out = {"name": run["name"], "mode": mode, "seed": s.seed,
               "train_seconds": round(time.time() - t0, 1),
               "epoch_losses": result.epoch_losses,
               "params": count_params(model.params, model.adapters, mode),
               "eval": {}}
        for p in run.get("eval", ["avt"]):
            present = parse_present(p)
            ev = evaluate(model, test_set, present)
            out["eval"][present_key(present)] = {"eer": ev["eer"], "fa_at_10": ev["fa_at_10"],
                                                 "n": ev["n"]}
            log.info("%s [%s] eer %.4f fa@10 %.4f", run["name"], present_key(present),
                     ev["eer"], ev["fa_at_10"])
        return out


def _relative(new, base):
    return (new - base) / base if base > 0 else float("inf")


def summarize_fusion(runs, oracle):
    by = {r["mode"]: r for r in runs}
    if not {"flora", "unimodal-text"} <= set(by):
        raise SpecError("fusion-benefit needs a flora run and a unimodal-text run")
    fused = by["flora"]["eval"]["avt"]["eer"]
    text = by["unimodal-text"]["eval"]["t"]["eer"]
    hi = min(oracle["eer_text"], oracle["eer_audio"], oracle["eer_video"]) + 0.05
    return {"eer_flora": fused, "eer_text": text,
            "relative_reduction": -_relative(fused, text),
            "band": [oracle["eer_joint"], hi]}


def summarize_missing(runs):
    out = {}
    for r in runs:
        full = r["eval"]["avt"]["eer"]
        part = r["eval"]["at"]["eer"]
        out[r["name"]] = {"eer_all": full, "eer_no_video": part,
                          "degradation": _relative(part, full)}
    return out


def scaling_rows(runs):
    rows = []
    for r in runs:
        p = r["params"]
        ev = r["eval"]["avt"]
        rows.append({"size": r["name"], "params": p["frozen_count"] + p["trainable_count"],
                     "trainable_fraction": p["fraction"], "eer": ev["eer"],
                     "fa_at_10": ev["fa_at_10"]})
    return rows


def run_experiment(spec, progress=None):
    """Run every entry of ``spec``; returns a JSON-ready results dict."""
    runner = Runner()
    runs = []
    for run in spec.runs:
        s = spec.run_settings(run)
        runs.append(runner.run(s, run))
        if progress:
            progress(runs[-1])
    results = {"experiment": spec.experiment, "settings": asdict(spec.settings), "runs": runs}
    if spec.experiment == "fusion-benefit":
        oracle = bayes_oracle(spec.settings.gen_config(0))
        results["oracle"] = oracle
        results["summary"] = summarize_fusion(runs, oracle)
    elif spec.experiment == "missing-modality":
        results["summary"] = summarize_missing(runs)
    else:
        rows = scaling_rows(runs)
        results["summary"] = {"rows": rows,
                              "largest_not_worse": rows[-1]["eer"] <= rows[0]["eer"]}
        if not results["summary"]["largest_not_worse"]:
            log.warning("largest model's EER %.4f exceeds smallest's %.4f",
                        rows[-1]["eer"], rows[0]["eer"])
    return results
