"""Run configuration: strict JSON schema, env overrides, and assembly.

A run config is a JSON document with sections ``data``, ``model``,
``loss``, ``optim``, ``output`` (plus an optional ``gradcheck`` section for
the verification command). Unknown keys anywhere are rejected, and files a
config points at must exist at load time.

Override precedence: explicit CLI flags > environment (TRI_SEED, TRI_OUT)
> config file. TRI_SEED replaces the model init seed and the optimizer
seed; data seeds stay put so reseeding a run does not change the task.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, TriModalDataset, generate_synthetic, load_manifest
from .errors import ConfigError
from .losses import LossConfig
from .nn import EncoderStack, Mlp, ModelConfig, build_matcher, build_stack
from .train import OptimConfig


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _child_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(base), int(stream)]).generate_state(1)[0])


_SYNTHETIC_KEYS = {"classes", "dims", "noise_sigma", "train_per_class",
                   "test_per_class", "prototype_seed", "rng_seed"}


@dataclass
class DataConfig:
    """Either a synthetic task description or a pair of file manifests."""

    synthetic: dict | None = None
    manifest: dict | None = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path) -> "DataConfig":
        _check_keys(doc, {"synthetic", "manifest"}, "data")
        if ("synthetic" in doc) == ("manifest" in doc):
            raise ConfigError("data needs exactly one of 'synthetic' or 'manifest'")
        if "synthetic" in doc:
            synth = dict(doc["synthetic"])
            _check_keys(synth, _SYNTHETIC_KEYS, "data.synthetic")
            defaults = {"classes": 10, "dims": (16, 32, 24), "noise_sigma": (0.1, 0.1, 0.1),
                        "train_per_class": 100, "test_per_class": 20,
                        "prototype_seed": 7, "rng_seed": 100}
            merged = {**defaults, **synth}
            try:
                SyntheticSpec(classes=merged["classes"], dims=merged["dims"],
                              noise_sigma=merged["noise_sigma"],
                              samples_per_class=merged["train_per_class"],
                              prototype_seed=merged["prototype_seed"],
                              rng_seed=merged["rng_seed"])
            except ValueError as exc:
                raise ConfigError(f"data.synthetic: {exc}") from exc
            if merged["test_per_class"] < 1:
                raise ConfigError("data.synthetic.test_per_class must be >= 1")
            return cls(synthetic=merged)
        man = dict(doc["manifest"])
        _check_keys(man, {"train", "test"}, "data.manifest")
        if "train" not in man or "test" not in man:
            raise ConfigError("data.manifest needs 'train' and 'test' paths")
        paths = {}
        for split in ("train", "test"):
            p = (base_dir / man[split]).resolve()
            if not p.exists():
                raise ConfigError(f"data.manifest.{split} not found: {p}")
            paths[split] = str(p)
        return cls(manifest=paths)

    def build(self) -> tuple[TriModalDataset, TriModalDataset]:
        """Materialize the (train, test) dataset pair."""
        if self.synthetic is not None:
            s = self.synthetic
            train_spec = SyntheticSpec(
                classes=s["classes"], dims=s["dims"], noise_sigma=s["noise_sigma"],
                samples_per_class=s["train_per_class"], prototype_seed=s["prototype_seed"],
                rng_seed=_child_seed(s["rng_seed"], 0))
            test_spec = replace(train_spec, samples_per_class=s["test_per_class"],
                                rng_seed=_child_seed(s["rng_seed"], 1))
            return generate_synthetic(train_spec), generate_synthetic(test_spec)
        return load_manifest(self.manifest["train"]), load_manifest(self.manifest["test"])


@dataclass
class OutputConfig:
    dir: str = "runs/out"


@dataclass
class GradcheckConfig:
    """Options for the finite-difference verification command."""

    checks: list | None = None      # None = the full default list
    configs_per_check: int = 100
    tolerance: float = 1e-5
    seed: int = 0
    negative_control: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(steps=0))
    output: OutputConfig = field(default_factory=OutputConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)


_MODEL_KEYS = {"latent_dim", "text_hidden", "video_hidden", "audio_hidden",
               "matcher_hidden", "activation", "init_seed"}
_LOSS_KEYS = {"objective", "tau", "alpha", "alpha_d2t", "lambda", "anchor", "area_eps"}
_OPTIM_KEYS = {"optimizer", "lr0", "schedule", "total_steps", "steps", "epochs",
               "batch_size", "eval_every", "rng_seed", "clip_norm"}
_GRADCHECK_KEYS = {"checks", "configs_per_check", "tolerance", "seed", "negative_control"}


def config_from_dict(doc: dict, base_dir: Path) -> RunConfig:
    _check_keys(doc, {"data", "model", "loss", "optim", "output", "gradcheck"}, "config")
    data = DataConfig.from_dict(doc.get("data", {"synthetic": {}}), base_dir)

    model_doc = dict(doc.get("model", {}))
    _check_keys(model_doc, _MODEL_KEYS, "model")
    try:
        model = ModelConfig(**model_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc

    loss_doc = dict(doc.get("loss", {}))
    _check_keys(loss_doc, _LOSS_KEYS, "loss")
    if "lambda" in loss_doc:
        loss_doc["dtm_weight"] = loss_doc.pop("lambda")
    try:
        loss = LossConfig(**loss_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"loss: {exc}") from exc

    optim_doc = dict(doc.get("optim", {}))
    _check_keys(optim_doc, _OPTIM_KEYS, "optim")
    optim_defaults = {"optimizer": "adam", "lr0": 1e-4, "schedule": "linear",
                      "steps": 1000, "batch_size": 128, "eval_every": 50, "rng_seed": 3}
    try:
        optim = OptimConfig(**{**optim_defaults, **optim_doc})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"optim: {exc}") from exc

    output_doc = dict(doc.get("output", {}))
    _check_keys(output_doc, {"dir"}, "output")
    output = OutputConfig(dir=str(output_doc.get("dir", "runs/out")))

    grad_doc = dict(doc.get("gradcheck", {}))
    _check_keys(grad_doc, _GRADCHECK_KEYS, "gradcheck")
    gradcheck = GradcheckConfig(**grad_doc)

    return RunConfig(data=data, model=model, loss=loss, optim=optim,
                     output=output, gradcheck=gradcheck)


def default_config(**optim_overrides) -> RunConfig:
    """The synthetic vanilla-task config used when no file is given."""
    doc = {"data": {"synthetic": {}}, "optim": dict(optim_overrides)}
    return config_from_dict(doc, Path.cwd())


def apply_env_overrides(cfg: RunConfig, env=None) -> RunConfig:
    """TRI_SEED -> model/optim seeds, TRI_OUT -> output directory."""
    env = os.environ if env is None else env
    if "TRI_SEED" in env:
        try:
            seed = int(env["TRI_SEED"])
        except ValueError as exc:
            raise ConfigError(f"TRI_SEED must be an integer, got {env['TRI_SEED']!r}") from exc
        cfg = replace(cfg, model=replace(cfg.model, init_seed=seed),
                      optim=replace(cfg.optim, rng_seed=seed))
    if "TRI_OUT" in env:
        cfg = replace(cfg, output=OutputConfig(dir=env["TRI_OUT"]))
    return cfg


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = config_from_dict(doc, path.parent)
    return apply_env_overrides(cfg, env)


def build_model(cfg: RunConfig, train_ds: TriModalDataset) -> tuple[EncoderStack, Mlp | None]:
    """Encoder stack sized to the dataset, plus a matcher when DTM is on."""
    d_t, d_v, d_a = train_ds.dims
    stack = build_stack(cfg.model, d_t, d_v, d_a)
    matcher = build_matcher(cfg.model) if cfg.loss.dtm_weight > 0.0 else None
    return stack, matcher
