"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .buffer import BufferConfig
from .datagen import GeneratorConfig
from .distill import DistillConfig
from .evaluation import EvalConfig

SEED_ENV = "OMNIDISTILL_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # expert buffer
    epochs: int = 10
    num_experts: int = 20
    batch_size: int = 128
    lr_teacher: float = 0.1
    tau: float = 0.1
    tau_prime: float = 0.2
    d: int = 16
    # distillation
    n: int = 50
    iterations: int = 500
    syn_steps: int = 16
    expert_epochs: int = 2
    max_start_epoch: int = 5
    mini_batch_size: int = 25
    lr_data: float = 0.1
    lr_lr: float = 1e-4
    lr_sim: float = 0.1
    momentum: float = 0.5
    sim_rank: int = 10
    sim_alpha: float = 1.0
    beta: float = 0.5
    # generated data
    seed: int = 0
    N: int = 2000
    n_test: int = 500
    d_in: tuple = (48, 32, 40)
    latent_dim: int = 16
    num_classes: int = 20
    within_class_spread: float = 0.6
    modality_noise: tuple = (0.3, 0.3, 0.3)
    view_distortion: float = 0.5
    modalities: tuple = ("video", "audio", "text")
    # evaluation and verification
    seeds: tuple = (0, 1, 2)
    eval_epochs: int = 10
    eval_batch_size: int = 25
    eval_objective: str = "hopa"
    trials: int = 100
    out_dir: str = "runs"

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            self.N, self.d_in, self.latent_dim, self.num_classes, self.within_class_spread,
            self.modality_noise, self.view_distortion, self.modalities, self.seed,
        )  # fmt: skip

    def buffer(self, objective: str = "hopa") -> BufferConfig:
        return BufferConfig(
            self.epochs, self.num_experts, self.batch_size, self.lr_teacher, self.tau, self.tau_prime, self.d,
            objective, self.seed,
        )  # fmt: skip

    def distill(self, method: str = "hopa", seed: int | None = None) -> DistillConfig:
        return DistillConfig(
            n=self.n, iterations=self.iterations, syn_steps=self.syn_steps, expert_epochs=self.expert_epochs,
            max_start_epoch=self.max_start_epoch, mini_batch_size=self.mini_batch_size, lr_data=self.lr_data,
            lr_lr=self.lr_lr, lr_sim=self.lr_sim, momentum=self.momentum, sim_rank=self.sim_rank,
            sim_alpha=self.sim_alpha, lr_teacher=self.lr_teacher, tau=self.tau, tau_prime=self.tau_prime,
            beta=self.beta, method=method, seed=self.seed if seed is None else seed,
        )  # fmt: skip

    def evaluation(self) -> EvalConfig:
        return EvalConfig(self.eval_epochs, self.eval_batch_size, self.lr_teacher, self.d, self.tau, self.tau_prime,
                          self.eval_objective)  # fmt: skip

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key: str, text: str):
    default = getattr(_DEFAULTS, key)
    text = text.strip()
    try:
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(p.strip()) for p in text.split(",") if p.strip())
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(path=None, overrides=None, seed: int | None = None, env=None) -> RunConfig:
    """Defaults, then the file, then ``OMNIDISTILL_SEED``, then explicit flags."""
    env = os.environ if env is None else env
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if env.get(SEED_ENV, "").strip():
        values["seed"] = _coerce("seed", env[SEED_ENV])
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    if seed is not None:
        values["seed"] = seed
    cfg = replace(_DEFAULTS, **values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    k = len(cfg.modalities)
    if len(cfg.d_in) != k or len(cfg.modality_noise) != k:
        raise ConfigError("d_in, modality_noise and modalities need one entry per modality")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    for key in ("epochs", "num_experts", "batch_size", "n", "syn_steps", "expert_epochs", "mini_batch_size", "trials"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.max_start_epoch + cfg.expert_epochs > cfg.epochs:
        raise ConfigError("max_start_epoch + expert_epochs exceeds epochs")
    try:
        cfg.generator().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
