"""Expert trajectories on real data and teacher-segment sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer, atomic_write, read_bytes
from .model import ProjectionHeads, init_heads
from .objectives import LossConfig
from .training import train_heads

log = logging.getLogger(__name__)

MAGIC = b"OMTB"
VERSION = 1


@dataclass(frozen=True)
class BufferConfig:
    epochs: int = 10
    num_experts: int = 20
    batch_size: int = 128
    lr_teacher: float = 0.1
    tau: float = 0.1
    tau_prime: float = 0.2
    d: int = 16
    objective: str = "hopa"
    seed_base: int = 0

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.tau, self.tau_prime)


@dataclass
class ExpertTrajectory:
    checkpoints: list
    seed: int
    epoch_losses: list = field(default_factory=list, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.checkpoints) - 1

    def equals(self, other: "ExpertTrajectory") -> bool:
        return (
            self.seed == other.seed
            and len(self.checkpoints) == len(other.checkpoints)
            and all(a.equals(b) for a, b in zip(self.checkpoints, other.checkpoints))
        )


@dataclass(frozen=True)
class TeacherSegment:
    start: ProjectionHeads
    target: ProjectionHeads
    start_epoch: int
    span: int
    trajectory: int = 0


def train_expert(ds, cfg: BufferConfig, seed: int) -> ExpertTrajectory:
    """Train fresh heads on the full real set with identity targets."""
    if ds.N == 0:
        raise ValueError("empty dataset")
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    heads = init_heads(cfg.d, ds.d_in, seed, ds.names)
    _, checkpoints, losses = train_heads(
        heads,
        ds.X,
        None,
        lr=cfg.lr_teacher,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        cfg=cfg.loss,
        objective=cfg.objective,
        seed=seed,
        snapshots=True,
    )
    drops = sum(b <= a for a, b in zip(losses[1:], losses[2:]))
    if cfg.epochs >= 2 and drops < 0.8 * (cfg.epochs - 1):
        log.warning("expert %d: loss decreased in only %d of %d epochs", seed, drops, cfg.epochs - 1)
    return ExpertTrajectory(checkpoints, seed, losses)


def build_buffer(ds, cfg: BufferConfig) -> list:
    if cfg.num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    out = []
    for i in range(cfg.num_experts):
        out.append(train_expert(ds, cfg, cfg.seed_base + i))
        log.info("expert %d/%d done, loss %.4f -> %.4f", i + 1, cfg.num_experts, out[-1].epoch_losses[0], out[-1].epoch_losses[-1])
    return out


def sample_segment(buffer, max_start_epoch: int, expert_epochs: int, rng) -> TeacherSegment:
    """Uniform draw over (trajectory, start epoch in [0, max_start_epoch])."""
    if not buffer:
        raise ValueError("empty expert buffer")
    epochs = min(t.epochs for t in buffer)
    if max_start_epoch < 0 or expert_epochs < 1 or max_start_epoch + expert_epochs > epochs:
        raise ValueError(
            f"segment overflow: max_start_epoch {max_start_epoch} + expert_epochs {expert_epochs} > epochs {epochs}"
        )
    t = int(rng.integers(len(buffer)))
    start = int(rng.integers(max_start_epoch + 1))
    traj = buffer[t]
    return TeacherSegment(traj.checkpoints[start], traj.checkpoints[start + expert_epochs], start, expert_epochs, t)


def encode_buffer(buffer) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.u32(len(buffer))
    for traj in buffer:
        w.u64(traj.seed)
        w.u32(traj.epochs)
        for heads in traj.checkpoints:
            for m in heads.weights:
                w.matrix(m)
    return w.getvalue()


def decode_buffer(data: bytes, names) -> list:
    """Parse a buffer file; the modality count comes from ``names``."""
    names = tuple(names)
    if not names:
        raise ValueError("modality names are required to decode a buffer")
    r = Reader(data, "buffer")
    r.magic(MAGIC)
    r.version(VERSION)
    count = r.u32()
    out = []
    for t in range(count):
        seed = r.u64()
        epochs = r.u32()
        checkpoints = []
        for e in range(epochs + 1):
            ws = tuple(r.matrix(f"trajectory {t} checkpoint {e} head {m}") for m in range(len(names)))
            checkpoints.append(ProjectionHeads(ws, names))
        out.append(ExpertTrajectory(checkpoints, seed))
    r.finish()
    return out


def save_buffer(buffer, path):
    atomic_write(path, encode_buffer(buffer))


def load_buffer(path, names) -> list:
    return decode_buffer(read_bytes(path), names)
