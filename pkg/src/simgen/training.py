"""Joint image-mask diffusion training: noise-prediction MSE with Adam.

Every source of randomness is a NumPy generator held in the train state, so
a checkpoint (parameters + Adam moments + generator state + step counter)
resumes bit-exactly. Epoch shuffles are derived from (seed, epoch) rather
than the running stream, which keeps the batch order recoverable from the
step counter alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cfl import ClassPalette, encode_mask
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PairedSample
from .denoiser import DenoiserConfig, DenoiserNet, build_denoiser
from .schedule import NoiseSchedule, q_sample, schedule_from_betas


class TrainingError(RuntimeError):
    """Raised when training encounters a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    learning_rate: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self) -> None:
        for name in ("total_steps", "batch_size", "checkpoint_every", "log_every"):
            if getattr(self, name) < (0 if name == "total_steps" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class TrainState:
    step: int
    net: DenoiserNet
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    running_loss: float


_RUNNING_DECAY = 0.99


def build_train_state(
    config: TrainConfig, denoiser_config: DenoiserConfig
) -> TrainState:
    net = build_denoiser(denoiser_config, seed=config.seed)
    optimizer = torch.optim.Adam(
        net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    # distinct stream from the weight-init stream of the same seed
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    return TrainState(step=0, net=net, optimizer=optimizer, rng=rng, running_loss=0.0)


def assemble_x0(batch: Sequence[PairedSample], palette: ClassPalette) -> np.ndarray:
    """Stack image and encoded-mask channels into a (B, 6, H, W) field."""
    fields = []
    for sample in batch:
        if sample.image.ndim != 3 or sample.image.shape[2] != 3:
            raise ValueError(f"{sample.id}: image must be (H, W, 3)")
        if np.abs(sample.image).max(initial=0.0) > 1.0 + 1e-9:
            raise ValueError(f"{sample.id}: image values outside [-1, 1]")
        encoded = encode_mask(sample.mask, palette)
        fields.append(
            np.concatenate(
                [sample.image.transpose(2, 0, 1), encoded.transpose(2, 0, 1)]
            )
        )
    return np.stack(fields)


def train_step(
    state: TrainState,
    batch: Sequence[PairedSample],
    palette: ClassPalette,
    schedule: NoiseSchedule,
) -> tuple[TrainState, float]:
    """One optimizer update; mutates and returns the state with the loss."""
    x0 = assemble_x0(batch, palette)
    t = state.rng.integers(1, schedule.num_steps + 1, size=len(batch))
    eps = state.rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)

    xt = torch.from_numpy(x_t).to(torch.float32)
    target = torch.from_numpy(eps).to(torch.float32)
    pred = state.net(xt, torch.from_numpy(t))
    loss = torch.mean((pred - target) ** 2)
    loss_value = float(loss.item())
    if not np.isfinite(loss_value):
        raise TrainingError(
            f"non-finite loss {loss_value} at step {state.step + 1} "
            f"(batch of {len(batch)}, lr={state.optimizer.param_groups[0]['lr']})"
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()

    state.step += 1
    if state.step == 1:
        state.running_loss = loss_value
    else:
        state.running_loss = (
            _RUNNING_DECAY * state.running_loss + (1.0 - _RUNNING_DECAY) * loss_value
        )
    return state, loss_value


def epoch_order(seed: int, epoch: int, num_items: int) -> np.ndarray:
    """Deterministic shuffle of sample indices for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
    return rng.permutation(num_items)


def batch_for_step(
    step: int, num_items: int, batch_size: int, seed: int
) -> np.ndarray:
    """Sample indices for a given 0-based step; pure function of its inputs."""
    batches_per_epoch = -(-num_items // batch_size)
    epoch, slot = divmod(step, batches_per_epoch)
    order = epoch_order(seed, epoch, num_items)
    return order[slot * batch_size : (slot + 1) * batch_size]


def save_train_checkpoint(
    path: str | Path,
    state: TrainState,
    config: TrainConfig,
    palette: ClassPalette,
    schedule: NoiseSchedule,
) -> None:
    """Full training snapshot: net, Adam moments, RNG state, and provenance."""
    named = dict(state.net.named_parameters())
    blobs: dict[str, np.ndarray] = {}
    adam_steps: dict[str, int] = {}
    for name, param in named.items():
        opt_state = state.optimizer.state.get(param)
        if not opt_state:
            continue
        blobs[f"adam/{name}/exp_avg"] = opt_state["exp_avg"].numpy()
        blobs[f"adam/{name}/exp_avg_sq"] = opt_state["exp_avg_sq"].numpy()
        adam_steps[name] = int(opt_state["step"].item())
    extra = {
        "kind": "train_state",
        "step": state.step,
        "running_loss": state.running_loss,
        "rng_state": state.rng.bit_generator.state,
        "adam_steps": adam_steps,
        "train_config": asdict(config),
        "schedule_betas": [float(b) for b in schedule.betas],
        "palette": {
            "num_classes": palette.num_classes,
            "points": [[float(v) for v in row] for row in palette.points],
        },
    }
    save_checkpoint(path, state.net, extra=extra, blobs=blobs)


def load_train_checkpoint(
    path: str | Path,
) -> tuple[TrainState, TrainConfig, ClassPalette, NoiseSchedule]:
    net, extra, blobs = load_checkpoint(path)
    if extra.get("kind") != "train_state":
        raise ValueError(f"{path} is not a training checkpoint")
    config = TrainConfig(**extra["train_config"])
    optimizer = torch.optim.Adam(
        net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    for name, param in net.named_parameters():
        if name in extra["adam_steps"]:
            optimizer.state[param] = {
                "step": torch.tensor(float(extra["adam_steps"][name])),
                "exp_avg": torch.from_numpy(blobs[f"adam/{name}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(blobs[f"adam/{name}/exp_avg_sq"].copy()),
            }
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    rng.bit_generator.state = extra["rng_state"]
    state = TrainState(
        step=int(extra["step"]),
        net=net,
        optimizer=optimizer,
        rng=rng,
        running_loss=float(extra["running_loss"]),
    )
    palette = ClassPalette(
        num_classes=int(extra["palette"]["num_classes"]),
        points=np.asarray(extra["palette"]["points"], dtype=np.float64),
    )
    schedule = schedule_from_betas(np.asarray(extra["schedule_betas"], dtype=np.float64))
    return state, config, palette, schedule


def train(
    config: TrainConfig,
    samples: Sequence[PairedSample],
    palette: ClassPalette,
    schedule: NoiseSchedule,
    out_dir: str | Path | None = None,
    denoiser_config: DenoiserConfig | None = None,
    resume_from: str | Path | None = None,
    log=None,
    extra_config: dict | None = None,
) -> tuple[TrainState, list[tuple[int, float]]]:
    """Run the training loop; returns the final state and the loss curve.

    With ``out_dir`` set, writes ``loss.csv`` (step, loss), periodic
    ``ckpt_<step>.bin`` snapshots, a final checkpoint, and ``config.json``
    with every resolved hyperparameter.
    """
    if not samples:
        raise ValueError("empty dataset: nothing to train on")
    shapes = {s.image.shape[:2] for s in samples} | {s.mask.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples must share one resolution, got {sorted(shapes)}")

    if resume_from is not None:
        # the checkpoint owns the run identity (seed, lr, batch size); the
        # caller only moves the step targets forward
        state, saved_config, palette, schedule = load_train_checkpoint(resume_from)
        config = replace(
            saved_config,
            total_steps=config.total_steps,
            checkpoint_every=config.checkpoint_every,
            log_every=config.log_every,
        )
    else:
        state = build_train_state(config, denoiser_config or DenoiserConfig())

    out_path = Path(out_dir) if out_dir is not None else None
    loss_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        resolved = {
            **(extra_config or {}),
            "train": asdict(config),
            "denoiser": state.net.config.to_dict(),
            "schedule": {
                "num_steps": schedule.num_steps,
                "beta_start": float(schedule.betas[0]),
                "beta_end": float(schedule.betas[-1]),
            },
            "num_classes": palette.num_classes,
            "num_samples": len(samples),
        }
        (out_path / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
        loss_file = (out_path / "loss.csv").open("w")
        loss_file.write("step,loss\n")

    curve: list[tuple[int, float]] = []
    try:
        while state.step < config.total_steps:
            idx = batch_for_step(
                state.step, len(samples), config.batch_size, config.seed
            )
            batch = [samples[i] for i in idx]
            state, loss_value = train_step(state, batch, palette, schedule)
            curve.append((state.step, loss_value))
            if loss_file is not None:
                loss_file.write(f"{state.step},{loss_value!r}\n")
            if log is not None and state.step % config.log_every == 0:
                log(state.step, loss_value, state.running_loss)
            if out_path is not None and (
                state.step % config.checkpoint_every == 0
                or state.step == config.total_steps
            ):
                save_train_checkpoint(
                    out_path / f"ckpt_{state.step}.bin",
                    state,
                    config,
                    palette,
                    schedule,
                )
    finally:
        if loss_file is not None:
            loss_file.close()
    return state, curve
