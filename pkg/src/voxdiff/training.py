"""Patch-based stochastic training with Adam, validation, and checkpoints.

Each epoch crops aligned (condition, target) patches from every training
pair with a shared patch origin, so spatial correspondence between the two
modalities is preserved. Validation evaluates the noise-prediction loss on
held-out pairs at a fixed timestep grid with frozen noise, which makes the
number comparable across epochs. The whole loop is a deterministic function
of the seed, and resuming from a checkpoint reproduces the loss trajectory
of an uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ParameterStore,
    backward,
    load_parameter_arrays,
    load_parameters,
    save_parameters,
)
from .diffusion import NoiseSchedule, training_loss
from .errors import CheckpointMismatch, ConfigError, NonFiniteGradient, ParseError
from .unet import UNet, build_unet, config_from_text, config_to_text
from .volume import extract_patch, random_patch_spec

GRAD_CLIP_NORM = 1.0  # engaged only after a non-finite gradient is seen
VALIDATION_SEED_OFFSET = 0x5EED
PARAMS_FILE = "params.prm"
OPTIM_FILE = "optim.prm"
CONFIG_FILE = "config.txt"
TRAINER_FILE = "trainer.json"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    patch_size: tuple[int, int, int] = (16, 16, 16)
    batch_size: int = 4
    patches_per_volume_per_epoch: int = 1
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if len(self.patch_size) != 3 or any(p % 16 for p in self.patch_size):
            raise ConfigError(f"patch dims {self.patch_size} must be divisible by 16")
        if self.batch_size < 1 or self.patches_per_volume_per_epoch < 1:
            raise ConfigError("batch_size and patches_per_volume_per_epoch must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


def paper_scale_train_config() -> TrainConfig:
    """Defaults matching the full-scale recipe (not exercised in CI)."""
    return TrainConfig(epochs=2500, patch_size=(64, 64, 64))


class OptimizerState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, store: ParameterStore):
        self.m = {name: np.zeros_like(p.values) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in store.items()}
        self.step = 0


def adam_step(store: ParameterStore, grads: dict, state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update with bias correction; mutates params and state."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values = p.values - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _global_norm_clip(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {name: g * np.asarray(factor, dtype=g.dtype) for name, g in grads.items()}


def _validation_t_grid(T: int):
    grid = sorted({1, max(1, T // 4), max(1, T // 2), max(1, (3 * T) // 4), T})
    return grid


def validation_loss(net: UNet, pairs, sched: NoiseSchedule, seed: int) -> float:
    """Noise-prediction loss on held-out pairs over a fixed timestep grid
    with frozen noise; a pure function of (parameters, pairs, seed)."""
    if not pairs:
        raise ConfigError("validation set is empty")
    grid = _validation_t_grid(sched.T)
    rng = np.random.default_rng(seed)
    losses = []
    for pair in pairs:
        x0 = pair.target.data.astype(np.float32)[None, None]
        y = pair.condition.data.astype(np.float32)[None, None]
        for t in grid:
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            loss = training_loss(net, sched, x0, y, rng, t=np.array([t]), eps=eps)
            losses.append(float(loss.values))
    return float(np.mean(losses))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss|None)
    initial_val: float = float("nan")
    best_val: float = float("inf")
    best_epoch: int = 0


def _collect_grads(store: ParameterStore) -> dict:
    grads = {}
    for name, p in store.items():
        if p.grad is None:
            grads[name] = np.zeros_like(p.values)
        else:
            grads[name] = p.grad
    return grads


def train(net: UNet, train_pairs, val_pairs, sched: NoiseSchedule, cfg: TrainConfig,
          out_dir=None, start_epoch: int = 0, optimizer: OptimizerState | None = None,
          rng: np.random.Generator | None = None, result: TrainResult | None = None,
          clip_enabled: bool = False, log=None) -> TrainResult:
    """Run the training loop from `start_epoch` (exclusive) to cfg.epochs.

    When `out_dir` is given, the best-validation and latest checkpoints are
    written there. The resume path (`load_checkpoint` + this function)
    reproduces an uninterrupted run exactly.
    """
    cfg.validate()
    train_pairs = list(train_pairs)
    val_pairs = list(val_pairs)
    if not train_pairs:
        raise ConfigError("training set is empty")
    dims = train_pairs[0].condition.dims
    for p in train_pairs + val_pairs:
        if p.condition.dims != dims or p.target.dims != dims:
            raise ConfigError("all volumes must share the same dims")
    if any(ps > d for ps, d in zip(cfg.patch_size, dims)):
        raise ConfigError(f"patch size {cfg.patch_size} exceeds volume dims {dims}")

    if optimizer is None:
        optimizer = OptimizerState(net.params)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if result is None:
        result = TrainResult()
    val_seed = cfg.seed + VALIDATION_SEED_OFFSET

    if start_epoch == 0 and val_pairs:
        result.initial_val = validation_loss(net, val_pairs, sched, val_seed)
        result.best_val = result.initial_val
        result.best_epoch = 0

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        items = []
        for idx in order:
            pair = train_pairs[idx]
            for _ in range(cfg.patches_per_volume_per_epoch):
                spec = random_patch_spec(dims, cfg.patch_size, rng)
                items.append((pair, spec))

        epoch_losses = []
        for lo in range(0, len(items), cfg.batch_size):
            batch = items[lo : lo + cfg.batch_size]
            x0 = np.stack(
                [extract_patch(p.target, s).data for p, s in batch]
            )[:, None].astype(np.float32)
            y = np.stack(
                [extract_patch(p.condition, s).data for p, s in batch]
            )[:, None].astype(np.float32)

            loss = training_loss(net, sched, x0, y, rng)
            net.params.zero_grad()
            backward(loss)
            grads = _collect_grads(net.params)
            finite = all(np.all(np.isfinite(g)) for g in grads.values())
            if not finite:
                if clip_enabled:
                    raise NonFiniteGradient(
                        f"non-finite gradient at epoch {epoch} with clipping active"
                    )
                # engage clipping for the rest of the run and skip this update
                clip_enabled = True
                continue
            if clip_enabled:
                grads = _global_norm_clip(grads, GRAD_CLIP_NORM)
            adam_step(
                net.params, grads, optimizer,
                cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
            epoch_losses.append(float(loss.values))

        train_loss_mean = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        at_checkpoint = epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs
        val = None
        if val_pairs and at_checkpoint:
            val = validation_loss(net, val_pairs, sched, val_seed)
        result.history.append((epoch, train_loss_mean, val))
        if log is not None:
            log(epoch, train_loss_mean, val)
        if val is not None and val < result.best_val:
            result.best_val = val
            result.best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(
                    os.path.join(out_dir, "best"), net, optimizer, cfg, epoch,
                    rng, result, clip_enabled,
                )
        if out_dir is not None and at_checkpoint:
            save_checkpoint(
                os.path.join(out_dir, "latest"), net, optimizer, cfg, epoch,
                rng, result, clip_enabled,
            )
    return result


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(path, net: UNet, optimizer: OptimizerState, cfg: TrainConfig,
                    epoch: int, rng: np.random.Generator, result: TrainResult,
                    clip_enabled: bool) -> None:
    """Write a resumable snapshot (parameters, moments, rng state, history)
    into directory `path`."""
    os.makedirs(path, exist_ok=True)
    save_parameters(net.params, os.path.join(path, PARAMS_FILE))

    moments = ParameterStore()
    for name in net.params.names():
        moments.register(f"m/{name}", optimizer.m[name])
        moments.register(f"v/{name}", optimizer.v[name])
    save_parameters(moments, os.path.join(path, OPTIM_FILE))

    with open(os.path.join(path, CONFIG_FILE), "w") as f:
        f.write(config_to_text(net.config))

    meta = {
        "epoch": epoch,
        "adam_step": optimizer.step,
        "rng_state": rng.bit_generator.state,
        "clip_enabled": clip_enabled,
        "initial_val": result.initial_val,
        "best_val": result.best_val,
        "best_epoch": result.best_epoch,
        "history": [[e, tl, vl] for e, tl, vl in result.history],
        "train_config": {
            "epochs": cfg.epochs,
            "patch_size": list(cfg.patch_size),
            "batch_size": cfg.batch_size,
            "patches_per_volume_per_epoch": cfg.patches_per_volume_per_epoch,
            "learning_rate": cfg.learning_rate,
            "adam_beta1": cfg.adam_beta1,
            "adam_beta2": cfg.adam_beta2,
            "adam_eps": cfg.adam_eps,
            "seed": cfg.seed,
            "checkpoint_every": cfg.checkpoint_every,
        },
    }
    with open(os.path.join(path, TRAINER_FILE), "w") as f:
        json.dump(meta, f)


def load_net_from_checkpoint(path, dtype=np.float32) -> UNet:
    """Rebuild a UNet from a checkpoint directory (no optimizer state)."""
    try:
        with open(os.path.join(path, CONFIG_FILE)) as f:
            cfg = config_from_text(f.read())
        net = build_unet(cfg, np.random.default_rng(0), dtype=dtype)
        load_parameters(net.params, os.path.join(path, PARAMS_FILE))
    except (OSError, ParseError, ConfigError) as exc:
        raise CheckpointMismatch(f"cannot load checkpoint at {path}: {exc}") from exc
    return net


def load_checkpoint(path, net: UNet):
    """Restore params/optimizer/rng/history into `net`; returns
    (optimizer, cfg, epoch, rng, result, clip_enabled)."""
    try:
        with open(os.path.join(path, CONFIG_FILE)) as f:
            stored_cfg = config_from_text(f.read())
    except (OSError, ConfigError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint config: {exc}") from exc
    if stored_cfg != net.config:
        raise CheckpointMismatch(
            f"checkpoint was trained with {stored_cfg}, current model is {net.config}"
        )
    try:
        load_parameters(net.params, os.path.join(path, PARAMS_FILE))
        moment_arrays = load_parameter_arrays(os.path.join(path, OPTIM_FILE))
        with open(os.path.join(path, TRAINER_FILE)) as f:
            meta = json.load(f)
    except (OSError, ParseError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"corrupt checkpoint at {path}: {exc}") from exc

    optimizer = OptimizerState(net.params)
    for name in net.params.names():
        mkey, vkey = f"m/{name}", f"v/{name}"
        if mkey not in moment_arrays or vkey not in moment_arrays:
            raise CheckpointMismatch(f"optimizer state missing moments for {name!r}")
        if moment_arrays[mkey].shape != net.params[name].values.shape:
            raise CheckpointMismatch(f"optimizer moment shape mismatch for {name!r}")
        optimizer.m[name] = moment_arrays[mkey].astype(np.float32)
        optimizer.v[name] = moment_arrays[vkey].astype(np.float32)
    optimizer.step = int(meta["adam_step"])

    tc = meta["train_config"]
    cfg = TrainConfig(
        epochs=int(tc["epochs"]),
        patch_size=tuple(tc["patch_size"]),
        batch_size=int(tc["batch_size"]),
        patches_per_volume_per_epoch=int(tc["patches_per_volume_per_epoch"]),
        learning_rate=float(tc["learning_rate"]),
        adam_beta1=float(tc["adam_beta1"]),
        adam_beta2=float(tc["adam_beta2"]),
        adam_eps=float(tc["adam_eps"]),
        seed=int(tc["seed"]),
        checkpoint_every=int(tc["checkpoint_every"]),
    )
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    result = TrainResult(
        history=[(int(e), float(tl), None if vl is None else float(vl))
                 for e, tl, vl in meta["history"]],
        initial_val=float(meta["initial_val"]),
        best_val=float(meta["best_val"]),
        best_epoch=int(meta["best_epoch"]),
    )
    return optimizer, cfg, int(meta["epoch"]), rng, result, bool(meta["clip_enabled"])
