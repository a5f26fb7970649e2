"""Training loop for plain fine-tuning and the adversarial mode, plus checkpoints.

Every run is a pure function of (config, data): per-epoch shuffling is
seeded with ``seed + epoch``, the learning rate follows a half-cosine over
the full run, and an EMA shadow of all parameters is maintained for
evaluation. In ``dat`` mode the discriminator branch is attached behind a
gradient-reversal node and the combined objective adds ``lambda_at(step)``
times the gender term; in ``finetune`` mode that branch is never built.

Checkpoints are a little-endian binary container: an 8-byte magic, a
format version, a JSON config snapshot, the step counters, and four named
tensor blocks (live weights, EMA weights, Adam first and second moments).
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe, ndnum, objective
from . import model as model_mod
from .errors import ConfigError, FormatError, NumericError, ValidationError
from .model import ModelConfig, ParamSet
from .objective import ClassWeights, LossBreakdown
from .optim import AdamState, Schedules, adam_step, cosine_lr, ema_update, lambda_at

MAGIC = b"DATKCKP1"
FORMAT_VERSION = 1
MODES = ("finetune", "dat")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "finetune"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 5e-5
    schedules: Schedules = field(default_factory=Schedules)
    model: ModelConfig = field(default_factory=ModelConfig)
    weighted_loss: bool = True
    seed: int = 0
    task: str = "depression"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in datapipe.TASKS:
            raise ConfigError(f"task must be one of {datapipe.TASKS}, got {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need epochs >= 1, batch_size >= 1, lr > 0")
        self.model.validate()
        self.schedules.validate()


@dataclass
class Checkpoint:
    live: ParamSet
    ema: ParamSet
    adam: AdamState
    step: int
    config: TrainConfig
    version: int = FORMAT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[LossBreakdown]
    step_lambdas: list[float]


def _weights_for(values: list[int], what: str, enabled: bool) -> ClassWeights | None:
    if not enabled:
        return None
    counts = (values.count(0), values.count(1))
    if min(counts) < 1:
        raise ConfigError(f"degenerate {what} distribution: counts {counts}")
    return objective.class_weights(counts)


def _batch_arrays(batch: list[datapipe.Example]):
    x = np.array([e.embedding for e in batch], dtype=np.float64)
    y = [e.label for e in batch]
    g = [e.gender for e in batch]
    return x, y, g


def train(
    config: TrainConfig,
    examples: list[datapipe.Example],
    resume_from: Checkpoint | None = None,
    stop_after_steps: int | None = None,
) -> TrainResult:
    """Run the configured number of epochs and return the final checkpoint.

    ``resume_from`` replays the deterministic batch stream up to the saved
    step and continues, reproducing an uninterrupted run exactly.
    ``stop_after_steps`` halts once the global step counter reaches that
    value, yielding a mid-run checkpoint that can later be resumed.
    """
    config.validate()
    examples = list(examples)
    if not examples:
        raise ValidationError("training set is empty")

    dat = config.mode == "dat"
    w_mental = _weights_for([e.label for e in examples], "label", config.weighted_loss)
    w_gender = _weights_for([e.gender for e in examples], "gender", config.weighted_loss and dat)

    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    sched = dataclasses.replace(config.schedules, lr_base=config.lr, total_steps=total_steps)

    if resume_from is not None:
        if resume_from.config != config:
            raise ConfigError("checkpoint was produced by a different configuration")
        live, ema, adam = resume_from.live.copy(), resume_from.ema.copy(), resume_from.adam
        start_step = resume_from.step
    else:
        live = model_mod.init_params(config.model)
        ema = live.copy()
        trainable = live.names() if dat else live.group("encoder") + live.group("classifier")
        adam = AdamState.init(live, trainable)
        start_step = 0

    epoch_losses: list[LossBreakdown] = []
    step_lambdas: list[float] = []
    step = 0
    stopped = False
    for epoch in range(config.epochs):
        if stopped:
            break
        order = datapipe.batches(examples, config.batch_size, seed=config.seed + epoch, shuffle=True)
        epoch_terms: list[LossBreakdown] = []
        for batch in order:
            if stop_after_steps is not None and step >= stop_after_steps:
                stopped = True
                break
            if step < start_step:
                step += 1
                continue
            x, y, g = _batch_arrays(batch)
            pnodes = model_mod.param_nodes(live)
            h = model_mod.encoder_graph(pnodes, ndnum.input_node(x))
            logits_m = model_mod.head_graph(pnodes, h, "classifier")
            if dat:
                lam = lambda_at(step, sched)
                logits_g = model_mod.discriminator_graph(pnodes, h, 1.0)
                root, breakdown = objective.dat_loss(logits_m, y, logits_g, g, w_mental, w_gender, lam)
            else:
                lam = 0.0
                root = objective.weighted_ce(logits_m, y, w_mental)
                value = float(ndnum.forward(root))
                breakdown = LossBreakdown(value, 0.0, 0.0, value)
            if not np.isfinite(breakdown.l_final):
                raise NumericError(f"non-finite loss at step {step}")
            grads = ndnum.backward(root)
            param_grads = {name: grads[name] for name in adam.m}
            live, adam = adam_step(live, param_grads, adam, cosine_lr(step, total_steps, config.lr))
            ema = ema_update(ema, live, sched.ema_coefficient)
            step += 1
            step_lambdas.append(lam)
            epoch_terms.append(breakdown)
        if epoch_terms:
            epoch_losses.append(
                LossBreakdown(
                    l_mental=float(np.mean([t.l_mental for t in epoch_terms])),
                    l_dis=float(np.mean([t.l_dis for t in epoch_terms])),
                    lam=float(np.mean([t.lam for t in epoch_terms])),
                    l_final=float(np.mean([t.l_final for t in epoch_terms])),
                )
            )
    checkpoint = Checkpoint(live=live, ema=ema, adam=adam, step=step, config=config)
    return TrainResult(checkpoint, epoch_losses, step_lambdas)


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(raw: dict) -> TrainConfig:
    try:
        return TrainConfig(
            mode=raw["mode"],
            epochs=raw["epochs"],
            batch_size=raw["batch_size"],
            lr=raw["lr"],
            schedules=Schedules(**raw["schedules"]),
            model=ModelConfig(**raw["model"]),
            weighted_loss=raw["weighted_loss"],
            seed=raw["seed"],
            task=raw["task"],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"config snapshot is malformed: {exc}") from None


def _write_tensor_block(fh, entries: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<Q", len(entries)))
    for name, arr in entries.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_tensor_block(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
        n_values = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(_read_exact(fh, 8 * n_values), dtype="<f8").reshape(shape)
        entries[name] = values.copy()
    return entries


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    snapshot = json.dumps(config_to_dict(ckpt.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(snapshot)))
    buf.write(snapshot)
    buf.write(struct.pack("<QQ", ckpt.step, ckpt.adam.t))
    _write_tensor_block(buf, dict(ckpt.live.items()))
    _write_tensor_block(buf, dict(ckpt.ema.items()))
    _write_tensor_block(buf, ckpt.adam.m)
    _write_tensor_block(buf, ckpt.adam.v)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise FormatError("bad magic bytes: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
        (config_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            raw = json.loads(_read_exact(fh, config_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"config snapshot is unreadable: {exc}") from None
        config = config_from_dict(raw)
        step, adam_t = struct.unpack("<QQ", _read_exact(fh, 16))
        live = ParamSet(_read_tensor_block(fh))
        ema = ParamSet(_read_tensor_block(fh))
        m = _read_tensor_block(fh)
        v = _read_tensor_block(fh)
        if sorted(live.names()) != sorted(ema.names()):
            raise FormatError("live and EMA parameter names disagree")
        adam = AdamState(m=m, v=v, t=adam_t)
        return Checkpoint(live=live, ema=ema, adam=adam, step=step, config=config, version=version)
