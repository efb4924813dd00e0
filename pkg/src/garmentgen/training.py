"""Two-stage trainer, optimizer, and checkpointing.

Stage 0 trains the text-conditional base model alone (no reference
branch in play).  Stage 1 starts from a stage-0 checkpoint, attaches the
low-rank factors (freezing the base), warm-starts the attention adapters
from the frozen projections, and trains whatever parameter groups the
ablation mode selects.

Checkpoints are a single binary file: magic/version/header-length, a
JSON header mapping tensor names to payload slices plus run metadata,
then raw little-endian float32 payloads.  Saving what was just loaded
reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffusion
from .autodiff import Tape, Tensor, zero_grads
from .conditioning import MODE_GROUPS, ParamPartition, partition_by_groups
from .data import CAPTION_TIERS, Dataset
from .errors import (CheckpointFormatError, ConfigError, IntegrityError,
                     TrainingError)
from .model import ModelConfig, ToyUNet, encode_latent, img_to_unit

log = logging.getLogger("garmentgen.train")

MAGIC = b"DFCK"
VERSION = 1


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named RNG stream derived from one master seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    mode: str = "full"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    cfg_dropout: float = 0.1
    caption_tier: str = "mixed"
    lora_rank: int = 8
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    log_every: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.stage not in (0, 1):
            raise ConfigError(f"stage must be 0 or 1, got {self.stage}")
        if self.mode not in MODE_GROUPS:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODE_GROUPS)}")
        if self.caption_tier not in CAPTION_TIERS + ("mixed",):
            raise ConfigError(f"unknown caption tier {self.caption_tier!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ConfigError(f"cfg_dropout must be in [0,1), got {self.cfg_dropout}")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# ----------------------------------------------------------------------
# optimizer


def new_opt_state(params: list[tuple[str, Tensor]]) -> dict:
    return {"step": 0,
            "m": {name: np.zeros_like(t.data) for name, t in params},
            "v": {name: np.zeros_like(t.data) for name, t in params}}


def clip_global_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Missing gradients count as zero.  Returns the pre-clip norm."""
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad.astype(np.float64))))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad *= factor
    return norm


def adamw_step(params: list[tuple[str, Tensor]], state: dict, lr: float,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> dict:
    """One decoupled-weight-decay Adam update, in place on param data.
    Bias correction uses the post-increment step count.  A missing
    gradient is a zero gradient; a non-finite one aborts."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        if name not in state["m"]:
            raise IntegrityError(f"optimizer has no state for {name!r}")
        if not p.requires_grad:
            raise IntegrityError(f"refusing to update frozen parameter {name!r}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ----------------------------------------------------------------------
# checkpoint format


def write_checkpoint(path, tensors: dict[str, np.ndarray], header_meta: dict) -> None:
    """Canonical writer: tensors sorted by name, packed back to back as
    little-endian float32.  The file is staged and renamed into place."""
    path = Path(path)
    entries = {}
    offset = 0
    payload = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(arr.shape),
                         "offset": offset, "nbytes": arr.nbytes}
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(header_meta)
    header["tensors"] = entries
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for chunk in payload:
                f.write(chunk)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CheckpointBundle:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.header["step"])


def read_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise CheckpointFormatError("file shorter than the fixed preamble", offset=len(data))
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}", offset=0)
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", offset=4)
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointFormatError(f"header length {hlen} exceeds file", offset=8)
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"header is not valid JSON: {e}", offset=16)
    if "tensors" not in header or not isinstance(header["tensors"], dict):
        raise CheckpointFormatError("header lacks a tensor table", offset=16)
    payload = data[16 + hlen:]
    tensors = {}
    covered = 0
    for name, spec in header["tensors"].items():
        if spec.get("dtype") != "f32":
            raise CheckpointFormatError(f"tensor {name!r} has dtype {spec.get('dtype')!r}",
                                        offset=16)
        shape = tuple(int(s) for s in spec["shape"])
        off, nbytes = int(spec["offset"]), int(spec["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CheckpointFormatError(
                f"tensor {name!r}: {nbytes} bytes inconsistent with shape {shape}", offset=16)
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointFormatError(
                f"tensor {name!r} slice [{off}:{off + nbytes}] leaves the payload",
                offset=16 + hlen + max(off, 0))
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                      offset=off).reshape(shape).copy()
        covered += nbytes
    if covered != len(payload):
        raise CheckpointFormatError(
            f"payload has {len(payload)} bytes but tensors cover {covered}",
            offset=16 + hlen + covered)
    return CheckpointBundle(header=header, tensors=tensors)


def save_training_checkpoint(path, model: ToyUNet, opt_state: dict, config: TrainConfig,
                             step: int, rng_state: dict, loss_trace: list[float]) -> None:
    tensors = dict(model.state_dict())
    for name, m in opt_state["m"].items():
        tensors[f"opt.m.{name}"] = m
    for name, v in opt_state["v"].items():
        tensors[f"opt.v.{name}"] = v
    meta = {
        "config": config.to_dict(),
        "step": step,
        "opt_step": opt_state["step"],
        "rng": rng_state,
        "lora_rank": model.lora_rank,
        "loss_trace": [round(float(x), 8) for x in loss_trace],
    }
    write_checkpoint(path, tensors, meta)


def load_model(path_or_bundle) -> tuple[ToyUNet, CheckpointBundle, TrainConfig]:
    """Rebuild the model a checkpoint describes and load its weights."""
    bundle = path_or_bundle if isinstance(path_or_bundle, CheckpointBundle) \
        else read_checkpoint(path_or_bundle)
    try:
        config = TrainConfig.from_dict(bundle.header["config"])
    except KeyError as e:
        raise CheckpointFormatError(f"header lacks config key {e}")
    model = ToyUNet(config.model, substream(config.seed, "model-init"))
    rank = int(bundle.header.get("lora_rank", 0))
    if rank:
        model.attach_lora(rank, substream(config.seed, "lora-init"))
    state = {name: arr for name, arr in bundle.tensors.items() if not name.startswith("opt.")}
    model.load_state_dict(state)
    return model, bundle, config


def load_opt_state(bundle: CheckpointBundle, params: list[tuple[str, Tensor]]) -> dict:
    state = new_opt_state(params)
    state["step"] = int(bundle.header.get("opt_step", 0))
    for name, _ in params:
        mk, vk = f"opt.m.{name}", f"opt.v.{name}"
        if mk not in bundle.tensors or vk not in bundle.tensors:
            raise CheckpointFormatError(f"checkpoint lacks optimizer state for {name!r}")
        state["m"][name] = bundle.tensors[mk].astype(np.float32).copy()
        state["v"][name] = bundle.tensors[vk].astype(np.float32).copy()
    return state


# ----------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamReport:
    mode: str
    group_counts: dict[str, int]
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return sum(self.group_counts.values())

    def to_json(self) -> dict:
        return {"mode": self.mode, "groups": dict(self.group_counts),
                "trainable": self.trainable, "frozen": self.frozen, "total": self.total}

    def to_text(self) -> str:
        rows = [("group", "params")]
        rows += [(g, f"{c:,}") for g, c in sorted(self.group_counts.items())]
        rows += [("trainable", f"{self.trainable:,}"), ("frozen", f"{self.frozen:,}"),
                 ("total", f"{self.total:,}")]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        lines = [f"mode: {self.mode}"]
        lines.append(f"{rows[0][0]:<{w0}}  {rows[0][1]:>{w1}}")
        lines.append("-" * (w0 + w1 + 2))
        lines += [f"{a:<{w0}}  {b:>{w1}}" for a, b in rows[1:]]
        return "\n".join(lines)


def report_params(model: ToyUNet, mode: str) -> ParamReport:
    part = partition_by_groups(model, MODE_GROUPS[mode])
    return ParamReport(mode=mode, group_counts=dict(part.group_counts),
                       trainable=part.trainable_count, frozen=part.frozen_count)


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    loss_trace: list[float]
    config: TrainConfig
    model: ToyUNet


def _batch_latents(dataset: Dataset, idx: np.ndarray, patch: int,
                   which: str) -> np.ndarray:
    imgs = np.stack([getattr(dataset[int(i)], which) for i in idx])
    return encode_latent(img_to_unit(imgs), patch)


def _embed_captions(model: ToyUNet, dataset: Dataset, idx: np.ndarray, tier: str) -> Tensor:
    rows = [model.text_embedding.embed(dataset[int(i)].captions[tier]) for i in idx]
    return Tensor(np.stack(rows))


def _integrity_scan(partition: ParamPartition) -> None:
    for name, t in partition.frozen:
        if t.grad is not None:
            raise IntegrityError(f"frozen parameter {name!r} received a gradient")


def train(config: TrainConfig | None, dataset: Dataset, out_path=None, init_from=None,
          resume_from=None, steps_override: int | None = None) -> TrainResult:
    """Run one training stage to `config.steps` and optionally save a
    checkpoint.  `init_from` (stage 1 only) is the stage-0 checkpoint to
    start from; `resume_from` continues an interrupted run (its stored
    config wins, `steps_override` may extend it), reproducing the
    uninterrupted run exactly."""
    start_step = 0
    loss_trace: list[float] = []

    if resume_from is not None:
        model, bundle, config = load_model(resume_from)
        if steps_override is not None:
            config = replace(config, steps=steps_override)
        if bundle.step >= config.steps:
            raise TrainingError(
                f"checkpoint already at step {bundle.step} >= {config.steps}; "
                "raise steps to continue")
        groups = {"base"} if config.stage == 0 else MODE_GROUPS[config.mode]
        partition = partition_by_groups(model, groups)
        opt_state = load_opt_state(bundle, partition.trainable)
        train_rng = np.random.Generator(np.random.PCG64())
        train_rng.bit_generator.state = bundle.header["rng"]
        start_step = bundle.step
        loss_trace = [float(x) for x in bundle.header.get("loss_trace", [])]
    elif config.stage == 0:
        model = ToyUNet(config.model, substream(config.seed, "model-init"))
        partition = partition_by_groups(model, {"base"})
        opt_state = new_opt_state(partition.trainable)
        train_rng = substream(config.seed, "train")
    else:
        if init_from is None:
            raise ConfigError("stage-1 training needs init_from (a stage-0 checkpoint)")
        model, bundle, base_config = load_model(init_from)
        if model.lora_rank:
            raise ConfigError("init_from checkpoint already has low-rank factors attached")
        if base_config.model != config.model:
            raise ConfigError("stage-0 checkpoint was built for a different model config")
        model.attach_lora(config.lora_rank, substream(config.seed, "lora-init"))
        model.init_adapters_from_base()
        partition = partition_by_groups(model, MODE_GROUPS[config.mode])
        opt_state = new_opt_state(partition.trainable)
        train_rng = substream(config.seed, "train")

    schedule = diffusion.make_schedule(config.timesteps, config.beta_start, config.beta_end)
    sqrt_ab = np.sqrt(schedule.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bar).astype(np.float32)
    patch = config.model.patch
    with_refs = config.stage == 1
    tiers = ("fixed", "simple", "rich")

    for step in range(start_step, config.steps):
        tier = config.caption_tier
        if tier == "mixed":
            tier = tiers[int(train_rng.integers(0, len(tiers)))]
        idx = train_rng.integers(0, len(dataset), size=config.batch_size)
        drop = train_rng.random(config.batch_size) < config.cfg_dropout
        t_all = train_rng.integers(1, config.timesteps + 1, size=config.batch_size)
        z0 = _batch_latents(dataset, idx, patch, "target")
        eps = train_rng.standard_normal(z0.shape).astype(np.float32)
        z_t = (sqrt_ab[t_all - 1][:, None, None, None] * z0
               + sqrt_1mab[t_all - 1][:, None, None, None] * eps)

        kept = np.flatnonzero(~drop)
        dropped = np.flatnonzero(drop)
        with Tape() as tape:
            parts = []
            if kept.size:
                refs = None
                if with_refs:
                    ref_z = _batch_latents(dataset, idx[kept], patch, "reference")
                    refs = model.encode_reference(Tensor(ref_z))
                pred = model.denoise(Tensor(z_t[kept]), t_all[kept],
                                     _embed_captions(model, dataset, idx[kept], tier), refs)
                parts.append((kept.size, diffusion.diffusion_loss(Tensor(eps[kept]), pred)))
            if dropped.size:
                pred = model.denoise(Tensor(z_t[dropped]), t_all[dropped], None, None)
                parts.append((dropped.size,
                              diffusion.diffusion_loss(Tensor(eps[dropped]), pred)))
            loss = parts[0][1] * (parts[0][0] / config.batch_size)
            for count, part_loss in parts[1:]:
                loss = loss + part_loss * (count / config.batch_size)
            tape.backward(loss)

        _integrity_scan(partition)
        clip_global_norm(partition.trainable, config.grad_clip)
        adamw_step(partition.trainable, opt_state, config.lr, config.betas,
                   config.eps, config.weight_decay)
        zero_grads(t for _, t in partition.trainable)

        loss_trace.append(float(loss.item()))
        if (step + 1) % config.log_every == 0:
            window = loss_trace[-config.log_every:]
            log.info("step %d/%d loss %.4f (mean over last %d: %.4f)",
                     step + 1, config.steps, loss_trace[-1], len(window),
                     float(np.mean(window)))

    path = None
    if out_path is not None:
        path = Path(out_path)
        save_training_checkpoint(path, model, opt_state, config, config.steps,
                                 train_rng.bit_generator.state, loss_trace)
    return TrainResult(checkpoint_path=path, loss_trace=loss_trace,
                       config=config, model=model)
