"""Optimisation loop, AdamW, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"DITF" | u32 version | u32 meta_len | meta JSON (utf-8, sorted keys)
    | u32 n_tensors | n x (u32 name_len | name | u8 dtype | u32 rank | rank x u32 dims | payload)
    | u32 CRC32 of every preceding byte

dtype tags: 1 = float32, 2 = float64. Tensor names are ``param/<name>``,
``adam_m/<name>`` and ``adam_v/<name>``; the meta JSON carries the config
snapshot, step counter, trainable names and the RNG state.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ditfuse import imaging, model
from ditfuse import prompt as P
from ditfuse.flow import FlowBatch, drop_condition, fm_loss, interpolate
from ditfuse.m3 import Manifest
from ditfuse.model import Codec, ModelConfig
from ditfuse.tensor import NonFiniteError, Tensor, backward, zero_grads

logger = logging.getLogger(__name__)

MAGIC = b"DITF"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class CrcMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainerState:
    params: dict[str, Tensor]
    trainable: list[str]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.trainable:
            p = self.params[name].data
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))


Predict = Callable[[dict[str, Tensor], np.ndarray, np.ndarray, Any], Tensor]


def train_step(state: TrainerState, batch: FlowBatch, predict: Predict, opt: AdamW = AdamW()) -> float:
    """One flow-matching step: forward, loss, backward, AdamW on trainable tensors.

    Mutates ``state`` and returns the pre-update loss.
    """
    if batch.x.shape[0] == 0:
        raise ValueError("empty batch")
    x_t = interpolate(batch.x, batch.eps, batch.t)
    try:
        loss = fm_loss(predict(state.params, x_t, batch.t, batch.cond), batch.x, batch.eps)
        backward(loss)
    except NonFiniteError as exc:
        zero_grads(state.params.values())
        raise NonFiniteLoss(str(exc)) from exc
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss {value} at step {state.step}")
    k = state.step + 1
    c1 = 1.0 - opt.beta1**k
    c2 = 1.0 - opt.beta2**k
    for name in state.trainable:
        p = state.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if opt.weight_decay:
            update = update + opt.weight_decay * p.data
        p.data = (p.data - opt.lr * update).astype(p.data.dtype, copy=False)
    zero_grads(state.params.values())
    state.step = k
    return value


# ---------------------------------------------------------------- checkpoints


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def checkpoint_bytes(state: TrainerState) -> bytes:
    meta = {
        "config": state.config,
        "step": state.step,
        "trainable": list(state.trainable),
        "rng": _rng_state_json(state.rng),
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors: dict[str, np.ndarray] = {f"param/{k}": t.data for k, t in state.params.items()}
    tensors.update({f"adam_m/{k}": a for k, a in state.m.items()})
    tensors.update({f"adam_v/{k}": a for k, a in state.v.items()})
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(meta_raw)) + meta_raw
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def save_checkpoint(state: TrainerState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def state_from_bytes(raw: bytes) -> TrainerState:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic("not a checkpoint file")
    if len(raw) < 12 or zlib.crc32(raw[:-4]) & 0xFFFFFFFF != struct.unpack("<I", raw[-4:])[0]:
        raise CrcMismatch("checkpoint CRC does not match")
    body = memoryview(raw)[:-4]
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    pos = 12
    try:
        meta = json.loads(bytes(body[pos : pos + meta_len]).decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = bytes(body[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dtype = _TAG_DTYPES[tag].newbyteorder("<")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(body[pos : pos + nbytes], dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (KeyError, ValueError, struct.error) as exc:
        raise CheckpointError(f"corrupt checkpoint body: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint body")
    trainable = set(meta["trainable"])
    params = {k[6:]: Tensor(v, requires_grad=k[6:] in trainable) for k, v in tensors.items() if k.startswith("param/")}
    return TrainerState(
        params=params,
        trainable=list(meta["trainable"]),
        m={k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        v={k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")},
        step=int(meta["step"]),
        rng=_rng_from_state(meta["rng"]),
        config=meta["config"],
    )


def load_checkpoint(path) -> TrainerState:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return state_from_bytes(raw)


# ---------------------------------------------------------------- data and loop


@dataclass
class TrainSample:
    id: str
    tokens: np.ndarray
    cond: tuple[np.ndarray, np.ndarray]  # two (h, w, C) latents
    target: np.ndarray  # (h, w, C)


def load_samples(manifest: Manifest, root, codec: Codec) -> list[TrainSample]:
    root = Path(root)
    out = []
    for rec in manifest.records:
        a = codec.encode(imaging.load_png(root / rec.path_a))
        b = codec.encode(imaging.load_png(root / rec.path_b))
        target = codec.encode(imaging.load_png(root / rec.path_target))
        out.append(TrainSample(rec.id, P.tokenize(rec.prompt), (a, b), target))
    return out


def make_predict(cfg: ModelConfig) -> Predict:
    """Adapter from the generic train step to the transformer: ``cond`` is (tokens, cond latents)."""

    def predict(params, x_t, t, cond):
        token_lists, cond_latents = cond
        packed = model.pack_batch(cfg, token_lists, cond_latents, x_t.shape[1:3])
        return model.forward(params, cfg, packed, x_t.astype(params["tok_emb"].dtype), t)

    return predict


def select_trainable(params: dict[str, Tensor], mode: str) -> list[str]:
    if mode == "full":
        return sorted(params)
    if mode == "lora":
        names = sorted(k for k in params if model.is_lora(k))
        if not names:
            raise ValueError("lora training needs lora_rank > 0")
        return names
    raise ValueError(f"unknown trainable mode {mode!r}")


def new_state(model_cfg: ModelConfig, train_cfg: dict, config: dict | None = None) -> TrainerState:
    params = model.init_params(model_cfg)
    trainable = select_trainable(params, train_cfg.get("trainable", "lora"))
    for name, p in params.items():
        p.requires_grad = name in trainable
    return TrainerState(
        params=params,
        trainable=trainable,
        rng=np.random.default_rng(imaging.derive_seed(train_cfg.get("seed", 0), "trainer")),
        config=config if config is not None else {"model": model_cfg.to_dict(), "train": dict(train_cfg)},
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return imaging.derive_rng(seed, "epoch", epoch).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    order = epoch_order(seed, epoch, n)
    return order[k * batch_size : (k + 1) * batch_size]


def draw_batch(state: TrainerState, samples: list[TrainSample], idx: np.ndarray, cond_dropout: float) -> FlowBatch:
    x = np.stack([samples[i].target for i in idx])
    eps = state.rng.standard_normal(x.shape)
    t = state.rng.random(len(idx))
    tokens = drop_condition([samples[i].tokens for i in idx], cond_dropout, state.rng)
    cond = (tokens, [samples[i].cond for i in idx])
    return FlowBatch(x=x, eps=eps, t=t, cond=cond)


def run_training(
    state: TrainerState,
    samples: list[TrainSample],
    train_cfg: dict,
    max_steps: int | None = None,
    log_path=None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run ``epochs`` passes (or until ``max_steps`` total steps) starting at ``state.step``.

    Batch order is a pure function of (seed, epoch), and every random draw
    inside a step comes from ``state.rng``, so a resumed run reproduces an
    uninterrupted one exactly.
    """
    if not samples:
        raise ValueError("manifest is empty")
    cfg = ModelConfig.from_dict(state.config["model"])
    predict = make_predict(cfg)
    opt = AdamW(lr=float(train_cfg.get("lr", 1e-4)))
    bs = int(train_cfg.get("batch", 64))
    seed = int(train_cfg.get("seed", 0))
    per_epoch = math.ceil(len(samples) / bs)
    end = int(train_cfg.get("epochs", 2)) * per_epoch
    if max_steps is not None:
        end = min(end, max_steps)
    losses = []
    writer = fh = None
    if log_path is not None:
        new = not Path(log_path).exists() or state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["step", "loss", "lr"])
    try:
        while state.step < end:
            idx = batch_indices(seed, state.step, len(samples), bs)
            batch = draw_batch(state, samples, idx, float(train_cfg.get("cond_dropout", 0.01)))
            step = state.step
            loss = train_step(state, batch, predict, opt)
            losses.append(loss)
            if writer is not None:
                writer.writerow([step, repr(loss), repr(opt.lr)])
            if on_step is not None:
                on_step(step, loss)
    finally:
        if fh is not None:
            fh.close()
    return losses


def velocity_fn(state: TrainerState) -> Callable:
    """Sampler-facing velocity ``v(x, t, (tokens, cond_latents))`` for a single sample."""
    cfg = ModelConfig.from_dict(state.config["model"])
    dtype = state.params["tok_emb"].dtype

    def v(x, t, cond):
        tokens, lat_pair = cond
        packed = model.pack_batch(cfg, [tokens], [lat_pair], x.shape[0:2])
        out = model.forward(state.params, cfg, packed, x[None].astype(dtype), np.asarray([t]))
        return out.data[0].astype(np.float64)

    return v
