"""Desk-scale diffusion transformer over a mixed text/image token sequence.

Layout of one forward pass:

* text tokens -> embedding table
* condition images -> codec latent -> 2x2 patches -> linear + 2-D sinusoidal positions
* noisy latent -> patches -> separate linear + positions (+ timestep embedding, see ``time_to_noisy``)
* timestep slot (last position) -> sinusoidal features -> 2-layer MLP
* pre-norm blocks with the hybrid causal/image-bidirectional mask
* final norm + linear head on the noisy-image positions -> velocity latent

Every linear layer can carry a LoRA pair ``(A, B)`` giving ``W + alpha * B @ A.T``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ditfuse import prompt as P
from ditfuse.tensor import (
    Tensor,
    add,
    embedding,
    gather_rows,
    layernorm,
    matmul,
    reshape,
    scale,
    scatter_rows,
    silu,
    softmax_masked,
    transpose,
)


class IndivisibleDims(ValueError):
    pass


class RankMismatch(ValueError):
    pass


class SeqTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    latent_factor: int = 2
    patch: int = 2
    lora_rank: int = 8
    lora_alpha: float = 0.5
    vocab_size: int = P.VOCAB_SIZE
    max_seq: int = 1024
    mlp_ratio: int = 4
    # add the timestep embedding to every noisy-image token, not only to the trailing slot
    time_to_noisy: bool = True
    codec_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for 2-D position embeddings")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if self.patch < 1 or self.latent_factor < 1:
            raise ValueError("patch and latent_factor must be >= 1")

    @property
    def latent_channels(self) -> int:
        return 3 * self.latent_factor**2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- codec


class Codec:
    """Exactly invertible stand-in image codec: space-to-depth then an orthogonal channel mix."""

    def __init__(self, factor: int = 2, seed: int | None = 0):
        self.factor = factor
        c = 3 * factor * factor
        if seed is None:
            self.q = np.eye(c)
        else:
            g = np.random.default_rng(seed).standard_normal((c, c))
            q, r = np.linalg.qr(g)
            self.q = q * np.sign(np.diag(r))

    @property
    def channels(self) -> int:
        return self.q.shape[0]

    def encode(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        f = self.factor
        h, w = img.shape[-3], img.shape[-2]
        if h % f or w % f:
            raise IndivisibleDims(f"image {h}x{w} not divisible by {f}")
        lead = img.shape[:-3]
        x = img.reshape(*lead, h // f, f, w // f, f, 3)
        x = np.moveaxis(x, -4, -3).reshape(*lead, h // f, w // f, f * f * 3)
        return x @ self.q

    def decode(self, lat: np.ndarray) -> np.ndarray:
        lat = np.asarray(lat, dtype=np.float64)
        f = self.factor
        hl, wl = lat.shape[-3], lat.shape[-2]
        lead = lat.shape[:-3]
        x = (lat @ self.q.T).reshape(*lead, hl, wl, f, f, 3)
        return np.moveaxis(x, -3, -4).reshape(*lead, hl * f, wl * f, 3)


# ---------------------------------------------------------------- embeddings


def patchify(lat: np.ndarray, p: int) -> np.ndarray:
    """(..., h, w, C) -> (..., h/p * w/p, p*p*C), patches in row-major order."""
    h, w, c = lat.shape[-3:]
    if h % p or w % p:
        raise IndivisibleDims(f"latent {h}x{w} not divisible by patch {p}")
    lead = lat.shape[:-3]
    x = lat.reshape(*lead, h // p, p, w // p, p, c)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, h: int, w: int, p: int, c: int) -> Tensor:
    b = tokens.shape[0]
    x = reshape(tokens, (b, h // p, w // p, p, p, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, h, w, c))


def position_embedding_2d(gh: int, gw: int, d: int) -> np.ndarray:
    """Row-major (gh*gw, d) table: [sin(y f), cos(y f), sin(x f), cos(x f)], d/4 bands each."""
    quarter = d // 4
    freqs = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    ay = ys.reshape(-1, 1) * freqs
    ax = xs.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=1)


def timestep_features(t, d: int) -> np.ndarray:
    """Sines then cosines of 1000*t over d/2 frequencies 10000^(-2k/d)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    half = d // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / d)
    args = 1000.0 * t[:, None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------- parameters


def linear_names(cfg: ModelConfig) -> list[str]:
    names = ["cond_in", "noisy_in", "time.fc1", "time.fc2"]
    for i in range(cfg.n_layers):
        names += [f"blocks.{i}.{n}" for n in ("qkv", "proj", "mlp1", "mlp2")]
    return names + ["head"]


def _linear_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {"cond_in": (cfg.patch_dim, d), "noisy_in": (cfg.patch_dim, d), "time.fc1": (d, d), "time.fc2": (d, d)}
    for i in range(cfg.n_layers):
        shapes[f"blocks.{i}.qkv"] = (d, 3 * d)
        shapes[f"blocks.{i}.proj"] = (d, d)
        shapes[f"blocks.{i}.mlp1"] = (d, hid)
        shapes[f"blocks.{i}.mlp2"] = (hid, d)
    shapes["head"] = (d, cfg.patch_dim)
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded initial parameters. The output head starts at zero; LoRA ``A`` starts at zero."""
    rng = np.random.default_rng(cfg.init_seed)
    d = cfg.d_model
    raw: dict[str, np.ndarray] = {"tok_emb": rng.standard_normal((cfg.vocab_size, d))}
    for name, (din, dout) in _linear_shapes(cfg).items():
        if name == "head":
            raw[f"{name}.w"] = np.zeros((din, dout))
        else:
            raw[f"{name}.w"] = rng.standard_normal((din, dout)) / np.sqrt(din)
        raw[f"{name}.b"] = np.zeros(dout)
        if cfg.lora_rank:
            raw[f"{name}.lora_A"] = np.zeros((dout, cfg.lora_rank))
            raw[f"{name}.lora_B"] = rng.standard_normal((din, cfg.lora_rank)) / np.sqrt(din)
    norms = [f"blocks.{i}.ln{j}" for i in range(cfg.n_layers) for j in (1, 2)] + ["final_ln"]
    for n in norms:
        raw[f"{n}.g"] = np.ones(d)
        raw[f"{n}.b"] = np.zeros(d)
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}


def is_lora(name: str) -> bool:
    return ".lora_" in name


# ---------------------------------------------------------------- LoRA


def lora_apply(x: Tensor, w: Tensor, a: Tensor | None = None, b: Tensor | None = None, alpha: float = 0.5, bias: Tensor | None = None) -> Tensor:
    """``x @ (w + alpha * b @ a.T) (+ bias)`` computed as base path plus ``alpha * (x @ b) @ a.T``.

    ``w`` is (d_in, d_out), ``b`` is (d_in, r) and ``a`` is (d_out, r).
    """
    out = matmul(x, w)
    if bias is not None:
        out = add(out, bias)
    if a is None or b is None or alpha == 0:
        return out
    d_in, d_out = w.shape
    if b.shape[0] != d_in or a.shape[0] != d_out or a.shape[1] != b.shape[1]:
        raise RankMismatch(f"LoRA shapes A{a.shape} B{b.shape} do not fit W{w.shape}")
    low = matmul(matmul(x, b), transpose(a, (1, 0)))
    return add(out, scale(low, alpha))


def merge_lora(w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    if a.shape[1] != b.shape[1] or b.shape[0] != w.shape[0] or a.shape[0] != w.shape[1]:
        raise RankMismatch(f"LoRA shapes A{a.shape} B{b.shape} do not fit W{w.shape}")
    return w + alpha * (b @ a.T)


def _linear(params: dict[str, Tensor], cfg: ModelConfig, name: str, x: Tensor) -> Tensor:
    return lora_apply(
        x,
        params[f"{name}.w"],
        params.get(f"{name}.lora_A"),
        params.get(f"{name}.lora_B"),
        cfg.lora_alpha,
        bias=params[f"{name}.b"],
    )


# ---------------------------------------------------------------- batch packing


@dataclass
class PackedBatch:
    """Left-padded batch of sequence layouts with their per-sample attention masks."""

    length: int
    text_ids: np.ndarray  # (B, T) token ids at text positions (PAD included)
    text_pos: np.ndarray  # (B, T)
    cond_pos: np.ndarray  # (B, n1 + n2)
    noisy_pos: np.ndarray  # (B, n)
    time_pos: np.ndarray  # (B, 1)
    mask: np.ndarray  # (B, L, L) bool
    cond_patches: np.ndarray  # (B, n1 + n2, patch_dim)
    cond_grid: tuple[int, int]
    noisy_grid: tuple[int, int]


def pack_batch(cfg: ModelConfig, token_lists, cond_latents, noisy_hw: tuple[int, int], masks=None) -> PackedBatch:
    """Assemble and left-pad one sequence per sample.

    ``cond_latents`` is a sequence of pairs of (h, w, C) latents. Padding
    positions see only themselves and are invisible to every other row, so a
    padded sample computes exactly what it would unpadded.
    """
    p = cfg.patch
    hc, wc = cond_latents[0][0].shape[:2]
    n_c = (hc // p) * (wc // p)
    n_x = (noisy_hw[0] // p) * (noisy_hw[1] // p)
    layouts = [P.assemble_sequence(toks, (n_c, n_c), n_x) for toks in token_lists]
    length = max(lay.length for lay in layouts)
    if length > cfg.max_seq:
        raise SeqTooLong(f"sequence length {length} exceeds max_seq {cfg.max_seq}")
    bsz = len(layouts)
    mask = np.zeros((bsz, length, length), dtype=bool)
    text_ids, text_pos, cond_pos, noisy_pos, time_pos, patches = [], [], [], [], [], []
    for i, lay in enumerate(layouts):
        off = length - lay.length
        mask[i, np.arange(off), np.arange(off)] = True
        mask[i, off:, off:] = P.build_attention_mask(lay) if masks is None else masks[i]
        ids = np.concatenate([np.full(off, P.PAD_ID), lay.ids])
        tp = np.flatnonzero(ids >= 0)
        text_pos.append(tp)
        text_ids.append(ids[tp])
        c0, c1 = lay.cond(0), lay.cond(1)
        cond_pos.append(np.r_[c0.start : c0.end, c1.start : c1.end] + off)
        noisy_pos.append(np.arange(lay.noisy.start, lay.noisy.end) + off)
        time_pos.append([lay.time_pos + off])
        a, b = cond_latents[i]
        patches.append(np.concatenate([patchify(a, p), patchify(b, p)], axis=0))
    return PackedBatch(
        length=length,
        text_ids=np.asarray(text_ids),
        text_pos=np.asarray(text_pos),
        cond_pos=np.asarray(cond_pos),
        noisy_pos=np.asarray(noisy_pos),
        time_pos=np.asarray(time_pos),
        mask=mask,
        cond_patches=np.asarray(patches),
        cond_grid=(hc // p, wc // p),
        noisy_grid=(noisy_hw[0] // p, noisy_hw[1] // p),
    )


# ---------------------------------------------------------------- forward


def timestep_embed(params: dict[str, Tensor], cfg: ModelConfig, t) -> Tensor:
    dtype = params["time.fc1.w"].dtype
    feats = Tensor(timestep_features(t, cfg.d_model).astype(dtype))
    return _linear(params, cfg, "time.fc2", silu(_linear(params, cfg, "time.fc1", feats)))


def embed_patches(params: dict[str, Tensor], cfg: ModelConfig, patches: np.ndarray, grid: tuple[int, int], which: str) -> Tensor:
    """Project (B, n, patch_dim) patches and add the grid's position table (tiled if n is a multiple)."""
    dtype = params["tok_emb"].dtype
    pos = position_embedding_2d(grid[0], grid[1], cfg.d_model).astype(dtype)
    reps = patches.shape[1] // pos.shape[0]
    tok = _linear(params, cfg, f"{which}_in", Tensor(patches.astype(dtype)))
    return add(tok, Tensor(np.tile(pos, (reps, 1))))


def embed_sequence(params: dict[str, Tensor], cfg: ModelConfig, batch: PackedBatch, noisy_latent, t) -> Tensor:
    """Input token matrix (B, L, d) for a packed batch."""
    noisy = noisy_latent.data if isinstance(noisy_latent, Tensor) else np.asarray(noisy_latent)
    bsz, length = batch.text_ids.shape[0], batch.length
    te = timestep_embed(params, cfg, np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,)))
    text = embedding(params["tok_emb"], batch.text_ids)
    cond = embed_patches(params, cfg, batch.cond_patches, batch.cond_grid, "cond")
    nz = embed_patches(params, cfg, patchify(noisy, cfg.patch), batch.noisy_grid, "noisy")
    te3 = reshape(te, (bsz, 1, cfg.d_model))
    if cfg.time_to_noisy:
        nz = add(nz, gather_rows(te3, np.zeros(batch.noisy_pos.shape, dtype=np.intp)))
    x = scatter_rows(text, batch.text_pos, length)
    x = add(x, scatter_rows(cond, batch.cond_pos, length))
    x = add(x, scatter_rows(nz, batch.noisy_pos, length))
    return add(x, scatter_rows(te3, batch.time_pos, length))


def attention(params, cfg: ModelConfig, i: int, h: Tensor, mask: np.ndarray) -> Tensor:
    bsz, length, d = h.shape
    nh = cfg.n_heads
    dh = d // nh
    qkv = _linear(params, cfg, f"blocks.{i}.qkv", h)
    qkv = transpose(reshape(qkv, (bsz, length, 3, nh, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = softmax_masked(scores, mask[:, None, :, :])
    out = transpose(matmul(att, v), (0, 2, 1, 3))
    return _linear(params, cfg, f"blocks.{i}.proj", reshape(out, (bsz, length, d)))


def run_blocks(params: dict[str, Tensor], cfg: ModelConfig, x: Tensor, mask: np.ndarray) -> Tensor:
    for i in range(cfg.n_layers):
        h = layernorm(x, params[f"blocks.{i}.ln1.g"], params[f"blocks.{i}.ln1.b"])
        x = add(x, attention(params, cfg, i, h, mask))
        h = layernorm(x, params[f"blocks.{i}.ln2.g"], params[f"blocks.{i}.ln2.b"])
        h = _linear(params, cfg, f"blocks.{i}.mlp2", silu(_linear(params, cfg, f"blocks.{i}.mlp1", h)))
        x = add(x, h)
    return x


def readout(params: dict[str, Tensor], cfg: ModelConfig, x: Tensor, batch: PackedBatch) -> Tensor:
    h = gather_rows(x, batch.noisy_pos)
    h = layernorm(h, params["final_ln.g"], params["final_ln.b"])
    out = _linear(params, cfg, "head", h)
    gh, gw = batch.noisy_grid
    p = cfg.patch
    return unpatchify(out, gh * p, gw * p, p, cfg.latent_channels)


def forward(params: dict[str, Tensor], cfg: ModelConfig, batch: PackedBatch, noisy_latent, t) -> Tensor:
    """Velocity prediction with the same (B, h, w, C) shape as ``noisy_latent``."""
    x = embed_sequence(params, cfg, batch, noisy_latent, t)
    x = run_blocks(params, cfg, x, batch.mask)
    return readout(params, cfg, x, batch)
