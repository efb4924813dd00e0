"""Desk-scale latent UNet with reference conditioning.

The same network plays two roles over one parameter store: run with gates
open on a clean reference latent it is the reference encoder (its hidden
states are captured at every attention site); run with gates closed on a
noisy latent it is the denoiser, reading those captured features through
the adaptive attention branch.  No weights are ever copied between the
two roles.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import diffusion
from .autodiff import Tensor
from .conditioning import AdaptiveAttentionBlock, GatedLoraLayer, InputTag, attend
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 2
    channels: int = 3
    d_model: int = 64
    heads: int = 4
    d_text: int = 32
    d_time: int = 64
    groups: int = 8
    n_down: int = 2

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ConfigError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"heads {self.heads} do not divide d_model {self.d_model}")
        if self.d_model % self.groups != 0:
            raise ConfigError(f"groups {self.groups} do not divide d_model {self.d_model}")
        if self.latent_size % (1 << self.n_down) != 0:
            raise ConfigError(
                f"latent grid {self.latent_size} cannot be halved {self.n_down} times")

    @property
    def latent_channels(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------
# pixel <-> latent codec (invertible space-to-depth; no learned weights)


def img_to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 [..,H,W,3] -> float32 [..,3,H,W] in [-1, 1]."""
    if img.dtype != np.uint8 or img.shape[-1] != 3:
        raise DimensionError(f"expected uint8 [...,H,W,3], got {img.dtype} {img.shape}")
    x = img.astype(np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def unit_to_img(x: np.ndarray) -> np.ndarray:
    """float [..,3,H,W] -> uint8 [..,H,W,3], clipping to [-1, 1]."""
    y = (np.clip(x, -1.0, 1.0) + 1.0) * 127.5
    return np.ascontiguousarray(np.moveaxis(np.rint(y).astype(np.uint8), -3, -1))


def encode_latent(x: np.ndarray, patch: int) -> np.ndarray:
    """Space-to-depth: [..,C,H,W] -> [..,C*p*p,H/p,W/p].  Pure reshuffle,
    bit-exactly invertible by decode_latent."""
    single = x.ndim == 3
    x4 = x[None] if single else x
    n, c, h, w = x4.shape
    if h % patch or w % patch:
        raise DimensionError(f"patch {patch} does not divide spatial dims of {x.shape}")
    z = x4.reshape(n, c, h // patch, patch, w // patch, patch)
    z = z.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * patch * patch, h // patch, w // patch)
    z = np.ascontiguousarray(z)
    return z[0] if single else z


def decode_latent(z: np.ndarray, patch: int, channels: int = 3) -> np.ndarray:
    single = z.ndim == 3
    z4 = z[None] if single else z
    n, cpp, hs, ws = z4.shape
    if cpp != channels * patch * patch:
        raise DimensionError(f"latent channels {cpp} != {channels}*{patch}^2")
    x = z4.reshape(n, channels, patch, patch, hs, ws)
    x = x.transpose(0, 1, 4, 2, 5, 3).reshape(n, channels, hs * patch, ws * patch)
    x = np.ascontiguousarray(x)
    return x[0] if single else x


# ----------------------------------------------------------------------
# text: tiny closed vocabulary, frozen hash-seeded embedding table

GLUE_WORDS = ["a", "photo", "of", "person", "wearing", "shirt", "with", "accents", "background"]
PATTERN_WORDS = ["solid", "stripes", "checker", "dots", "textured"]
COLOR_WORDS = ["red", "green", "blue", "yellow", "orange", "purple", "white", "black"]
BACKGROUND_WORDS = ["gray", "navy", "cream", "olive"]
SCALE_WORDS = ["fine", "coarse"]

VOCAB: tuple[str, ...] = tuple(GLUE_WORDS + PATTERN_WORDS + COLOR_WORDS
                               + BACKGROUND_WORDS + SCALE_WORDS)
assert len(VOCAB) == len(set(VOCAB)) and len(VOCAB) <= 48
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str) -> list[int]:
    """Lowercase, strip punctuation, map words to ids.  Raises on any
    word outside the closed vocabulary."""
    words = text.lower().replace(",", " ").replace(".", " ").split()
    if not words:
        raise ContractError("cannot tokenize an empty caption")
    ids = []
    for w in words:
        if w not in _WORD_TO_ID:
            raise ContractError(f"word {w!r} is outside the model vocabulary")
        ids.append(_WORD_TO_ID[w])
    return ids


def is_tokenizable(text: str) -> bool:
    try:
        tokenize(text)
        return True
    except ContractError:
        return False


class TextEmbedding:
    """Frozen per-word embeddings.  Each row is seeded from a hash of the
    word itself, so the table is identical across processes and never
    appears in any parameter registry."""

    def __init__(self, d_text: int):
        self.d_text = d_text
        rows = []
        for word in VOCAB:
            digest = hashlib.sha256(f"text-embed/{d_text}/{word}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            rows.append(rng.normal(0.0, 1.0 / np.sqrt(d_text), size=d_text))
        self.table = np.asarray(rows, dtype=np.float32)

    def embed(self, text: str) -> np.ndarray:
        """[L, d_text] float32 for one caption."""
        return self.table[tokenize(text)].copy()


def timestep_embedding(t_vec: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, [B, dim] float32."""
    t_vec = np.asarray(t_vec, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t_vec[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


# ----------------------------------------------------------------------
# reference feature bundle


class ReferenceFeatureSet:
    """Hidden states captured at every attention site of the encoder
    pass, keyed by site name in network order."""

    def __init__(self, features: dict[str, Tensor]):
        if not features:
            raise ContractError("reference feature set cannot be empty")
        self.features = dict(features)

    @property
    def sites(self) -> list[str]:
        return list(self.features)

    @property
    def batch(self) -> int:
        return next(iter(self.features.values())).shape[0]

    def get(self, site: str) -> Tensor:
        if site not in self.features:
            raise ContractError(f"no reference features for site {site!r}")
        return self.features[site]

    def tile(self, batch: int) -> "ReferenceFeatureSet":
        """Repeat a single-sample feature set across a batch (inference
        only: the tiled tensors are detached constants)."""
        if self.batch != 1:
            raise ContractError(f"can only tile a single-sample set, have batch {self.batch}")
        return ReferenceFeatureSet({
            site: Tensor(np.repeat(t.data, batch, axis=0)) for site, t in self.features.items()})


# ----------------------------------------------------------------------
# network pieces


class _ResBlock:
    """norm -> silu -> conv -> +time -> norm -> silu -> conv, residual.
    Both 3x3 convs are gate-able attach points for low-rank updates; the
    1x1 channel-matching skip stays plain."""

    def __init__(self, c_in: int, c_out: int, d_time: int, groups: int,
                 rng: np.random.Generator):
        self.groups = groups
        self.conv1 = GatedLoraLayer.conv(c_in, c_out, 3, rng)
        self.time_proj = GatedLoraLayer.linear(d_time, c_out, rng)
        self.conv2 = GatedLoraLayer.conv(c_out, c_out, 3, rng)
        self.skip = GatedLoraLayer.conv(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, t_emb: Tensor, tag: InputTag) -> Tensor:
        h = self.conv1.forward(ad.silu(ad.group_norm(x, self.groups)), tag)
        tp = self.time_proj.forward(ad.silu(t_emb), tag)
        h = ad.add(h, ad.reshape(tp, tp.shape + (1, 1)))
        h = self.conv2.forward(ad.silu(ad.group_norm(h, self.groups)), tag)
        base = x if self.skip is None else self.skip.forward(x, tag)
        return ad.add(base, h)

    def named_params(self, prefix: str):
        out = self.conv1.named_params(f"{prefix}.conv1")
        out += self.time_proj.named_params(f"{prefix}.time_proj")
        out += self.conv2.named_params(f"{prefix}.conv2")
        if self.skip is not None:
            out += self.skip.named_params(f"{prefix}.skip")
        return out


class _CrossAttention:
    """Attention from hidden tokens onto the caption embedding.  Not an
    attach point: text conditioning stays frozen after the base stage."""

    def __init__(self, d_model: int, d_text: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.w_q = GatedLoraLayer.linear(d_model, d_model, rng, bias=False)
        self.w_k = GatedLoraLayer.linear(d_text, d_model, rng, bias=False)
        self.w_v = GatedLoraLayer.linear(d_text, d_model, rng, bias=False)
        self.w_o = GatedLoraLayer.linear(d_model, d_model, rng, bias=False)

    def forward(self, hidden: Tensor, text: Tensor, tag: InputTag) -> Tensor:
        q = self.w_q.forward(hidden, tag)
        k = self.w_k.forward(text, tag)
        v = self.w_v.forward(text, tag)
        return self.w_o.forward(attend(q, k, v, self.heads), tag)

    def named_params(self, prefix: str):
        out = []
        for sub, layer in (("w_q", self.w_q), ("w_k", self.w_k),
                           ("w_v", self.w_v), ("w_o", self.w_o)):
            out += layer.named_params(f"{prefix}.{sub}")
        return out


class _Stage:
    """One resolution stage: residual block, adaptive self-attention with
    the reference branch, then text cross-attention."""

    def __init__(self, name: str, c_in: int, d_model: int, d_text: int, d_time: int,
                 heads: int, groups: int, tokens: int, rng: np.random.Generator):
        self.name = name
        self.groups = groups
        self.res = _ResBlock(c_in, d_model, d_time, groups, rng)
        self.attn = AdaptiveAttentionBlock(d_model, heads, rng)
        self.pos = Tensor(np.zeros((tokens, d_model)), requires_grad=True)
        self.xattn = _CrossAttention(d_model, d_text, heads, rng)

    @staticmethod
    def _tokens(x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        return ad.transpose(ad.reshape(x, (n, c, h * w)), (0, 2, 1))

    @staticmethod
    def _grid(tok: Tensor, h: int, w: int) -> Tensor:
        n, _, c = tok.shape
        return ad.reshape(ad.transpose(tok, (0, 2, 1)), (n, c, h, w))

    def forward(self, x: Tensor, t_emb: Tensor, text: Tensor, refs: Tensor | None,
                tag: InputTag, capture: dict | None) -> Tensor:
        x = self.res.forward(x, t_emb, tag)
        n, c, h, w = x.shape
        tok = self._tokens(ad.group_norm(x, self.groups))
        tok = ad.add(tok, self.pos)
        if capture is not None:
            capture[self.name] = tok
        x = ad.add(x, self._grid(self.attn.forward(tok, refs, tag), h, w))
        tok2 = self._tokens(ad.group_norm(x, self.groups))
        x = ad.add(x, self._grid(self.xattn.forward(tok2, text, tag), h, w))
        return x

    def named_params(self, prefix: str):
        out = self.res.named_params(f"{prefix}.res")
        out += self.attn.named_params(f"{prefix}.attn")
        out.append((f"{prefix}.pos", self.pos, "base"))
        out += self.xattn.named_params(f"{prefix}.xattn")
        return out


class ToyUNet:
    """Epsilon-prediction UNet over space-to-depth latents.

    Layout for n_down=2 on a 16x16 latent grid: stages at 16^2 and 8^2 on
    the way down (stride-2 conv between), one 4^2 middle stage, and 8^2 /
    16^2 stages on the way up (nearest upsample + skip concat).  Every
    stage carries an adaptive attention site.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.lora_rank = 0
        self.text_embedding = TextEmbedding(config.d_text)
        d, dt = config.d_model, config.d_time

        self.null_token = Tensor(rng.normal(0.0, 1.0 / np.sqrt(config.d_text),
                                            size=(1, config.d_text)), requires_grad=True)
        self.time_mlp1 = GatedLoraLayer.linear(dt, dt, rng)
        self.time_mlp2 = GatedLoraLayer.linear(dt, dt, rng)
        self.in_conv = GatedLoraLayer.conv(config.latent_channels, d, 3, rng)

        side = config.latent_size
        self.down_stages: list[_Stage] = []
        self.downsamples: list[GatedLoraLayer] = []
        for i in range(config.n_down):
            self.down_stages.append(_Stage(f"down{i}", d, d, config.d_text, dt,
                                           config.heads, config.groups, side * side, rng))
            self.downsamples.append(GatedLoraLayer.conv(d, d, 3, rng, stride=2))
            side //= 2
        self.mid_stage = _Stage("mid", d, d, config.d_text, dt,
                                config.heads, config.groups, side * side, rng)
        self.up_stages: list[_Stage] = []
        for i in range(config.n_down):
            side *= 2
            self.up_stages.append(_Stage(f"up{i}", 2 * d, d, config.d_text, dt,
                                         config.heads, config.groups, side * side, rng))

        # Zero-init output head: the untrained model predicts zero noise.
        self.out_conv = GatedLoraLayer.conv(d, config.latent_channels, 3, rng)
        self.out_conv.weight.data[...] = 0.0
        self.out_conv.bias.data[...] = 0.0

    # -- registry ------------------------------------------------------

    def sites(self) -> list[str]:
        return ([s.name for s in self.down_stages] + [self.mid_stage.name]
                + [s.name for s in self.up_stages])

    def _stages(self) -> list[_Stage]:
        return self.down_stages + [self.mid_stage] + self.up_stages

    def named_parameters(self) -> list[tuple[str, Tensor, str]]:
        out = [("null_token", self.null_token, "base")]
        out += self.time_mlp1.named_params("time_mlp1")
        out += self.time_mlp2.named_params("time_mlp2")
        out += self.in_conv.named_params("in_conv")
        for i, s in enumerate(self.down_stages):
            out += s.named_params(s.name)
            out += self.downsamples[i].named_params(f"downsample{i}")
        out += self.mid_stage.named_params("mid")
        for s in self.up_stages:
            out += s.named_params(s.name)
        out += self.out_conv.named_params("out_conv")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def lora_layers(self) -> list[GatedLoraLayer]:
        """The designated attach points: both res-block convs and all four
        self-attention projections of every stage."""
        out = []
        for s in self._stages():
            out += [s.res.conv1, s.res.conv2,
                    s.attn.w_q, s.attn.w_k, s.attn.w_v, s.attn.w_o]
        return out

    def attach_lora(self, rank: int, rng: np.random.Generator) -> None:
        if self.lora_rank:
            raise ContractError("low-rank factors already attached")
        for layer in self.lora_layers():
            layer.attach_lora(rank, rng)
        # From here on the base is frozen; only factors/adapters may train.
        for name, t, group in self.named_parameters():
            if group == "base":
                t.requires_grad = False
                t.grad = None
        self.lora_rank = rank

    def init_adapters_from_base(self) -> None:
        for s in self._stages():
            s.attn.init_adapters_from_base()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: t for name, t, _ in self.named_parameters()}
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ContractError(f"state dict mismatch: missing={missing} extra={extra}")
        for name, t in own.items():
            if tuple(state[name].shape) != t.shape:
                raise ContractError(
                    f"shape mismatch for {name}: {state[name].shape} vs {t.shape}")
            t.data[...] = state[name]

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.state_dict()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.state_dict()[name]).tobytes())
        return h.hexdigest()

    # -- forward passes -------------------------------------------------

    def _text_tensor(self, text: Tensor | None, batch: int) -> Tensor:
        if text is not None:
            if text.ndim != 3 or text.shape[0] != batch or text.shape[2] != self.config.d_text:
                raise DimensionError(
                    f"text must be [B,L,{self.config.d_text}] with B={batch}, got {text.shape}")
            return text
        # Unconditional branch: the learned null token, broadcast over batch.
        null = ad.reshape(self.null_token, (1, 1, self.config.d_text))
        return ad.add(null, Tensor(np.zeros((batch, 1, 1))))

    def forward(self, z: Tensor, t_vec, text: Tensor | None, refs: ReferenceFeatureSet | None,
                tag: InputTag, capture: bool = False):
        cfg = self.config
        if z.ndim != 4 or z.shape[1] != cfg.latent_channels or z.shape[2] != cfg.latent_size \
                or z.shape[3] != cfg.latent_size:
            raise DimensionError(
                f"latent must be [B,{cfg.latent_channels},{cfg.latent_size},{cfg.latent_size}], "
                f"got {z.shape}")
        batch = z.shape[0]
        t_arr = np.full(batch, t_vec, dtype=np.int64) if np.isscalar(t_vec) \
            else np.asarray(t_vec, dtype=np.int64)
        if t_arr.shape != (batch,):
            raise DimensionError(f"timesteps must be scalar or [B], got {t_arr.shape}")
        if refs is not None:
            if refs.sites != self.sites():
                raise ContractError(
                    f"reference sites {refs.sites} do not match model sites {self.sites()}")
            if refs.batch != batch:
                raise ContractError(f"reference batch {refs.batch} != input batch {batch}")

        text_t = self._text_tensor(text, batch)
        emb = Tensor(timestep_embedding(t_arr, cfg.d_time))
        t_emb = self.time_mlp2.forward(ad.silu(self.time_mlp1.forward(emb, tag)), tag)

        captured: dict[str, Tensor] | None = {} if capture else None
        x = self.in_conv.forward(z, tag)
        skips = []
        for i, stage in enumerate(self.down_stages):
            x = stage.forward(x, t_emb, text_t, refs.get(stage.name) if refs else None,
                              tag, captured)
            skips.append(x)
            x = self.downsamples[i].forward(x, tag)
        x = self.mid_stage.forward(x, t_emb, text_t,
                                   refs.get("mid") if refs else None, tag, captured)
        for stage in self.up_stages:
            x = ad.concat([ad.upsample2x(x), skips.pop()], axis=1)
            x = stage.forward(x, t_emb, text_t, refs.get(stage.name) if refs else None,
                              tag, captured)
        eps = self.out_conv.forward(ad.silu(ad.group_norm(x, cfg.groups)), tag)
        if capture:
            return eps, ReferenceFeatureSet(captured)
        return eps

    def denoise(self, z_t: Tensor, t_vec, text: Tensor | None,
                refs: ReferenceFeatureSet | None) -> Tensor:
        """Noise prediction with gates closed.  text=None means the
        unconditional branch; refs=None skips the reference branch."""
        return self.forward(z_t, t_vec, text, refs, InputTag.LATENT_NOISE)

    def encode_reference(self, ref_z: Tensor) -> ReferenceFeatureSet:
        """Encode a clean reference latent (t=0, null text, gates open)
        into per-site features for the adaptive attention branch."""
        z = ad.reshape(ref_z, (1,) + ref_z.shape) if ref_z.ndim == 3 else ref_z
        _, captured = self.forward(z, 0, None, None, InputTag.REFERENCE_FEATURE, capture=True)
        return captured

    def embed_caption(self, text: str, batch: int = 1) -> Tensor:
        """Frozen caption embedding tiled to [B, L, d_text]."""
        emb = self.text_embedding.embed(text)
        return Tensor(np.repeat(emb[None], batch, axis=0))


# ----------------------------------------------------------------------
# generation pipeline


def generate_batch(unet: ToyUNet, schedule: diffusion.NoiseSchedule, caption: str,
                   ref_image: np.ndarray | None, guidance: diffusion.GuidanceConfig,
                   seeds: list[int]) -> np.ndarray:
    """One caption + optional reference, several seeds -> uint8
    [len(seeds),H,W,3].  The reference is encoded once and shared; each
    seed draws only its own starting noise.  Samples are independent, so
    a batched run matches per-seed runs up to float summation order."""
    cfg = unet.config
    batch = len(seeds)
    refs = None
    if ref_image is not None:
        ref_z = encode_latent(img_to_unit(ref_image), cfg.patch)
        refs = unet.encode_reference(Tensor(ref_z)).tile(batch)
    text = unet.embed_caption(caption, batch=batch)

    def model_fn(z, t, cond):
        if cond is None:
            return unet.denoise(z, t, None, None)
        return unet.denoise(z, t, cond[0], cond[1])

    shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    z_start = Tensor(np.stack([np.random.default_rng(s).standard_normal(shape)
                               for s in seeds]))
    z0 = diffusion.ddim_sample(model_fn, z_start, (text, refs), guidance, schedule)
    return unit_to_img(decode_latent(z0.data, cfg.patch, cfg.channels))


def generate(unet: ToyUNet, schedule: diffusion.NoiseSchedule, caption: str,
             ref_image: np.ndarray | None, guidance: diffusion.GuidanceConfig,
             seed: int) -> np.ndarray:
    """Caption + optional reference image -> uint8 [H,W,3] image.
    Deterministic given the seed, which only draws the starting noise."""
    return generate_batch(unet, schedule, caption, ref_image, guidance, [seed])[0]
