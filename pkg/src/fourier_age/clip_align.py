"""Dual-encoder image/text alignment and age readout.

A word-level tokenizer turns age prompts into ids, a small attention
encoder with learnable context tokens embeds them, and a patch-embedding
image encoder built on FPE blocks embeds the images. Image-to-prompt
scores are temperature-scaled softmaxes of cosine similarity; the
predicted age is the score-weighted mean of the class ages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fourierformer import AttentionParams, FourierFormer, FPEConfig, attention_baseline_forward
from .nn import LayerNorm, Linear, ParamSet, normal
from .tensor import ContractError, DimensionError, Tensor

PAD, SOS, EOS, UNK = "[PAD]", "[SOS]", "[EOS]", "[UNK]"
DEFAULT_TEMPLATE = "a photo of a {age} year old person"
_TEMPLATE_WORDS = ("a", "photo", "of", "year", "old", "person")
MAX_AGE_WORD = 120


class PromptTruncated(UserWarning):
    pass


class Tokenizer:
    """Closed-vocabulary word tokenizer for age prompts."""

    def __init__(self, extra_words: tuple[str, ...] = ()):
        words = [PAD, SOS, EOS, UNK, *_TEMPLATE_WORDS]
        words += [str(a) for a in range(MAX_AGE_WORD + 1)]
        words += [w for w in extra_words if w not in words]
        self.itos = words
        self.stoi = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def sos(self) -> int:
        return self.stoi[SOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    def tokenize(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise ContractError("cannot tokenize an empty prompt")
        if not text.isascii():
            raise ContractError("prompts must be ASCII")
        unk = self.stoi[UNK]
        ids = [self.stoi.get(w, unk) for w in text.lower().split()]
        return [self.sos, *ids, self.eos]

    def detokenize(self, ids: list[int]) -> str:
        special = {self.stoi[PAD], self.sos, self.eos}
        return " ".join(self.itos[i] for i in ids if i not in special)


_DEFAULT_TOKENIZER = Tokenizer()


def tokenize_prompt(text: str) -> list[int]:
    return _DEFAULT_TOKENIZER.tokenize(text)


def detokenize(ids: list[int]) -> str:
    return _DEFAULT_TOKENIZER.detokenize(ids)


@dataclass
class AlignmentConfig:
    tau: float = 0.07
    dim: int = 64
    text_depth: int = 1
    patch: int = 4
    image_size: int = 32
    in_channels: int = 3
    encoder_blocks: int = 2
    decoder_depth: int = 2
    context_len: int = 9
    max_len: int = 32
    template: str = DEFAULT_TEMPLATE
    min_age: int = 1
    max_age: int = 80
    age_step: int = 1
    readout: str = "expectation"
    loss_floor: float | None = None
    leaky_slope: float = 0.2
    spatial_interaction: bool = True
    channel_evolution: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.readout not in ("expectation", "argmax"):
            raise ValueError("readout must be 'expectation' or 'argmax'")
        if not 1 <= self.min_age < self.max_age <= MAX_AGE_WORD:
            raise ValueError(f"age range must lie within [1, {MAX_AGE_WORD}]")

    @property
    def class_ages(self) -> np.ndarray:
        return np.arange(self.min_age, self.max_age + 1, self.age_step, dtype=np.float32)

    def fpe(self, blocks: int) -> FPEConfig:
        return FPEConfig(channels=self.dim, blocks=blocks, leaky_slope=self.leaky_slope,
                         spatial_interaction=self.spatial_interaction,
                         channel_evolution=self.channel_evolution)


@dataclass
class PromptSet:
    ages: np.ndarray
    token_ids: np.ndarray  # [C, L]
    context_len: int

    @classmethod
    def build(cls, config: AlignmentConfig, tokenizer: Tokenizer = _DEFAULT_TOKENIZER) -> "PromptSet":
        ages = config.class_ages
        if np.any(np.diff(ages) <= 0):
            raise ContractError("class ages must be strictly increasing")
        seqs = [tokenizer.tokenize(config.template.format(age=int(a))) for a in ages]
        if len({len(s) for s in seqs}) != 1:
            raise ContractError("age prompts must share one token length")
        return cls(ages, np.array(seqs, dtype=np.int64), config.context_len)


# -- encoders ----------------------------------------------------------------------

@dataclass
class TextEncoder(ParamSet):
    token_embed: Tensor
    context: Tensor
    position: Tensor
    layers: list[AttentionParams]
    final_norm: LayerNorm
    proj: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, config: AlignmentConfig, vocab: int) -> "TextEncoder":
        d = config.dim
        return cls(
            normal(rng, (vocab, d), 0.5),
            normal(rng, (config.context_len, d), 0.5),
            normal(rng, (config.max_len + config.context_len, d), 0.1),
            [AttentionParams.init(rng, d) for _ in range(config.text_depth)],
            LayerNorm.init(d),
            Linear.init(rng, d, d),
        )


def encode_text(tokens, encoder: TextEncoder, max_len: int | None = None) -> Tensor:
    """Embed one [L] or a batch [N, L] of token sequences to [D] / [N, D].

    The learnable context tokens are prepended; the end-marker state is
    projected. Sequences longer than ``max_len`` keep their head and end
    marker and raise a PromptTruncated warning.
    """
    ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    single = np.asarray(tokens).ndim == 1
    k = encoder.context.shape[0]
    max_len = encoder.position.shape[0] - k if max_len is None else max_len
    if ids.shape[1] > max_len:
        warnings.warn(f"prompt of {ids.shape[1]} tokens truncated to {max_len}", PromptTruncated)
        ids = np.concatenate([ids[:, :max_len - 1], ids[:, -1:]], axis=1)
    n, length = ids.shape
    words = encoder.token_embed[ids]
    ctx = T.broadcast_to(encoder.context, (n, k, encoder.context.shape[1]))
    h = T.concatenate([ctx, words], axis=1) + encoder.position[:k + length]
    for layer in encoder.layers:
        h = attention_baseline_forward(h, layer)
    out = encoder.proj(encoder.final_norm(h[:, -1, :]))
    return out[0] if single else out


@dataclass
class ImageEncoder(ParamSet):
    patch_embed: Linear
    position: Tensor
    blocks: FourierFormer
    final_norm: LayerNorm

    @classmethod
    def init(cls, rng: np.random.Generator, config: AlignmentConfig) -> "ImageEncoder":
        p, d = config.patch, config.dim
        g = config.image_size // p
        return cls(
            Linear.init(rng, p * p * config.in_channels, d),
            normal(rng, (g, g, d), 0.1),
            FourierFormer.init(rng, config.fpe(config.encoder_blocks)),
            LayerNorm.init(d),
        )


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W, C] -> [..., H/p, W/p, p*p*C]."""
    *lead, h, w, c = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} is not divisible by patch {patch}")
    y = x.reshape(*lead, h // patch, patch, w // patch, patch, c)
    y = np.moveaxis(y, -4, -3)
    return y.reshape(*lead, h // patch, w // patch, patch * patch * c)


def encode_image(x, encoder: ImageEncoder, config: AlignmentConfig) -> tuple[Tensor, Tensor]:
    """Return (pooled embedding [..., D], context grid [..., h, w, D])."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    tokens = encoder.patch_embed(Tensor(patchify(data, config.patch))) + encoder.position
    grid = encoder.final_norm(encoder.blocks(tokens, config.fpe(config.encoder_blocks)))
    return T.mean(grid, axis=(-3, -2)), grid


# -- similarity and losses -------------------------------------------------------------

def _cosine(texts: Tensor, images: Tensor) -> Tensor:
    """cos[..., j, i] between image j and text i; texts may be per-image [N, C, D]."""
    for name, e in (("text", texts), ("image", images)):
        if np.any(np.sum(np.square(e.data, dtype=np.float64), axis=-1) == 0):
            raise ContractError(f"zero-norm {name} embedding")
    tn = T.l2_normalize(texts)
    im = T.l2_normalize(images)
    if texts.ndim == 3:
        return T.tsum(tn * T.expand_dims(im, 1), axis=-1)
    return T.matmul(im, T.transpose(tn))


@dataclass
class SimilarityMatrix:
    """Softmax-normalised scores; row j is image j over all texts."""

    scores: Tensor
    tau: float

    def rows_sum_to_one(self, tol: float = 1e-5) -> bool:
        return bool(np.all(np.abs(self.scores.data.sum(axis=-1) - 1.0) <= tol))


def similarity_matrix(texts: Tensor, images: Tensor, tau: float) -> SimilarityMatrix:
    """exp(cos(T_i, I_j)/tau), normalised over texts for each image."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    return SimilarityMatrix(T.softmax(_cosine(texts, images) * (1.0 / tau), axis=-1), tau)


def matching_loss(texts: Tensor, images: Tensor, tau: float,
                  floor: float | None = None) -> Tensor:
    """Image-text matching objective over N matched pairs.

    First term: InfoNCE of each text against all images. Second term: the
    mean log-probability the text assigns to its mismatched images, added
    as is. ``floor`` (off by default) computes that term as log(p + floor).
    """
    n = texts.shape[0]
    if images.shape[0] != n:
        raise DimensionError("texts and images must pair up one to one")
    cos = _cosine(texts, images)                       # [image j, text i]
    logits = T.transpose(cos) * (1.0 / tau)            # [text i, image j]
    logp = T.log_softmax(logits, axis=-1)
    eye = np.eye(n, dtype=logp.dtype)
    first = -T.tsum(logp * eye) * (1.0 / n)
    if n == 1:
        return first
    if floor is not None:
        logp = T.log(T.exp(logp) + floor)
    second = T.tsum(logp * (1.0 - eye)) * (1.0 / (n * (n - 1)))
    return first + second


# -- prompting and readout -----------------------------------------------------------------

@dataclass
class PromptDecoder(ParamSet):
    blocks: FourierFormer
    proj: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, config: AlignmentConfig) -> "PromptDecoder":
        return cls(FourierFormer.init(rng, config.fpe(config.decoder_depth)),
                   Linear.init(rng, config.dim, config.dim, zero=True))


def visual_context_prompting(text_states: Tensor, grid: Tensor, decoder: PromptDecoder,
                             config: AlignmentConfig | None = None) -> Tensor:
    """Refine text states [C, D] with one image grid [h, w, D] (or batches of both).

    A batched grid [B, h, w, D] with shared text states [C, D] yields [B, C, D].
    """
    d = text_states.shape[-1]
    if grid.shape[-1] != d:
        raise DimensionError(f"grid width {grid.shape[-1]} vs text width {d}")
    fpe = config.fpe(config.decoder_depth) if config else None
    pooled = T.mean(decoder.blocks(grid, fpe), axis=(-3, -2))
    shift = decoder.proj(pooled)
    if grid.ndim == 4:
        return T.expand_dims(shift, 1) + text_states
    return text_states + shift


def predict_age(scores, class_ages, argmax: bool = False, tol: float = 1e-4):
    """Expected age under the class scores (or the arg-max class age).

    Accepts a Tensor (differentiable) or array; rows must sum to one.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if np.any(np.abs(s.sum(axis=-1) - 1.0) > tol):
        raise ContractError("score rows must sum to 1")
    ages = np.asarray(class_ages, dtype=s.dtype)
    if argmax:
        return ages[np.argmax(s, axis=-1)]
    if isinstance(scores, Tensor):
        return T.tsum(scores * ages, axis=-1)
    return s @ ages


# -- full model --------------------------------------------------------------------------------

@dataclass
class AgeModel(ParamSet):
    text: TextEncoder
    image: ImageEncoder
    decoder: PromptDecoder
    config: AlignmentConfig = field(default_factory=AlignmentConfig)

    @classmethod
    def init(cls, config: AlignmentConfig, seed: int = 0) -> "AgeModel":
        rng = np.random.default_rng(seed)
        return cls(TextEncoder.init(rng, config, len(_DEFAULT_TOKENIZER)),
                   ImageEncoder.init(rng, config), PromptDecoder.init(rng, config), config)

    @property
    def prompts(self) -> PromptSet:
        return PromptSet.build(self.config)

    def forward(self, images) -> dict:
        cfg = self.config
        prompts = self.prompts
        text_states = encode_text(prompts.token_ids, self.text)
        img_emb, grid = encode_image(images, self.image, cfg)
        refined = visual_context_prompting(text_states, grid, self.decoder, cfg)
        sim = similarity_matrix(refined, img_emb, cfg.tau)
        return {
            "embedding": img_emb,
            "text_states": refined,
            "scores": sim.scores,
            "age": predict_age(sim.scores, prompts.ages, argmax=cfg.readout == "argmax"),
        }
