###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Dual encoders and the parameter-shared cross-modal decoder.

The decoder reuses the text encoder's embeddings, self-attention,
feed-forward and layer-norm parameter objects; only its cross-attention
sublayers are its own. Every block is pre-norm with residual connections,
so zeroing the cross-attention output projection turns the decoder back
into the text encoder.
"""
from dataclasses import dataclass, field, fields
import threading

import numpy as np
from logbook import Logger

from cada import numerics as nx
from cada.errors import ConfigError, DimensionError, SharingError, ValidationError
from cada.numerics import Module, Parameter, truncated_normal
from cada.textproc import CLS_ID, ENC_ID, MASK_ID, TokenSequence

log = Logger("cada.model")

MATCH, MISMATCH = 0, 1


@dataclass
class ModelConfig:
    """Architecture. Desk-scale defaults; full scale lives in params-full.json."""

    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    image_layers: int = 2
    image_width: int = 64
    image_heads: int = 4
    text_layers: int = 2
    text_width: int = 64
    text_heads: int = 4
    max_len: int = 24
    latent_dim: int = 32
    mlp_ratio: int = 4
    vocab_size: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.image_width % self.image_heads:
            raise ConfigError(f"image width {self.image_width} not divisible by {self.image_heads} heads")
        if self.text_width % self.text_heads:
            raise ConfigError(f"text width {self.text_width} not divisible by {self.text_heads} heads")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be at least 2, got {self.max_len}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def from_params(cls, params, vocab_size):
        """Pick ``model.*`` keys out of a flat dotted parameter dict."""
        names = {f.name for f in fields(cls)}
        values = {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("model.")}
        values = {k: v for k, v in values.items() if k in names}
        values["vocab_size"] = vocab_size
        return cls(**values)


class Linear(Module):
    def __init__(self, rng, in_features, out_features, bias=True):
        super().__init__()
        self.weight = self.add_parameter("weight", Parameter(truncated_normal(rng, (out_features, in_features))))
        self.bias = self.add_parameter("bias", Parameter(np.zeros(out_features))) if bias else None

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width):
        super().__init__()
        self.gamma = self.add_parameter("gamma", Parameter(np.ones(width)))
        self.beta = self.add_parameter("beta", Parameter(np.zeros(width)))

    def forward(self, x):
        return nx.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Multi-head attention with separate q/k/v/out projections."""

    def __init__(self, rng, width, heads, kv_width=None):
        super().__init__()
        kv_width = kv_width or width
        self.heads = heads
        self.q = self.add_module("q", Linear(rng, width, width))
        self.k = self.add_module("k", Linear(rng, kv_width, width))
        self.v = self.add_module("v", Linear(rng, kv_width, width))
        self.out = self.add_module("out", Linear(rng, width, width))

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        mixed = nx.attention(self.q(x), self.k(context), self.v(context), mask=mask, heads=self.heads)
        return self.out(mixed)


class FeedForward(Module):
    def __init__(self, rng, width, ratio):
        super().__init__()
        self.fc1 = self.add_module("fc1", Linear(rng, width, width * ratio))
        self.fc2 = self.add_module("fc2", Linear(rng, width * ratio, width))

    def forward(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, width, heads, ratio):
        super().__init__()
        self.ln1 = self.add_module("ln1", LayerNorm(width))
        self.attn = self.add_module("attn", Attention(rng, width, heads))
        self.ln2 = self.add_module("ln2", LayerNorm(width))
        self.ffn = self.add_module("ffn", FeedForward(rng, width, ratio))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(Module):
    """
    Text encoder layer plus a cross-attention sublayer over image tokens.

    ``ln1``, ``attn``, ``ln2`` and ``ffn`` are the encoder layer's own module
    objects; ``ln_cross`` and ``cross`` belong to the decoder alone.
    """

    def __init__(self, rng, encoder_layer, width, heads, image_width):
        super().__init__()
        self.ln1 = self.add_module("ln1", encoder_layer.ln1)
        self.attn = self.add_module("attn", encoder_layer.attn)
        self.ln_cross = self.add_module("ln_cross", LayerNorm(width))
        self.cross = self.add_module("cross", Attention(rng, width, heads, kv_width=image_width))
        self.ln2 = self.add_module("ln2", encoder_layer.ln2)
        self.ffn = self.add_module("ffn", encoder_layer.ffn)

    def forward(self, x, image_tokens, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        x = x + self.cross(self.ln_cross(x), context=image_tokens)
        return x + self.ffn(self.ln2(x))


def patchify(images, patch_size):
    """(B, H, W, C) -> (B, N, P*P*C), patches in row-major order."""
    b, h, w, c = images.shape
    p = patch_size
    grid = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, (h // p) * (w // p), p * p * c)


class ImageEncoder(Module):
    def __init__(self, rng, config):
        super().__init__()
        self.config = config
        d = config.image_width
        patch_dim = config.patch_size ** 2 * config.channels
        self.patch_embed = self.add_module("patch_embed", Linear(rng, patch_dim, d))
        self.cls_token = self.add_parameter("cls_token", Parameter(truncated_normal(rng, (1, d))))
        self.pos_embed = self.add_parameter(
            "pos_embed", Parameter(truncated_normal(rng, (config.num_patches + 1, d)))
        )
        self.layers = [
            self.add_module(f"layers.{i}", EncoderLayer(rng, d, config.image_heads, config.mlp_ratio))
            for i in range(config.image_layers)
        ]
        self.ln_f = self.add_module("ln_f", LayerNorm(d))

    def forward(self, images):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        cfg = self.config
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.shape[1:] != expected:
            raise DimensionError(f"image shape {images.shape[1:]} does not match configured {expected}")
        batch = images.shape[0]
        x = self.patch_embed(nx.Tensor(patchify(images, cfg.patch_size)))
        cls = nx.take(self.cls_token, np.zeros(batch, dtype=np.int64), axis=0).reshape(batch, 1, -1)
        x = nx.concat([cls, x], axis=1) + self.pos_embed
        for layer in self.layers:
            x = layer(x)
        return self.ln_f(x)


class TextEncoder(Module):
    def __init__(self, rng, config):
        super().__init__()
        d = config.text_width
        self.token_embed = self.add_parameter(
            "token_embed", Parameter(truncated_normal(rng, (config.vocab_size, d)))
        )
        self.pos_embed = self.add_parameter("pos_embed", Parameter(truncated_normal(rng, (config.max_len, d))))
        self.layers = [
            self.add_module(f"layers.{i}", EncoderLayer(rng, d, config.text_heads, config.mlp_ratio))
            for i in range(config.text_layers)
        ]
        self.ln_f = self.add_module("ln_f", LayerNorm(d))

    def embed(self, ids):
        return nx.embedding_lookup(self.token_embed, ids) + self.pos_embed[: ids.shape[1]]

    def forward(self, ids, pad_mask):
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, mask=pad_mask)
        return self.ln_f(x)


class Decoder(Module):
    """Shares embeddings, final norm and per-layer blocks with ``text_encoder``."""

    def __init__(self, rng, config, text_encoder):
        super().__init__()
        self.text_encoder = text_encoder
        self.token_embed = self.add_parameter("token_embed", text_encoder.token_embed)
        self.pos_embed = self.add_parameter("pos_embed", text_encoder.pos_embed)
        self.layers = [
            self.add_module(
                f"layers.{i}",
                DecoderLayer(rng, enc_layer, config.text_width, config.text_heads, config.image_width),
            )
            for i, enc_layer in enumerate(text_encoder.layers)
        ]
        self.ln_f = self.add_module("ln_f", text_encoder.ln_f)

    def forward(self, ids, pad_mask, image_tokens):
        x = self.text_encoder.embed(ids)
        for layer in self.layers:
            x = layer(x, image_tokens, mask=pad_mask)
        return self.ln_f(x)


def as_batch(tokens):
    """(ids, pad_mask) arrays from a TokenSequence, a list of them, or an (ids, mask) pair."""
    if isinstance(tokens, TokenSequence):
        tokens = [tokens]
    if isinstance(tokens, tuple) and len(tokens) == 2 and isinstance(tokens[0], np.ndarray):
        ids, mask = tokens
        return np.atleast_2d(ids), np.atleast_2d(mask)
    ids = np.stack([t.ids for t in tokens])
    mask = np.stack([t.pad_mask for t in tokens])
    return ids, mask


class Cada(Module):
    """
    Image encoder, text encoder, shared decoder and the four heads.

    ``project_image``/``project_text`` are W_v and W_t (no bias);
    ``match_head`` scores a fused group as match/mismatch; ``mam_head``
    predicts vocabulary words at masked positions.
    """

    def __init__(self, config, seed=0):
        super().__init__()
        if config.vocab_size < 1:
            raise ConfigError("model config needs a vocabulary size")
        self.config = config
        rng = np.random.default_rng(seed)
        self.image_encoder = self.add_module("image_encoder", ImageEncoder(rng, config))
        self.text_encoder = self.add_module("text_encoder", TextEncoder(rng, config))
        self.decoder = self.add_module("decoder", Decoder(rng, config, self.text_encoder))
        self.project_image = self.add_module(
            "project_image", Linear(rng, config.image_width, config.latent_dim, bias=False)
        )
        self.project_text = self.add_module(
            "project_text", Linear(rng, config.text_width, config.latent_dim, bias=False)
        )
        self.match_head = self.add_module("match_head", Linear(rng, config.text_width, 2))
        self.mam_head = self.add_module("mam_head", Linear(rng, config.text_width, config.vocab_size))
        self.decoder_calls = 0
        self._calls_lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_calls_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._calls_lock = threading.Lock()

    def encode_image(self, images):
        """(B, H, W, C) or (H, W, C) -> (B, N+1, d_v); row 0 is the image [CLS]."""
        return self.image_encoder(images)

    def encode_text(self, tokens):
        ids, mask = as_batch(tokens)
        if (ids[:, 0] != CLS_ID).any():
            raise ValidationError("text encoder input must start with [CLS]")
        return self.text_encoder(ids, mask)

    def decode(self, tokens, image_tokens):
        """
        Fuse texts led by [ENC] with image token sequences, row by row.

        :return Tensor: (B, M_max, d_t); row 0 of each item is h_enc.
        """
        ids, mask = as_batch(tokens)
        if (ids[:, 0] != ENC_ID).any():
            raise ValidationError("decoder input must start with [ENC]")
        image_tokens = nx.as_tensor(image_tokens)
        if image_tokens.ndim == 2:
            image_tokens = image_tokens.reshape(1, *image_tokens.shape)
        if image_tokens.shape[0] != ids.shape[0]:
            raise DimensionError(
                f"decoder got {ids.shape[0]} texts but {image_tokens.shape[0]} images"
            )
        with self._calls_lock:
            self.decoder_calls += ids.shape[0]
        return self.decoder(ids, mask, image_tokens)

    def project_global(self, v_cls, t_cls):
        """(ṽ, t̃) = (W_v v_cls, W_t t_cls)."""
        return self.project_image(v_cls), self.project_text(t_cls)

    def embed_images(self, images):
        tokens = self.encode_image(images)
        return tokens, self.project_image(tokens[:, 0])

    def embed_texts(self, tokens):
        hidden = self.encode_text(tokens)
        return hidden, self.project_text(hidden[:, 0])

    def match_logits(self, groups):
        return self.match_head(groups)

    def match_probability(self, image_tokens, tokens):
        """p̂(g_0) per (image, text) row pair, as a numpy array."""
        with nx.no_grad():
            fused = self.decode(tokens, image_tokens)
            probs = nx.softmax(self.match_head(fused[:, 0]), axis=-1)
        return probs.data[:, MATCH].astype(np.float64)

    def predict_masked(self, images, masked_ids, pad_mask, top_k=3):
        """
        Top-k vocabulary predictions at every [MASK] position.

        :return list: per row, a list of (position, [(token_id, probability), ...]).
        """
        masked_ids = np.atleast_2d(masked_ids)
        with nx.no_grad():
            image_tokens = self.encode_image(images)
            fused = self.decode((masked_ids, np.atleast_2d(pad_mask)), image_tokens)
            probs = nx.softmax(self.mam_head(fused), axis=-1).data
        predictions = []
        for row, ids in enumerate(masked_ids):
            row_preds = []
            for pos in np.flatnonzero(ids == MASK_ID):
                order = np.argsort(-probs[row, pos], kind="stable")[:top_k]
                row_preds.append((int(pos), [(int(t), float(probs[row, pos, t])) for t in order]))
            predictions.append(row_preds)
        return predictions


def build_model(config, seed=0):
    model = Cada(config, seed=seed)
    n_params = sum(p.data.size for p in model.parameters())
    log.info(f"model built: {n_params} parameters, {config.num_patches} patches, vocab {config.vocab_size}")
    return model


@dataclass
class SharingReport:
    shared: list = field(default_factory=list)
    exclusive: list = field(default_factory=list)
    mismatches: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.mismatches

    def __str__(self):
        if self.passed:
            return f"sharing ok: {len(self.shared)} shared, {len(self.exclusive)} decoder-only"
        return "sharing violations:\n  " + "\n  ".join(self.mismatches)


def verify_sharing(model, raise_on_failure=False):
    """
    Check that every non-cross-attention decoder parameter is the text
    encoder's storage, and every cross-attention parameter is the decoder's
    alone.
    """
    report = SharingReport()
    all_params = list(model.named_parameters())
    by_path = dict(all_params)
    owners = {}
    for path, param in all_params:
        owners.setdefault(id(param), []).append(path)

    for path, param in all_params:
        if not path.startswith("decoder."):
            continue
        local = path[len("decoder.") :]
        if ".cross." in f".{local}" or ".ln_cross." in f".{local}":
            others = [p for p in owners[id(param)] if p != path]
            if others:
                report.mismatches.append(f"{path} is decoder-only but aliased by {', '.join(others)}")
            else:
                report.exclusive.append(path)
            continue
        counterpart = "text_encoder." + local
        target = by_path.get(counterpart)
        if target is None:
            report.mismatches.append(f"{path} has no text encoder counterpart {counterpart}")
        elif target is not param or not np.shares_memory(target.data, param.data):
            report.mismatches.append(f"{path} does not share storage with {counterpart}")
        else:
            report.shared.append((path, counterpart))

    if not report.passed:
        log.error(str(report))
        if raise_on_failure:
            raise SharingError(str(report), report=report)
    return report
