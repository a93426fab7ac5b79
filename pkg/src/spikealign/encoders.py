"""Dual-stream spiking encoders.

Image stream: patch projection, ``depth`` spiking transformer blocks and a
readout.  Text stream: word vectors spike-encoded by constant-current LIF,
a spiking MLP and a readout with layer normalisation.  Every activation
between layers is a binary spike tensor; only readout outputs are real.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .config import Config, config_from_text
from .errors import ConfigError, ContractError, DimensionError
from .io import read_checkpoint, write_checkpoint
from .lif import LifParams, encode_constant, lif_scan, normalize_image
from .tensor import (Tensor, add, matmul, mean, mul, reshape, scale,
                     sqrt, sub, take_rows, transpose)

READOUT_MODES = ("TDW", "MEAN", "AD", "AR")
PAD, UNK = "<pad>", "<unk>"
_TOKEN = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*")


@dataclass
class ImageEncoderCfg:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    depth: int = 4
    dim: int = 384
    heads: int = 8
    mlp_ratio: int = 4
    attn_threshold: float = 0.25
    out_dim: int = 512

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("image encoder depth must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"image dim {self.dim} is not divisible by {self.heads} heads")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch {self.patch_size}")
        if min(self.channels, self.out_dim, self.mlp_ratio) < 1:
            raise ConfigError("image encoder extents must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TextEncoderCfg:
    vocab: dict[str, int]
    embed_dim: int
    hidden_dims: tuple[int, ...] = (512,)
    max_len: int = 20
    out_dim: int = 512

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError("text max_len must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1 or self.embed_dim < 1 or self.out_dim < 1:
            raise ConfigError("text encoder extents must be positive")
        if self.vocab.get(PAD) != 0 or self.vocab.get(UNK) != 1:
            raise ConfigError("vocab must map <pad> to 0 and <unk> to 1")


def readout_weights(mode: str, time_steps: int) -> np.ndarray:
    """Per-step integration weights; all modes sum to 1.

    AD is the increasing arithmetic progression ``d, 2d, ..., Td``; AR the
    geometric progression with ratio 2.  TDW starts from the uniform mean.
    """
    t = np.arange(1, time_steps + 1, dtype=np.float64)
    if mode in ("MEAN", "TDW"):
        w = np.full(time_steps, 1.0 / time_steps)
    elif mode == "AD":
        w = t * (2.0 / (time_steps * (time_steps + 1)))
    elif mode == "AR":
        w = 2.0 ** (t - 1) / (2.0 ** time_steps - 1)
    else:
        raise ConfigError(f"unknown readout mode {mode!r}; expected one of {READOUT_MODES}")
    return w.astype(np.float32)


# -- probes ----------------------------------------------------------------------


@dataclass
class LayerProbe:
    name: str
    kind: str
    flops: int              # MACs per item for one time step
    spiking: bool = True
    spikes: float = 0.0
    slots: int = 0
    items: int = 0
    time_steps: int = 1

    @property
    def gamma(self) -> float:
        return self.spikes / self.slots if self.slots else 0.0


@dataclass
class ProbeLog:
    """Per-layer input firing statistics gathered during a forward pass."""

    layers: dict[str, LayerProbe] = field(default_factory=dict)

    def record(self, name: str, kind: str, flops: int, x: Tensor | None, items: int,
               time_steps: int, spiking: bool = True) -> None:
        probe = self.layers.get(name)
        if probe is None:
            probe = self.layers[name] = LayerProbe(name, kind, flops, spiking, time_steps=time_steps)
        elif probe.flops != flops:
            raise ContractError(f"probe {name}: per-item cost changed between batches")
        if x is not None:
            probe.spikes += float(np.sum(x.data, dtype=np.float64))
            probe.slots += x.size
        probe.items += items


# -- layers ------------------------------------------------------------------------


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 gain: float = 1.0, bias: bool = True, zero: bool = False):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, gain / math.sqrt(n_in), (n_in, n_out))
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias") if bias else None

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out

    def __call__(self, x: Tensor, probes: ProbeLog | None = None, kind: str = "fc",
                 spiking: bool = True) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.name}: expected last dim {self.n_in}, got {x.shape}")
        if probes is not None:
            time_steps = x.shape[0] if spiking else 1
            items = x.shape[1] if spiking else x.shape[0]
            tokens = x.size // (time_steps * items * self.n_in)
            probes.record(self.name, kind, tokens * self.n_in * self.n_out,
                          x if spiking else None, items, time_steps, spiking)
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class Readout:
    """Time-weighted spike integration followed by a linear projection.

    Token axes between batch and feature (image patches) are mean-pooled
    after integration.  Only TDW weights are trainable.
    """

    def __init__(self, name: str, n_in: int, n_out: int, time_steps: int, mode: str,
                 rng: np.random.Generator, gain: float = 1.0, layer_norm: bool = False,
                 symmetric: bool = False):
        self.name = name
        self.mode = mode
        self.time_steps = time_steps
        self.weights = Tensor(readout_weights(mode, time_steps), requires_grad=(mode == "TDW"),
                              name=f"{name}.time_weights")
        self.proj = Linear(f"{name}.proj", n_in, n_out, rng, gain, zero=symmetric)
        # a silent input must still map to a nonzero embedding
        if symmetric:
            self.proj.bias.data[:] = 1.0 / math.sqrt(n_out)
        else:
            self.proj.bias.data[:] = rng.normal(0.0, 0.1, n_out)
        self.layer_norm = layer_norm
        if layer_norm:
            self.ln_gain = Tensor(np.ones(n_in), requires_grad=True, name=f"{name}.ln_gain")
            self.ln_shift = Tensor(np.zeros(n_in), requires_grad=True, name=f"{name}.ln_shift")

    def params(self, trainable_only: bool = True) -> dict[str, Tensor]:
        out = {}
        if self.weights.requires_grad or not trainable_only:
            out[f"{self.name}.time_weights"] = self.weights
        if self.layer_norm:
            out[f"{self.name}.ln_gain"] = self.ln_gain
            out[f"{self.name}.ln_shift"] = self.ln_shift
        out.update(self.proj.params())
        return out

    def integrate(self, spikes: Tensor) -> Tensor:
        if spikes.shape[0] != self.time_steps:
            raise ContractError(f"{self.name}: {self.time_steps} weights for {spikes.shape[0]} time steps")
        rest = spikes.shape[1:]
        flat = reshape(spikes, (self.time_steps, -1))
        w = reshape(self.weights, (1, self.time_steps))
        summed = reshape(matmul(w, flat), rest)
        if summed.ndim > 2:
            summed = mean(summed, axis=tuple(range(1, summed.ndim - 1)))
        return summed

    def __call__(self, spikes: Tensor, probes: ProbeLog | None = None) -> Tensor:
        z = self.integrate(spikes)
        if self.layer_norm:
            mu = mean(z, axis=-1, keepdims=True)
            centred = sub(z, mu)
            var = mean(mul(centred, centred), axis=-1, keepdims=True)
            z = add(mul(centred / sqrt(add(var, 1e-5)), self.ln_gain), self.ln_shift)
        return self.proj(z, probes, kind="readout", spiking=False)


class SpikingBlock:
    """Spiking self-attention plus spiking MLP, each with a re-thresholded residual."""

    def __init__(self, name: str, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 gain: float, lif: LifParams, attn_lif: LifParams):
        self.name = name
        self.dim, self.heads = dim, heads
        self.lif, self.attn_lif = lif, attn_lif
        self.q = Linear(f"{name}.q", dim, dim, rng, gain)
        self.k = Linear(f"{name}.k", dim, dim, rng, gain)
        self.v = Linear(f"{name}.v", dim, dim, rng, gain)
        self.o = Linear(f"{name}.o", dim, dim, rng, gain)
        self.fc1 = Linear(f"{name}.fc1", dim, dim * mlp_ratio, rng, gain)
        self.fc2 = Linear(f"{name}.fc2", dim * mlp_ratio, dim, rng, gain)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in (self.q, self.k, self.v, self.o, self.fc1, self.fc2):
            out.update(layer.params())
        return out

    def __call__(self, x: Tensor, probes: ProbeLog | None = None) -> Tensor:
        t, b, p, d = x.shape
        h, dh = self.heads, d // self.heads
        n = self.name

        def split(z):
            return transpose(reshape(z, (t, b, p, h, dh)), (0, 1, 3, 2, 4))

        q = lif_scan(self.q(x, probes), self.attn_lif, where=f"{n}.q")
        k = lif_scan(self.k(x, probes), self.attn_lif, where=f"{n}.k")
        v = lif_scan(self.v(x, probes), self.attn_lif, where=f"{n}.v")
        qh, kh, vh = split(q), split(k), split(v)
        if probes is not None:
            probes.record(f"{n}.qk", "attention-matmul", h * p * p * dh, qh, b, t)
        scores = scale(matmul(qh, transpose(kh, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(dh))
        attn = lif_scan(scores, self.attn_lif, where=f"{n}.attn")
        if probes is not None:
            probes.record(f"{n}.av", "attention-matmul", h * p * p * dh, attn, b, t)
        heads_out = lif_scan(matmul(attn, vh), self.attn_lif, where=f"{n}.av")
        merged = reshape(transpose(heads_out, (0, 1, 3, 2, 4)), (t, b, p, d))
        y = lif_scan(self.o(merged, probes), self.lif, where=f"{n}.o")
        x = lif_scan(add(x, y), self.lif, where=f"{n}.res1")
        hidden = lif_scan(self.fc1(x, probes), self.lif, where=f"{n}.fc1")
        y = lif_scan(self.fc2(hidden, probes), self.lif, where=f"{n}.fc2")
        return lif_scan(add(x, y), self.lif, where=f"{n}.res2")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, num_patches, patch*patch*C], patches in row-major order."""
    b, hgt, wid, c = images.shape
    if hgt % patch or wid % patch:
        raise DimensionError(f"image {hgt}x{wid} is not divisible by patch size {patch}")
    x = images.reshape(b, hgt // patch, patch, wid // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (hgt // patch) * (wid // patch), patch * patch * c)


class ImageEncoder:
    def __init__(self, cfg: ImageEncoderCfg, time_steps: int, lif: LifParams,
                 rng: np.random.Generator, readout_mode: str = "TDW", gain: float = 1.0):
        self.cfg = cfg
        self.time_steps = time_steps
        self.lif = lif
        self.attn_lif = LifParams(cfg.attn_threshold, lif.beta, lif.surrogate_width)
        self.patch_embed = Linear("image.patch_embed", cfg.patch_dim, cfg.dim, rng, gain)
        self.pos = Tensor(np.zeros((cfg.num_patches, cfg.dim)), requires_grad=True, name="image.pos")
        self.blocks = [SpikingBlock(f"image.block{i}", cfg.dim, cfg.heads, cfg.mlp_ratio, rng, gain,
                                    lif, self.attn_lif) for i in range(cfg.depth)]
        self.readout = Readout("image.readout", cfg.dim, cfg.out_dim, time_steps, readout_mode, rng, gain)

    def params(self, trainable_only: bool = True) -> dict[str, Tensor]:
        out = dict(self.patch_embed.params())
        out["image.pos"] = self.pos
        for blk in self.blocks:
            out.update(blk.params())
        out.update(self.readout.params(trainable_only))
        return out

    def spikes(self, images: np.ndarray, probes: ProbeLog | None = None) -> Tensor:
        """Final-block spike train [T, B, P, dim] for normalised images [B, H, W, C]."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], "
                                 f"got {images.shape}")
        patches = patchify(np.asarray(images, dtype=np.float32), cfg.patch_size)
        x = encode_constant(Tensor(patches), self.time_steps, self.lif, where="image.encode")
        x = lif_scan(add(self.patch_embed(x, probes), self.pos), self.lif, where="image.patch_embed")
        for blk in self.blocks:
            x = blk(x, probes)
        return x

    def __call__(self, images: np.ndarray, probes: ProbeLog | None = None) -> Tensor:
        return self.readout(self.spikes(images, probes), probes)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class TextEncoder:
    def __init__(self, cfg: TextEncoderCfg, word_vectors: np.ndarray, time_steps: int, lif: LifParams,
                 rng: np.random.Generator, readout_mode: str = "TDW", gain: float = 1.0,
                 train_embeddings: bool = True, symmetric: bool = False):
        if word_vectors.shape != (len(cfg.vocab), cfg.embed_dim):
            raise DimensionError(f"word vectors {word_vectors.shape} do not match vocab "
                                 f"({len(cfg.vocab)}, {cfg.embed_dim})")
        self.cfg = cfg
        self.time_steps = time_steps
        self.lif = lif
        table = np.array(word_vectors, dtype=np.float32)
        table[:2] = 0.0
        self.table = Tensor(table, requires_grad=train_embeddings, name="text.embed")
        dims = (cfg.max_len * cfg.embed_dim,) + tuple(cfg.hidden_dims)
        self.layers = [Linear(f"text.fc{i}", dims[i], dims[i + 1], rng, gain) for i in range(len(dims) - 1)]
        self.readout = Readout("text.readout", dims[-1], cfg.out_dim, time_steps, readout_mode, rng, gain,
                               layer_norm=True, symmetric=symmetric)

    def params(self, trainable_only: bool = True) -> dict[str, Tensor]:
        out = {}
        if self.table.requires_grad or not trainable_only:
            out["text.embed"] = self.table
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.readout.params(trainable_only))
        return out

    def token_ids(self, texts: list[str]) -> np.ndarray:
        vocab, max_len = self.cfg.vocab, self.cfg.max_len
        ids = np.zeros((len(texts), max_len), dtype=np.int64)
        for row, text in enumerate(texts):
            toks = [vocab.get(tok, 1) for tok in tokenize(text)][:max_len]
            ids[row, :len(toks)] = toks
        return ids

    def __call__(self, texts: list[str] | np.ndarray, probes: ProbeLog | None = None) -> Tensor:
        ids = self.token_ids(list(texts)) if not isinstance(texts, np.ndarray) else texts
        b = ids.shape[0]
        # PAD and UNK contribute nothing and never receive gradient
        mask = (ids >= 2).astype(np.float32)[..., None]
        emb = mul(take_rows(self.table, ids), mask)
        x = encode_constant(reshape(emb, (b, -1)), self.time_steps, self.lif, where="text.encode")
        for layer in self.layers:
            x = lif_scan(layer(x, probes), self.lif, where=layer.name)
        return self.readout(x, probes)


# -- dual model ----------------------------------------------------------------------


class DualEncoder:
    def __init__(self, cfg: Config, vocab_tokens: list[str], word_vectors: np.ndarray):
        self.cfg = cfg
        seed = int(cfg["seed"])
        self.time_steps = int(cfg["time_steps"])
        if self.time_steps < 1:
            raise ConfigError("time_steps must be >= 1")
        self.lif = LifParams(cfg["lif.threshold"], cfg["lif.beta"], cfg["lif.surrogate_width"])
        mode = str(cfg["model.readout"]).upper()
        if mode not in READOUT_MODES:
            raise ConfigError(f"unknown readout mode {mode!r}")
        init = str(cfg["model.init"])
        if init not in ("random", "symmetric"):
            raise ConfigError(f"unknown init {init!r}")
        gain = float(cfg["model.init_gain"])
        self.mean = cfg.floats("image.mean")
        self.std = cfg.floats("image.std")
        self.image_cfg = ImageEncoderCfg(cfg["image.size"], cfg["image.channels"], cfg["image.patch"],
                                         cfg["image.depth"], cfg["image.dim"], cfg["image.heads"],
                                         cfg["image.mlp_ratio"], cfg["lif.attn_threshold"],
                                         cfg["model.out_dim"])
        vocab = {tok: i for i, tok in enumerate(vocab_tokens)}
        if len(vocab) != len(vocab_tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.vocab_tokens = list(vocab_tokens)
        self.text_cfg = TextEncoderCfg(vocab, word_vectors.shape[1],
                                       tuple(cfg.ints("text.hidden")), cfg["text.max_len"],
                                       cfg["model.out_dim"])
        self.image = ImageEncoder(self.image_cfg, self.time_steps, self.lif,
                                  np.random.default_rng([seed, 1]), mode, gain)
        self.text = TextEncoder(self.text_cfg, word_vectors, self.time_steps, self.lif,
                                np.random.default_rng([seed, 2]), mode, gain,
                                bool(cfg["text.train_embeddings"]), init == "symmetric")

    def image_params(self) -> dict[str, Tensor]:
        return self.image.params()

    def text_params(self) -> dict[str, Tensor]:
        return self.text.params()

    def state(self) -> dict[str, Tensor]:
        """Every tensor needed to rebuild the model, trainable or not."""
        out = self.image.params(trainable_only=False)
        out.update(self.text.params(trainable_only=False))
        return out

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        state = self.state()
        missing = sorted(set(state) - set(params))
        extra = sorted(set(params) - set(state))
        if missing or extra:
            raise ConfigError(f"checkpoint parameters do not match model: missing={missing[:3]} extra={extra[:3]}")
        for name, tensor in state.items():
            arr = np.asarray(params[name], dtype=np.float32)
            if arr.shape != tensor.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {arr.shape} != model {tensor.shape}")
            tensor.data[...] = arr

    def prepare_images(self, images) -> np.ndarray:
        size = self.image_cfg.image_size
        return np.stack([normalize_image(img, self.mean, self.std, (size, size)) for img in images])

    def encode_images(self, images, probes: ProbeLog | None = None, *, normalized: bool = False) -> Tensor:
        arr = np.asarray(images, dtype=np.float32) if normalized else self.prepare_images(images)
        return self.image(arr, probes)

    def encode_texts(self, texts: list[str], probes: ProbeLog | None = None) -> Tensor:
        return self.text(texts, probes)


def apply_template(template: str, label: str) -> str:
    return template.replace("{}", label, 1)


def vocab_from_store(store) -> tuple[list[str], np.ndarray]:
    """Vocabulary tokens and word-vector table with reserved PAD/UNK rows."""
    tokens = [PAD, UNK]
    rows = [np.zeros(store.dim, np.float32), np.zeros(store.dim, np.float32)]
    seen = set(tokens)
    for key in store.ids():
        tok = key.lower()
        if tok in seen:
            raise ConfigError(f"word-vector store has duplicate token {tok!r}")
        seen.add(tok)
        tokens.append(tok)
        rows.append(store.get(key))
    return tokens, np.stack(rows)


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def save_model(path, model: DualEncoder) -> str:
    cfg = model.cfg.copy()
    cfg.set("_vocab", " ".join(model.vocab_tokens), allow_internal=True)
    state = {name: t.data for name, t in model.state().items()}
    return write_checkpoint(path, state, cfg.to_text())


def load_model(path, overrides: dict | None = None) -> DualEncoder:
    """Rebuild a model from a checkpoint; ``overrides`` may change run-time keys only."""
    ckpt = read_checkpoint(path)
    cfg = config_from_text(ckpt.config_text)
    tokens = cfg.internal.get("_vocab", "").split(" ")
    if "text.embed" not in ckpt.params:
        raise ConfigError(f"{path}: checkpoint lacks text.embed")
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    model = DualEncoder(cfg, tokens, ckpt.params["text.embed"])
    model.load_state(ckpt.params)
    model.digest = ckpt.digest
    return model
