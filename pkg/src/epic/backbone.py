"""Frozen dual-branch transformer encoder used as a toy foundation model.

Both branches are pre-LN encoder stacks.  Every parameter is created with
``requires_grad=False``; the backbone never changes after construction.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

VISION = "v"
TEXT = "t"
MODALITIES = (VISION, TEXT)


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 6
    d_vision: int = 32
    d_text: int = 32
    n_heads: int = 4
    mlp_ratio: int = 2
    vocab_size: int = 64
    channels: int = 1
    image_size: int = 8
    patch_size: int = 4
    text_len: int = 8
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def width(self, branch: str) -> int:
        return self.d_vision if branch == VISION else self.d_text

    def n_tokens(self, branch: str) -> int:
        return self.n_patches if branch == VISION else self.text_len


@dataclass
class ImageTextPair:
    image: np.ndarray  # (c, h, w)
    text: np.ndarray  # (d_i,) integer token ids
    label: int | np.ndarray  # class id in 1..K, or binary vector of length K

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.int64)


@dataclass
class EncoderLayer:
    """One pre-LN block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    params: dict[str, Tensor]
    n_heads: int

    @property
    def width(self) -> int:
        return self.params["wq"].shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        d = self.width
        if x.shape[-1] != d:
            raise T.ShapeError("layer_forward", x.shape, detail=f"branch width {d}")
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, n, _ = x.shape
        nh, dh = self.n_heads, d // self.n_heads

        h = T.layer_norm(x) * p["ln1_g"] + p["ln1_b"]
        q = self._heads(h @ p["wq"] + p["bq"], b, n, nh, dh)
        k = self._heads(h @ p["wk"] + p["bk"], b, n, nh, dh)
        v = self._heads(h @ p["wv"] + p["bv"], b, n, nh, dh)
        att = T.softmax(T.scale(q @ T.transpose(k), 1.0 / np.sqrt(dh)), axis=-1)
        o = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
        x = x + (o @ p["wo"] + p["bo"])

        h = T.layer_norm(x) * p["ln2_g"] + p["ln2_b"]
        m = T.relu(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
        x = x + m
        if squeeze:
            x = T.reshape(x, x.shape[1:])
        return x

    @staticmethod
    def _heads(x: Tensor, b: int, n: int, nh: int, dh: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, n, nh, dh)), (0, 2, 1, 3))


def _frozen(rng: np.random.Generator, shape, fan_in: int | None, name: str) -> Tensor:
    data = rng.standard_normal(shape)
    if fan_in:
        data /= np.sqrt(fan_in)
    return Tensor.param(data, requires_grad=False, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor.param(np.full(shape, value), requires_grad=False, name=name)


def _make_layer(rng, d: int, cfg: BackboneConfig, prefix: str) -> EncoderLayer:
    hidden = cfg.mlp_ratio * d
    p = {
        "ln1_g": _const(1.0, d, f"{prefix}.ln1_g"),
        "ln1_b": _const(0.0, d, f"{prefix}.ln1_b"),
        "wq": _frozen(rng, (d, d), d, f"{prefix}.wq"),
        "bq": _const(0.0, d, f"{prefix}.bq"),
        "wk": _frozen(rng, (d, d), d, f"{prefix}.wk"),
        "bk": _const(0.0, d, f"{prefix}.bk"),
        "wv": _frozen(rng, (d, d), d, f"{prefix}.wv"),
        "bv": _const(0.0, d, f"{prefix}.bv"),
        "wo": _frozen(rng, (d, d), d, f"{prefix}.wo"),
        "bo": _const(0.0, d, f"{prefix}.bo"),
        "ln2_g": _const(1.0, d, f"{prefix}.ln2_g"),
        "ln2_b": _const(0.0, d, f"{prefix}.ln2_b"),
        "w1": _frozen(rng, (d, hidden), d, f"{prefix}.w1"),
        "b1": _const(0.0, hidden, f"{prefix}.b1"),
        "w2": _frozen(rng, (hidden, d), hidden, f"{prefix}.w2"),
        "b2": _const(0.0, d, f"{prefix}.b2"),
    }
    if d % cfg.n_heads:
        raise ValueError(f"width {d} not divisible by {cfg.n_heads} heads")
    return EncoderLayer(p, cfg.n_heads)


@dataclass
class FrozenBackbone:
    cfg: BackboneConfig
    layers: dict[str, list[EncoderLayer]] = field(default_factory=dict)
    embed_params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: BackboneConfig = BackboneConfig()) -> "FrozenBackbone":
        if cfg.image_size % cfg.patch_size:
            raise ValueError(
                f"image size {cfg.image_size} not divisible by patch {cfg.patch_size}")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB0B]))
        patch_dim = cfg.channels * cfg.patch_size ** 2
        dv, dt = cfg.d_vision, cfg.d_text
        bb = cls(cfg)
        bb.embed_params = {
            "patch_w": _frozen(rng, (patch_dim, dv), patch_dim, "embed.patch_w"),
            "patch_b": _const(0.0, dv, "embed.patch_b"),
            "pos_v": _frozen(rng, (cfg.n_patches, dv), None, "embed.pos_v"),
            "tok": _frozen(rng, (cfg.vocab_size, dt), None, "embed.tok"),
            "pos_t": _frozen(rng, (cfg.text_len, dt), None, "embed.pos_t"),
            "lnf_v_g": _const(1.0, dv, "final.ln_v_g"),
            "lnf_v_b": _const(0.0, dv, "final.ln_v_b"),
            "lnf_t_g": _const(1.0, dt, "final.ln_t_g"),
            "lnf_t_b": _const(0.0, dt, "final.ln_t_b"),
        }
        for p in ("pos_v", "pos_t"):
            bb.embed_params[p].data *= 0.1
        if dv != dt:
            # maps class-text readouts into the vision width for cosine scoring
            bb.embed_params["text_proj"] = _frozen(rng, (dt, dv), dt, "final.text_proj")
        bb.layers = {
            VISION: [_make_layer(rng, dv, cfg, f"vision.{i}") for i in range(cfg.n_layers)],
            TEXT: [_make_layer(rng, dt, cfg, f"text.{i}") for i in range(cfg.n_layers)],
        }
        return bb

    # ----------------------------------------------------------- parameters

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(t.name, t) for t in self.embed_params.values()]
        for branch in MODALITIES:
            for layer in self.layers[branch]:
                out.extend((t.name, t) for t in layer.params.values())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def set_trainable(self, flag: bool) -> None:
        """Only used to price a hypothetical full fine-tune in the ledger."""
        for t in self.parameters():
            t.requires_grad = flag

    # ------------------------------------------------------------- embedding

    def patchify(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        b, c, hgt, wid = images.shape
        p = self.cfg.patch_size
        if hgt % p or wid % p:
            raise ValueError(f"image extent {hgt}x{wid} not divisible by patch {p}")
        x = images.reshape(b, c, hgt // p, p, wid // p, p)
        return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (hgt // p) * (wid // p), c * p * p)

    def embed_images(self, images: np.ndarray) -> Tensor:
        e = self.embed_params
        patches = self.patchify(images)
        if patches.shape[1] != self.cfg.n_patches:
            raise ValueError(f"expected {self.cfg.n_patches} patches, got {patches.shape[1]}")
        return Tensor(patches) @ e["patch_w"] + e["patch_b"] + e["pos_v"]

    def embed_tokens(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[-1] == 0:
            raise ValueError("empty token sequence")
        if tokens.shape[-1] > self.cfg.text_len:
            raise ValueError(f"text length {tokens.shape[-1]} exceeds {self.cfg.text_len}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        e = self.embed_params
        b, n = tokens.shape
        rows = T.gather_rows(e["tok"], tokens.reshape(-1))
        pos = T.slice_rows(e["pos_t"], 0, n, axis=0)
        return T.reshape(rows, (b, n, self.cfg.d_text)) + pos

    def embed(self, pair: ImageTextPair) -> tuple[Tensor, Tensor]:
        """Initial features (n_v x d_v, n_t x d_t) of a single pair."""
        u_v = self.embed_images(pair.image)
        u_t = self.embed_tokens(pair.text)
        return T.reshape(u_v, u_v.shape[1:]), T.reshape(u_t, u_t.shape[1:])

    # --------------------------------------------------------------- forward

    def layer_forward(self, branch: str, layer: int, x: Tensor) -> Tensor:
        return self.layers[branch][layer](x)

    def run_layers(self, branch: str, x: Tensor, start: int, stop: int) -> Tensor:
        for l in range(start, stop):
            x = self.layer_forward(branch, l, x)
        return x

    def pooled_output(self, branch: str, tokens: Tensor) -> Tensor:
        """Mean over feature tokens followed by the branch's final layer norm."""
        e = self.embed_params
        pooled = T.mean(tokens, axis=-2)
        g, b = (e["lnf_v_g"], e["lnf_v_b"]) if branch == VISION else (e["lnf_t_g"], e["lnf_t_b"])
        return T.layer_norm(pooled) * g + b

    def encode_text(self, tokens: np.ndarray) -> Tensor:
        """Full prompt-free text forward, projected to the vision width if needed."""
        x = self.run_layers(TEXT, self.embed_tokens(tokens), 0, self.cfg.n_layers)
        h = self.pooled_output(TEXT, x)
        if "text_proj" in self.embed_params:
            h = h @ self.embed_params["text_proj"]
        return h
