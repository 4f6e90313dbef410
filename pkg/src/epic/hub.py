"""Prompt bootstrap and the similarity-gated Interaction Hub.

Prompts are ``(..., prompt_len, d)`` tensors; a leading batch axis is
optional everywhere.  With the default feature-axis gating, similarities
compare the length-``prompt_len`` columns of two prompts and yield one score
per feature dimension; gates are softmaxed over those ``d`` scores and then
broadcast across the prompt tokens.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import TEXT, VISION
from .tensor import Tensor

FAMILIES = ("cos", "mmd", "cov_pearson")
GATE_AXES = ("feature", "token")

TRAINABLE_INIT_STD = 0.02
PROMPT_INIT_STD = 0.02
MMD_BANDWIDTH_FLOOR = 1e-6
_COS_DENOM_FLOOR = 1e-24


@dataclass(frozen=True)
class SimilarityConfig:
    family: str = "cos"
    gate_axis: str = "feature"
    mmd_bandwidth: float | None = None  # None selects the median heuristic
    gate_temperature: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"similarity family must be one of {FAMILIES}, got {self.family!r}")
        if self.gate_axis not in GATE_AXES:
            raise ValueError(f"gate_axis must be one of {GATE_AXES}, got {self.gate_axis!r}")
        if self.mmd_bandwidth is not None and self.mmd_bandwidth <= 0:
            raise ValueError("mmd_bandwidth must be positive")
        if self.gate_temperature <= 0:
            raise ValueError("gate_temperature must be positive")


class TwoLayerMLP:
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 name: str, std: float = TRAINABLE_INIT_STD):
        self.w1 = Tensor.param(rng.normal(0.0, std, (d_in, d_hidden)), name=f"{name}.w1")
        self.b1 = Tensor.param(np.zeros(d_hidden), name=f"{name}.b1")
        self.w2 = Tensor.param(rng.normal(0.0, std, (d_hidden, d_out)), name=f"{name}.w2")
        self.b2 = Tensor.param(np.zeros(d_out), name=f"{name}.b2")

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def _other(m: str) -> str:
    return TEXT if m == VISION else VISION


@dataclass
class HubParams:
    """The single shared bundle of trainable hub parameters.

    ``intra[m]`` is the MLP inside the intra-modality similarity of modality
    ``m``; ``inter[(src, dst)]`` projects prompts of ``src`` into ``dst`` space.
    """

    prompt_t0: Tensor
    boot_w: Tensor
    boot_b: Tensor
    intra: dict[str, TwoLayerMLP] = field(default_factory=dict)
    inter: dict[tuple[str, str], TwoLayerMLP] = field(default_factory=dict)

    @classmethod
    def init(cls, prompt_len: int, d_vision: int, d_text: int,
             rng: np.random.Generator, with_hub: bool = True) -> "HubParams":
        hp = cls(
            prompt_t0=Tensor.param(rng.normal(0.0, PROMPT_INIT_STD, (prompt_len, d_text)),
                                   name="prompt_t0"),
            boot_w=Tensor.param(rng.normal(0.0, 1.0 / np.sqrt(d_text), (d_text, d_vision)),
                                name="bootstrap.w"),
            boot_b=Tensor.param(np.zeros(d_vision), name="bootstrap.b"),
        )
        if with_hub:
            dims = {VISION: d_vision, TEXT: d_text}
            for m in (VISION, TEXT):
                hp.intra[m] = TwoLayerMLP(dims[m], dims[m] // 2, dims[m], rng, f"intra_{m}")
            for src, dst in ((TEXT, VISION), (VISION, TEXT)):
                hidden = (dims[src] + dims[dst]) // 2
                hp.inter[(src, dst)] = TwoLayerMLP(dims[src], hidden, dims[dst], rng,
                                                   f"inter_{src}{dst}")
        return hp

    def parameters(self) -> list[Tensor]:
        out = [self.prompt_t0, self.boot_w, self.boot_b]
        for m in (VISION, TEXT):
            if m in self.intra:
                out += self.intra[m].parameters()
        for key in ((TEXT, VISION), (VISION, TEXT)):
            if key in self.inter:
                out += self.inter[key].parameters()
        return out

    def swapped(self) -> "HubParams":
        """Same tensors with the two modalities' roles exchanged."""
        return replace(
            self,
            intra={VISION: self.intra[TEXT], TEXT: self.intra[VISION]},
            inter={(TEXT, VISION): self.inter[(VISION, TEXT)],
                   (VISION, TEXT): self.inter[(TEXT, VISION)]},
        )


def bootstrap_vision_prompt(prompt_t0: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """First vision prompt as an affine image of the first text prompt."""
    if prompt_t0.shape[-1] != w.shape[0]:
        raise T.ShapeError("bootstrap_vision_prompt", prompt_t0.shape, w.shape)
    return prompt_t0 @ w + b


# ------------------------------------------------------------- similarities


def _column_cos(a: Tensor, b: Tensor) -> Tensor:
    dot = T.sum_over_axis(a * b, axis=-2, keepdims=True)
    na = T.sum_over_axis(a * a, axis=-2, keepdims=True)
    nb = T.sum_over_axis(b * b, axis=-2, keepdims=True)
    # zero-norm columns have dot == 0, so the floored denominator yields 0
    return dot / T.sqrt(T.clamp(na * nb, lo=_COS_DENOM_FLOOR))


def _centered(a: Tensor) -> Tensor:
    return a - T.mean(a, axis=-2, keepdims=True)


def _column_cov(a: Tensor, b: Tensor) -> Tensor:
    return T.mean(_centered(a) * _centered(b), axis=-2, keepdims=True)


def _column_pearson(a: Tensor, b: Tensor) -> Tensor:
    return _column_cos(_centered(a), _centered(b))


def _expand(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(axis % (x.ndim + 1), 1)
    return T.reshape(x, shape)


def _pairwise_sq(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, d), (..., m, d) -> (..., n, m, d) squared differences."""
    diff = _expand(a, -2) - _expand(b, -3)
    return diff * diff


def median_sq_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-column median of squared distances over distinct pooled pairs."""
    z = T.concat_rows([a, b], axis=-2)
    n = z.shape[-2]
    iu, ju = np.triu_indices(n, 1)
    lead = (1,) * (z.ndim - 2)
    zi = T.take_along_axis(z, iu.reshape(lead + (-1, 1)), axis=-2)
    zj = T.take_along_axis(z, ju.reshape(lead + (-1, 1)), axis=-2)
    d2 = (zi - zj) * (zi - zj)
    order = np.argsort(d2.data, axis=-2, kind="stable")
    k = d2.shape[-2]
    mid = order[..., [k // 2], :]
    med = T.take_along_axis(d2, mid, axis=-2)
    if k % 2 == 0:
        lo = T.take_along_axis(d2, order[..., [k // 2 - 1], :], axis=-2)
        med = (med + lo) * 0.5
    return med


def _column_mmd_sim(a: Tensor, b: Tensor, bandwidth: float | None) -> Tensor:
    if bandwidth is None:
        sigma2 = T.clamp(median_sq_distance(a, b), lo=MMD_BANDWIDTH_FLOOR)
    else:
        sigma2 = Tensor(np.full((1, a.shape[-1]), bandwidth ** 2))
    inv = T.reshape(1.0 / (sigma2 * 2.0), sigma2.shape[:-2] + (1, 1, a.shape[-1]))

    def kmean(x, y):
        k = T.exp(-(_pairwise_sq(x, y) * inv))
        return T.mean(T.mean(k, axis=-3), axis=-2, keepdims=True)

    mmd2 = kmean(a, a) + kmean(b, b) - kmean(a, b) * 2.0
    return T.exp(-mmd2)


def similarity(a: Tensor, b: Tensor, cfg: SimilarityConfig = SimilarityConfig(),
               role: str = "inter") -> Tensor:
    """Per-dimension (feature axis) or per-token (token axis) similarity.

    Feature axis returns shape ``(..., 1, d)``; token axis ``(..., P, 1)``.
    ``role`` only matters for ``cov_pearson``: covariance for ``"intra"``,
    Pearson correlation for ``"inter"``.
    """
    if a.shape != b.shape:
        raise T.ShapeError("similarity", a.shape, b.shape)
    if cfg.gate_axis == "token":
        a, b = T.transpose(a), T.transpose(b)
    if cfg.family == "cos":
        s = _column_cos(a, b)
    elif cfg.family == "mmd":
        s = _column_mmd_sim(a, b, cfg.mmd_bandwidth)
    elif role == "intra":
        s = _column_cov(a, b)
    else:
        s = _column_pearson(a, b)
    if cfg.gate_axis == "token":
        s = T.transpose(s)
    return s


# --------------------------------------------------------------------- gates


def _gate_softmax(logits: Tensor, cfg: SimilarityConfig) -> Tensor:
    if cfg.gate_temperature != 1.0:
        logits = logits * (1.0 / cfg.gate_temperature)
    return T.softmax(logits, axis=-1 if cfg.gate_axis == "feature" else -2)


def activation_gates(p_hat: Tensor, p_tilde: Tensor, intra_mlp: TwoLayerMLP,
                     cfg: SimilarityConfig = SimilarityConfig()) -> tuple[Tensor, Tensor]:
    """Intra gate z (retain own prompt) and inter gate r (import projected prompt)."""
    f_intra = T.relu(similarity(intra_mlp(p_hat), p_hat, cfg, role="intra"))
    f_inter = T.relu(similarity(p_hat, p_tilde, cfg, role="inter"))
    return _gate_softmax(f_intra, cfg), _gate_softmax(f_inter, cfg)


def integrate(p_hat: Tensor, p_tilde: Tensor, z: Tensor, r: Tensor) -> Tensor:
    return z * p_hat + (1.0 - z) * r * p_tilde


@dataclass
class HubTrace:
    projected: dict[str, Tensor]
    z: dict[str, Tensor]
    r: dict[str, Tensor]


def hub_step(p_hat_v: Tensor, p_hat_t: Tensor, params: HubParams,
             cfg: SimilarityConfig = SimilarityConfig(),
             force_z: float | None = None, force_r: float | None = None,
             trace: HubTrace | None = None) -> tuple[Tensor, Tensor]:
    """Next-layer prompts (vision, text) from both post-layer prompts.

    ``force_z``/``force_r`` replace the computed gates by constants (test hook).
    """
    hats = {VISION: p_hat_v, TEXT: p_hat_t}
    out = {}
    for m in (VISION, TEXT):
        src = _other(m)
        p_tilde = params.inter[(src, m)](hats[src])
        z, r = activation_gates(hats[m], p_tilde, params.intra[m], cfg)
        if force_z is not None:
            z = Tensor(np.full(z.shape, float(force_z)))
        if force_r is not None:
            r = Tensor(np.full(r.shape, float(force_r)))
        out[m] = integrate(hats[m], p_tilde, z, r)
        if trace is not None:
            trace.projected[m], trace.z[m], trace.r[m] = p_tilde, z, r
    return out[VISION], out[TEXT]


# ----------------------------------------------------- linear-interaction arm


class LinearInteraction:
    """Ablation arm: one affine map over the feature-wise concatenation [p_v, p_t]."""

    def __init__(self, d_vision: int, d_text: int, rng: np.random.Generator,
                 std: float = TRAINABLE_INIT_STD):
        d = d_vision + d_text
        self.d_vision = d_vision
        self.w = Tensor.param(rng.normal(0.0, std, (d, d)), name="linear_interaction.w")
        self.b = Tensor.param(np.zeros(d), name="linear_interaction.b")

    def __call__(self, p_hat_v: Tensor, p_hat_t: Tensor) -> tuple[Tensor, Tensor]:
        joint = T.concat_rows([p_hat_v, p_hat_t], axis=-1) @ self.w + self.b
        d = joint.shape[-1]
        p_v = T.slice_rows(joint, 0, self.d_vision, axis=-1)
        p_t = T.slice_rows(joint, self.d_vision, d, axis=-1)
        return p_v, p_t

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]
