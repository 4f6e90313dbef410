"""Backbone + temporal prompts + next-prompt generator, for each ablation mode."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import TEXT, VISION, FrozenBackbone
from .hub import HubParams, LinearInteraction, SimilarityConfig, bootstrap_vision_prompt, hub_step
from .objective import ClassTextBank, PredictionLogits, multilabel_probs, predict
from .tensor import Tensor

MODES = ("baseline", "ptuning", "linear", "epic")


@dataclass(frozen=True)
class LayerSchedule:
    interaction_layers: tuple[int, ...]
    total_layers: int

    def __post_init__(self):
        layers = tuple(sorted(set(int(l) for l in self.interaction_layers)))
        object.__setattr__(self, "interaction_layers", layers)
        bad = [l for l in layers if not 0 <= l < self.total_layers]
        if bad:
            raise ValueError(f"interaction layers {bad} outside [0, {self.total_layers})")

    @property
    def first(self) -> int:
        return self.interaction_layers[0] if self.interaction_layers else self.total_layers

    @property
    def last(self) -> int:
        return self.interaction_layers[-1] if self.interaction_layers else -1

    def is_interaction(self, layer: int) -> bool:
        return layer in self.interaction_layers


class PromptedModel:
    """Forward pass for one ablation mode.

    baseline: frozen model, no prompts.  ptuning: prompts whose post-layer
    output is reused unchanged at the next interaction layer.  linear: next
    prompts from an affine map over [p_v, p_t].  epic: the Interaction Hub.
    """

    def __init__(self, backbone: FrozenBackbone, mode: str, schedule: LayerSchedule,
                 prompt_len: int = 3, sim: SimilarityConfig = SimilarityConfig(),
                 bank: ClassTextBank | None = None, tau: float = 0.07,
                 tau_trainable: bool = False, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if mode == "baseline":
            schedule = LayerSchedule((), schedule.total_layers)
        elif not schedule.interaction_layers:
            raise ValueError(f"mode {mode} needs at least one interaction layer")
        if schedule.total_layers != backbone.cfg.n_layers:
            raise ValueError("schedule depth does not match the backbone")
        self.backbone = backbone
        self.mode = mode
        self.schedule = schedule
        self.prompt_len = prompt_len
        self.sim = sim
        self.bank = bank
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7]))
        cfg = backbone.cfg
        self.hub: HubParams | None = None
        self.linear: LinearInteraction | None = None
        if mode != "baseline":
            self.hub = HubParams.init(prompt_len, cfg.d_vision, cfg.d_text, rng,
                                      with_hub=mode == "epic")
        if mode == "linear":
            self.linear = LinearInteraction(cfg.d_vision, cfg.d_text, rng)
        self.tau = Tensor.param(tau, requires_grad=True, name="tau") if tau_trainable else tau

    # ------------------------------------------------------------ parameters

    def trainable_parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        if self.hub is not None:
            out += self.hub.parameters()
        if self.linear is not None:
            out += self.linear.parameters()
        if isinstance(self.tau, Tensor):
            out.append(self.tau)
        return out

    def n_trainable(self) -> int:
        return sum(p.size for p in self.trainable_parameters())

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.trainable_parameters()]

    # --------------------------------------------------------------- forward

    def prefix(self, images: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Frozen features entering the first interaction layer.

        Nothing below that layer depends on a trainable leaf, so these can be
        computed once per dataset.
        """
        bb = self.backbone
        stop = self.schedule.first
        with T.no_grad():
            u_v = bb.run_layers(VISION, bb.embed_images(images), 0, stop).data
            u_t = bb.run_layers(TEXT, bb.embed_tokens(tokens), 0, min(stop, bb.cfg.n_layers)).data
        return u_v, u_t

    def initial_prompts(self) -> tuple[Tensor, Tensor]:
        hub = self.hub
        return bootstrap_vision_prompt(hub.prompt_t0, hub.boot_w, hub.boot_b), hub.prompt_t0

    def next_prompts(self, p_hat_v: Tensor, p_hat_t: Tensor) -> tuple[Tensor, Tensor]:
        if self.mode == "ptuning":
            return p_hat_v, p_hat_t
        if self.mode == "linear":
            return self.linear(p_hat_v, p_hat_t)
        return hub_step(p_hat_v, p_hat_t, self.hub, self.sim)

    def _prompted(self, branch: str, layer: int, prompt: Tensor, u: Tensor):
        if prompt.ndim < u.ndim:
            prompt = T.broadcast_to(prompt, u.shape[:-2] + prompt.shape[-2:])
        out = self.backbone.layer_forward(branch, layer, T.concat_rows([prompt, u]))
        return T.split_rows(out, [self.prompt_len, u.shape[-2]])

    def readout(self, u_v: np.ndarray | Tensor, u_t: np.ndarray | Tensor) -> Tensor:
        """Pooled vision output from features that have already passed ``prefix``."""
        u_v = u_v if isinstance(u_v, Tensor) else Tensor(u_v)
        u_t = u_t if isinstance(u_t, Tensor) else Tensor(u_t)
        bb, sched = self.backbone, self.schedule
        if self.mode != "baseline":
            p_v, p_t = self.initial_prompts()
            for layer in range(sched.first, sched.last + 1):
                if sched.is_interaction(layer):
                    p_hat_v, u_v = self._prompted(VISION, layer, p_v, u_v)
                    if layer == sched.last:
                        break  # the text branch no longer reaches the readout
                    p_hat_t, u_t = self._prompted(TEXT, layer, p_t, u_t)
                    p_v, p_t = self.next_prompts(p_hat_v, p_hat_t)
                else:
                    u_v = bb.layer_forward(VISION, layer, u_v)
                    u_t = bb.layer_forward(TEXT, layer, u_t)
        u_v = bb.run_layers(VISION, u_v, sched.last + 1 if sched.interaction_layers
                            else sched.first, bb.cfg.n_layers)
        return bb.pooled_output(VISION, u_v)

    def probabilities(self, u_v, u_t, task: str = "uni") -> PredictionLogits | Tensor:
        x = self.readout(u_v, u_t)
        if task == "multi":
            return multilabel_probs(x, self.bank, self.tau)
        return predict(x, self.bank, self.tau)

    def forward_pairs(self, images: np.ndarray, tokens: np.ndarray) -> Tensor:
        return self.readout(*self.prefix(images, tokens))
