"""Seeded synthetic image-text classification tasks.

Every class owns an image prototype and a token motif.  Samples perturb
both; with probability ``noise`` one modality is swapped for another class's
prototype, so the two views disagree and neither alone is fully reliable.
The view that was left intact in such a pair carries a reliability marker
(a reserved token, or a fixed pixel pattern).  One view alone still cannot
beat 1 - noise/2, since an unmarked view is wrong with probability
noise/2 / (1 - noise/2); both views together resolve every conflict.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, ImageTextPair

TASKS = ("uni", "multi", "entailment3")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "uni"
    n_classes: int = 4
    n_train: int = 256
    n_val: int = 128
    n_test: int = 256
    noise: float = 0.3
    pixel_noise: float = 0.5
    token_noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "entailment3" and self.n_classes != 3:
            object.__setattr__(self, "n_classes", 3)
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError(f"noise must lie in [0, 0.5), got {self.noise}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, h, w)
    tokens: np.ndarray  # (N, L)
    labels: np.ndarray  # (N,) class ids, or (N, K) binary
    task: str
    n_classes: int

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> ImageTextPair:
        return ImageTextPair(self.images[i], self.tokens[i], self.labels[i])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.tokens[idx], self.labels[idx], self.task,
                       self.n_classes)


@dataclass
class Prototypes:
    images: np.ndarray  # (M, c, h, w)
    motifs: np.ndarray  # (M, L)
    marker_image: np.ndarray  # (c, h, w)
    marker_token: int


def make_prototypes(n: int, bb: BackboneConfig, rng: np.random.Generator) -> Prototypes:
    pixels = bb.channels * bb.image_size ** 2
    if n > bb.vocab_size - 1 or n > pixels:
        raise ValueError(
            f"{n} prototypes exceed capacity (vocab {bb.vocab_size}, pixels {pixels})")
    images = rng.standard_normal((n, bb.channels, bb.image_size, bb.image_size))
    usable = bb.vocab_size - 1  # the last id is reserved for the marker
    if n * bb.text_len <= usable:
        # disjoint token sets keep motifs separable
        motifs = rng.permutation(usable)[: n * bb.text_len].reshape(n, bb.text_len)
    else:
        motifs = rng.integers(0, usable, size=(n, bb.text_len))
    marker = rng.standard_normal((bb.channels, bb.image_size, bb.image_size))
    return Prototypes(images, motifs, marker, bb.vocab_size - 1)


def _render(protos: Prototypes, img_ids, txt_ids, spec: SyntheticTaskSpec,
            bb: BackboneConfig, rng: np.random.Generator,
            marks: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """img_ids/txt_ids: per-sample lists of prototype ids to superpose.

    ``marks[i]`` is -1 (no marker), 0 (mark the image) or 1 (mark the text).
    """
    n = len(img_ids)
    images = np.empty((n, bb.channels, bb.image_size, bb.image_size))
    tokens = np.empty((n, bb.text_len), dtype=np.int64)
    for i in range(n):
        ids = np.atleast_1d(img_ids[i])
        images[i] = protos.images[ids].sum(axis=0) / np.sqrt(len(ids))
        tids = np.atleast_1d(txt_ids[i])
        pick = tids[rng.integers(0, len(tids), size=bb.text_len)]
        tokens[i] = protos.motifs[pick, np.arange(bb.text_len)]
    images += spec.pixel_noise * rng.standard_normal(images.shape)
    swap = rng.random(tokens.shape) < spec.token_noise
    tokens[swap] = rng.integers(0, protos.marker_token, size=int(swap.sum()))
    if marks is not None:
        images[marks == 0] += protos.marker_image
        tokens[marks == 1, 0] = protos.marker_token
    return images, tokens


def _random_other(c: int, k: int, rng: np.random.Generator) -> int:
    return int((c + rng.integers(1, k)) % k)


def _uni(n: int, spec, bb, protos, rng) -> Dataset:
    k = spec.n_classes
    labels = rng.integers(0, k, size=n)
    img_ids, txt_ids = labels.copy(), labels.copy()
    corrupt = rng.random(n) < spec.noise
    which = rng.integers(0, 2, size=n)
    marks = np.full(n, -1)
    for i in np.flatnonzero(corrupt):
        target = img_ids if which[i] == 0 else txt_ids
        target[i] = _random_other(labels[i], k, rng)
        marks[i] = 1 - which[i]
    images, tokens = _render(protos, img_ids, txt_ids, spec, bb, rng, marks)
    return Dataset(images, tokens, labels, "uni", k)


def _label_set(k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(k, size=int(rng.integers(1, min(3, k) + 1)), replace=False))


def _multi(n: int, spec, bb, protos, rng) -> Dataset:
    k = spec.n_classes
    sets = [_label_set(k, rng) for _ in range(n)]
    img_sets, txt_sets = list(sets), list(sets)
    marks = np.full(n, -1)
    for i in range(n):
        if rng.random() < spec.noise:
            if rng.integers(0, 2) == 0:
                img_sets[i] = _label_set(k, rng)
                marks[i] = 1
            else:
                txt_sets[i] = _label_set(k, rng)
                marks[i] = 0
    labels = np.zeros((n, k), dtype=np.int64)
    for i, s in enumerate(sets):
        labels[i, s] = 1
    images, tokens = _render(protos, img_sets, txt_sets, spec, bb, rng, marks)
    return Dataset(images, tokens, labels, "multi", k)


ENTAIL, NEUTRAL, CONTRADICT = 0, 1, 2


def _entailment(n: int, spec, bb, protos, rng) -> Dataset:
    """Premise image concept a, hypothesis text concept b.

    Concepts come in opposite pairs (2j, 2j+1): b == a entails, b == opposite(a)
    contradicts, anything else is neutral.
    """
    m = protos.images.shape[0]
    labels = rng.integers(0, 3, size=n)
    a = rng.integers(0, m, size=n)
    b = np.empty(n, dtype=np.int64)
    for i in range(n):
        if labels[i] == ENTAIL:
            b[i] = a[i]
        elif labels[i] == CONTRADICT:
            b[i] = a[i] ^ 1
        else:
            choices = [c for c in range(m) if c not in (a[i], a[i] ^ 1)]
            b[i] = rng.choice(choices)
    flip = rng.random(n) < spec.noise
    for i in np.flatnonzero(flip):
        labels[i] = _random_other(labels[i], 3, rng)
    images, tokens = _render(protos, a, b, spec, bb, rng)
    return Dataset(images, tokens, labels, "entailment3", 3)


N_CONCEPTS_ENTAILMENT = 6


def generate_dataset(spec: SyntheticTaskSpec,
                     bb: BackboneConfig = BackboneConfig()) -> dict[str, Dataset]:
    """Train/val/test splits, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    n_protos = N_CONCEPTS_ENTAILMENT if spec.task == "entailment3" else spec.n_classes
    protos = make_prototypes(n_protos, bb, rng)
    make = {"uni": _uni, "multi": _multi, "entailment3": _entailment}[spec.task]
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    return {split: make(sizes[split], spec, bb, protos, rng) for split in SPLITS}


def dataset_prototypes(spec: SyntheticTaskSpec,
                       bb: BackboneConfig = BackboneConfig()) -> Prototypes:
    """The prototypes behind ``generate_dataset(spec, bb)`` (for oracles)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    n_protos = N_CONCEPTS_ENTAILMENT if spec.task == "entailment3" else spec.n_classes
    return make_prototypes(n_protos, bb, rng)
