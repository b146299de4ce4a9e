"""Synthetic clutter-model datasets.

Each class owns a unit prototype direction.  An image holds
``signal_fraction * M`` noisy copies of its class prototype and fills the
rest with background clutter.  Clutter comes from a handful of prototypes
shared by all classes: an image picks one, jitters it once (the image's
background), then scatters its clutter descriptors tightly around that
background.  Clutter descriptors therefore resemble each other far more than
they resemble anything in another image, and they carry no class information.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import DescriptorSet, InvalidSpec
from .episodes import Item, LabeledDataset, UnlabeledItem


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 20
    images_per_class: int = 30
    descriptors_per_image: int = 64
    dim: int = 32
    signal_fraction: float = 0.2
    signal_noise: float = 1.0
    clutter_noise: float = 0.7
    clutter_jitter: float = 1.0
    clutter_prototypes: int = 4
    distractor_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_classes, self.images_per_class, self.descriptors_per_image, self.dim)
        if min(counts) < 1:
            raise InvalidSpec("class, image, descriptor and dimension counts must be positive")
        if self.clutter_prototypes < 1 and self.signal_fraction < 1:
            raise InvalidSpec("clutter needs at least one clutter prototype")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise InvalidSpec(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if min(self.signal_noise, self.clutter_noise, self.clutter_jitter) < 0:
            raise InvalidSpec("noise levels cannot be negative")
        if self.distractor_classes < 0:
            raise InvalidSpec("distractor_classes cannot be negative")

    def to_dict(self) -> dict:
        return asdict(self)


def make_prototypes(n_classes: int, n_extra: int, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Unit class prototypes and unit extra prototypes.

    Class prototypes are orthonormal whenever ``dim >= n_classes``; the extra
    ones join the orthonormal frame when it has room, otherwise they are random
    unit vectors.
    """
    total = n_classes + n_extra
    if dim >= total:
        q, _ = np.linalg.qr(rng.standard_normal((dim, total)))
        return q[:, :n_classes].T.copy(), q[:, n_classes:].T.copy()
    if dim >= n_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
        protos = q.T.copy()
    else:
        protos = rng.standard_normal((n_classes, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    extra = rng.standard_normal((n_extra, dim))
    extra /= np.maximum(np.linalg.norm(extra, axis=1, keepdims=True), 1e-300)
    return protos, extra


def _image(proto, backgrounds, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    m, dim = spec.descriptors_per_image, spec.dim
    n_signal = min(m, max(1, int(round(spec.signal_fraction * m))))
    scale = 1.0 / np.sqrt(dim)
    signal = proto + spec.signal_noise * scale * rng.standard_normal((n_signal, dim))
    n_clutter = m - n_signal
    if n_clutter:
        bg = backgrounds[rng.integers(len(backgrounds))]
        center = bg + spec.clutter_jitter * scale * rng.standard_normal(dim)
        clutter = center + spec.clutter_noise * scale * rng.standard_normal((n_clutter, dim))
        desc = np.vstack([signal, clutter])
        return desc[rng.permutation(m)]
    return signal


def synth_generate(spec: SynthSpec) -> LabeledDataset:
    """Build a :class:`LabeledDataset` from ``spec``; deterministic in ``spec.seed``.

    Distractor classes get their own prototypes and appear only as unlabelled
    images grouped by distractor class.
    """
    rng = np.random.default_rng(spec.seed)
    n_extra = spec.distractor_classes + spec.clutter_prototypes
    protos, extra = make_prototypes(spec.n_classes, n_extra, spec.dim, rng)
    distractor_protos = extra[: spec.distractor_classes]
    backgrounds = extra[spec.distractor_classes :]
    items = []
    width = max(2, len(str(spec.n_classes - 1)))
    for c in range(spec.n_classes):
        cid = f"c{c:0{width}d}"
        for i in range(spec.images_per_class):
            items.append(Item(f"{cid}_{i:04d}", cid, DescriptorSet(_image(protos[c], backgrounds, spec, rng))))
    unlabeled = []
    for d in range(spec.distractor_classes):
        gid = f"d{d:0{width}d}"
        for i in range(spec.images_per_class):
            unlabeled.append(UnlabeledItem(f"{gid}_{i:04d}", DescriptorSet(_image(distractor_protos[d], backgrounds, spec, rng)), gid))
    return LabeledDataset(items, unlabeled)
