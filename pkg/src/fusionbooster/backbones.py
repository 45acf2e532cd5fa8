"""
Stage-one fusers that produce the initial fused image the booster works on.

Three classical fusers (mean, choose-max, Laplacian pyramid), a degrader that
imitates a backbone leaving blur, low contrast and noise in its output, and
ingestion of fused images computed elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError, ManifestError
from .imaging import _same_shape, as_gray, average_filter, load_image

__all__ = [
    "fuse_mean",
    "fuse_max",
    "fuse_pyramid",
    "Backbone",
    "parse_backbone",
    "DegradeSpec",
    "degrade",
    "load_external_fused",
]

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _pair(a, b):
    a = as_gray(a, "I_A")
    b = as_gray(b, "I_B")
    _same_shape(("I_A", a), ("I_B", b))
    return a, b


def fuse_mean(a, b):
    a, b = _pair(a, b)
    return (a + b) / 2


def fuse_max(a, b):
    a, b = _pair(a, b)
    return np.maximum(a, b)


def _smooth(img, gain=1.0):
    k = _BINOMIAL * gain
    out = correlate1d(img, k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def _reduce(img):
    return _smooth(img)[::2, ::2]


def _expand(img, shape):
    up = np.zeros(shape)
    up[::2, ::2] = img
    # zero insertion leaves a quarter of the samples; gain 2 per axis restores the level
    return _smooth(up, gain=2.0)


def laplacian_pyramid(img, levels):
    gauss = [img]
    for _ in range(levels - 1):
        gauss.append(_reduce(gauss[-1]))
    bands = [g - _expand(gauss[i + 1], g.shape) for i, g in enumerate(gauss[:-1])]
    bands.append(gauss[-1])
    return bands


def collapse_pyramid(bands):
    out = bands[-1]
    for band in reversed(bands[:-1]):
        out = band + _expand(out, band.shape)
    return out


def fuse_pyramid(a, b, levels=4):
    """Laplacian-pyramid fusion.

    Detail bands keep the coefficient with the larger magnitude (``I_A`` wins
    ties); the coarsest band is averaged. The result is clamped to ``[0, 1]``.
    """
    a, b = _pair(a, b)
    if levels < 1:
        raise ContractError(f"pyramid levels must be >= 1, got {levels}")
    if min(a.shape) / 2 ** (levels - 1) < 8:
        raise ContractError(f"{levels} pyramid levels leave fewer than 8 pixels for a {a.shape} image")
    pa = laplacian_pyramid(a, levels)
    pb = laplacian_pyramid(b, levels)
    fused = [np.where(np.abs(x) >= np.abs(y), x, y) for x, y in zip(pa[:-1], pb[:-1])]
    fused.append((pa[-1] + pb[-1]) / 2)
    return np.clip(collapse_pyramid(fused), 0.0, 1.0)


@dataclass(frozen=True)
class Backbone:
    """A named stage-one method; ``kind`` is mean, max, pyramid or external."""

    kind: str
    levels: int = 4

    def __post_init__(self):
        if self.kind not in ("mean", "max", "pyramid", "external"):
            raise ContractError(f"unknown backbone {self.kind!r}")
        if self.kind == "pyramid" and self.levels < 1:
            raise ContractError(f"pyramid levels must be >= 1, got {self.levels}")

    def __call__(self, a, b):
        if self.kind == "mean":
            return fuse_mean(a, b)
        if self.kind == "max":
            return fuse_max(a, b)
        if self.kind == "pyramid":
            return fuse_pyramid(a, b, self.levels)
        raise ContractError("external backbones cannot be evaluated; load their fused images instead")

    def __str__(self):
        return f"pyramid:{self.levels}" if self.kind == "pyramid" else self.kind


def parse_backbone(text):
    """Parse ``mean``, ``max``, ``external`` or ``pyramid:L``."""
    kind, _, arg = text.partition(":")
    if kind == "pyramid":
        try:
            return Backbone("pyramid", int(arg) if arg else 4)
        except ValueError:
            raise ContractError(f"bad pyramid level count in {text!r}") from None
    if arg:
        raise ContractError(f"backbone {kind!r} takes no argument")
    return Backbone(kind)


@dataclass(frozen=True)
class DegradeSpec:
    """Blur radius, contrast gain toward mid-gray, and Gaussian noise level."""

    noise_sigma: float = 0.0
    blur_k: int = 0
    contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_k < 0 or int(self.blur_k) != self.blur_k:
            raise ContractError(f"blur_k must be a non-negative integer, got {self.blur_k}")
        if not 0 < self.contrast <= 1:
            raise ContractError(f"contrast must lie in (0, 1], got {self.contrast}")

    @classmethod
    def parse(cls, text, seed=0):
        """Parse ``"sigma,blur,contrast"``."""
        parts = text.split(",")
        if len(parts) != 3:
            raise ContractError(f"degrade spec must be 'sigma,blur,contrast', got {text!r}")
        return cls(float(parts[0]), int(parts[1]), float(parts[2]), seed)

    @property
    def is_identity(self):
        return self.noise_sigma == 0 and self.blur_k == 0 and self.contrast == 1


def degrade(img, spec):
    """Blur, then compress contrast about 0.5, then add seeded noise, then clamp."""
    out = as_gray(img)
    if spec.blur_k:
        out = average_filter(out, spec.blur_k)
    if spec.contrast != 1:
        out = 0.5 + spec.contrast * (out - 0.5)
    if spec.noise_sigma:
        rng = np.random.default_rng(spec.seed)
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def load_external_fused(manifest):
    """Load ``(I_A, I_B, F_init)`` triples for every manifest entry, in order."""
    triples = []
    for e in manifest.entries:
        if e.path_fused is None:
            raise ManifestError(e.id, "entry has no fused image path")
        a = load_image(e.path_a)
        b = load_image(e.path_b)
        f = load_image(e.path_fused)
        if not a.shape == b.shape == f.shape:
            raise ManifestError(e.id, f"dimension mismatch: A {a.shape}, B {b.shape}, fused {f.shape}")
        triples.append((a, b, f))
    return triples
