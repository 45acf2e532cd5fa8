"""
The booster: information probe, booster layer and assembling module.

Training happens in two sequential steps. First the two probe units learn to
recover each source image from the initial fused image (L1 perception loss).
Then, with the probes frozen, the assembling (ASE) module learns to rebuild the
initial fused image from the probe outputs (L1 reconstruction loss). At test
time each probe output has its low-frequency base swapped for the clean source
(:func:`booster_layer`) before the ASE reassembles the enhanced components.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np
from scipy.stats import spearmanr

from .autodiff import Adam, Conv2d, LeakyReLU, Sequential, Sigmoid, Tensor4, concat_channels, l1_loss
from .backbones import DegradeSpec, degrade
from .errors import ContractError
from .imaging import _same_shape, as_gray, base_detail_split, patch_offsets, sharpen

__all__ = [
    "Triple",
    "BoosterConfig",
    "ProbeUnit",
    "AseModule",
    "probe_forward",
    "ase_forward",
    "booster_layer",
    "train_probe",
    "train_ase",
    "train_source_ase",
    "boost",
    "param_checksum",
    "loss_total",
    "ABLATION_MODES",
    "ablation_run",
    "DegradationReport",
    "degradation_study",
]

# stream tags for np.random.SeedSequence([seed, tag])
_PROBE_A, _PROBE_B, _ASE, _PROBE_DATA, _ASE_DATA = range(5)


class Triple(NamedTuple):
    """Aligned source images and the backbone's fused image."""

    a: np.ndarray
    b: np.ndarray
    fused: np.ndarray


@dataclass(frozen=True)
class BoosterConfig:
    k: int = 3
    epochs: int = 10
    batch: int = 2
    lr: float = 1e-4
    patch: int = 128
    patches_per_pair: int = 8
    seed: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.k < 0:
            raise ContractError(f"k must be >= 0, got {self.k}")
        for name in ("epochs", "batch", "patch", "patches_per_pair"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        """Build from string or typed values; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(sorted(unknown))}")
        conv = {}
        for key, value in d.items():
            cast = float if types[key] in ("float", float) else int
            conv[key] = cast(value)
        return cls(**conv)


def _autoencoder(c_in, rng):
    return [
        Conv2d(c_in, 16, rng), LeakyReLU(0.2),
        Conv2d(16, 32, rng), LeakyReLU(0.2),
        Conv2d(32, 16, rng), LeakyReLU(0.2),
        Conv2d(16, 1, rng), Sigmoid(),
    ]


class ProbeUnit(Sequential):
    """One-channel encoder/decoder that estimates a source image from the fused image."""

    def __init__(self, rng=None):
        super().__init__(_autoencoder(1, rng if rng is not None else np.random.default_rng(0)))

    @property
    def encoder(self):
        return self.layers[:4]

    @property
    def decoder(self):
        return self.layers[4:]


class AseModule(Sequential):
    """Encoder/decoder taking the two components stacked as channels (A first)."""

    def __init__(self, rng=None):
        super().__init__(_autoencoder(2, rng if rng is not None else np.random.default_rng(0)))

    @property
    def encoder(self):
        return self.layers[:4]

    @property
    def decoder(self):
        return self.layers[4:]


def _stream(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def param_checksum(net):
    """SHA-256 over every parameter's raw bytes, in layer order."""
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _as_tensor(*imgs):
    return Tensor4(np.stack(imgs)[:, None], dtype=np.float32)


def _run(net, x):
    return net.forward(x, cache=False).data.astype(np.float64)


def probe_forward(probe_a, probe_b, fused):
    """Split a fused image into its two estimated source components."""
    x = _as_tensor(as_gray(fused, "F_init"))
    return _run(probe_a, x)[0, 0], _run(probe_b, x)[0, 0]


def ase_forward(ase, part_a, part_b):
    """Assemble two components into one image. Channel order matters."""
    part_a = np.asarray(part_a, dtype=np.float64)
    part_b = np.asarray(part_b, dtype=np.float64)
    _same_shape(("part_a", part_a), ("part_b", part_b))
    x = Tensor4(np.stack([part_a, part_b])[None], dtype=np.float32)
    return _run(ase, x)[0, 0]


def booster_layer(part, source, k):
    """Put the component's detail layer on top of the clean source image.

    ``clamp(source + (part - mean_k(part)), 0, 1)``: the source replaces the
    component's degraded low frequencies while the component's own
    high-frequency residual carries the backbone's fusion cues.
    """
    source = as_gray(source, "source")
    part = np.asarray(part, dtype=np.float64)
    _same_shape(("part", part), ("source", source))
    _, detail = base_detail_split(part, k)
    return np.clip(source + detail, 0.0, 1.0)


def boost(probe_a, probe_b, ase, fused, a, b, k):
    """Full test-time pipeline: probe, booster layer on each component, reassemble."""
    fused = as_gray(fused, "F_init")
    a = as_gray(a, "I_A")
    b = as_gray(b, "I_B")
    _same_shape(("F_init", fused), ("I_A", a), ("I_B", b))
    part_a, part_b = probe_forward(probe_a, probe_b, fused)
    return ase_forward(ase, booster_layer(part_a, a, k), booster_layer(part_b, b, k))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _prepare(triples, cfg):
    if not triples:
        raise ContractError("training needs at least one image triple")
    out = []
    for i, t in enumerate(triples):
        t = Triple(*(np.asarray(x, dtype=np.float32) for x in t))
        if not t.a.shape == t.b.shape == t.fused.shape:
            raise ContractError(f"triple {i} is not aligned: {t.a.shape}, {t.b.shape}, {t.fused.shape}")
        if cfg.patch > min(t.a.shape):
            raise ContractError(f"patch {cfg.patch} exceeds triple {i} of shape {t.a.shape}")
        out.append(t)
    return out


def _epoch_batches(triples, cfg, rng):
    """Shuffled batches of ``(pair, row, col)`` patch locations for one epoch."""
    locs = []
    for i, t in enumerate(triples):
        seed = int(rng.integers(2**63))
        for y, x in patch_offsets(t.a.shape, cfg.patch, cfg.patches_per_pair, seed):
            locs.append((i, int(y), int(x)))
    order = rng.permutation(len(locs))
    locs = [locs[j] for j in order]
    return [locs[s:s + cfg.batch] for s in range(0, len(locs), cfg.batch)]


def _gather(triples, batch, field, size):
    return Tensor4(np.stack([getattr(triples[i], field)[y:y + size, x:x + size] for i, y, x in batch])[:, None])


def _fit_step(net, opt, x, target):
    net.zero_grad()
    loss, g = l1_loss(net.forward(x), target)
    net.backward(g)
    opt.step()
    return loss


def _check_loss(loss, phase, epoch, batch):
    if not np.isfinite(loss):
        raise FloatingPointError(f"{phase}: non-finite loss at epoch {epoch + 1}, batch {batch + 1}")


def train_probe(triples, cfg, log=None):
    """Train both probe units to recover ``I_A`` and ``I_B`` from the fused image.

    Returns ``(probe_a, probe_b, trace)`` where ``trace`` holds per-epoch mean
    ``loss_per_a``, ``loss_per_b`` and their sum ``loss_per``.
    """
    data = _prepare(triples, cfg)
    probe_a = ProbeUnit(_stream(cfg.seed, _PROBE_A))
    probe_b = ProbeUnit(_stream(cfg.seed, _PROBE_B))
    opt_a = Adam(probe_a.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt_b = Adam(probe_b.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = _stream(cfg.seed, _PROBE_DATA)
    trace = {"loss_per_a": [], "loss_per_b": [], "loss_per": []}
    for epoch in range(cfg.epochs):
        sum_a = sum_b = 0.0
        batches = _epoch_batches(data, cfg, rng)
        for bi, batch in enumerate(batches):
            f = _gather(data, batch, "fused", cfg.patch)
            la = _fit_step(probe_a, opt_a, f, _gather(data, batch, "a", cfg.patch))
            lb = _fit_step(probe_b, opt_b, f, _gather(data, batch, "b", cfg.patch))
            _check_loss(la + lb, "probe", epoch, bi)
            sum_a += la
            sum_b += lb
        trace["loss_per_a"].append(sum_a / len(batches))
        trace["loss_per_b"].append(sum_b / len(batches))
        trace["loss_per"].append((sum_a + sum_b) / len(batches))
        if log:
            log(f"probe epoch {epoch + 1}/{cfg.epochs}: loss_per={trace['loss_per'][-1]:.5f}")
    return probe_a, probe_b, trace


def _train_assembler(data, cfg, inputs_for, log, phase):
    ase = AseModule(_stream(cfg.seed, _ASE))
    opt = Adam(ase.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = _stream(cfg.seed, _ASE_DATA)
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        batches = _epoch_batches(data, cfg, rng)
        cache = {}
        for bi, batch in enumerate(batches):
            x = concat_channels(*inputs_for(batch, cache))
            loss = _fit_step(ase, opt, x, _gather(data, batch, "fused", cfg.patch))
            _check_loss(loss, phase, epoch, bi)
            total += loss
        losses.append(total / len(batches))
        if log:
            log(f"{phase} epoch {epoch + 1}/{cfg.epochs}: loss_rec={losses[-1]:.5f}")
    return ase, {"loss_rec": losses}


def train_ase(triples, probe_a, probe_b, cfg, log=None):
    """Train the ASE to rebuild the fused image from frozen probe outputs.

    Returns ``(ase, trace)`` with per-epoch ``loss_rec``. Probe parameters are
    only read.
    """
    data = _prepare(triples, cfg)
    p = cfg.patch

    def inputs_for(batch, cache):
        # probe outputs are a pure function of the patch; repeated crops reuse them
        parts_a, parts_b = [], []
        for loc in batch:
            if loc not in cache:
                i, y, x = loc
                f = Tensor4(data[i].fused[None, None, y:y + p, x:x + p])
                cache[loc] = (probe_a.forward(f, cache=False).data[0], probe_b.forward(f, cache=False).data[0])
            pa, pb = cache[loc]
            parts_a.append(pa)
            parts_b.append(pb)
        return Tensor4(np.stack(parts_a)), Tensor4(np.stack(parts_b))

    return _train_assembler(data, cfg, inputs_for, log, "ase")


def train_source_ase(triples, cfg, log=None):
    """Train an ASE that assembles the raw source images (ablations c and d)."""
    data = _prepare(triples, cfg)

    def inputs_for(batch, cache):
        return _gather(data, batch, "a", cfg.patch), _gather(data, batch, "b", cfg.patch)

    return _train_assembler(data, cfg, inputs_for, log, "source-ase")


def loss_total(probe_trace, ase_trace):
    """Final perception loss plus final reconstruction loss."""
    return probe_trace["loss_per"][-1] + ase_trace["loss_rec"][-1]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

ABLATION_MODES = ("a", "b", "c", "d", "full")


def ablation_run(mode, samples, k, *, models=None, backbone=None, source_ase=None):
    """Fuse every sample under one ablation setting.

    ``a``: backbone on sharpened sources. ``b``: sharpened backbone output.
    ``c``: source-trained ASE on the raw sources. ``d``: the same ASE on
    sharpened sources. ``full``: :func:`boost` with ``models = (probe_a,
    probe_b, ase)``. Sharpening is ``clamp(X + detail(X, k))``.
    """
    if mode not in ABLATION_MODES:
        raise ContractError(f"unknown ablation mode {mode!r}; choose from {', '.join(ABLATION_MODES)}")
    needs = {"a": backbone, "c": source_ase, "d": source_ase, "full": models}
    if mode in needs and needs[mode] is None:
        what = {"a": "a backbone", "c": "a source-trained ASE", "d": "a source-trained ASE",
                "full": "trained (probe_a, probe_b, ase) models"}[mode]
        raise ContractError(f"ablation mode {mode!r} needs {what}")
    out = []
    for a, b, fused in samples:
        if mode == "a":
            out.append(backbone(sharpen(a, k), sharpen(b, k)))
        elif mode == "b":
            out.append(sharpen(fused, k))
        elif mode == "c":
            out.append(ase_forward(source_ase, a, b))
        elif mode == "d":
            out.append(ase_forward(source_ase, sharpen(a, k), sharpen(b, k)))
        else:
            out.append(boost(*models, fused, a, b, k))
    return out


@dataclass
class DegradationReport:
    """One row per severity level plus the severity/error rank correlation."""

    rows: list
    spearman: float

    def summary(self):
        return f"levels={len(self.rows)} spearman={self.spearman:.4f}"


def degrade_each(fused_images, spec):
    """Degrade a list of images; image ``i`` uses noise seed ``spec.seed + i``."""
    return [degrade(f, replace(spec, seed=spec.seed + i)) for i, f in enumerate(fused_images)]


def degradation_study(samples, levels, probe_a, probe_b):
    """Probe reconstruction error as the backbone output gets worse.

    ``samples`` hold clean fused images; each :class:`DegradeSpec` in
    ``levels`` is applied to them before probing. Rows report the mean L1
    between each probe output and its true source.
    """
    rows = []
    clean = [s[2] for s in samples]
    for li, spec in enumerate(levels):
        errs_a, errs_b = [], []
        for (a, b, _), f in zip(samples, degrade_each(clean, spec)):
            pa, pb = probe_forward(probe_a, probe_b, f)
            errs_a.append(np.abs(pa - a).mean())
            errs_b.append(np.abs(pb - b).mean())
        ea, eb = float(np.mean(errs_a)), float(np.mean(errs_b))
        rows.append({"level": li, "noise_sigma": spec.noise_sigma, "blur_k": spec.blur_k,
                     "contrast": spec.contrast, "err_a": ea, "err_b": eb, "err": (ea + eb) / 2})
    if len(rows) >= 2:
        rho = spearmanr([r["noise_sigma"] for r in rows], [r["err"] for r in rows]).statistic
        rho = float(rho) if np.isfinite(rho) else 0.0
    else:
        rho = 0.0
    return DegradationReport(rows, rho)
