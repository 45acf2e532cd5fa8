"""
Grayscale image handling.

Images are plain 2-D ``float64`` arrays with values in ``[0, 1]``. Detail
layers produced by :func:`base_detail_split` are signed and deliberately exempt
from that range; only final outputs are clamped and quantised.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import ContractError, ManifestError, UnsupportedFormatError

__all__ = [
    "as_gray",
    "load_image",
    "save_image",
    "average_filter",
    "base_detail_split",
    "sharpen",
    "crop_patches",
    "patch_offsets",
    "synth_pair",
    "SCENARIOS",
    "ManifestEntry",
    "PairManifest",
    "read_manifest",
    "write_manifest",
]

SCENARIOS = ("exposure", "focus", "modality")

_LUMA = np.array([0.299, 0.587, 0.114])


def as_gray(img, name="image"):
    """Validate ``img`` as a gray image and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError(f"{name} values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def _same_shape(*named):
    shapes = {img.shape for _, img in named}
    if len(shapes) != 1:
        desc = ", ".join(f"{n}={img.shape}" for n, img in named)
        raise ContractError(f"images must share dimensions: {desc}")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _read_pgm(path, raw):
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise OSError(f"{path}: malformed PGM header") from exc
    if maxval > 255:
        raise UnsupportedFormatError(f"{path}: 16-bit PGM (maxval {maxval}) is not supported")
    if maxval < 1 or w < 1 or h < 1:
        raise OSError(f"{path}: malformed PGM header")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos) if len(raw) - pos >= w * h else None
    if data is None:
        raise OSError(f"{path}: PGM raster is truncated")
    return data.reshape(h, w).astype(np.float64) / maxval


def load_image(path):
    """Read an 8-bit PGM (P5) or PNG file as a gray image in ``[0, 1]``.

    Colour PNGs are reduced to luma ``0.299 R + 0.587 G + 0.114 B``.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc.strerror or exc}") from exc
    if raw[:2] == b"P5":
        return _read_pgm(path, raw)
    if raw[:8] != b"\x89PNG\r\n\x1a\n":
        raise UnsupportedFormatError(f"{path}: not a P5 PGM or PNG file")
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise UnsupportedFormatError(f"{path}: 16-bit PNG is not supported")
        if mode in ("1", "L", "LA"):
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return (rgb @ _LUMA) / 255.0


def _quantize(img):
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img, path):
    """Write ``img`` as 8-bit grayscale, PGM or PNG by extension.

    Pixels are quantised as ``round(v * 255)`` (halves round up), clamped to 0..255.
    """
    path = Path(path)
    q = _quantize(img)
    if q.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {q.shape}")
    ext = path.suffix.lower()
    if ext == ".pgm":
        header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(q.tobytes())
    elif ext == ".png":
        Image.fromarray(q, mode="L").save(path)
    else:
        raise UnsupportedFormatError(f"{path}: extension must be .pgm or .png")


# ---------------------------------------------------------------------------
# base / detail decomposition
# ---------------------------------------------------------------------------

def average_filter(img, k):
    """Mean over a ``(2k+1) x (2k+1)`` window with replicate padding.

    The image minimum is subtracted before filtering and added back after, so
    a constant image comes out bit-identical and every output stays within the
    input's ``[min, max]``.
    """
    if k < 0:
        raise ContractError(f"filter radius k must be >= 0, got {k}")
    img = np.asarray(img, dtype=np.float64)
    if k == 0:
        return img.copy()
    lo, hi = img.min(), img.max()
    out = lo + uniform_filter(img - lo, size=2 * k + 1, mode="nearest")
    return np.clip(out, lo, hi)


def base_detail_split(img, k):
    """Return ``(base, detail)`` with ``base`` the local mean and ``detail = img - base``."""
    img = np.asarray(img, dtype=np.float64)
    base = average_filter(img, k)
    return base, img - base


def sharpen(img, k):
    """Unsharp masking with the box filter: ``clamp(img + detail(img, k))``."""
    _, detail = base_detail_split(img, k)
    return np.clip(img + detail, 0.0, 1.0)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def crop_patches(img_a, img_b, img_f, size, count, seed):
    """Cut ``count`` aligned ``size x size`` triples at shared random offsets.

    Offsets come from ``numpy.random.default_rng(seed).integers`` drawing one
    ``(row, col)`` pair per patch, each uniform over the valid positions.
    """
    _same_shape(("img_a", img_a), ("img_b", img_b), ("img_f", img_f))
    h, w = img_a.shape
    if size < 1 or size > min(h, w):
        raise ContractError(f"patch size {size} does not fit images of shape {(h, w)}")
    out = []
    for y, x in patch_offsets((h, w), size, count, seed):
        sl = (slice(y, y + size), slice(x, x + size))
        out.append((img_a[sl], img_b[sl], img_f[sl]))
    return out


def patch_offsets(shape, size, count, seed):
    """The ``(row, col)`` offsets :func:`crop_patches` would use."""
    h, w = shape
    rng = np.random.default_rng(seed)
    return rng.integers(0, [h - size + 1, w - size + 1], size=(count, 2))


# ---------------------------------------------------------------------------
# synthetic pairs
# ---------------------------------------------------------------------------

def _scene(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    layout = 0.35 + 0.25 * (np.cos(theta) * xx + np.sin(theta) * yy)
    for _ in range(rng.integers(6, 11)):
        rh = rng.integers(h // 10, h // 3)
        rw = rng.integers(w // 10, w // 3)
        y0 = rng.integers(0, h - rh)
        x0 = rng.integers(0, w - rw)
        layout[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.1, 0.9)
    noise = gaussian_filter(rng.normal(size=(h, w)), 1.0)
    texture = 0.08 * noise / noise.std()
    return layout, texture


def synth_pair(seed, scenario, h=128, w=128):
    """Render a random scene and derive two complementary views of it.

    ``exposure``: gamma-darkened and gamma-brightened copies.
    ``focus``: left half blurred in the first view, right half in the second.
    ``modality``: a texture-free view with bright targets (infrared-like) and
    a full-texture view (visible-like).

    Returns ``(I_A, I_B)``.
    """
    if scenario not in SCENARIOS:
        raise ContractError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    if h < 64 or w < 64:
        raise ContractError(f"synthetic images need h, w >= 64, got {(h, w)}")
    rng = np.random.default_rng(seed)
    layout, texture = _scene(rng, h, w)
    scene = np.clip(layout + texture, 0.02, 0.98)

    if scenario == "exposure":
        gamma = 2.2
        return scene ** gamma, scene ** (1 / gamma)

    if scenario == "focus":
        blurred = gaussian_filter(scene, 2.0, mode="nearest")
        a = scene.copy()
        b = scene.copy()
        a[:, : w // 2] = blurred[:, : w // 2]
        b[:, w // 2:] = blurred[:, w // 2:]
        return a, b

    # modality
    ir = 0.15 + 0.5 * gaussian_filter(layout, 3.0, mode="nearest")
    vis = scene.copy()
    for _ in range(rng.integers(2, 5)):
        th = rng.integers(h // 12, h // 5)
        tw = rng.integers(w // 16, w // 8)
        y0 = rng.integers(0, h - th)
        x0 = rng.integers(0, w - tw)
        heat = rng.uniform(0.8, 0.95)
        ir[y0:y0 + th, x0:x0 + tw] = heat
        vis[y0:y0 + th, x0:x0 + tw] = np.clip(0.25 + texture[y0:y0 + th, x0:x0 + tw], 0.02, 0.98)
    return np.clip(ir, 0.0, 1.0), vis


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path_a: Path
    path_b: Path
    path_fused: Path | None = None


@dataclass
class PairManifest:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self):
        return [e.id for e in self.entries]

    def check_files(self, require_fused=False):
        for e in self.entries:
            for label, p in (("path_a", e.path_a), ("path_b", e.path_b)):
                if not Path(p).exists():
                    raise ManifestError(e.id, f"{label} {p} does not exist")
            if e.path_fused is None:
                if require_fused:
                    raise ManifestError(e.id, "entry has no fused image path")
            elif not Path(e.path_fused).exists():
                raise ManifestError(e.id, f"path_fused {e.path_fused} does not exist")


def read_manifest(path, check_files=True):
    """Parse a tab-separated manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ManifestError(f"line {lineno}", f"expected 3 or 4 tab-separated fields, got {len(cols)}")
            eid = cols[0]
            if eid in seen:
                raise ManifestError(eid, "duplicate id")
            seen.add(eid)
            paths = [root / c if c else None for c in cols[1:]]
            fused = paths[2] if len(paths) == 3 else None
            entries.append(ManifestEntry(eid, paths[0], paths[1], fused))
    manifest = PairManifest(entries)
    if check_files:
        manifest.check_files()
    return manifest


def write_manifest(manifest, path):
    """Write ``manifest``, storing paths relative to the manifest's directory when possible."""
    path = Path(path)
    root = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(root))
        except ValueError:
            return os.path.relpath(p, root)

    lines = ["# id\tpath_a\tpath_b\tpath_fused"]
    for e in manifest.entries:
        cols = [e.id, rel(e.path_a), rel(e.path_b)]
        if e.path_fused is not None:
            cols.append(rel(e.path_fused))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
