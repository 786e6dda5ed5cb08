"""Patch-based image denoising with the unrolled greedy network.

Images are plain 2-D float64 arrays on the 0..255 scale. The denoiser runs
the fixed-depth attention network over every fully-overlapping patch
(global image mean subtracted first, the DC atom absorbs the per-patch
rest) and averages the overlapping reconstructions back into an image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import GradientTape, Node
from .errors import (
    CorruptHeader,
    EmptyBatch,
    ImageTooSmall,
    ShapeMismatch,
    UnsupportedFormat,
)
from .pursuit import Dictionary
from .synthetic import make_dct_dictionary
from .training import (
    LOG_SUM_L2,
    SUM_L2,
    Adam,
    AdamConfig,
    coherence_gradient,
    mutual_coherence,
)
from .unrolled import (
    AttentionParams,
    LgmParams,
    lgm_forward_patches,
    load_lgm_checkpoint,
    save_lgm_checkpoint,
)

DEFAULT_PATCH = 8
DEFAULT_DEPTH = 10
DEFAULT_DC_SCALE = 2.5

# patch columns per recorded forward; bounds tape memory during denoising
_CHUNK = 1024


def _check_image(img, what: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeMismatch(f"{what} must be a nonempty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{what} has non-finite pixels")
    return img


# ---------------------------------------------------------------------------
# image I/O: binary PGM, 8-bit only

def load_image(path) -> np.ndarray:
    """Read a binary PGM (P5, max gray 255) into a float array."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise UnsupportedFormat(f"{path}: not a binary PGM (P5) file")
    tokens = []
    i = 2
    while len(tokens) < 3:
        if i >= len(data):
            raise CorruptHeader(f"{path}: truncated PGM header")
        c = data[i]
        if c == ord(b"#"):
            while i < len(data) and data[i] != ord(b"\n"):
                i += 1
        elif chr(c).isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not chr(data[i]).isspace():
                i += 1
            tokens.append(data[start:i])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptHeader(f"{path}: non-numeric PGM header fields") from exc
    if width < 1 or height < 1:
        raise CorruptHeader(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit images supported, max gray {maxval}")
    i += 1  # the single whitespace byte separating header and raster
    raster = data[i:i + width * height]
    if len(raster) != width * height:
        raise CorruptHeader(f"{path}: raster has {len(raster)} bytes, "
                            f"expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64)


def save_image(path, img) -> None:
    """Write a binary PGM; pixels are rounded and clipped to 0..255."""
    img = _check_image(img)
    pixels = np.clip(np.rint(img), 0.0, 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())


def psnr(a, b, peak: float = 255.0) -> float:
    """10 log10(peak^2 / MSE) in dB; identical images give +inf."""
    a = _check_image(a, "first image")
    b = _check_image(b, "second image")
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# patch grid

def extract_patches(img, p: int) -> np.ndarray:
    """All fully-overlapping p x p patches, one column per patch.

    Patches are vectorized column-major and ordered by raster position of
    their top-left corner, so entry (q, k) of the result is pixel
    (i + q mod p, j + q div p) of the patch starting at raster index k.
    """
    img = _check_image(img)
    h, w = img.shape
    if h < p or w < p:
        raise ImageTooSmall(f"image {h}x{w} smaller than patch size {p}")
    windows = sliding_window_view(img, (p, p))
    hh, ww = windows.shape[:2]
    return windows.reshape(hh * ww, p, p).transpose(0, 2, 1).reshape(-1, p * p).T


def _patch_index_map(dims: tuple[int, int], p: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel index per patch entry, plus the per-pixel cover counts."""
    h, w = dims
    hh, ww = h - p + 1, w - p + 1
    starts = (np.arange(hh)[:, None] * w + np.arange(ww)[None, :]).ravel()
    q = np.arange(p * p)
    offsets = (q % p) * w + (q // p)
    idx = offsets[:, None] + starts[None, :]

    def cover(size):
        r = np.arange(size)
        return np.minimum(np.minimum(r + 1.0, float(p)),
                          np.minimum(size - r, size - p + 1.0))

    counts = np.outer(cover(h), cover(w))
    return idx, counts


def reconstruct_average(patches, dims: tuple[int, int], p: int,
                        lam: float = 0.0, noisy=None) -> np.ndarray:
    """Average overlapping patches back into an image.

    Each pixel becomes (lam * noisy + sum of covering patch values) divided
    by (lam + cover count); lam = 0 is plain overlap averaging, which
    inverts extract_patches exactly.
    """
    patches = np.asarray(patches, dtype=np.float64)
    h, w = dims
    if lam < 0.0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if h < p or w < p:
        raise ImageTooSmall(f"target {h}x{w} smaller than patch size {p}")
    expected = (h - p + 1) * (w - p + 1)
    if patches.shape != (p * p, expected):
        raise ShapeMismatch(
            f"patches shape {patches.shape} != ({p * p}, {expected}) for {h}x{w}")
    idx, counts = _patch_index_map(dims, p)
    sums = np.zeros(h * w)
    np.add.at(sums, idx.ravel(), patches.ravel())
    if lam > 0.0:
        if noisy is None:
            raise ValueError("lam > 0 needs the noisy image")
        noisy = _check_image(noisy, "noisy image")
        if noisy.shape != (h, w):
            raise ShapeMismatch(f"noisy shape {noisy.shape} != {(h, w)}")
        return (lam * noisy + sums.reshape(h, w)) / (lam + counts)
    return sums.reshape(h, w) / counts


def patch_average_op(patches: Node, dims: tuple[int, int], p: int) -> Node:
    """Tape-recorded overlap averaging (lam = 0); linear, exact gradient."""
    idx, counts = _patch_index_map(dims, p)
    out = ad.apply(lambda pm: reconstruct_average(pm, dims, p, 0.0), patches)
    out.vjp = lambda g: ((np.asarray(g) / counts).ravel()[idx],)
    return out


# ---------------------------------------------------------------------------
# denoiser model

@dataclass
class DenoiserModel:
    """Dual dictionaries with a DC atom plus the depth-attention weights."""

    params: LgmParams
    attention: AttentionParams
    patch_size: int = DEFAULT_PATCH
    max_atoms: int = DEFAULT_DEPTH

    def __post_init__(self):
        p = self.patch_size
        if not self.params.use_dc:
            raise ValueError("denoiser dictionaries need the DC atom")
        if self.params.n_features != p * p:
            raise ShapeMismatch(
                f"dictionaries have {self.params.n_features} rows, expected {p * p}")
        if self.attention.signal_length != p * p or self.attention.depth != self.max_atoms:
            raise ShapeMismatch("attention shape does not match patch size / depth")
        if not 1 <= self.max_atoms <= self.params.n_atoms:
            raise ValueError(f"max_atoms {self.max_atoms} out of range")

    @classmethod
    def init(cls, patch_size: int = DEFAULT_PATCH, max_atoms: int = DEFAULT_DEPTH,
             dc_scale: float = DEFAULT_DC_SCALE, seed: int = 0) -> "DenoiserModel":
        """Cosine-dictionary start: p^2 x 4p^2 base plus the scaled DC atom."""
        n = patch_size * patch_size
        base = make_dct_dictionary(n, 4 * n)
        params = LgmParams(Dictionary(base.copy()), Dictionary(base.copy()),
                           dc_scale, dc_scale)
        attention = AttentionParams.init(n, max_atoms, seed=seed)
        return cls(params, attention, patch_size, max_atoms)

    def save(self, path) -> None:
        save_lgm_checkpoint(path, self.params, self.attention,
                            meta={"patch_size": self.patch_size,
                                  "max_atoms": self.max_atoms})

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        params, attention, meta = load_lgm_checkpoint(path)
        if attention is None:
            raise CorruptHeader(f"{path}: checkpoint has no attention weights")
        return cls(params, attention, int(meta["patch_size"]), int(meta["max_atoms"]))


def denoise(model: DenoiserModel, img, sigma: float | None = None,
            chunk: int = _CHUNK) -> np.ndarray:
    """Denoise one image; deterministic.

    The global image mean is subtracted up front and restored at the end.
    Every patch runs the fixed-depth attention forward (``sigma`` does not
    enter the computation; models are trained per noise level and the
    argument only documents which one the caller picked). Patches are
    processed in chunks to bound memory.
    """
    img = _check_image(img)
    p = model.patch_size
    if img.shape[0] < p or img.shape[1] < p:
        raise ImageTooSmall(f"image {img.shape} smaller than patch size {p}")
    mean = float(img.mean())
    patches = extract_patches(img - mean, p)
    estimates = np.empty_like(patches)
    for start in range(0, patches.shape[1], chunk):
        stop = min(start + chunk, patches.shape[1])
        out, _ = lgm_forward_patches(model.params, patches[:, start:stop],
                                     model.max_atoms, model.attention)
        estimates[:, start:stop] = out.value
    return reconstruct_average(estimates, img.shape, p, 0.0) + mean


# ---------------------------------------------------------------------------
# training on clean crops

def sample_crops(images, size: int, count: int, seed: int = 0) -> list[np.ndarray]:
    """Uniformly sample ``count`` square crops across the given images."""
    images = [_check_image(im, f"image {k}") for k, im in enumerate(images)]
    if not images:
        raise EmptyBatch("no images to crop")
    for k, im in enumerate(images):
        if im.shape[0] < size or im.shape[1] < size:
            raise ImageTooSmall(f"image {k} is {im.shape}, needs {size}x{size}")
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(count):
        im = images[int(rng.integers(len(images)))]
        i = int(rng.integers(im.shape[0] - size + 1))
        j = int(rng.integers(im.shape[1] - size + 1))
        crops.append(im[i:i + size, j:j + size].copy())
    return crops


@dataclass
class ImagingTrainConfig:
    sigma: float
    epochs: int
    batch_size: int = 8
    learning_rate: float = 0.002
    loss_kind: str = LOG_SUM_L2
    xi: float = 1e-5
    decay_factor: float = 0.5
    decay_every: int = 20
    seed: int = 0
    chunk: int = _CHUNK

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.loss_kind not in (SUM_L2, LOG_SUM_L2):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.xi < 0.0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")


def _crop_estimate(params, attention, patches, dims, p, s, chunk):
    """Forward the whole crop (no gradients kept) and average the patches."""
    estimates = np.empty_like(patches)
    for start in range(0, patches.shape[1], chunk):
        stop = min(start + chunk, patches.shape[1])
        out, _ = lgm_forward_patches(params, patches[:, start:stop], s, attention)
        estimates[:, start:stop] = out.value
    return reconstruct_average(estimates, dims, p, 0.0)


def train_image_denoiser(model: DenoiserModel, crops, config: ImagingTrainConfig,
                         callback=None):
    """Train the denoiser on clean crops; returns (model, epoch history).

    Every epoch draws fresh noise for each crop (stream seeded by (seed,
    epoch)), shuffles, and walks mini-batches. The per-crop target is the
    clean crop minus the noisy crop's mean, matching the mean subtraction
    applied to the input. Batch gradients run in two passes so only one
    patch-chunk graph is alive at a time: the first pass computes every
    crop's reconstruction, the second replays each chunk with a tape and
    seeds it with its share of the loss gradient. Thanks to the overlap
    averaging being linear, the two passes are exact, not an approximation.
    """
    crops = [_check_image(c, f"crop {k}") for k, c in enumerate(crops)]
    if not crops:
        raise EmptyBatch("no training crops")
    p, s = model.patch_size, model.max_atoms
    for k, c in enumerate(crops):
        if c.shape[0] < p or c.shape[1] < p:
            raise ImageTooSmall(f"crop {k} is {c.shape}, needs at least {p}x{p}")
    params, attention = model.params, model.attention
    optimizer = Adam(AdamConfig(config.learning_rate,
                                decay_factor=config.decay_factor,
                                decay_every=config.decay_every))
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        noise_rng = np.random.default_rng((config.seed, epoch))
        noisy = [c + config.sigma * noise_rng.standard_normal(c.shape) for c in crops]
        order = rng.permutation(len(crops))
        epoch_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]

            # pass 1: reconstructions and the batch fit term
            prepared = []
            total_fit = 0.0
            for k in batch:
                y = noisy[k]
                mean = float(y.mean())
                patches = extract_patches(y - mean, p)
                estimate = _crop_estimate(params, attention, patches, y.shape,
                                          p, s, config.chunk)
                diff = estimate - (crops[k] - mean)
                total_fit += float(np.sum(diff * diff))
                prepared.append((patches, diff, y.shape))

            penalty = config.xi * (mutual_coherence(params.analysis.atoms)
                                   + mutual_coherence(params.synthesis.atoms)) \
                if config.xi > 0.0 else 0.0
            if config.loss_kind == LOG_SUM_L2:
                if total_fit <= 0.0:
                    raise ValueError("log loss needs a strictly positive fit term")
                value = math.log(total_fit) + penalty
                scale = 2.0 / total_fit
            else:
                value = total_fit + penalty
                scale = 2.0
            epoch_loss += value

            # pass 2: re-record each chunk and backpropagate its seed
            grads: dict[str, np.ndarray] = {}
            for patches, diff, dims in prepared:
                idx, counts = _patch_index_map(dims, p)
                seed_flat = (scale * diff / counts).ravel()
                for c0 in range(0, patches.shape[1], config.chunk):
                    c1 = min(c0 + config.chunk, patches.shape[1])
                    tape = GradientTape()
                    lgm_forward_patches(params, patches[:, c0:c1], s, attention,
                                        tape=tape)
                    tape.backward(seed_flat[idx[:, c0:c1]])
                    for name in tape.params:
                        g = tape.grad_of(name)
                        if name in grads:
                            grads[name] += g
                        else:
                            grads[name] = g
            if config.xi > 0.0:
                grads["analysis"] += config.xi * coherence_gradient(params.analysis.atoms)[1]
                grads["synthesis"] += config.xi * coherence_gradient(params.synthesis.atoms)[1]

            tensors = dict(params.tensors())
            tensors.update(attention.tensors())
            updated = optimizer.step(tensors, grads)
            params = params.with_tensors(updated)
            attention = attention.with_tensors(updated)
        optimizer.end_epoch(epoch)
        row = {"train_loss": epoch_loss}
        history.append(row)
        if callback is not None:
            callback(epoch, row)
    return DenoiserModel(params, attention, p, s), history
