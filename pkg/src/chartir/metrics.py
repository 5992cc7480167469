"""Pixel-level similarity metrics and their weighted discrepancy aggregate.

SSIM, PSNR, MSE, and the 64-bit average hash are computed directly on numpy
arrays (no imaging-library kernels) so they stay checkable against naive
oracles. Each metric is mapped to a discrepancy in [0, 1] and combined by
``aggregate`` into the scalar the refinement loop minimizes; lower is better.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests

from .images import ChartImage, resize_to_reference

PSNR_CAP_DB = 50.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2
HASH_CELLS = 8
HASH_BITS = HASH_CELLS * HASH_CELLS

_EPS = 1e-9


class DimensionMismatch(ValueError):
    """Raised when a pixel metric receives images of different sizes."""


class TooSmall(ValueError):
    """Raised when an image is smaller than the SSIM window."""


class NoComponents(ValueError):
    """Raised when aggregation is asked to combine an empty metric vector."""


class ProviderUnavailable(RuntimeError):
    """An embedding provider could not produce a usable vector."""


def _require_same_size(a: ChartImage, b: ChartImage) -> None:
    if a.width != b.width or a.height != b.height:
        raise DimensionMismatch(
            f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def luminance(img: ChartImage) -> np.ndarray:
    """Rec.601 luma plane as float64, shape (height, width), 0..255 scale."""
    px = img.pixels.astype(np.float64)
    return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


def compute_mse(a: ChartImage, b: ChartImage) -> float:
    """Mean squared difference over all pixels and channels, 0-255 scale."""
    _require_same_size(a, b)
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    return float(np.mean(diff * diff))


def compute_psnr(a: ChartImage, b: ChartImage) -> float:
    """Peak signal-to-noise ratio in dB, capped at 50 (the MSE=0 singularity)."""
    mse = compute_mse(a, b)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * math.log10(255.0**2 / mse), PSNR_CAP_DB))


def compute_ssim(a: ChartImage, b: ChartImage) -> float:
    """Mean structural similarity over non-overlapping 8x8 luminance windows.

    Uses population statistics per window and the standard stabilizers
    C1=(0.01*255)^2, C2=(0.03*255)^2. Edge rows/columns that do not fill a
    whole window are dropped.
    """
    _require_same_size(a, b)
    if min(a.width, a.height) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs at least {SSIM_WINDOW}px per side")
    la, lb = luminance(a), luminance(b)
    rows = a.height // SSIM_WINDOW
    cols = a.width // SSIM_WINDOW
    wa = la[: rows * SSIM_WINDOW, : cols * SSIM_WINDOW].reshape(
        rows, SSIM_WINDOW, cols, SSIM_WINDOW
    )
    wb = lb[: rows * SSIM_WINDOW, : cols * SSIM_WINDOW].reshape(
        rows, SSIM_WINDOW, cols, SSIM_WINDOW
    )
    mu_a = wa.mean(axis=(1, 3))
    mu_b = wb.mean(axis=(1, 3))
    var_a = (wa * wa).mean(axis=(1, 3)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(1, 3)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(1, 3)) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(numerator / denominator))


def _box_weights(cells: int, n: int) -> np.ndarray:
    """Area-overlap weights mapping n source samples onto ``cells`` equal bins."""
    weights = np.zeros((cells, n), dtype=np.float64)
    span = n / cells
    for k in range(cells):
        lo = k * span
        hi = (k + 1) * span
        first = int(math.floor(lo))
        last = min(int(math.ceil(hi)), n)
        for i in range(first, last):
            overlap = min(hi, i + 1.0) - max(lo, float(i))
            if overlap > 0.0:
                weights[k, i] = overlap
    return weights


def perceptual_hash(img: ChartImage) -> int:
    """64-bit average hash: 8x8 box-filtered luminance thresholded at its mean.

    A cell >= the 64-cell mean sets its bit; bits are packed row-major with
    the top-left cell in the most significant position.
    """
    lum = luminance(img)
    h, w = lum.shape
    sums = _box_weights(HASH_CELLS, h) @ lum @ _box_weights(HASH_CELLS, w).T
    cells = sums / ((h / HASH_CELLS) * (w / HASH_CELLS))
    mean = cells.mean()
    value = 0
    for bit in (cells >= mean).reshape(-1):
        value = (value << 1) | int(bit)
    return value


def hamming_distance(h1: int, h2: int) -> int:
    """Popcount of the XOR of two 64-bit hashes, in [0, 64]."""
    return ((h1 ^ h2) & (2**HASH_BITS - 1)).bit_count()


class EmbeddingProvider(Protocol):
    """Maps an image to an embedding vector; must be deterministic per image."""

    name: str

    def embed(self, image: ChartImage) -> Sequence[float]: ...


class HttpEmbeddingProvider:
    """Remote embedding endpoint: POST a base64 PNG, receive a JSON array."""

    def __init__(self, name: str, url: str, timeout: float = 30.0,
                 session: requests.Session | None = None) -> None:
        self.name = name
        self.url = url
        self.timeout = timeout
        self._session = session or requests.Session()

    def embed(self, image: ChartImage) -> Sequence[float]:
        payload = {"image": base64.b64encode(image.to_png_bytes()).decode("ascii")}
        try:
            resp = self._session.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            vector = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise ProviderUnavailable(f"provider {self.name}: {exc}") from exc
        if not isinstance(vector, list) or not vector:
            raise ProviderUnavailable(f"provider {self.name}: malformed response")
        return [float(x) for x in vector]


def _unit_vector(vec: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ProviderUnavailable(f"provider {name}: non-finite or empty embedding")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ProviderUnavailable(f"provider {name}: zero-norm embedding")
    return arr / norm


def embedding_similarity(provider: EmbeddingProvider, a: ChartImage, b: ChartImage) -> float:
    """Cosine similarity of the provider's embeddings, normalized client-side."""
    name = getattr(provider, "name", provider.__class__.__name__)
    va = _unit_vector(provider.embed(a), name)
    vb = _unit_vector(provider.embed(b), name)
    if va.shape != vb.shape:
        raise ProviderUnavailable(f"provider {name}: embedding sizes differ")
    return float(np.clip(np.dot(va, vb), -1.0, 1.0))


def _check_range(name: str, value: float, lo: float, hi: float) -> None:
    if not (lo - _EPS <= value <= hi + _EPS):
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class MetricVector:
    """Raw per-metric values; ``None`` marks a component absent from aggregation.

    ``mse`` is carried for reporting only and never enters the aggregate.
    """

    ssim: float | None = None
    psnr_db: float | None = None
    mse: float | None = None
    hamming: int | None = None
    embed_cos: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.ssim is not None:
            _check_range("ssim", self.ssim, -1.0, 1.0)
        if self.psnr_db is not None:
            _check_range("psnr_db", self.psnr_db, 0.0, PSNR_CAP_DB)
        if self.mse is not None and self.mse < 0.0:
            raise ValueError(f"mse={self.mse} negative")
        if self.hamming is not None and not 0 <= self.hamming <= HASH_BITS:
            raise ValueError(f"hamming={self.hamming} outside [0, {HASH_BITS}]")
        if self.embed_cos is not None:
            for cos in self.embed_cos:
                _check_range("embed_cos", cos, -1.0, 1.0)

    def as_dict(self) -> dict:
        return {
            "ssim": self.ssim,
            "psnr_db": self.psnr_db,
            "mse": self.mse,
            "hamming": self.hamming,
            "embed_cos": list(self.embed_cos) if self.embed_cos is not None else None,
        }


@dataclass(frozen=True)
class AggregationWeights:
    """Non-negative component weights, renormalized over present components."""

    w_ssim: float = 1.0
    w_psnr: float = 1.0
    w_hamming: float = 1.0
    w_embed: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        for name, value in (("w_ssim", self.w_ssim), ("w_psnr", self.w_psnr),
                            ("w_hamming", self.w_hamming)):
            if value < 0.0:
                raise ValueError(f"{name}={value} negative")
        if any(w < 0.0 for w in self.w_embed):
            raise ValueError("embedding weights must be non-negative")


@dataclass(frozen=True)
class DiscrepancyScore:
    """Aggregated visual discrepancy in [0, 1]; 0 means every component is perfect."""

    value: float

    def __post_init__(self) -> None:
        _check_range("discrepancy", self.value, 0.0, 1.0)
        object.__setattr__(self, "value", float(min(max(self.value, 0.0), 1.0)))


def aggregate(v: MetricVector, w: AggregationWeights | None = None) -> DiscrepancyScore:
    """Weighted average of per-component discrepancies, weights renormalized to 1.

    Component mappings: d_ssim = 1 - clamp(ssim, 0, 1); d_psnr = 1 - psnr/50;
    d_hamming = hamming/64; d_embed = (1 - cos)/2. Absent components are
    skipped and the remaining weights renormalized.
    """
    w = w or AggregationWeights()
    components: list[tuple[float, float]] = []
    if v.ssim is not None:
        components.append((w.w_ssim, 1.0 - min(max(v.ssim, 0.0), 1.0)))
    if v.psnr_db is not None:
        components.append((w.w_psnr, 1.0 - v.psnr_db / PSNR_CAP_DB))
    if v.embed_cos is not None and len(v.embed_cos) > 0:
        embed_weights = w.w_embed if w.w_embed else (1.0,) * len(v.embed_cos)
        if len(embed_weights) != len(v.embed_cos):
            raise ValueError(
                f"{len(v.embed_cos)} embedding components but {len(embed_weights)} weights"
            )
        for cos, wi in zip(v.embed_cos, embed_weights):
            components.append((wi, (1.0 - cos) / 2.0))
    if v.hamming is not None:
        components.append((w.w_hamming, v.hamming / HASH_BITS))
    if not components:
        raise NoComponents("no metric components present to aggregate")
    total = sum(weight for weight, _ in components)
    if total <= 0.0:
        raise ValueError("component weights sum to zero")
    value = sum(weight * d for weight, d in components) / total
    return DiscrepancyScore(min(max(value, 0.0), 1.0))


def compute_metrics(gen: ChartImage, ref: ChartImage,
                    providers: Sequence[EmbeddingProvider] = ()) -> MetricVector:
    """Full metric vector for a generated image against the reference.

    The generated image is resized to the reference's dimensions first. An
    unreachable embedding provider drops its component (weights renormalize
    downstream); SSIM is dropped only for sub-window-size images.
    """
    gen = resize_to_reference(gen, ref)
    try:
        ssim: float | None = compute_ssim(gen, ref)
    except TooSmall:
        ssim = None
    mse = compute_mse(gen, ref)
    psnr = compute_psnr(gen, ref)
    hamming = hamming_distance(perceptual_hash(gen), perceptual_hash(ref))
    cosines: list[float] = []
    for provider in providers:
        try:
            cosines.append(embedding_similarity(provider, gen, ref))
        except ProviderUnavailable:
            continue
    return MetricVector(
        ssim=ssim,
        psnr_db=psnr,
        mse=mse,
        hamming=hamming,
        embed_cos=tuple(cosines) if cosines else None,
    )
