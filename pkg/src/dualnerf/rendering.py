"""Ray generation, depth sampling, region routing, and volume rendering.

Rays are grouped in batches (struct-of-arrays) so field evaluation and
compositing stay vectorized.  A training batch is split into three routes:
``aa`` rays see only the audio-associated field, ``ai`` rays only the
audio-independent field, and ``overlap`` rays are evaluated by both and
blended per sample.  At inference every pixel takes the overlap route.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ValidationError

REGION_AUDIO = "audio"      # pixels inside the ground-truth mouth mask
REGION_STATIC = "static"    # everything else
REGION_UNKNOWN = "unknown"  # inference: no ground truth available

ROUTE_AA = "aa"
ROUTE_AI = "ai"
ROUTE_OVERLAP = "overlap"

_MASK_EPS = 1e-8


@dataclass
class RayBatch:
    """A set of camera rays sharing one near/far depth range."""

    origins: np.ndarray     # [N, 3]
    dirs: np.ndarray        # [N, 3], unit length
    t_n: float
    t_f: float
    pixels: np.ndarray      # [N, 2] integer (row, col)
    regions: np.ndarray     # [N] strings from REGION_*

    def __post_init__(self):
        if not self.t_n < self.t_f:
            raise ValidationError(f"empty depth range [{self.t_n}, {self.t_f}]")
        norms = np.linalg.norm(self.dirs, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValidationError("ray directions must be unit vectors")

    def __len__(self):
        return self.origins.shape[0]

    def select(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx], self.t_n, self.t_f,
                        self.pixels[idx], self.regions[idx])


def generate_rays(camera, pixels, t_n, t_f, mask=None):
    """One ray per (row, col) pixel through its center.

    ``mask`` is the boolean ground-truth region image; when given, region
    labels are read from it, otherwise every ray is labeled unknown.
    """
    pixels = np.asarray(pixels, dtype=np.int64)
    rows, cols = pixels[:, 0], pixels[:, 1]
    dirs = camera.pixel_rays(rows, cols)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    if mask is None:
        regions = np.full(len(pixels), REGION_UNKNOWN, dtype=object)
    else:
        regions = np.where(mask[rows, cols], REGION_AUDIO, REGION_STATIC).astype(object)
    return RayBatch(origins, dirs, float(t_n), float(t_f), pixels, regions)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass
class RayPartition:
    """Routing of a training batch's ray indices into the three routes."""

    overlap: np.ndarray
    aa: np.ndarray
    ai: np.ndarray
    epsilon: float


def partition(audio_idx, static_idx, epsilon, seed):
    """Route round(eps*|set|) rays from each region into the overlap.

    The remainder of the audio region goes to the aa route and the
    remainder of the static region to the ai route.  Deterministic for a
    given seed.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"overlap fraction {epsilon} outside [0, 1]")
    audio_idx = np.asarray(audio_idx, dtype=np.int64)
    static_idx = np.asarray(static_idx, dtype=np.int64)
    if np.intersect1d(audio_idx, static_idx).size:
        raise ContractError("region index sets must be disjoint")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = []
    rests = []
    for idx in (audio_idx, static_idx):
        k = _round_half_up(epsilon * idx.size)
        perm = rng.permutation(idx.size)
        picks.append(idx[perm[:k]])
        rests.append(idx[perm[k:]])
    return RayPartition(overlap=np.concatenate(picks), aa=rests[0], ai=rests[1],
                        epsilon=epsilon)


def stratified_samples(t_n, t_f, n_rays, n_samples, rng=None):
    """Depths [n_rays, n_samples]: one draw per equal bin of [t_n, t_f].

    With rng=None each bin contributes its midpoint (deterministic mode,
    used at inference and in reproducibility tests).
    """
    if n_samples < 2:
        raise ValidationError("need at least 2 depth samples per ray")
    width = (t_f - t_n) / n_samples
    lo = t_n + width * np.arange(n_samples)
    if rng is None:
        frac = np.full((n_rays, n_samples), 0.5)
    else:
        frac = rng.random((n_rays, n_samples))
    return lo[None, :] + frac * width


def hierarchical_samples(depths, weights, n_fine, t_n, t_f, rng=None):
    """Importance-sample n_fine extra depths from the coarse weights.

    Inverse-transform sampling on the piecewise-constant density whose
    bins are centered on the coarse depths.  Rays whose weights sum to
    zero fall back to stratified sampling.  Returns the fine depths
    merged and sorted with the coarse ones, [R, S + n_fine].
    """
    depths = np.asarray(depths)
    weights = np.asarray(weights, dtype=np.float64)
    n_rays, n_coarse = depths.shape
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    edges = np.concatenate(
        [np.full((n_rays, 1), t_n), mids, np.full((n_rays, 1), t_f)], axis=1)

    wsum = weights.sum(axis=1, keepdims=True)
    degenerate = wsum[:, 0] <= 0
    pdf = np.where(wsum > 0, weights / np.where(wsum > 0, wsum, 1.0),
                   1.0 / n_coarse)
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine,
                            (n_rays, n_fine)).copy()
    else:
        u = rng.random((n_rays, n_fine))
    bins = np.sum(u[:, :, None] > cdf[:, None, :], axis=-1)
    bins = np.clip(bins, 0, n_coarse - 1)

    row = np.arange(n_rays)[:, None]
    cdf_hi = cdf[row, bins]
    p = pdf[row, bins]
    cdf_lo = cdf_hi - p
    frac = np.where(p > 0, (u - cdf_lo) / np.where(p > 0, p, 1.0), 0.5)
    lo = edges[row, bins]
    hi = edges[row, bins + 1]
    fine = lo + frac * (hi - lo)

    if degenerate.any():
        fine[degenerate] = stratified_samples(
            t_n, t_f, int(degenerate.sum()), n_fine, rng)

    return np.sort(np.concatenate([depths, fine], axis=1), axis=1)


@dataclass
class BlendResult:
    """Per-sample quantities entering the volume rendering quadrature."""

    c: Tensor                 # [R, S, 3]
    sigma: Tensor             # [R, S]
    m_aa: Tensor | None       # [R, S], None when route skips the aa field
    m_ai: Tensor | None


def blend(s_aa, s_ai, route, renormalize=True):
    """Mix the two fields' sample predictions according to the route.

    Overlap: c = m_aa*c_aa + m_ai*c_ai and sigma = sigma_aa + sigma_ai,
    with masks renormalized to sum to one per sample (raw mode behind the
    ``renormalize`` flag).  Single-field routes pass through unchanged.
    """
    if route == ROUTE_AA:
        if s_aa is None:
            raise ContractError("aa route with no aa-field sample")
        return BlendResult(s_aa.c, s_aa.sigma, s_aa.m, None)
    if route == ROUTE_AI:
        if s_ai is None:
            raise ContractError("ai route with no ai-field sample")
        return BlendResult(s_ai.c, s_ai.sigma, None, s_ai.m)
    if route != ROUTE_OVERLAP:
        raise ContractError(f"unknown route {route!r}")
    if s_aa is None or s_ai is None:
        raise ContractError("overlap route needs samples from both fields")
    m_aa, m_ai = s_aa.m, s_ai.m
    if renormalize:
        denom = m_aa + m_ai + _MASK_EPS
        m_aa = m_aa / denom
        m_ai = m_ai / denom
    c = s_aa.c * _expand(m_aa) + s_ai.c * _expand(m_ai)
    return BlendResult(c, s_aa.sigma + s_ai.sigma, m_aa, m_ai)


def _expand(t):
    return t.reshape(t.data.shape + (1,))


@dataclass
class RenderOutput:
    """Composited per-ray color, masks, weights, and final transmittance."""

    c_hat: Tensor                  # [R, 3]
    weights: Tensor                # [R, S]
    transmittance: Tensor          # [R]
    m_aa_hat: Tensor | None = None
    m_ai_hat: Tensor | None = None


def volume_render(depths, t_f, blended):
    """Alpha-composite sample colors and masks along each ray.

    delta_i = t_{i+1} - t_i with the last interval closed by t_f;
    alpha_i = 1 - exp(-sigma_i delta_i); T_i is the product of (1-alpha)
    before i, computed as exp of the exclusive cumulative optical depth
    so that sum(w) + T_final = 1 exactly up to floating point.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if (np.diff(depths, axis=1) < 0).any():
        raise ContractError("sample depths must be sorted ascending")
    last = np.broadcast_to(t_f, (depths.shape[0],))[:, None] - depths[:, -1:]
    if (last < -1e-12).any():
        raise ContractError("sample depths exceed the far bound")
    deltas = np.concatenate([np.diff(depths, axis=1), np.maximum(last, 0.0)], axis=1)

    sd = blended.sigma * deltas
    alpha = 1.0 - ad.exp(-sd)
    trans = ad.exp(-ad.cumsum(sd, axis=1, exclusive=True))
    w = trans * alpha
    c_hat = (_expand(w) * blended.c).sum(axis=1)
    t_final = ad.exp(-sd.sum(axis=1))

    def integrate(m):
        return None if m is None else (w * m).sum(axis=1)

    return RenderOutput(c_hat=c_hat, weights=w, transmittance=t_final,
                        m_aa_hat=integrate(blended.m_aa),
                        m_ai_hat=integrate(blended.m_ai))


def render_route(model, rays, route, n_coarse, n_fine, rng=None,
                 renormalize=True):
    """Coarse-to-fine rendering of one route's rays.

    ``model`` must provide query(field, x, d) -> per-sample predictions,
    with field one of aa_coarse / ai_coarse / aa_fine / ai_fine.  The
    coarse weights are detached before importance sampling, so gradients
    flow through both passes but not through the resampling itself.
    Returns (coarse RenderOutput, fine RenderOutput).
    """
    depths_c = stratified_samples(rays.t_n, rays.t_f, len(rays), n_coarse, rng)
    coarse = render_pass(model, rays, depths_c, route, "coarse", renormalize)
    if n_fine <= 0:
        return coarse, None
    depths_f = hierarchical_samples(depths_c, coarse.weights.data, n_fine,
                                    rays.t_n, rays.t_f, rng)
    fine = render_pass(model, rays, depths_f, route, "fine", renormalize)
    return coarse, fine


def render_pass(model, rays, depths, route, level, renormalize):
    n_rays, n_samples = depths.shape
    x = (rays.origins[:, None, :]
         + rays.dirs[:, None, :] * depths[:, :, None]).reshape(-1, 3)
    d = np.repeat(rays.dirs, n_samples, axis=0)

    def query(which):
        s = model.query(f"{which}_{level}", x, d)
        return type(s)(c=s.c.reshape((n_rays, n_samples, 3)),
                       sigma=s.sigma.reshape((n_rays, n_samples)),
                       m=s.m.reshape((n_rays, n_samples)))

    s_aa = query("aa") if route in (ROUTE_AA, ROUTE_OVERLAP) else None
    s_ai = query("ai") if route in (ROUTE_AI, ROUTE_OVERLAP) else None
    return volume_render(depths, rays.t_f, blend(s_aa, s_ai, route, renormalize))


def render_image(model, camera, t_n, t_f, n_coarse, n_fine, chunk=256,
                 renormalize=True, route=ROUTE_OVERLAP):
    """Render a full frame, by default through the overlap route.

    Pass route=ROUTE_AA for models trained without the second field.
    Deterministic (midpoint depth sampling).  Runs without gradient
    recording so whole frames fit in memory.  Returns (rgb [H, W, 3],
    aa-mask map [H, W], ai-mask map [H, W]) as float arrays; a mask the
    route never produced comes back all-zero.
    """
    h, w = camera.height, camera.width
    rows, cols = np.mgrid[0:h, 0:w]
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rgb = np.zeros((h * w, 3))
    m_aa = np.zeros(h * w)
    m_ai = np.zeros(h * w)
    with ad.no_grad():
        for lo in range(0, len(pixels), chunk):
            sel = pixels[lo:lo + chunk]
            rays = generate_rays(camera, sel, t_n, t_f)
            coarse, fine = render_route(model, rays, route, n_coarse,
                                        n_fine, rng=None,
                                        renormalize=renormalize)
            out = fine if fine is not None else coarse
            rgb[lo:lo + chunk] = out.c_hat.data
            if out.m_aa_hat is not None:
                m_aa[lo:lo + chunk] = out.m_aa_hat.data
            if out.m_ai_hat is not None:
                m_ai[lo:lo + chunk] = out.m_ai_hat.data
    return (rgb.reshape(h, w, 3), m_aa.reshape(h, w), m_ai.reshape(h, w))


def save_image(path, array):
    """Write a float image in [0, 1] as 8-bit PNG, or PPM/PGM for debug."""
    from PIL import Image

    arr = np.clip(np.asarray(array), 0.0, 1.0)
    quant = np.round(arr * 255.0).astype(np.uint8)
    path = str(path)
    if path.endswith(".ppm") or path.endswith(".pgm"):
        magic = b"P6" if quant.ndim == 3 else b"P5"
        with open(path, "wb") as f:
            f.write(magic + b"\n%d %d\n255\n" % (quant.shape[1], quant.shape[0]))
            f.write(quant.tobytes())
    else:
        Image.fromarray(quant).save(path)
