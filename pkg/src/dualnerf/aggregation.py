"""Reference feature aggregation.

Dense features are extracted from each posed reference image by a shallow
convolutional network, query points are projected into every reference
(calibrated by a learned audio-aware warping offset), sampled bilinearly,
and fused per query point.  The audio-keyed aggregator weighs references
by cross-attention between the target audio (query) and the reference
audio (keys); the mean aggregator fuses without audio and serves both the
audio-independent field and the attention-off ablation.

Cost note: within one batch the target audio and the L reference audio
vectors are constant across query points, so audio token projections and
first-block attention logits are computed once and broadcast.  Value
projections are folded into per-head matrices applied after the weighted
feature sum, which is algebraically identical to projecting every token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ValidationError
from .nn import Dense, LayerNorm, Module


class ProjectionError(ValidationError):
    """3D point at or behind the camera plane."""


W_EPS = 1e-8


def project_points(x, P, eps=W_EPS):
    """Project points [..., 3] with a 3x4 matrix; returns (uv, valid).

    Homogeneous divide is performed; entries with depth w <= eps are
    flagged invalid (uv is unusable there) and the caller substitutes a
    zero feature.
    """
    x = np.asarray(x, dtype=np.float64)
    h = x @ P[:, :3].T + P[:, 3]
    w = h[..., 2]
    valid = w > eps
    wsafe = np.where(valid, w, 1.0)
    uv = h[..., :2] / wsafe[..., None]
    return uv, valid


def project(x, P, eps=W_EPS):
    """Strict single/batch projection; raises if any point is at or
    behind the camera plane."""
    uv, valid = project_points(x, P, eps)
    if not valid.all():
        raise ProjectionError("point at or behind the camera plane (w <= eps)")
    return uv


# -- feature extraction ----------------------------------------------------

def conv3x3(x, w, b):
    """3x3 stride-1 zero-padded convolution, x[H, W, Cin] -> [H, W, Cout]."""
    H, W = x.shape[0], x.shape[1]
    cin = x.shape[2]
    xp = ad.pad_hw(x, 1)
    out = None
    for ky in range(3):
        for kx in range(3):
            # flatten to one [H*W, cin] GEMM: far cheaper than a batched
            # matmul over rows, especially in the backward pass
            patch = xp[ky:ky + H, kx:kx + W].reshape((H * W, cin))
            term = ad.matmul(patch, w[ky, kx])
            out = term if out is None else out + term
    return (out + b).reshape((H, W, -1))


class FeatureExtractor(Module):
    """Shallow convolutional network without downsampling."""

    def __init__(self, rng, channels=(3, 16, 64)):
        self.weights = [Tensor(rng.standard_normal((3, 3, cin, cout)) * np.sqrt(2.0 / (9 * cin)),
                               requires_grad=True)
                        for cin, cout in zip(channels, channels[1:])]
        self.biases = [Tensor(np.zeros(cout), requires_grad=True) for cout in channels[1:]]
        self.out_dim = channels[-1]

    def __call__(self, image):
        x = image if isinstance(image, Tensor) else Tensor(image)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = conv3x3(x, w, b)
            if i < last:
                x = ad.relu(x)
        return x


# -- bilinear sampling -----------------------------------------------------

def sample_features(fmap, u, v):
    """Bilinear sample of fmap[H, W, C] at continuous pixel coords (u, v).

    Texel (row, col) sits at (col + 0.5, row + 0.5).  Coordinates outside
    the image contribute a zero vector.  Differentiable w.r.t. both the
    feature map and the coordinates.
    """
    H, W = fmap.shape[0], fmap.shape[1]
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x.data)
    y0 = np.floor(y.data)
    fx = x - x0
    fy = y - y0
    one_fx = 1.0 - fx
    one_fy = 1.0 - fy
    out = None
    for dy, wy in ((0, one_fy), (1, fy)):
        for dx, wx in ((0, one_fx), (1, fx)):
            iy = (y0 + dy).astype(np.intp)
            ix = (x0 + dx).astype(np.intp)
            inside = ((iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)).astype(np.float64)
            corner = ad.gather2d(fmap, np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1))
            weight = wy * wx * inside
            term = corner * weight.reshape(weight.shape + (1,))
            out = term if out is None else out + term
    return out


# -- warper ----------------------------------------------------------------

class Warper(Module):
    """Offset predictor calibrating reference projections.

    Three FC layers with ReLU in between; the final layer is zero
    initialized by default so training starts from the unwarped
    projection.  Offsets are in normalized image coordinates ([-1, 1]
    spans the image).
    """

    def __init__(self, rng, audio_dim, hidden=64, zero_init=True):
        in_dim = 3 + 2 * audio_dim + 6
        self.l1 = Dense(rng, in_dim, hidden)
        self.l2 = Dense(rng, hidden, hidden)
        self.l3 = Dense(rng, hidden, 2, zero_init=zero_init)

    def __call__(self, x, d, a, a_refs, d_refs):
        """x[N,3], d[N,3], a[Da], a_refs[L,Da], d_refs[N,L,3] -> offsets [N,L,2]."""
        N, L = d_refs.shape[0], d_refs.shape[1]
        inp = np.concatenate([
            np.broadcast_to(x[:, None, :], (N, L, 3)),
            np.broadcast_to(a, (N, L, len(a))),
            np.broadcast_to(a_refs, (N, L, a_refs.shape[-1])),
            np.broadcast_to(d[:, None, :], (N, L, 3)),
            d_refs,
        ], axis=-1)
        h = ad.relu(self.l1(Tensor(inp.reshape(N * L, -1))))
        h = ad.relu(self.l2(h))
        return self.l3(h).reshape((N, L, 2))


# -- cross attention -------------------------------------------------------

class CrossAttentionBlock(Module):
    """Multi-head cross attention + layer norm, residual, feed-forward.

    Queries and keys are 128-dim audio tokens; values enter as raw
    reference features and are projected through the folded
    (feature-projection x per-head value) matrices.
    """

    def __init__(self, rng, dim=128, heads=4, ffn_hidden=128):
        if dim % heads:
            raise ValidationError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        scale = 1.0 / np.sqrt(dim)
        self.wq = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)
        self.wk = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)
        self.wv = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)
        self.wo = Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)
        self.ln_attn = LayerNorm(dim)
        self.ln_ffn = LayerNorm(dim)
        self.ffn1 = Dense(rng, dim, ffn_hidden)
        self.ffn2 = Dense(rng, ffn_hidden, dim)

    def __call__(self, q_tok, k_tok, f_raw, feat_w, feat_b):
        """q_tok [Nq,dim] (Nq may be 1, broadcast over points), k_tok [L,dim],
        f_raw [N,L,Dv] raw reference features, feat_w [Dv,dim]/feat_b [dim]
        value token projection.  Returns (tokens [N,dim], attention [Nq,heads,L]).
        """
        H, dh = self.heads, self.head_dim
        N, L = f_raw.shape[0], f_raw.shape[1]
        qh = ad.transpose(ad.matmul(q_tok, self.wq).reshape((-1, H, dh)), (1, 0, 2))
        kh = ad.transpose(ad.matmul(k_tok, self.wk).reshape((L, H, dh)), (1, 2, 0))
        logits = ad.matmul(qh, kh) * (1.0 / np.sqrt(dh))      # [H, Nq, L]
        attn = ad.softmax(logits, axis=-1)
        attn_n = ad.transpose(attn, (1, 0, 2))                # [Nq, H, L]
        if attn_n.shape[0] != N:
            attn_n = attn_n * np.ones((N, 1, 1))
        mixed = ad.matmul(attn_n, f_raw)                      # [N, H, Dv]
        # fold value-token projection and per-head W^V into one matrix
        fold_w = ad.transpose(ad.matmul(feat_w, self.wv).reshape((-1, H, dh)), (1, 0, 2))
        fold_b = ad.matmul(feat_b.reshape((1, -1)), self.wv).reshape((self.dim,))
        per_head = ad.matmul(ad.transpose(mixed, (1, 0, 2)), fold_w)   # [H, N, dh]
        attended = ad.transpose(per_head, (1, 0, 2)).reshape((N, self.dim)) + fold_b
        attended = ad.matmul(attended, self.wo) + self.bo
        tokens = self.ln_attn(q_tok + attended)
        tokens = self.ln_ffn(tokens + self.ffn2(ad.relu(self.ffn1(tokens))))
        return tokens, attn_n

    def attention_weights(self, a_query, a_keys):
        """Numpy attention distribution [heads, L] for probing."""
        _, attn = self(a_query, a_keys, Tensor(np.zeros((1, a_keys.shape[0], 1))),
                       Tensor(np.zeros((1, self.dim))), Tensor(np.zeros(self.dim)))
        return attn.data[0]


class AudioAggregator(Module):
    """Cross-attention fusion of reference features keyed by audio.

    Two blocks, then two FC layers with a ReLU in between.  Also records
    the first block's attention distribution for the probe.
    """

    def __init__(self, rng, audio_dim=16, feat_dim=64, dim=128, heads=4,
                 blocks=2, ffn_hidden=128):
        self.proj_audio = Dense(rng, audio_dim, dim)
        self.feat_w = Tensor(rng.standard_normal((feat_dim, dim)) / np.sqrt(feat_dim),
                             requires_grad=True)
        self.feat_b = Tensor(np.zeros(dim), requires_grad=True)
        self.blocks = [CrossAttentionBlock(rng, dim, heads, ffn_hidden) for _ in range(blocks)]
        self.fc1 = Dense(rng, dim, dim)
        self.fc2 = Dense(rng, dim, dim)

    def __call__(self, a, a_refs, f_refs):
        """a [Da], a_refs [L,Da], f_refs Tensor [N,L,Dv] -> (f_tilde [N,dim],
        first-block attention [Nq,heads,L])."""
        a_refs = np.asarray(a_refs, dtype=np.float64)
        if a_refs.shape[0] == 0:
            raise ContractError("aggregate: need at least one reference (L >= 1)")
        q = self.proj_audio(Tensor(np.asarray(a, dtype=np.float64).reshape(1, -1)))
        k = self.proj_audio(Tensor(a_refs))
        tokens, first_attn = self.blocks[0](q, k, f_refs, self.feat_w, self.feat_b)
        for blk in self.blocks[1:]:
            tokens, _ = blk(tokens, k, f_refs, self.feat_w, self.feat_b)
        out = self.fc2(ad.relu(self.fc1(tokens)))
        return out, first_attn


class MeanAggregator(Module):
    """Audio-free fusion: project, average over references, two FC layers."""

    def __init__(self, rng, feat_dim=64, dim=128):
        self.proj = Dense(rng, feat_dim, dim)
        self.fc1 = Dense(rng, dim, dim)
        self.fc2 = Dense(rng, dim, dim)

    def __call__(self, a, a_refs, f_refs):
        if np.asarray(a_refs).shape[0] == 0:
            raise ContractError("aggregate: need at least one reference (L >= 1)")
        # average before projecting: identical by linearity, one flat GEMM
        tokens = self.proj(f_refs.mean(axis=1))
        out = self.fc2(ad.relu(self.fc1(tokens)))
        L = np.asarray(a_refs).shape[0]
        uniform = np.full((1, 1, L), 1.0 / L)
        return out, uniform


def mean_attention_scores(attn):
    """Average attention over heads and queries -> per-reference scores [L]."""
    attn = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    return attn.mean(axis=tuple(range(attn.ndim - 1)))


# -- reference bookkeeping -------------------------------------------------

@dataclass
class ReferenceSet:
    """L reference images with poses, audio features, and feature maps."""

    images: np.ndarray        # [L, H, W, 3] in [0, 1]
    cameras: list             # [L] Camera
    audio: np.ndarray         # [L, Da]
    feature_maps: list = None   # [L] Tensor [H, W, D], filled by extract()
    feature_stack: Tensor = None  # [L*H, W, D] row-stacked view of the same

    def __post_init__(self):
        if len(self.images) == 0:
            raise ContractError("ReferenceSet: need at least one reference")
        if not (len(self.images) == len(self.cameras) == len(self.audio)):
            raise ValidationError("ReferenceSet: length mismatch")

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_dataset(cls, dataset, indices):
        return cls(images=dataset.images[list(indices)],
                   cameras=[dataset.cameras[i] for i in indices],
                   audio=dataset.audio[list(indices)])

    def extract(self, extractor):
        self.feature_maps = [extractor(img) for img in self.images]
        # row-stacked copy [L*H, W, C]: lets the gather hit all references
        # with a single indexed read instead of a per-reference loop
        self.feature_stack = ad.concat(self.feature_maps, axis=0)
        return self


def _sample_feature_stack(stack, H, W, u, v):
    """Bilinear sample of a row-stacked map [L*H, W, C] at (u[N,L], v[N,L])
    per-reference pixel coords -> [N, L, C].  Same conventions as
    sample_features; each reference is clipped to its own band."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    L = u.data.shape[1]
    band = (np.arange(L) * H)[None, :]
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x.data)
    y0 = np.floor(y.data)
    fx = x - x0
    fy = y - y0
    one_fx = 1.0 - fx
    one_fy = 1.0 - fy
    out = None
    for dy, wy in ((0, one_fy), (1, fy)):
        for dx, wx in ((0, one_fx), (1, fx)):
            iy = (y0 + dy).astype(np.intp)
            ix = (x0 + dx).astype(np.intp)
            inside = ((iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)).astype(np.float64)
            rows = np.clip(iy, 0, H - 1) + band
            corner = ad.gather2d(stack, rows, np.clip(ix, 0, W - 1))
            weight = wy * wx * inside
            term = corner * weight.reshape(weight.shape + (1,))
            out = term if out is None else out + term
    return out


def gather_reference_features(refs, x, d, a, warper=None):
    """Project points into every reference, warp, and sample features.

    x[N,3] query points, d[N,3] target view dirs, a[Da] target audio.
    Returns (features Tensor [N,L,D], offsets Tensor [N,L,2] or None).
    """
    if refs.feature_maps is None:
        raise ContractError("gather_reference_features: call refs.extract() first")
    N, L = x.shape[0], len(refs)
    H, W = refs.images.shape[1], refs.images.shape[2]
    offsets = None
    if warper is not None:
        positions = np.stack([cam.position for cam in refs.cameras])
        d_refs = x[:, None, :] - positions[None, :, :]
        d_refs = d_refs / np.maximum(np.linalg.norm(d_refs, axis=-1, keepdims=True), 1e-12)
        offsets = warper(x, d, a, refs.audio, d_refs)
    P = np.stack([cam.projection for cam in refs.cameras])   # [L, 3, 4]
    h = np.einsum("lij,nj->nli", P[:, :, :3], x) + P[:, :, 3][None]
    w = h[..., 2]
    valid = w > W_EPS
    uv = h[..., :2] / np.where(valid, w, 1.0)[..., None]
    u, v = uv[..., 0], uv[..., 1]                            # [N, L]
    if offsets is not None:
        u = offsets[..., 0] * (W / 2.0) + u
        v = offsets[..., 1] * (H / 2.0) + v
    feats = _sample_feature_stack(refs.feature_stack, H, W, u, v)
    feats = feats * valid.astype(np.float64)[..., None]
    return feats, offsets
