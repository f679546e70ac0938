"""The two radiance field networks.

Each field maps an encoded query point, view direction, and aggregated
reference feature (plus the target audio feature for the audio-associated
field) to color, density, and a parsing-mask logit.  Density passes
through softplus, color and mask through sigmoid, so the output ranges
hold for any finite input.  The audio-independent field has no audio
input at all, so its independence from the audio track is structural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .nn import Dense, Module


def encode(v, num_freq):
    """Sinusoidal positional encoding.

    Returns [raw v, sin(2^k pi v), cos(2^k pi v) for k < num_freq] along
    the last axis; num_freq = 0 returns v unchanged.
    """
    is_tensor = isinstance(v, Tensor)
    if num_freq == 0:
        return v if is_tensor else np.asarray(v, dtype=np.float64)
    if is_tensor:
        parts = [v]
        for k in range(num_freq):
            s = v * (np.pi * 2.0 ** k)
            parts.extend([ad.sin(s), ad.cos(s)])
        return ad.concat(parts, axis=-1)
    v = np.asarray(v, dtype=np.float64)
    parts = [v]
    for k in range(num_freq):
        s = v * (np.pi * 2.0 ** k)
        parts.extend([np.sin(s), np.cos(s)])
    return np.concatenate(parts, axis=-1)


def encoded_dim(in_dim, num_freq):
    return in_dim * (2 * num_freq + 1) if num_freq else in_dim


@dataclass
class FieldSample:
    """Per-query-point prediction: color, density, parsing mask."""

    c: Tensor       # [N, 3] in [0, 1]
    sigma: Tensor   # [N] >= 0
    m: Tensor       # [N] in (0, 1)


class FieldNet(Module):
    """MLP radiance field with density, color, and parsing-mask heads.

    Trunk: ``depth`` ReLU layers of ``width`` units with a skip
    connection re-injecting the input at the midpoint.  The color head
    sees the encoded view direction; the mask head reads the trunk
    feature before direction injection (a semantic label should be view
    independent).
    """

    def __init__(self, rng, feat_dim=128, audio_dim=None, depth=4, width=128,
                 pos_freqs=10, dir_freqs=4):
        self.audio_dim = audio_dim
        self.pos_freqs = pos_freqs
        self.dir_freqs = dir_freqs
        in_dim = encoded_dim(3, pos_freqs) + feat_dim + (audio_dim or 0)
        self.skip_at = depth // 2
        dims = []
        prev = in_dim
        self.trunk = []
        for i in range(depth):
            if i == self.skip_at and i > 0:
                prev += in_dim
            self.trunk.append(Dense(rng, prev, width))
            prev = width
        self.density_head = Dense(rng, width, 1)
        self.mask_head = Dense(rng, width, 1)
        color_in = width + encoded_dim(3, dir_freqs)
        self.color_hidden = Dense(rng, color_in, width // 2)
        self.color_out = Dense(rng, width // 2, 3)

    @property
    def conditioned_on_audio(self):
        return self.audio_dim is not None

    def __call__(self, x, d, f_tilde, a=None):
        """x[N,3], d[N,3] unit view dirs, f_tilde Tensor [N,feat], a[Da].

        The audio-associated variant requires ``a``; the audio-independent
        variant takes none, so its output cannot depend on the audio track.
        """
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        parts = [Tensor(encode(x, self.pos_freqs)), f_tilde]
        if self.conditioned_on_audio:
            if a is None:
                raise ContractError("audio-conditioned field evaluated without audio feature")
            parts.append(Tensor(np.broadcast_to(np.asarray(a, dtype=np.float64), (n, self.audio_dim))))
        inp = ad.concat(parts, axis=-1)
        h = inp
        for i, layer in enumerate(self.trunk):
            if i == self.skip_at and i > 0:
                h = ad.concat([h, inp], axis=-1)
            h = ad.relu(layer(h))
        sigma = ad.softplus(self.density_head(h)).reshape((n,))
        m = ad.sigmoid(self.mask_head(h)).reshape((n,))
        enc_d = Tensor(encode(np.asarray(d, dtype=np.float64), self.dir_freqs))
        ch = ad.relu(self.color_hidden(ad.concat([h, enc_d], axis=-1)))
        c = ad.sigmoid(self.color_out(ch))
        return FieldSample(c=c, sigma=sigma, m=m)

    def zero_output_heads(self):
        """Zero all head parameters (analytic-at-init test hook)."""
        for head in (self.density_head, self.mask_head, self.color_hidden, self.color_out):
            head.w.data[:] = 0.0
            head.b.data[:] = 0.0
