"""Gradient verification matrix.

Every differentiable layer of the engine is checked against central
differences: primitive ops, the conditioning modules, the field MLP, the
compositing math, and one small end-to-end training loss.  Shared by the
``gradcheck`` CLI command and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aggregation as agg
from . import autodiff as ad
from . import rendering as rnd
from . import synthscene as ss
from . import training as tr
from .autodiff import Tensor
from .fields import FieldNet, FieldSample
from .nn import named_params

SCOPES = ("primitives", "modules", "fields", "rendering", "e2e")

PRIMITIVE_TOL = 1e-5
COMPOSED_TOL = 1e-4   # float64 FD roundoff dominates for deep compositions


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self):
        return np.isfinite(self.max_err) and self.max_err < self.tol


def _run(name, loss, params, tol, h=1e-5):
    report = ad.gradcheck(loss, list(params), h=h)
    return CheckResult(name, report.max_err, tol)


# -- primitive ops ---------------------------------------------------------

def check_primitives(seed=0):
    rng = np.random.default_rng(seed)

    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    results = []
    cases = [
        ("add_broadcast", lambda a, b: (a + b).sum(), [t((3, 4)), t(4)]),
        ("sub", lambda a, b: (a - b).sum(), [t((2, 3)), t((2, 3))]),
        ("mul_broadcast", lambda a, b: (a * b).sum(), [t((3, 1, 2)), t((4, 2))]),
        ("div", lambda a, b: (a / b).sum(), [t((3, 3)), t((3, 3), 0.5, 2.0)]),
        ("neg", lambda a: (-a).sum(), [t(5)]),
        ("exp", lambda a: ad.exp(a).sum(), [t(6)]),
        ("log", lambda a: ad.log(a).sum(), [t(6, 0.5, 2.0)]),
        ("sqrt", lambda a: ad.sqrt(a).sum(), [t(6, 0.5, 2.0)]),
        # keep relu inputs away from the kink, FD straddles it otherwise
        ("relu", lambda a: ad.relu(a).sum(), [Tensor(
            rng.choice([-1.0, 1.0], 8) * rng.uniform(0.3, 1.0, 8),
            requires_grad=True)]),
        ("sigmoid", lambda a: ad.sigmoid(a).sum(), [t(6, -3, 3)]),
        ("softplus", lambda a: ad.softplus(a).sum(), [t(6, -3, 3)]),
        ("sin", lambda a: ad.sin(a).sum(), [t(6, -3, 3)]),
        ("cos", lambda a: ad.cos(a).sum(), [t(6, -3, 3)]),
        ("tanh", lambda a: ad.tanh(a).sum(), [t(6, -2, 2)]),
        ("matmul", lambda a, b: ad.matmul(a, b).sum(), [t((3, 4)), t((4, 2))]),
        ("matmul_batched", lambda a, b: ad.matmul(a, b).sum(),
         [t((2, 3, 4)), t((2, 4, 2))]),
        ("sum_axis", lambda a, w=rng.standard_normal(3):
         (ad.tsum(a, axis=1) * w).sum(), [t((3, 4))]),
        ("mean_keepdims", lambda a: ad.tmean(a, axis=-1, keepdims=True).sum(),
         [t((3, 4))]),
        ("reshape_transpose", lambda a: ad.transpose(
            a.reshape((3, 2, 2)), (1, 0, 2)).sum(), [t((6, 2))]),
        ("concat", lambda a, b: ad.concat([a, b], axis=0).sum(),
         [t((2, 3)), t((4, 3))]),
        ("getitem_basic", lambda a: a[1:3, ::2].sum(), [t((4, 5))]),
        ("getitem_fancy", lambda a: a[np.array([0, 2, 2, 1])].sum(), [t((3, 4))]),
        ("gather2d", lambda a: ad.gather2d(
            a, np.array([0, 2, 2]), np.array([1, 1, 3])).sum(), [t((3, 4, 2))]),
        ("pad_hw", lambda a: (ad.pad_hw(a, 1) * 1.0).sum(), [t((3, 3, 2))]),
        ("cumsum", lambda a: ad.cumsum(a, axis=1).sum(), [t((2, 5))]),
        ("cumsum_exclusive", lambda a: ad.cumsum(a, axis=-1, exclusive=True).sum(),
         [t((2, 5))]),
        ("softmax", lambda a, w=rng.standard_normal((3, 4)):
         (ad.softmax(a, axis=-1) * w).sum(), [t((3, 4))]),
        ("norm2", lambda u, v: ad.norm2(u, v).sum(),
         [t(5, 0.2, 1.0), t(5, 0.2, 1.0)]),
        ("layer_norm", lambda x, g, b, w=rng.standard_normal((2, 6)):
         (ad.layer_norm(x, g, b) * w).sum(),
         [t((2, 6)), t(6, 0.5, 1.5), t(6)]),
        ("linear", lambda x, w, b: ad.linear(x, w, b).sum(),
         [t((3, 4)), t((4, 2)), t(2)]),
    ]
    for name, fn, params in cases:
        # weight the output so cancellation can't hide a wrong sign
        results.append(_run(name, lambda fn=fn, params=params: fn(*params),
                            params, PRIMITIVE_TOL))
    return results


# -- conditioning modules --------------------------------------------------

def check_modules(seed=0):
    rng = np.random.default_rng(seed)
    results = []

    ex = agg.FeatureExtractor(rng, channels=(2, 3, 4))
    img = rng.random((4, 4, 2))
    w = rng.standard_normal((4, 4, 4))
    results.append(_run("feature_extractor",
                        lambda: (ex(img) * w).sum(),
                        named_params({"ex": ex}).values(), PRIMITIVE_TOL))

    warper = agg.Warper(rng, audio_dim=3, hidden=6, zero_init=False)
    fmap = Tensor(rng.random((5, 5, 2)))
    x = rng.standard_normal((3, 3))
    d = rng.standard_normal((3, 3))
    a = rng.standard_normal(3)
    a_refs = rng.standard_normal((2, 3))
    d_refs = rng.standard_normal((3, 2, 3))
    wmix = rng.standard_normal((3, 2))
    base_u = rng.uniform(1, 4, 3)
    base_v = rng.uniform(1, 4, 3)

    def warp_loss():
        off = warper(x, d, a, a_refs, d_refs)
        u = off[:, 0, 0] * 2.5 + base_u
        v = off[:, 0, 1] * 2.5 + base_v
        return (agg.sample_features(fmap, u, v) * wmix).sum()

    results.append(_run("warper_through_sampling", warp_loss,
                        named_params({"warper": warper}).values(),
                        PRIMITIVE_TOL))

    attn = agg.AudioAggregator(rng, audio_dim=3, feat_dim=4, dim=8, heads=2,
                               blocks=2, ffn_hidden=8)
    f_refs = rng.random((2, 2, 4))
    amix = rng.standard_normal((2, 8))
    results.append(_run(
        "audio_aggregator",
        lambda: (attn(a, a_refs, Tensor(f_refs))[0] * amix).sum(),
        named_params({"agg": attn}).values(), COMPOSED_TOL, h=1e-4))

    mean = agg.MeanAggregator(rng, feat_dim=4, dim=8)
    results.append(_run(
        "mean_aggregator",
        lambda: (mean(a, a_refs, Tensor(f_refs))[0] * amix).sum(),
        named_params({"mean": mean}).values(), PRIMITIVE_TOL))
    return results


# -- field MLP -------------------------------------------------------------

def check_fields(seed=0):
    rng = np.random.default_rng(seed)
    net = FieldNet(rng, feat_dim=6, audio_dim=3, depth=2, width=8,
                   pos_freqs=2, dir_freqs=1)
    n = 3
    x = rng.uniform(-1, 1, (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    f_tilde = Tensor(rng.standard_normal((n, 6)))
    a = rng.standard_normal(3)
    wc = rng.standard_normal((n, 3))
    ws = rng.standard_normal(n)
    wm = rng.standard_normal(n)

    def loss():
        s = net(x, d, f_tilde, a)
        return (s.c * wc).sum() + (s.sigma * ws).sum() + (s.m * wm).sum()

    return [_run("field_net", loss, named_params({"net": net}).values(),
                 PRIMITIVE_TOL)]


# -- blending and compositing ----------------------------------------------

def check_rendering(seed=0):
    rng = np.random.default_rng(seed)
    depths = np.sort(rng.uniform(0.5, 2.0, (2, 4)), axis=1)
    w = rng.standard_normal((2, 3))
    params = [Tensor(rng.standard_normal(shape) * 0.5, requires_grad=True,
                     name=f"{tag}{sfx}")
              for tag in ("aa", "ai")
              for sfx, shape in (("_c", (2, 4, 3)), ("_s", (2, 4)),
                                 ("_m", (2, 4)))]

    def loss():
        aa = FieldSample(ad.sigmoid(params[0]), ad.softplus(params[1]),
                         ad.sigmoid(params[2]))
        ai = FieldSample(ad.sigmoid(params[3]), ad.softplus(params[4]),
                         ad.sigmoid(params[5]))
        out = rnd.volume_render(depths, 2.0,
                                rnd.blend(aa, ai, rnd.ROUTE_OVERLAP))
        return ((out.c_hat * w).sum() + out.m_aa_hat.sum()
                + out.m_ai_hat.sum())

    return [_run("blend_volume_render", loss, params, PRIMITIVE_TOL)]


# -- end-to-end training loss ----------------------------------------------

def micro_e2e_setup(seed=0):
    """Two-ray training loss over a tiny scene and model.

    Hierarchical resampling is off (its bin selection is not FD-smooth);
    the fine networks are exercised at a second fixed set of depths.
    """
    ds = ss.generate(ss.SceneSpec(image_size=8, frames=8, audio_dim=4),
                     seed=3)
    cfg = tr.TrainConfig(
        batch_rays=2, n_refs=2, n_coarse=3, n_fine=0, seed=seed,
        audio_dim=4, feat_channels=(3, 3, 4), attn_dim=8, attn_heads=2,
        attn_blocks=2, ffn_hidden=8, field_width=8, field_depth=2,
        pos_freqs=2, dir_freqs=1, warper_hidden=6)
    model = tr.build_model(cfg)
    # nudge the warper off its zero init: offsets at the origin sit on the
    # norm kink where central differences disagree with the subgradient
    rng = np.random.default_rng(seed + 11)
    l3 = model.warper.l3
    l3.w.data += 0.02 * rng.standard_normal(l3.w.data.shape)
    l3.b.data += 0.02 * rng.standard_normal(l3.b.data.shape)
    # likewise shift the conv biases: a pre-activation within h of a relu
    # kink makes the central difference straddle the corner
    for b in model.extractor.biases:
        b.data += 0.01 * rng.standard_normal(b.data.shape)

    frame = 0
    refs_idx = [2, 5]
    mouth = np.argwhere(ds.masks[frame])
    pixels = np.array([mouth[len(mouth) // 2], [1, 1]])
    rays = rnd.generate_rays(ds.cameras[frame], pixels, ds.spec.near,
                             ds.spec.far, mask=ds.masks[frame])
    gt = ds.images[frame][pixels[:, 0], pixels[:, 1]]
    depths_fine = rnd.stratified_samples(ds.spec.near, ds.spec.far,
                                         len(rays), 4)

    def loss():
        model.prepare(agg.ReferenceSet.from_dataset(ds, refs_idx),
                      ds.audio[frame])
        model.begin_step()
        coarse, _ = rnd.render_route(model, rays, rnd.ROUTE_OVERLAP,
                                     cfg.n_coarse, 0, rng=None)
        fine = rnd.render_pass(model, rays, depths_fine, rnd.ROUTE_OVERLAP,
                               "fine", True)
        lp = tr.loss_photometric(coarse.c_hat, fine.c_hat, gt)
        lm = (tr.loss_mask(coarse.m_aa_hat, fine.m_aa_hat, rays.regions, "aa")
              + tr.loss_mask(coarse.m_ai_hat, fine.m_ai_hat, rays.regions,
                             "ai"))
        lo = tr.loss_offset(model.collected_offsets())
        return lp + cfg.lambda_m * lm + 1e-3 * lo

    return model, loss


def check_e2e(seed=0):
    model, loss = micro_e2e_setup(seed)
    return [_run("two_ray_training_loss", loss, model.parameters().values(),
                 COMPOSED_TOL, h=1e-4)]


_SCOPE_FNS = {
    "primitives": check_primitives,
    "modules": check_modules,
    "fields": check_fields,
    "rendering": check_rendering,
    "e2e": check_e2e,
}


def run_checks(only=None, seed=0):
    """Run the matrix (optionally one scope); returns list of CheckResult."""
    from .errors import ValidationError

    scopes = SCOPES if only is None else (only,)
    results = []
    for scope in scopes:
        if scope not in _SCOPE_FNS:
            raise ValidationError(
                f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
        results.extend(_SCOPE_FNS[scope](seed))
    return results
