"""Losses, optimizer, model assembly, training loop, and checkpoints.

The model couples a shared feature extractor and warper with two
aggregator/field pairs: the audio-associated pair is conditioned on the
target audio (cross-attention aggregation), the audio-independent pair
never sees audio at all.  Coarse and fine passes use separate field
networks but share the aggregators.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import autodiff as ad
from . import rendering as rnd
from .autodiff import Tensor
from .errors import ContractError, NumericError, ShapeError, ValidationError
from .fields import FieldNet
from .nn import named_params


# -- configuration ---------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_rays: int = 40
    lr: float = 5e-4
    decay_gamma: float = 0.1
    decay_steps: int = 50000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.0      # 0 disables clipping
    epsilon: float = 0.4            # overlap fraction for ray routing
    n_refs: int = 4
    n_coarse: int = 24
    n_fine: int = 48
    lambda_m: float = 1e-3
    lambda_o: float = 5e-8
    seed: int = 0
    phase: str = "pretrain"         # pretrain | finetune
    mouth_fraction: float = 0.5     # share of batch rays drawn inside the mask
    no_rrs: bool = False
    no_aaa: bool = False
    no_warper: bool = False
    single_field: bool = False
    renormalize_masks: bool = True
    checkpoint_every: int = 0       # 0: final checkpoint only
    # model sizes
    audio_dim: int = 16
    feat_channels: tuple = (3, 16, 64)
    attn_dim: int = 128
    attn_heads: int = 4
    attn_blocks: int = 2
    ffn_hidden: int = 128
    field_width: int = 128
    field_depth: int = 4
    pos_freqs: int = 10
    dir_freqs: int = 4
    warper_hidden: int = 64

    def validate(self):
        if self.lambda_m < 0 or self.lambda_o < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.phase not in ("pretrain", "finetune"):
            raise ValidationError(f"unknown phase {self.phase!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError(f"epsilon {self.epsilon} outside [0, 1]")

    def to_text(self):
        lines = []
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"bad config line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in dc_fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(val, known[key].type, key)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _coerce(val, typ, key):
    if not isinstance(val, str):
        return val
    typ = str(typ)
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "bool":
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if typ == "tuple":
            return tuple(int(x) for x in val.split(","))
        return val
    except ValueError as e:
        raise ValidationError(f"bad value for config key {key!r}: {val!r}") from e


# -- model -----------------------------------------------------------------

class Model:
    """The full dual-field model plus shared conditioning machinery."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        feat_dim = cfg.feat_channels[-1]
        self.extractor = agg.FeatureExtractor(rng, cfg.feat_channels)
        self.warper = None if cfg.no_warper else agg.Warper(
            rng, cfg.audio_dim, cfg.warper_hidden)
        if cfg.no_aaa:
            self.agg_aa = agg.MeanAggregator(rng, feat_dim, cfg.attn_dim)
        else:
            self.agg_aa = agg.AudioAggregator(
                rng, cfg.audio_dim, feat_dim, cfg.attn_dim, cfg.attn_heads,
                cfg.attn_blocks, cfg.ffn_hidden)
        self.agg_ai = None if cfg.single_field else agg.MeanAggregator(
            rng, feat_dim, cfg.attn_dim)

        def make_field(audio_dim):
            return FieldNet(rng, feat_dim=cfg.attn_dim, audio_dim=audio_dim,
                            depth=cfg.field_depth, width=cfg.field_width,
                            pos_freqs=cfg.pos_freqs, dir_freqs=cfg.dir_freqs)

        self.fields = {"aa_coarse": make_field(cfg.audio_dim),
                       "aa_fine": make_field(cfg.audio_dim)}
        if not cfg.single_field:
            self.fields["ai_coarse"] = make_field(None)
            self.fields["ai_fine"] = make_field(None)

        self.eval_points = 0          # field forward calls, in point units
        self.last_attention = None    # [L] scores from the latest aa query
        self._refs = None
        self._audio = None
        self._gather = {}             # field kind -> (x array, features)
        self._offsets = []

    def modules(self):
        out = {"extractor": self.extractor, "agg_aa": self.agg_aa}
        if self.warper is not None:
            out["warper"] = self.warper
        if self.agg_ai is not None:
            out["agg_ai"] = self.agg_ai
        for key, net in self.fields.items():
            out[f"field_{key}"] = net
        return out

    def parameters(self):
        return named_params(self.modules())

    def prepare(self, refs, audio):
        """Bind the reference set and target audio for subsequent queries."""
        refs.extract(self.extractor)
        self._refs = refs
        self._audio = np.asarray(audio, dtype=np.float64)
        self._gather = {}

    def begin_step(self):
        self._offsets = []
        self._gather = {}

    def collected_offsets(self):
        return self._offsets

    def reset_eval_counter(self):
        self.eval_points = 0

    def query(self, field_key, x, d):
        """Per-sample field evaluation used by the renderer.

        The aa path samples references at audio-warped projections; the
        ai path always uses the plain projections, so no audio signal can
        reach the audio-independent field through its conditioning.
        """
        if self._refs is None:
            raise ContractError("query before prepare()")
        which = field_key.split("_")[0]
        cached = self._gather.get(which)
        if cached is not None and cached[0] is x:
            f_refs = cached[1]
        else:
            warper = self.warper if which == "aa" else None
            f_refs, offsets = agg.gather_reference_features(
                self._refs, x, d, self._audio, warper)
            self._gather[which] = (x, f_refs)
            if offsets is not None:
                self._offsets.append(offsets)
        aggregator = self.agg_aa if which == "aa" else self.agg_ai
        f_tilde, attn = aggregator(self._audio, self._refs.audio, f_refs)
        if which == "aa":
            self.last_attention = agg.mean_attention_scores(attn)
        net = self.fields[field_key]
        self.eval_points += x.shape[0]
        if net.conditioned_on_audio:
            return net(x, d, f_tilde, self._audio)
        return net(x, d, f_tilde)


# -- losses ----------------------------------------------------------------

def loss_photometric(pred_coarse, pred_fine, gt):
    """Sum of squared color errors of both passes over the ray batch."""
    gt = np.asarray(gt, dtype=np.float64)
    total = None
    for pred in (pred_coarse, pred_fine):
        if pred is None:
            continue
        if pred.data.shape != gt.shape:
            raise ShapeError(f"prediction {pred.data.shape} vs target {gt.shape}")
        d = pred - gt
        sq = (d * d).sum()
        total = sq if total is None else total + sq
    return total


def mask_targets(regions, which):
    """Binary mask target per ray: the aa field should claim the audio
    region, the ai field the static region."""
    regions = np.asarray(regions)
    if (regions == rnd.REGION_UNKNOWN).any():
        raise ContractError("mask loss needs region labels (unknown found)")
    audio = (regions == rnd.REGION_AUDIO).astype(np.float64)
    return audio if which == "aa" else 1.0 - audio


def loss_mask(m_hat_coarse, m_hat_fine, regions, which):
    """Squared error of the rendered mask against its binary target."""
    t = mask_targets(regions, which)
    total = None
    for m in (m_hat_coarse, m_hat_fine):
        if m is None:
            continue
        d = m - t
        sq = (d * d).sum()
        total = sq if total is None else total + sq
    return total


def loss_offset(offsets):
    """Mean Euclidean norm of the warper offsets over points x references."""
    if isinstance(offsets, (list, tuple)):
        if not offsets:
            return None
        offsets = offsets[0] if len(offsets) == 1 else ad.concat(
            [o.reshape((-1, 2)) for o in offsets], axis=0)
    return ad.norm2(offsets[..., 0], offsets[..., 1]).mean()


@dataclass
class LossBreakdown:
    total: Tensor
    photometric: float
    mask: float
    offset: float


def total_loss(lp, lm, lo, lambda_m, lambda_o):
    """L = L_p + lambda_m * L_m + lambda_o * L_o, with parts logged."""
    total = lp
    if lm is not None:
        total = total + lm * lambda_m
    if lo is not None:
        total = total + lo * lambda_o
    return LossBreakdown(total=total,
                         photometric=float(lp.data),
                         mask=0.0 if lm is None else float(lm.data),
                         offset=0.0 if lo is None else float(lo.data))


# -- optimizer -------------------------------------------------------------

class Adam:
    """Adam with exponentially decayed learning rate lr0 * gamma^(t/T)."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 gamma=0.1, decay_steps=50000, max_grad_norm=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.gamma, self.decay_steps = gamma, decay_steps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def current_lr(self):
        return self.lr * self.gamma ** (self.t / self.decay_steps)

    def step(self):
        self.t += 1
        lr_t = self.current_lr()
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        if self.max_grad_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr_t * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {"opt.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["opt.t"][0])
        for k in self.params:
            self.m[k] = arrays[f"opt.m.{k}"].copy()
            self.v[k] = arrays[f"opt.v.{k}"].copy()


# -- checkpoint container --------------------------------------------------

CKPT_MAGIC = b"DNRF"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    rng_state: dict
    arrays: dict


def save_checkpoint(path, params, optimizer, config_text, rng, iteration):
    """Little-endian container: magic, version, config text, iteration,
    RNG state (JSON), then named float64 arrays with shape headers."""
    arrays = {f"param.{k}": p.data for k, p in params.items()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    rng_json = json.dumps(rng.bit_generator.state if rng is not None else {})
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        for text in (config_text, rng_json):
            blob = text.encode("utf-8")
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
        f.write(struct.pack("<Q", iteration))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        texts = []
        for _ in range(2):
            (n,) = struct.unpack("<Q", f.read(8))
            texts.append(f.read(n).decode("utf-8"))
        (iteration,) = struct.unpack("<Q", f.read(8))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", f.read(2))
            name = f.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(
                f.read(8 * size), dtype="<f8").reshape(shape).copy()
    return Checkpoint(config_text=texts[0], iteration=iteration,
                      rng_state=json.loads(texts[1]), arrays=arrays)


def restore_model(ckpt, model, optimizer=None):
    """Load parameter (and optionally optimizer) arrays into place."""
    params = model.parameters()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in ckpt.arrays:
            raise ValidationError(f"checkpoint missing parameter {name}")
        if ckpt.arrays[key].shape != p.data.shape:
            raise ValidationError(
                f"checkpoint parameter {name} has shape {ckpt.arrays[key].shape}, "
                f"model expects {p.data.shape}")
        p.data[...] = ckpt.arrays[key]
    if optimizer is not None and "opt.t" in ckpt.arrays:
        optimizer.load_state_arrays(ckpt.arrays)


def build_model(cfg):
    """Model with parameters seeded solely by cfg.seed."""
    return Model(cfg, np.random.default_rng([cfg.seed, 0xD0E]))


def loop_rng(cfg):
    """The training-loop RNG, independent of the init stream."""
    return np.random.default_rng([cfg.seed, 0x10075])


# -- training step and loop ------------------------------------------------

def sample_ray_batch(ds, frame, cfg, rng):
    """Balanced pixel sample: about mouth_fraction of the batch inside
    the ground-truth mask (the audio region is tiny, uniform sampling
    would starve it)."""
    mask = ds.masks[frame]
    inside = np.argwhere(mask)
    outside = np.argwhere(~mask)
    n_in = int(round(cfg.batch_rays * cfg.mouth_fraction))
    n_in = min(n_in, len(inside))
    n_out = cfg.batch_rays - n_in
    picks = []
    if n_in:
        picks.append(inside[rng.choice(len(inside), n_in, replace=False)])
    picks.append(outside[rng.choice(len(outside), n_out,
                                    replace=len(outside) < n_out)])
    pixels = np.concatenate(picks, axis=0)
    return rnd.generate_rays(ds.cameras[frame], pixels, ds.spec.near,
                             ds.spec.far, mask=mask)


def choose_references(ds, frame, n_refs, rng):
    pool = np.array([i for i in ds.train_indices if i != frame])
    if len(pool) < n_refs:
        raise ValidationError(
            f"need {n_refs} reference frames, only {len(pool)} available")
    idx = pool[rng.choice(len(pool), n_refs, replace=False)]
    return agg.ReferenceSet.from_dataset(ds, idx)


def train_step(model, optimizer, cfg, datasets, rng):
    """One optimization step; returns the loss breakdown."""
    ds = datasets[int(rng.integers(len(datasets)))]
    frame = ds.train_indices[int(rng.integers(len(ds.train_indices)))]
    refs = choose_references(ds, frame, cfg.n_refs, rng)
    rays = sample_ray_batch(ds, frame, cfg, rng)
    gt = ds.images[frame][rays.pixels[:, 0], rays.pixels[:, 1]]

    model.prepare(refs, ds.audio[frame])
    model.begin_step()

    all_idx = np.arange(len(rays))
    if cfg.single_field:
        groups = [(rnd.ROUTE_AA, all_idx)]
    elif cfg.no_rrs:
        groups = [(rnd.ROUTE_OVERLAP, all_idx)]
    else:
        audio_idx = all_idx[rays.regions == rnd.REGION_AUDIO]
        static_idx = all_idx[rays.regions == rnd.REGION_STATIC]
        part = rnd.partition(audio_idx, static_idx, cfg.epsilon, rng)
        groups = [(rnd.ROUTE_OVERLAP, part.overlap), (rnd.ROUTE_AA, part.aa),
                  (rnd.ROUTE_AI, part.ai)]

    lp = lm = None
    for route, idx in groups:
        if idx.size == 0:
            continue
        sub = rays.select(idx)
        coarse, fine = rnd.render_route(model, sub, route, cfg.n_coarse,
                                        cfg.n_fine, rng,
                                        renormalize=cfg.renormalize_masks)
        lp_g = loss_photometric(coarse.c_hat,
                                None if fine is None else fine.c_hat, gt[idx])
        lp = lp_g if lp is None else lp + lp_g
        for which, c_m, f_m in (("aa", coarse.m_aa_hat,
                                 None if fine is None else fine.m_aa_hat),
                                ("ai", coarse.m_ai_hat,
                                 None if fine is None else fine.m_ai_hat)):
            if c_m is None:
                continue
            lm_g = loss_mask(c_m, f_m, sub.regions, which)
            lm = lm_g if lm is None else lm + lm_g
    lo = loss_offset(model.collected_offsets())
    breakdown = total_loss(lp, lm, lo, cfg.lambda_m, cfg.lambda_o)
    optimizer.zero_grad()
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def train(cfg, datasets, out_dir, base_checkpoint=None, start_iteration=0,
          model=None, optimizer=None, rng=None, callback=None):
    """Run the training loop, writing metrics.csv and checkpoints.

    Passing model/optimizer/rng explicitly (e.g. restored from a
    checkpoint) continues an interrupted run; otherwise everything is
    rebuilt from cfg.seed.
    """
    cfg.validate()
    if cfg.phase == "finetune" and base_checkpoint is None and model is None:
        raise ValidationError("finetune phase needs a base checkpoint")
    for ds in datasets:
        ds.validate()
        if len(ds.train_indices) <= cfg.n_refs:
            raise ValidationError(
                f"dataset has {len(ds.train_indices)} training frames, "
                f"not enough for {cfg.n_refs} references plus a target")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())

    if model is None:
        model = build_model(cfg)
        params = model.parameters()
        optimizer = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                         eps=cfg.adam_eps, gamma=cfg.decay_gamma,
                         decay_steps=cfg.decay_steps,
                         max_grad_norm=cfg.max_grad_norm)
        rng = loop_rng(cfg)
        if base_checkpoint is not None:
            ckpt = load_checkpoint(base_checkpoint)
            restore_model(ckpt, model)   # fresh optimizer/RNG for the new run
    params = model.parameters()

    metrics_path = out_dir / "metrics.csv"
    fresh = start_iteration == 0 or not metrics_path.exists()
    mode = "w" if fresh else "a"
    t0 = time.monotonic()
    losses = []
    with open(metrics_path, mode) as log:
        if fresh:
            log.write("iteration,loss_p,loss_m,loss_o,total,lr,seconds\n")
        for it in range(start_iteration + 1, cfg.iterations + 1):
            breakdown = train_step(model, optimizer, cfg, datasets, rng)
            losses.append(float(breakdown.total.data))
            log.write(f"{it},{breakdown.photometric:.17g},"
                      f"{breakdown.mask:.17g},{breakdown.offset:.17g},"
                      f"{losses[-1]:.17g},{optimizer.current_lr():.17g},"
                      f"{time.monotonic() - t0:.3f}\n")
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{it:06d}.ckpt", params,
                                optimizer, cfg.to_text(), rng, it)
            if callback is not None:
                callback(it, model, breakdown)
    save_checkpoint(out_dir / "final.ckpt", params, optimizer, cfg.to_text(),
                    rng, cfg.iterations)
    return model, optimizer, rng, losses
