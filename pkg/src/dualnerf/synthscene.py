"""Procedural talking-scene generator with an analytic rendering oracle.

A scene is a head sphere with two ear lobes (static, identity-tinted
albedo) and a mouth ellipsoid whose vertical aperture is an affine
function of a scalar phoneme signal phi(t) in [0, 1].  Frames are
ray-traced analytically (sphere/ellipsoid intersection, Lambertian
shading, fixed light), so ground-truth images and region masks are exact.

Dataset directory layout:
    frames/%05d.png   8-bit RGB frames
    masks/%05d.png    binary audio-related region (mouth) masks
    poses.csv         row-major 3x4 projection matrix per line
    audio.csv         frame index + audio feature floats per line
    spec.json         full scene spec echo plus generation metadata
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .cameras import Camera, intrinsics, look_at
from .errors import ValidationError

log = logging.getLogger(__name__)

# Fixed basis for lifting the phoneme scalar to audio feature space; this
# plays the role of a frozen pretrained audio encoder and is shared by all
# identities and datasets.
_AUDIO_BASIS_SEED = 0xA0D10

_LIGHT = np.array([0.4, 0.5, 1.0]) / np.linalg.norm([0.4, 0.5, 1.0])


@dataclass
class SceneSpec:
    """Parameters of one synthetic talking scene."""

    identity_seed: int = 0
    image_size: int = 32
    frames: int = 200
    audio_dim: int = 16
    orbit_radius: float = 3.0
    azimuth_deg: float = 35.0
    elevation_deg: float = 12.0
    azimuth_period: float = 40.0
    elevation_period: float = 23.0
    phi_period: float = 17.0
    phi_offset: float = 0.5
    phi_amplitude: float = 0.5
    aperture_base: float = 0.10
    aperture_gain: float = 0.30
    frame_half_extent: float = 1.45

    def validate(self):
        if self.orbit_radius <= 0:
            raise ValidationError("SceneSpec: camera orbit radius must be positive")
        if self.frames < 2:
            raise ValidationError(
                f"SceneSpec: need at least 2 frames for a train/test split, got {self.frames}")
        if self.image_size < 4:
            raise ValidationError("SceneSpec: image size too small")

    @property
    def focal(self):
        return (self.image_size / 2.0) * self.orbit_radius / self.frame_half_extent

    @property
    def near(self):
        return self.orbit_radius - 1.6

    @property
    def far(self):
        return self.orbit_radius + 1.6

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


def audio_feature(phi, dim=16):
    """Lift phi in [0, 1] to a fixed pseudo audio feature vector.

    The lift is a frozen random projection of (phi, phi^2, sin 2*pi*phi,
    cos 2*pi*phi); it is injective on [0, 1] and feature distance grows
    with |phi1 - phi2| on the base vector.
    """
    phi = float(phi)
    if phi < 0.0 or phi > 1.0:
        log.warning("audio_feature: phi=%g outside [0,1], clamping", phi)
        phi = min(max(phi, 0.0), 1.0)
    base = np.array([phi, phi * phi, np.sin(2 * np.pi * phi), np.cos(2 * np.pi * phi)])
    return _audio_basis(dim) @ base


def _audio_basis(dim):
    rng = np.random.default_rng(_AUDIO_BASIS_SEED)
    return 0.8 * rng.standard_normal((dim, 4))


# -- geometry --------------------------------------------------------------

def _identity_albedos(identity_seed):
    rng = np.random.default_rng(identity_seed)
    head = 0.45 + 0.45 * rng.random(3)
    ears = 0.35 + 0.45 * rng.random(3)
    mouth = np.array([0.45 + 0.30 * rng.random(),
                      0.06 + 0.10 * rng.random(),
                      0.06 + 0.10 * rng.random()])
    return head, ears, mouth


_HEAD_C = np.zeros(3)
_HEAD_R = 1.0
_EAR_R = 0.28
_EAR_L_C = np.array([-0.95, 0.15, 0.0])
_EAR_R_C = np.array([0.95, 0.15, 0.0])
_MOUTH_C = np.array([0.0, -0.42, 0.92])
_MOUTH_AX = 0.45
_MOUTH_AZ = 0.22


def _intersect_sphere(origin, dirs, center, radius):
    """Nearest positive hit depth per ray, +inf where missed."""
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    t = np.full(dirs.shape[:-1], np.inf)
    hit = disc >= 0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - root
    ok = hit & (t_near > 1e-6)
    t[ok] = t_near[ok]
    return t


def _intersect_ellipsoid(origin, dirs, center, semi):
    """Hit depth for an axis-aligned ellipsoid via anisotropic rescaling."""
    semi = np.asarray(semi, dtype=np.float64)
    o = (origin - center) / semi
    d = dirs / semi
    a = np.sum(d * d, axis=-1)
    b = d @ o
    c = o @ o - 1.0
    disc = b * b - a * c
    t = np.full(dirs.shape[:-1], np.inf)
    hit = disc >= 0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - root) / a
    ok = hit & (t_near > 1e-6)
    t[ok] = t_near[ok]
    return t


def mouth_semi_axes(spec, phi):
    ay = spec.aperture_base + spec.aperture_gain * float(phi)
    return np.array([_MOUTH_AX, ay, _MOUTH_AZ])


def camera_for_frame(spec, index, phases=(0.0, 0.0)):
    az = np.deg2rad(spec.azimuth_deg) * np.sin(2 * np.pi * index / spec.azimuth_period + phases[0])
    el = np.deg2rad(spec.elevation_deg) * np.sin(2 * np.pi * index / spec.elevation_period + phases[1])
    pos = spec.orbit_radius * np.array([np.sin(az) * np.cos(el), np.sin(el),
                                        np.cos(az) * np.cos(el)])
    R, t = look_at(pos)
    K = intrinsics(spec.image_size, spec.image_size, spec.focal)
    return Camera(K=K, R=R, t=t, width=spec.image_size, height=spec.image_size)


def phi_for_frame(spec, index, phase=0.0):
    phi = spec.phi_offset + spec.phi_amplitude * np.sin(2 * np.pi * index / spec.phi_period + phase)
    return float(np.clip(phi, 0.0, 1.0))


def oracle_render(spec, camera, phi):
    """Analytic ray-traced (image, mouth mask) for one pose and phi.

    Independent of the neural pipeline: intersection and shading live only
    here, so this is the ground-truth oracle the learned renderer is
    checked against.
    """
    H, W = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dirs = camera.pixel_rays(rows.ravel(), cols.ravel())
    origin = camera.position

    head_a, ear_a, mouth_a = _identity_albedos(spec.identity_seed)
    semi = mouth_semi_axes(spec, phi)
    depths = np.stack([
        _intersect_sphere(origin, dirs, _HEAD_C, _HEAD_R),
        _intersect_sphere(origin, dirs, _EAR_L_C, _EAR_R),
        _intersect_sphere(origin, dirs, _EAR_R_C, _EAR_R),
        _intersect_ellipsoid(origin, dirs, _MOUTH_C, semi),
    ], axis=-1)
    prim = np.argmin(depths, axis=-1)
    t_hit = np.min(depths, axis=-1)
    hit = np.isfinite(t_hit)

    img = np.zeros((H * W, 3))
    points = origin + dirs * np.where(hit, t_hit, 1.0)[:, None]
    centers = np.stack([_HEAD_C, _EAR_L_C, _EAR_R_C, _MOUTH_C])
    normals = points - centers[prim]
    is_mouth = prim == 3
    normals[is_mouth] /= semi * semi
    normals /= np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
    albedos = np.stack([head_a, ear_a, ear_a, mouth_a])[prim]
    shade = 0.25 + 0.75 * np.maximum(normals @ _LIGHT, 0.0)
    img[hit] = albedos[hit] * shade[hit, None]

    mask = (is_mouth & hit).reshape(H, W)
    return np.clip(img, 0.0, 1.0).reshape(H, W, 3), mask


def _quantize(img):
    return np.round(img * 255.0).astype(np.uint8)


@dataclass
class SceneDataset:
    """Generated frames plus everything needed to train and evaluate."""

    spec: SceneSpec
    seed: int
    images: np.ndarray    # [F, H, W, 3] float64 in [0, 1], 8-bit quantized
    masks: np.ndarray     # [F, H, W] bool, audio-related region
    cameras: list         # [F] Camera
    audio: np.ndarray     # [F, audio_dim]
    phis: np.ndarray      # [F]

    def __len__(self):
        return len(self.images)

    @property
    def train_indices(self):
        return list(range(len(self.images) // 2))

    @property
    def test_indices(self):
        return list(range(len(self.images) // 2, len(self.images)))

    def validate(self):
        n = len(self.images)
        if not (len(self.masks) == len(self.cameras) == len(self.audio) == len(self.phis) == n):
            raise ValidationError("SceneDataset: per-frame arrays are not length-aligned")
        if self.masks.dtype != bool:
            raise ValidationError("SceneDataset: masks must be binary")

    def save(self, outdir):
        os.makedirs(os.path.join(outdir, "frames"), exist_ok=True)
        os.makedirs(os.path.join(outdir, "masks"), exist_ok=True)
        for i, (img, mask) in enumerate(zip(self.images, self.masks)):
            Image.fromarray(_quantize(img)).save(os.path.join(outdir, "frames", f"{i:05d}.png"))
            Image.fromarray((mask * np.uint8(255))).save(os.path.join(outdir, "masks", f"{i:05d}.png"))
        with open(os.path.join(outdir, "poses.csv"), "w") as fh:
            for cam in self.cameras:
                fh.write(",".join(f"{v:.17g}" for v in cam.projection.ravel()) + "\n")
        with open(os.path.join(outdir, "audio.csv"), "w") as fh:
            for i, feat in enumerate(self.audio):
                fh.write(",".join([str(i)] + [f"{v:.17g}" for v in feat]) + "\n")
        meta = {"spec": self.spec.to_dict(), "seed": self.seed,
                "phis": [float(p) for p in self.phis],
                "focal": self.spec.focal, "near": self.spec.near, "far": self.spec.far}
        with open(os.path.join(outdir, "spec.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(os.path.join(path, "spec.json")) as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"not a dataset directory: {path}")
        spec = SceneSpec.from_dict(meta["spec"])
        frames_dir = os.path.join(path, "frames")
        count = len(os.listdir(frames_dir))
        images, masks = [], []
        for i in range(count):
            images.append(np.asarray(Image.open(os.path.join(frames_dir, f"{i:05d}.png")),
                                     dtype=np.float64) / 255.0)
            masks.append(np.asarray(Image.open(os.path.join(path, "masks", f"{i:05d}.png"))) > 127)
        P = np.loadtxt(os.path.join(path, "poses.csv"), delimiter=",").reshape(count, 3, 4)
        K = intrinsics(spec.image_size, spec.image_size, spec.focal)
        cameras = [Camera.from_projection(P[i], K, spec.image_size, spec.image_size)
                   for i in range(count)]
        audio_rows = np.loadtxt(os.path.join(path, "audio.csv"), delimiter=",", ndmin=2)
        ds = cls(spec=spec, seed=meta["seed"], images=np.stack(images),
                 masks=np.stack(masks), cameras=cameras,
                 audio=audio_rows[:, 1:], phis=np.asarray(meta["phis"]))
        ds.validate()
        return ds


def generate(spec, seed=0):
    """Deterministically generate a SceneDataset from a spec and seed.

    The seed drives the orbit and phoneme phases only; the identity seed
    inside the spec drives albedo.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    images, masks, cameras, audio, phis = [], [], [], [], []
    for i in range(spec.frames):
        cam = camera_for_frame(spec, i, phases[:2])
        phi = phi_for_frame(spec, i, phases[2])
        img, mask = oracle_render(spec, cam, phi)
        images.append(_quantize(img) / 255.0)
        masks.append(mask)
        cameras.append(cam)
        audio.append(audio_feature(phi, spec.audio_dim))
        phis.append(phi)
    ds = SceneDataset(spec=spec, seed=seed, images=np.stack(images), masks=np.stack(masks),
                      cameras=cameras, audio=np.stack(audio), phis=np.asarray(phis))
    ds.validate()
    return ds
