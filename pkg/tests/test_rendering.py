import numpy as np
import pytest
from scipy import stats

from dualnerf import autodiff as ad
from dualnerf import rendering as rnd
from dualnerf import synthscene as ss
from dualnerf.autodiff import Tensor
from dualnerf.errors import ContractError
from dualnerf.fields import FieldSample


@pytest.fixture()
def rng():
    return np.random.default_rng(7)


def forward_camera(size=8, focal=10.0):
    from dualnerf.cameras import Camera, intrinsics
    K = intrinsics(size, size, focal)
    return Camera(K=K, R=np.eye(3), t=np.zeros(3), width=size, height=size)


def ray_hits_box(o, d, half):
    # slab test against the axis-aligned cube [-half, half]^3
    with np.errstate(divide="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2).max()
    hi = np.maximum(t1, t2).min()
    return hi >= max(lo, 0.0)


class TestGenerateRays:
    def test_center_pixel_is_optical_axis(self):
        # odd size: pixel (4,4) center coincides with the principal point
        cam = forward_camera(size=9)
        rays = rnd.generate_rays(cam, [[4, 4]], 0.5, 2.0)
        np.testing.assert_allclose(rays.dirs[0], [0, 0, 1], atol=1e-12)

    def test_adjacent_pixels_one_intrinsic_pixel_apart(self):
        cam = forward_camera(size=9, focal=10.0)
        rays = rnd.generate_rays(cam, [[4, 4], [4, 5]], 0.5, 2.0)
        ang = np.arccos(np.clip(rays.dirs[0] @ rays.dirs[1], -1, 1))
        np.testing.assert_allclose(ang, np.arctan(1.0 / 10.0), atol=1e-12)

    def test_dataset_rays_hit_scene_bounding_box(self):
        spec = ss.SceneSpec(image_size=8, frames=4)
        rows, cols = np.mgrid[0:8, 0:8]
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
        for i in range(4):
            cam = ss.camera_for_frame(spec, i)
            rays = rnd.generate_rays(cam, pixels, spec.near, spec.far)
            for o, d in zip(rays.origins, rays.dirs):
                assert ray_hits_box(o, d, spec.frame_half_extent)

    def test_region_labels_from_mask(self):
        cam = forward_camera(size=4)
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 2] = True
        rays = rnd.generate_rays(cam, [[1, 2], [0, 0]], 0.5, 2.0, mask=mask)
        assert list(rays.regions) == [rnd.REGION_AUDIO, rnd.REGION_STATIC]
        rays = rnd.generate_rays(cam, [[1, 2]], 0.5, 2.0)
        assert rays.regions[0] == rnd.REGION_UNKNOWN


class TestPartition:
    def test_epsilon_zero(self):
        p = rnd.partition(np.arange(10), np.arange(10, 25), 0.0, seed=0)
        assert p.overlap.size == 0
        assert sorted(p.aa) == list(range(10))
        assert sorted(p.ai) == list(range(10, 25))

    def test_epsilon_one(self):
        p = rnd.partition(np.arange(10), np.arange(10, 25), 1.0, seed=0)
        assert p.aa.size == 0 and p.ai.size == 0
        assert sorted(p.overlap) == list(range(25))

    def test_worked_cardinalities(self):
        p = rnd.partition(np.arange(100), np.arange(100, 160), 0.4, seed=3)
        assert (p.overlap.size, p.aa.size, p.ai.size) == (64, 60, 36)

    def test_deterministic_given_seed(self):
        a, b = np.arange(30), np.arange(30, 50)
        p1 = rnd.partition(a, b, 0.5, seed=11)
        p2 = rnd.partition(a, b, 0.5, seed=11)
        np.testing.assert_array_equal(p1.overlap, p2.overlap)
        np.testing.assert_array_equal(p1.aa, p2.aa)

    def test_partition_laws_randomized(self, rng):
        for _ in range(200):
            n_a, n_d = rng.integers(0, 80, 2)
            a = rng.choice(1000, size=n_a, replace=False)
            d = np.setdiff1d(rng.choice(1000, size=n_d + n_a, replace=False), a)[:n_d]
            eps = rng.random()
            p = rnd.partition(a, d, eps, seed=int(rng.integers(1 << 31)))
            pieces = np.concatenate([p.overlap, p.aa, p.ai])
            assert pieces.size == np.unique(pieces).size  # pairwise disjoint
            np.testing.assert_array_equal(np.sort(pieces),
                                          np.sort(np.concatenate([a, d])))
            expect = int(np.floor(eps * a.size + 0.5)) + int(np.floor(eps * d.size + 0.5))
            assert p.overlap.size == expect
            assert np.isin(p.aa, a).all() and np.isin(p.ai, d).all()

    def test_bad_epsilon_raises(self):
        with pytest.raises(ContractError):
            rnd.partition(np.arange(3), np.arange(3, 6), 1.5, seed=0)

    def test_overlapping_regions_raise(self):
        with pytest.raises(ContractError):
            rnd.partition(np.arange(5), np.arange(4, 9), 0.4, seed=0)


class TestStratified:
    def test_deterministic_two_sample_midpoints(self):
        t = rnd.stratified_samples(1.0, 3.0, 1, 2)
        np.testing.assert_allclose(t[0], [1.5, 2.5], atol=1e-15)

    def test_in_range_and_increasing(self, rng):
        t = rnd.stratified_samples(0.5, 4.0, 50, 16, rng)
        assert (t >= 0.5).all() and (t <= 4.0).all()
        assert (np.diff(t, axis=1) > 0).all()

    def test_pooled_samples_uniform(self, rng):
        t = rnd.stratified_samples(0.0, 1.0, 10_000, 4, rng).ravel()
        counts, _ = np.histogram(t, bins=32, range=(0, 1))
        assert stats.chisquare(counts).pvalue > 0.01


class TestHierarchical:
    def test_concentrated_weights(self):
        depths = rnd.stratified_samples(0.0, 8.0, 1, 8)
        w = np.zeros((1, 8))
        w[0, 3] = 1.0
        merged = rnd.hierarchical_samples(depths, w, 16, 0.0, 8.0,
                                          np.random.default_rng(0))
        fine = np.setdiff1d(merged, depths)
        lo, hi = 0.5 * (depths[0, 2] + depths[0, 3]), 0.5 * (depths[0, 3] + depths[0, 4])
        assert (fine >= lo).all() and (fine <= hi).all()

    def test_zero_weights_fall_back_to_stratified(self):
        depths = rnd.stratified_samples(0.0, 8.0, 2, 4)
        merged = rnd.hierarchical_samples(depths, np.zeros((2, 4)), 6, 0.0, 8.0)
        expect = np.sort(np.concatenate(
            [depths, rnd.stratified_samples(0.0, 8.0, 2, 6)], axis=1), axis=1)
        np.testing.assert_allclose(merged, expect, atol=1e-12)

    def test_sorted_ascending(self, rng):
        depths = rnd.stratified_samples(1.0, 5.0, 20, 8, rng)
        w = rng.random((20, 8))
        merged = rnd.hierarchical_samples(depths, w, 12, 1.0, 5.0, rng)
        assert merged.shape == (20, 20)
        assert (np.diff(merged, axis=1) >= 0).all()

    def test_uniform_weights_match_analytic_cdf(self, rng):
        depths = rnd.stratified_samples(0.0, 1.0, 1, 8)
        merged = rnd.hierarchical_samples(depths, np.ones((1, 8)), 5000,
                                          0.0, 1.0, rng)
        fine = np.setdiff1d(merged[0], depths[0])
        mids = 0.5 * (depths[0, 1:] + depths[0, :-1])
        edges = np.concatenate([[0.0], mids, [1.0]])
        cdf_pts = np.arange(9) / 8.0
        res = stats.kstest(fine, lambda t: np.interp(t, edges, cdf_pts))
        assert res.pvalue > 0.01


def sample(rng, n, s):
    return FieldSample(c=Tensor(rng.random((n, s, 3))),
                       sigma=Tensor(rng.random((n, s))),
                       m=Tensor(rng.random((n, s))))


class TestBlend:
    def test_degenerate_masks_pick_aa_color(self, rng):
        s_aa, s_ai = sample(rng, 2, 3), sample(rng, 2, 3)
        s_aa.m.data[:] = 1.0
        s_ai.m.data[:] = 0.0
        out = rnd.blend(s_aa, s_ai, rnd.ROUTE_OVERLAP)
        np.testing.assert_allclose(out.c.data, s_aa.c.data, atol=1e-6)
        np.testing.assert_allclose(out.sigma.data,
                                   s_aa.sigma.data + s_ai.sigma.data, atol=1e-15)

    def test_equal_masks_average_colors(self):
        c_aa = np.array([[[1.0, 0.0, 0.0]]])
        c_ai = np.array([[[0.0, 1.0, 0.0]]])
        half = np.full((1, 1), 0.5)
        out = rnd.blend(FieldSample(Tensor(c_aa), Tensor(half), Tensor(half)),
                        FieldSample(Tensor(c_ai), Tensor(half), Tensor(half)),
                        rnd.ROUTE_OVERLAP)
        np.testing.assert_allclose(out.c.data[0, 0], [0.5, 0.5, 0.0], atol=1e-6)

    def test_single_field_routes_pass_through(self, rng):
        s = sample(rng, 3, 2)
        out = rnd.blend(s, None, rnd.ROUTE_AA)
        np.testing.assert_array_equal(out.c.data, s.c.data)
        assert out.m_ai is None
        with pytest.raises(ContractError):
            rnd.blend(None, s, rnd.ROUTE_AA)
        with pytest.raises(ContractError):
            rnd.blend(s, None, rnd.ROUTE_OVERLAP)

    def test_dead_aa_field_reduces_to_ai_rendering(self, rng):
        # an aa field contributing neither density nor mask: the overlap
        # route must reproduce the ai-only rendering of the same samples
        depths = rnd.stratified_samples(0.5, 2.5, 4, 8, rng)
        s_ai = sample(rng, 4, 8)
        s_aa = sample(rng, 4, 8)
        s_aa.sigma.data[:] = 0.0
        s_aa.m.data[:] = 0.0
        both = rnd.volume_render(depths, 2.5, rnd.blend(s_aa, s_ai, rnd.ROUTE_OVERLAP))
        alone = rnd.volume_render(depths, 2.5, rnd.blend(None, s_ai, rnd.ROUTE_AI))
        np.testing.assert_allclose(both.c_hat.data, alone.c_hat.data, atol=1e-6)
        np.testing.assert_allclose(both.weights.data, alone.weights.data, atol=1e-12)


class TestVolumeRender:
    def test_zero_density_renders_black(self, rng):
        depths = rnd.stratified_samples(0.5, 2.0, 5, 6, rng)
        s = sample(rng, 5, 6)
        s.sigma.data[:] = 0.0
        out = rnd.volume_render(depths, 2.0, rnd.blend(s, None, rnd.ROUTE_AA))
        np.testing.assert_array_equal(out.c_hat.data, 0.0)
        np.testing.assert_array_equal(out.m_aa_hat.data, 0.0)
        np.testing.assert_allclose(out.transmittance.data, 1.0, atol=1e-15)

    def test_single_opaque_sample_saturates(self):
        depths = np.array([[1.0, 2.0]])
        c = Tensor(np.ones((1, 2, 3)))
        sigma = Tensor(np.array([[20.0, 0.0]]))  # sigma*delta = 20 in bin 1
        m = Tensor(np.ones((1, 2)))
        out = rnd.volume_render(depths, 3.0, rnd.BlendResult(c, sigma, m, None))
        np.testing.assert_allclose(out.c_hat.data, 1.0, atol=1e-8)

    def test_weights_plus_transmittance_is_one(self, rng):
        depths = np.sort(rng.uniform(0.5, 4.0, (1000, 12)), axis=1)
        s = sample(rng, 1000, 12)
        s.sigma.data *= 5.0
        out = rnd.volume_render(depths, 4.0, rnd.blend(s, None, rnd.ROUTE_AA))
        total = out.weights.data.sum(axis=1) + out.transmittance.data
        assert np.abs(total - 1.0).max() < 1e-10

    def test_zero_density_padding_invariance(self, rng):
        # ragged-batch padding: extra zero-density samples at the far bound
        depths = np.sort(rng.uniform(1.0, 2.0, (3, 6)), axis=1)
        s = sample(rng, 3, 6)
        base = rnd.volume_render(depths, 3.0, rnd.blend(s, None, rnd.ROUTE_AA))
        pad_d = np.concatenate([depths, np.full((3, 2), 3.0)], axis=1)
        padded = FieldSample(
            c=Tensor(np.concatenate([s.c.data, rng.random((3, 2, 3))], axis=1)),
            sigma=Tensor(np.concatenate([s.sigma.data, np.zeros((3, 2))], axis=1)),
            m=Tensor(np.concatenate([s.m.data, rng.random((3, 2))], axis=1)))
        out = rnd.volume_render(pad_d, 3.0, rnd.blend(padded, None, rnd.ROUTE_AA))
        np.testing.assert_allclose(out.c_hat.data, base.c_hat.data, atol=1e-9)
        np.testing.assert_allclose(out.m_aa_hat.data, base.m_aa_hat.data, atol=1e-9)

    def test_unsorted_depths_raise(self, rng):
        depths = np.array([[1.0, 0.9, 1.5]])
        s = sample(rng, 1, 3)
        with pytest.raises(ContractError):
            rnd.volume_render(depths, 2.0, rnd.blend(s, None, rnd.ROUTE_AA))

    def test_gradcheck_blend_and_composite(self, rng):
        depths = np.sort(rng.uniform(0.5, 2.0, (2, 4)), axis=1)
        w = rng.standard_normal((2, 3))
        rng2 = np.random.default_rng(3)
        params = []
        for tag in ("aa", "ai"):
            for suffix, shape in (("_c", (2, 4, 3)), ("_s", (2, 4)), ("_m", (2, 4))):
                params.append(Tensor(rng2.standard_normal(shape) * 0.5,
                                     requires_grad=True, name=tag + suffix))

        def loss():
            aa = FieldSample(ad.sigmoid(params[0]), ad.softplus(params[1]),
                             ad.sigmoid(params[2]))
            ai = FieldSample(ad.sigmoid(params[3]), ad.softplus(params[4]),
                             ad.sigmoid(params[5]))
            out = rnd.volume_render(depths, 2.0, rnd.blend(aa, ai, rnd.ROUTE_OVERLAP))
            return (out.c_hat * w).sum() + out.m_aa_hat.sum() + out.m_ai_hat.sum()

        report = ad.gradcheck(loss, params)
        assert report.passed(1e-5), str(report)


class BallModel:
    """Analytic stand-in model: a soft unit ball, red for aa, blue for ai."""

    def query(self, field, x, d):
        r2 = (x ** 2).sum(axis=-1)
        inside = (r2 < 1.0).astype(float)
        sigma = Tensor(8.0 * inside)
        color = np.zeros((x.shape[0], 3))
        color[:, 0 if field.startswith("aa") else 2] = 1.0
        m = Tensor(np.full(x.shape[0], 0.9 if field.startswith("aa") else 0.1))
        return FieldSample(c=Tensor(color), sigma=sigma, m=m)


class TestRenderRoute:
    def make_rays(self):
        spec = ss.SceneSpec(image_size=8)
        cam = ss.camera_for_frame(spec, 0)
        rows, cols = np.mgrid[0:8, 0:8]
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
        return spec, cam, rnd.generate_rays(cam, pixels, spec.near, spec.far)

    def test_overlap_blends_both_fields(self):
        _, _, rays = self.make_rays()
        coarse, fine = rnd.render_route(BallModel(), rays, rnd.ROUTE_OVERLAP,
                                        n_coarse=16, n_fine=16)
        opacity = fine.weights.data.sum(axis=1)
        hit = opacity > 0.5
        assert hit.any()
        # blended sample color = 0.9 red + 0.1 blue, modulo accumulated opacity
        rgb = fine.c_hat.data[hit] / opacity[hit, None]
        np.testing.assert_allclose(rgb[:, 0], 0.9, atol=1e-2)
        np.testing.assert_allclose(rgb[:, 2], 0.1, atol=1e-2)

    def test_mask_maps_sum_to_opacity(self):
        _, _, rays = self.make_rays()
        _, fine = rnd.render_route(BallModel(), rays, rnd.ROUTE_OVERLAP,
                                   n_coarse=16, n_fine=16)
        opacity = fine.weights.data.sum(axis=1)
        total = fine.m_aa_hat.data + fine.m_ai_hat.data
        np.testing.assert_allclose(total, opacity, atol=1e-3)

    def test_render_image_single_route(self):
        # aa-only route must never touch the ai field and leaves its mask 0
        class AaOnly(BallModel):
            def query(self, field, x, d):
                assert field.startswith("aa")
                return super().query(field, x, d)

        spec = ss.SceneSpec(image_size=8)
        cam = ss.camera_for_frame(spec, 0)
        img, maa, mai = rnd.render_image(AaOnly(), cam, spec.near, spec.far,
                                         8, 8, route=rnd.ROUTE_AA)
        assert maa.max() > 0.5
        np.testing.assert_array_equal(mai, 0.0)
        assert img[..., 2].max() == 0.0        # no blue leaked in

    def test_render_image_deterministic(self, tmp_path):
        spec = ss.SceneSpec(image_size=8)
        cam = ss.camera_for_frame(spec, 0)
        img1, maa1, mai1 = rnd.render_image(BallModel(), cam, spec.near,
                                            spec.far, 8, 8, chunk=17)
        img2, maa2, mai2 = rnd.render_image(BallModel(), cam, spec.near,
                                            spec.far, 8, 8, chunk=64)
        np.testing.assert_array_equal(img1, img2)
        np.testing.assert_array_equal(maa1, maa2)
        rnd.save_image(tmp_path / "x.png", img1)
        rnd.save_image(tmp_path / "x.ppm", img1)
        rnd.save_image(tmp_path / "m.pgm", maa1)
        from PIL import Image
        back = np.asarray(Image.open(tmp_path / "x.png"), dtype=float) / 255.0
        np.testing.assert_allclose(back, np.clip(img1, 0, 1), atol=1 / 255.0)
