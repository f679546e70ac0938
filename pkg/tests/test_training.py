import numpy as np
import pytest

from dualnerf import autodiff as ad
from dualnerf import rendering as rnd
from dualnerf import synthscene as ss
from dualnerf import training as tr
from dualnerf.autodiff import Tensor
from dualnerf.errors import ContractError, NumericError, ShapeError, ValidationError


@pytest.fixture()
def rng():
    return np.random.default_rng(5)


def micro_config(**overrides):
    base = dict(iterations=5, batch_rays=8, n_refs=2, n_coarse=6, n_fine=6,
                audio_dim=16, feat_channels=(3, 4, 6), attn_dim=8,
                attn_heads=2, ffn_hidden=8, field_width=12, field_depth=2,
                pos_freqs=2, dir_freqs=1, warper_hidden=6, seed=3,
                mouth_fraction=0.5)
    base.update(overrides)
    return tr.TrainConfig(**base)


def micro_dataset(size=8, frames=8, seed=2):
    return ss.generate(ss.SceneSpec(image_size=size, frames=frames), seed=seed)


class TestLossPhotometric:
    def test_zero_when_exact(self, rng):
        gt = rng.random((4, 3))
        out = tr.loss_photometric(Tensor(gt.copy()), Tensor(gt.copy()), gt)
        assert float(out.data) == 0.0

    def test_single_ray_coarse_error(self):
        gt = np.zeros((1, 3))
        coarse = Tensor(np.array([[0.1, 0.0, 0.0]]))
        fine = Tensor(np.zeros((1, 3)))
        np.testing.assert_allclose(
            float(tr.loss_photometric(coarse, fine, gt).data), 0.01, atol=1e-15)

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(5):
            gt = rng.random((7, 3))
            c, f = rng.random((7, 3)), rng.random((7, 3))
            oracle = sum((c[i, j] - gt[i, j]) ** 2 + (f[i, j] - gt[i, j]) ** 2
                         for i in range(7) for j in range(3))
            got = float(tr.loss_photometric(Tensor(c), Tensor(f), gt).data)
            assert abs(got - oracle) < 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            tr.loss_photometric(Tensor(rng.random((3, 3))), None, rng.random((4, 3)))


class TestLossMask:
    def test_perfect_masks(self):
        regions = np.array([rnd.REGION_AUDIO, rnd.REGION_STATIC], dtype=object)
        m = Tensor(np.array([1.0, 0.0]))
        assert float(tr.loss_mask(m, m, regions, "aa").data) == 0.0

    def test_half_confidence_single_aa_ray(self):
        regions = np.array([rnd.REGION_AUDIO], dtype=object)
        m = Tensor(np.array([0.5]))
        np.testing.assert_allclose(
            float(tr.loss_mask(m, m, regions, "aa").data), 0.5, atol=1e-15)

    def test_field_swap_equals_complement_targets(self, rng):
        regions = np.where(rng.random(10) < 0.5, rnd.REGION_AUDIO,
                           rnd.REGION_STATIC).astype(object)
        mc, mf = Tensor(rng.random(10)), Tensor(rng.random(10))
        swapped = float(tr.loss_mask(mc, mf, regions, "ai").data)
        t = 1.0 - tr.mask_targets(regions, "aa")
        oracle = float(((mc.data - t) ** 2).sum() + ((mf.data - t) ** 2).sum())
        assert abs(swapped - oracle) < 1e-12

    def test_unknown_region_raises(self):
        regions = np.array([rnd.REGION_UNKNOWN], dtype=object)
        with pytest.raises(ContractError):
            tr.loss_mask(Tensor(np.zeros(1)), None, regions, "aa")


class TestLossOffset:
    def test_zero_offsets(self):
        assert float(tr.loss_offset(Tensor(np.zeros((4, 3, 2)))).data) == 0.0

    def test_three_four_five(self):
        off = Tensor(np.array([[[3.0, 4.0]]]))
        assert float(tr.loss_offset(off).data) == 5.0

    def test_matches_mean_norm_oracle(self, rng):
        off = rng.standard_normal((6, 3, 2))
        oracle = np.mean([np.hypot(*off[i, l]) for i in range(6) for l in range(3)])
        got = float(tr.loss_offset(Tensor(off)).data)
        assert abs(got - oracle) < 1e-12

    def test_list_of_batches(self, rng):
        parts = [Tensor(rng.standard_normal((4, 2, 2))),
                 Tensor(rng.standard_normal((3, 2, 2)))]
        flat = np.concatenate([p.data.reshape(-1, 2) for p in parts])
        oracle = np.hypot(flat[:, 0], flat[:, 1]).mean()
        assert abs(float(tr.loss_offset(parts).data) - oracle) < 1e-12
        assert tr.loss_offset([]) is None


class TestTotalLoss:
    def test_zero_weights_equal_photometric(self, rng):
        lp = Tensor(rng.random(()))
        out = tr.total_loss(lp, Tensor(np.array(2.0)), Tensor(np.array(3.0)),
                            0.0, 0.0)
        assert float(out.total.data) == float(lp.data)

    def test_default_weights_arithmetic(self):
        out = tr.total_loss(Tensor(np.array(1.0)), Tensor(np.array(2.0)),
                            Tensor(np.array(3.0)), 1e-3, 5e-8)
        np.testing.assert_allclose(float(out.total.data),
                                   1.0 + 2e-3 + 1.5e-7, rtol=1e-12)
        assert (out.photometric, out.mask, out.offset) == (1.0, 2.0, 3.0)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = tr.Adam({"p": p}, lr=1e-2)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_minus_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = tr.Adam({"p": p}, lr=1e-3, decay_steps=10**9)
        p.grad = np.ones(1)
        opt.step()
        np.testing.assert_allclose(p.data, [-1e-3], rtol=1e-6)

    def test_deterministic_trajectory(self, rng):
        grads = rng.standard_normal((100, 3))
        trajs = []
        for _ in range(2):
            p = Tensor(np.arange(3.0), requires_grad=True)
            opt = tr.Adam({"p": p}, lr=5e-4)
            for g in grads:
                p.grad = g.copy()
                opt.step()
            trajs.append(p.data.copy())
        np.testing.assert_array_equal(trajs[0], trajs[1])

    def test_nonfinite_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = tr.Adam({"warper.l3.w": p})
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NumericError, match="warper.l3.w"):
            opt.step()

    def test_lr_decay_schedule(self):
        opt = tr.Adam({}, lr=5e-4, gamma=0.1, decay_steps=100)
        opt.t = 100
        np.testing.assert_allclose(opt.current_lr(), 5e-5, rtol=1e-12)

    def test_grad_clipping(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        a = tr.Adam({"p": p}, lr=1e-3, max_grad_norm=1.0)
        p.grad = np.array([100.0])
        a.step()
        b = tr.Adam({"q": Tensor(np.zeros(1), requires_grad=True)}, lr=1e-3)
        q = b.params["q"]
        q.grad = np.array([1.0])
        b.step()
        np.testing.assert_allclose(p.data, q.data, rtol=1e-9)


class TestConfig:
    def test_text_round_trip(self):
        cfg = micro_config(epsilon=0.25, no_rrs=True)
        back = tr.TrainConfig.from_text(cfg.to_text())
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig.from_text("does_not_exist = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ValidationError):
            tr.TrainConfig.from_text("iterations = many\n")

    def test_validate_rejects_bad_phase_and_epsilon(self):
        with pytest.raises(ValidationError):
            micro_config(phase="warmup").validate()
        with pytest.raises(ValidationError):
            micro_config(epsilon=1.5).validate()


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        cfg = micro_config()
        model = tr.build_model(cfg)
        params = model.parameters()
        opt = tr.Adam(params, lr=cfg.lr)
        # some nontrivial optimizer state
        for p in params.values():
            p.grad = rng.standard_normal(p.data.shape)
        opt.step()
        gen = np.random.default_rng(99)
        gen.random(17)
        path = tmp_path / "a.ckpt"
        tr.save_checkpoint(path, params, opt, cfg.to_text(), gen, 42)
        ckpt = tr.load_checkpoint(path)
        assert ckpt.iteration == 42
        assert ckpt.config_text == cfg.to_text()
        assert ckpt.rng_state == gen.bit_generator.state
        model2 = tr.build_model(micro_config(seed=77))
        opt2 = tr.Adam(model2.parameters(), lr=cfg.lr)
        tr.restore_model(ckpt, model2, opt2)
        for name, p in model2.parameters().items():
            np.testing.assert_array_equal(p.data, params[name].data)
        for k in opt.m:
            np.testing.assert_array_equal(opt.m[k], opt2.m[k])
            np.testing.assert_array_equal(opt.v[k], opt2.v[k])
        assert opt2.t == opt.t

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValidationError):
            tr.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = micro_config()
        model = tr.build_model(cfg)
        tr.save_checkpoint(tmp_path / "a.ckpt", model.parameters(), None,
                           "", None, 0)
        other = tr.build_model(micro_config(field_width=16))
        with pytest.raises(ValidationError):
            tr.restore_model(tr.load_checkpoint(tmp_path / "a.ckpt"), other)


class TestModelAssembly:
    def test_ablation_flags_change_structure(self):
        full = tr.build_model(micro_config())
        assert "field_ai_fine" in full.modules()
        assert full.warper is not None
        single = tr.build_model(micro_config(single_field=True))
        assert "field_ai_fine" not in single.modules()
        no_warp = tr.build_model(micro_config(no_warper=True))
        assert no_warp.warper is None
        no_aaa = tr.build_model(micro_config(no_aaa=True))
        from dualnerf.aggregation import MeanAggregator
        assert isinstance(no_aaa.agg_aa, MeanAggregator)

    def test_parameter_names_unique_and_stable(self):
        cfg = micro_config()
        names1 = list(tr.build_model(cfg).parameters())
        names2 = list(tr.build_model(cfg).parameters())
        assert names1 == names2
        assert len(names1) == len(set(names1))

    def test_eval_counter_routes(self):
        ds = micro_dataset()
        spp = 6 + (6 + 6)  # coarse + merged fine samples per ray slot
        for flags, slots_per_ray in ((dict(no_rrs=True), 2),
                                     (dict(single_field=True), 1)):
            cfg = micro_config(**flags)
            model = tr.build_model(cfg)
            opt = tr.Adam(model.parameters(), lr=cfg.lr)
            model.reset_eval_counter()
            tr.train_step(model, opt, cfg, [ds], tr.loop_rng(cfg))
            assert model.eval_points == cfg.batch_rays * slots_per_ray * spp


class TestTrainLoop:
    def test_micro_run_writes_artifacts(self, tmp_path):
        cfg = micro_config(iterations=3, checkpoint_every=2)
        ds = micro_dataset()
        model, opt, gen, losses = tr.train(cfg, [ds], tmp_path / "run")
        assert len(losses) == 3 and all(np.isfinite(losses))
        assert (tmp_path / "run" / "final.ckpt").exists()
        assert (tmp_path / "run" / "ckpt_000002.ckpt").exists()
        assert (tmp_path / "run" / "config.txt").read_text() == cfg.to_text()
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss_p,loss_m,loss_o,total,lr,seconds"
        assert len(lines) == 4

    def test_finetune_requires_base(self, tmp_path):
        cfg = micro_config(phase="finetune")
        with pytest.raises(ValidationError):
            tr.train(cfg, [micro_dataset()], tmp_path / "run")

    def test_too_few_frames_rejected(self, tmp_path):
        cfg = micro_config(n_refs=4)
        ds = micro_dataset(frames=8)  # 4 train frames: refs + target don't fit
        with pytest.raises(ValidationError):
            tr.train(cfg, [ds], tmp_path / "run")

    def test_same_seed_runs_identical(self, tmp_path):
        cfg = micro_config(iterations=4)
        ds = micro_dataset()
        _, _, _, a = tr.train(cfg, [ds], tmp_path / "a")
        _, _, _, b = tr.train(cfg, [ds], tmp_path / "b")
        assert a == b

    def test_resume_reproduces_loss_curve(self, tmp_path):
        ds = micro_dataset()
        cfg = micro_config(iterations=6, checkpoint_every=3)
        _, _, _, full = tr.train(cfg, [ds], tmp_path / "full")

        ckpt = tr.load_checkpoint(tmp_path / "full" / "ckpt_000003.ckpt")
        model = tr.build_model(cfg)
        opt = tr.Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                      beta2=cfg.beta2, eps=cfg.adam_eps, gamma=cfg.decay_gamma,
                      decay_steps=cfg.decay_steps)
        tr.restore_model(ckpt, model, opt)
        gen = np.random.default_rng(0)
        gen.bit_generator.state = ckpt.rng_state
        _, _, _, tail = tr.train(cfg, [ds], tmp_path / "resumed",
                                 start_iteration=ckpt.iteration, model=model,
                                 optimizer=opt, rng=gen)
        assert tail == full[3:]

    def test_loss_decreases_on_smoke_scene(self, tmp_path):
        cfg = micro_config(iterations=60, batch_rays=12, lr=2e-3)
        ds = micro_dataset(size=8, frames=8)
        _, _, _, losses = tr.train(cfg, [ds], tmp_path / "run")
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


class TestOffsetRegularizerDirection:
    def test_larger_weight_shrinks_offsets(self, tmp_path, rng):
        ds = micro_dataset()
        norms = []
        for lam in (0.0, 1e-2, 1.0):
            cfg = micro_config(iterations=25, batch_rays=8, lambda_o=lam)
            model = tr.build_model(cfg)
            # break the zero init so there is something to shrink
            pert = np.random.default_rng(11)
            model.warper.l3.w.data[:] = 0.3 * pert.standard_normal(
                model.warper.l3.w.data.shape)
            opt = tr.Adam(model.parameters(), lr=cfg.lr, gamma=cfg.decay_gamma,
                          decay_steps=cfg.decay_steps)
            gen = tr.loop_rng(cfg)
            for _ in range(cfg.iterations):
                tr.train_step(model, opt, cfg, [ds], gen)
            offs = np.concatenate(
                [o.data.reshape(-1, 2) for o in model.collected_offsets()])
            norms.append(np.hypot(offs[:, 0], offs[:, 1]).mean())
        assert norms[0] > norms[1] > norms[2]
