import numpy as np
import pytest

from fairdiff.diffusion import (NULL_TOKEN, ConditioningVocab, EpsilonModel, TrainConfig,
                                forward_diffuse, guided_eps, load_model, make_schedule,
                                model_from_text, model_to_text, sample, save_model,
                                timestep_encoding, train_epsilon)
from fairdiff.errors import ConceptLookupError, InputError, ParseError, SpecificationError
from fairdiff.numerics import Rng
from fairdiff.world import ATTRIBUTE_TOKENS, Dataset, build_world, default_world

from stubs import constant_model, gaussian_oracle

# alpha_bar_T for the default schedule (independent pure-Python product), frozen
DEFAULT_ABAR_T = 2.1399665476111503e-05


class TestSchedule:
    def test_three_steps(self):
        s = make_schedule(3, 0.1, 0.3)
        assert np.allclose(s.betas, [0.1, 0.2, 0.3])
        assert np.allclose(s.alphas, [0.9, 0.8, 0.7])
        assert np.allclose(s.alpha_bars, [0.9, 0.72, 0.504])
        assert np.allclose(s.sigmas, np.sqrt([0.1, 0.2, 0.3]))

    def test_single_step(self):
        s = make_schedule(1, 0.3, 0.3)
        assert s.alpha_bars[0] == pytest.approx(0.7)

    def test_defaults(self):
        s = make_schedule()
        assert s.T == 100 and s.betas[0] == 1e-4 and s.betas[-1] == 0.2
        assert s.alpha_bars[-1] <= 0.05
        assert s.alpha_bars[-1] == pytest.approx(DEFAULT_ABAR_T, rel=1e-12)
        assert np.all(np.diff(s.alpha_bars) < 0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(SpecificationError):
            make_schedule(*args)


class TestForward:
    def test_zero_signal(self):
        s = make_schedule()
        eps = np.array([1.0, -2.0])
        assert np.allclose(forward_diffuse(np.zeros(2), 50, eps, s), np.sqrt(1 - s.alpha_bars[49]) * eps)

    def test_no_noise_limit(self):
        s = make_schedule(2, 1e-12, 1e-12)
        z0 = np.array([0.4, 2.0])
        assert np.allclose(forward_diffuse(z0, 1, np.ones(2), s), z0, atol=1e-5)

    def test_range(self):
        with pytest.raises(IndexError):
            forward_diffuse(np.zeros(1), 0, np.zeros(1), make_schedule())
        with pytest.raises(IndexError):
            forward_diffuse(np.zeros(1), 101, np.zeros(1), make_schedule())

    def test_variance_preserved_at_every_t(self):
        s = make_schedule()
        n = 10_000
        r = Rng(0)
        z0 = r.gaussian(n)
        z0 = (z0 - z0.mean()) / z0.std()
        bound = 4 * np.sqrt(2.0 / n)
        for t in range(1, s.T + 1):
            zt = forward_diffuse(z0, t, r.gaussian(n), s)
            assert abs(zt.var() - 1.0) <= bound


def test_timestep_encoding():
    enc = timestep_encoding(np.array([1, 50, 100]), 8, 100)
    assert enc.shape == (3, 8)
    assert np.allclose(enc[:, :4] ** 2 + enc[:, 4:] ** 2, 1.0)


class TestVocab:
    def test_null_and_lookup(self):
        v = ConditioningVocab.build(["a", "b"], 8, seed=1)
        assert not v[None].any() and v[NULL_TOKEN] is v.null
        assert np.allclose(np.linalg.norm(v["a"]), np.sqrt(8))
        with pytest.raises(ConceptLookupError):
            v["zebra"]

    def test_null_token_reserved(self):
        with pytest.raises(SpecificationError):
            ConditioningVocab.build([NULL_TOKEN])


class TestGuidedEps:
    def setup_method(self):
        self.m = constant_model({None: 0.2, "a": 0.5})
        self.z = np.zeros(1)

    def test_scalar_toy(self):
        out = guided_eps(self.m, self.z, 10, "a", 2.0, np.array([0.1]))
        assert out[0] == pytest.approx(0.9, abs=1e-15)

    def test_unit_scale_is_conditional(self):
        assert guided_eps(self.m, self.z, 10, "a", 1.0)[0] == pytest.approx(0.5, abs=1e-15)

    def test_zero_scale_is_unconditional(self):
        assert guided_eps(self.m, self.z, 10, "a", 0.0)[0] == 0.2

    def test_linear_in_gamma(self):
        g1, g2 = np.array([0.37]), np.array([-1.25])
        lhs = guided_eps(self.m, self.z, 5, "a", 3.0, g1 + g2)
        rhs = guided_eps(self.m, self.z, 5, "a", 3.0, g1) + g2
        assert np.allclose(lhs, rhs, atol=1e-15, rtol=0)

    def test_unknown_concept(self):
        with pytest.raises(ConceptLookupError):
            guided_eps(self.m, self.z, 5, "zebra", 3.0)


class TestSampler:
    def test_deterministic(self):
        m = EpsilonModel.init(3, ["a", "b"], seed=2)
        assert np.array_equal(sample(m, "a", 3.0, 5, seed=4), sample(m, "a", 3.0, 5, seed=4))
        assert not np.array_equal(sample(m, "a", 3.0, 5, seed=4), sample(m, "a", 3.0, 5, seed=5))

    def test_zero_provider_is_identity(self):
        m = EpsilonModel.init(3, ["a", "b"], seed=2)
        plain = sample(m, "a", 3.0, 6, seed=1)
        zero = sample(m, "a", 3.0, 6, seed=1, gamma_provider=lambda z, t, bank: np.zeros_like(z))
        assert np.array_equal(plain, zero)

    def test_chain_depends_only_on_its_index(self):
        m = EpsilonModel.init(3, ["a", "b"], seed=2)
        few, many = sample(m, "b", 2.0, 3, seed=7), sample(m, "b", 2.0, 8, seed=7)
        assert np.allclose(few, many[:3], atol=1e-12, rtol=0)

    def test_gaussian_oracle_recovers_standard_normal(self):
        z = sample(gaussian_oracle(2), "a", 0.0, 4000, seed=0)
        se = 1 / np.sqrt(4000)
        assert np.all(np.abs(z.mean(axis=0)) <= 4 * se)
        assert np.all(np.abs(z.var(axis=0) - 1.0) <= 0.1)

    def test_clip_bounds_final_samples(self):
        m = gaussian_oracle(3)
        m.x0_clip = 0.5
        z = sample(m, "a", 0.0, 500, seed=1)
        assert np.abs(z).max() <= 0.5 + 1e-9
        m.x0_clip = 1e6
        assert np.array_equal(sample(m, "a", 0.0, 50, seed=1), sample(gaussian_oracle(3), "a", 0.0, 50, seed=1))

    def test_bad_n(self):
        with pytest.raises(InputError):
            sample(EpsilonModel.init(2, ["a"]), "a", 1.0, 0, seed=0)


class TestTraining:
    def small(self):
        spec = default_world(count=20)
        ds = build_world(spec, 0)
        return ds, EpsilonModel.init(ds.dim, ds.concepts + list(ATTRIBUTE_TOKENS), seed=0)

    def test_zero_epochs(self):
        ds, m = self.small()
        res = train_epsilon(m, ds, TrainConfig(epochs=0))
        assert res.losses == []
        for a, b in zip(res.model.mlp.params, m.mlp.params):
            assert np.array_equal(a, b)

    def test_no_null_draws_without_dropout(self):
        ds, m = self.small()
        assert train_epsilon(m, ds, TrainConfig(epochs=3, p_uncond=0.0)).null_draws == 0
        assert train_epsilon(m, ds, TrainConfig(epochs=3, p_uncond=0.5)).null_draws > 0

    def test_input_model_untouched(self):
        ds, m = self.small()
        before = [p.copy() for p in m.mlp.params]
        train_epsilon(m, ds, TrainConfig(epochs=2))
        assert all(np.array_equal(a, b) for a, b in zip(before, m.mlp.params))

    def test_errors(self):
        ds, m = self.small()
        with pytest.raises(InputError):
            train_epsilon(m, Dataset(ds.spec, []), TrainConfig(epochs=1))
        other = EpsilonModel.init(ds.dim, ["x", "y"])
        with pytest.raises(ConceptLookupError):
            train_epsilon(other, ds, TrainConfig(epochs=1))
        with pytest.raises(SpecificationError):
            TrainConfig(p_uncond=1.0)

    def test_clip_bound_from_data(self):
        ds, m = self.small()
        res = train_epsilon(m, ds, TrainConfig(epochs=1))
        assert res.model.x0_clip == 1.15 * np.abs(ds.features()).max()
        assert train_epsilon(m, ds, TrainConfig(epochs=1, clip_margin=None)).model.x0_clip is None

    def test_loss_drops(self, trained):
        losses = trained.losses
        assert np.all(np.isfinite(losses))
        assert losses[-1] <= 0.7 * losses[0]


def _nearest_concept(x, spec):
    centres = spec.sep * spec.concept_directions()
    return np.argmin(((x[:, None, 1:] - centres[None, :, 1:]) ** 2).sum(-1), axis=1)


class TestTrainedModel:
    def test_unconditional_moments(self, trained):
        z = sample(trained.model, "engineer", 0.0, 2000, seed=0)
        x = trained.world.features()
        se = x.std(axis=0, ddof=1) / np.sqrt(2000)
        assert np.all(np.abs(z.mean(axis=0) - x.mean(axis=0)) <= 3 * se)

    def test_guidance_improves_fidelity(self, trained):
        spec = trained.world.spec
        acc = {}
        for sg in (0.0, 3.0):
            hits = 0
            for k, c in enumerate(spec.names):
                hits += int((_nearest_concept(sample(trained.model, c, sg, 100, seed=k), spec) == k).sum())
            acc[sg] = hits / (100 * len(spec.names))
        assert acc[3.0] >= acc[0.0] + 0.1


def test_checkpoint_round_trip(tmp_path):
    m = EpsilonModel.init(3, ["a", "b c"], seed=5)
    m.data_scale = 1.5
    m.x0_clip = 7.25
    save_model(m, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    z = Rng(0).gaussian(6).reshape(2, 3)
    for cond in (None, "a", "b c"):
        assert np.array_equal(back.eps(z, 17, cond), m.eps(z, 17, cond))
    assert back.schedule.T == 100 and back.data_scale == 1.5 and back.x0_clip == 7.25
    assert model_to_text(back) == model_to_text(m)


def test_checkpoint_errors():
    text = model_to_text(EpsilonModel.init(2, ["a"]))
    with pytest.raises(ParseError):
        model_from_text(text.replace("VOCAB", "VOCABULARY"))
    with pytest.raises(ParseError):
        model_from_text(text.replace("SCHED", "SKED"))
    with pytest.raises(ParseError):
        model_from_text(text + "EXTRA 1\n")
    assert model_from_text(text).x0_clip is None
