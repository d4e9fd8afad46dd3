import math

import numpy as np
import pytest

from idmatch.diffusion import SchedulerConfig, TrainState, load_checkpoint, rollout, save_checkpoint
from idmatch.embedding import DomainError
from idmatch.rewards import NoFaceError, RewardConfig
from idmatch.seeding import derive_rng
from idmatch.toy_world import ToyWorld, make_dataset, sample_identity_instance, sample_universe
from idmatch.trainer import (
    RunConfig,
    TrainingDiverged,
    encode,
    evaluate,
    make_model,
    pretrain,
    rerefl_step,
    reward_vs_step_curve,
    sample_reward,
    split_indices,
    stability_statistic,
    train,
)

SCHED = SchedulerConfig()


@pytest.fixture(scope="module")
def world():
    return ToyWorld.build(sample_universe(6, 8, 1.0, 0.1, seed=0), 3, d_embed=32)


@pytest.fixture(scope="module")
def data(world):
    return encode(world, make_dataset(world.universe, 40, (1, 3), derive_rng(0, "data"), 3))


@pytest.fixture(scope="module")
def pretrained(world, data):
    state = TrainState.fresh(make_model(world, SCHED, 0, hidden=(32, 32)), 1e-3, derive_rng(0, "pretrain"))
    pretrain(state, data, SCHED, 150, 16)
    return state


def fresh_copy(state, seed=1):
    return TrainState.fresh(state.model.copy(), 1e-3, derive_rng(seed, "train"))


def cfg_for(mode, **reward):
    return RunConfig(mode=mode, reward=RewardConfig(**reward), batch_size=4, total_steps=6, eval_every=3)


BATCH = np.array([0, 5, 9, 13])


class TestRunConfig:
    def test_aliases(self):
        assert RunConfig(mode="sir").mode == "rerefl_sir"
        assert RunConfig(mode="mimr").mode == "rerefl_mimr"

    def test_unknown_mode(self):
        with pytest.raises(DomainError):
            RunConfig(mode="grpo")

    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.scheduler.T, cfg.scheduler.T_s, cfg.scheduler.T_e) == (25, 1, 10)
        assert (cfg.reward.lambda1, cfg.reward.lambda2, cfg.reward.pretrain_weight) == (1.0, -1.0, 1.0)
        assert cfg.learning_rate == 1e-3

    def test_nested_dicts(self):
        cfg = RunConfig(scheduler={"T": 10, "T_s": 1, "T_e": 4}, reward={"lambda2": -0.5})
        assert cfg.scheduler.T == 10 and cfg.reward.lambda2 == -0.5
        assert RunConfig(**{**cfg.to_dict()}).to_dict() == cfg.to_dict()


class TestStep:
    def test_zero_pretrain_weight_gives_negative_reward(self, world, data, pretrained):
        cfg = cfg_for("mimr", pretrain_weight=0.0)
        res = rerefl_step(fresh_copy(pretrained), data, BATCH, world, cfg, derive_rng(2, "step"), update=False)
        assert res.total_loss == -res.reward_value
        assert res.l_rerefl == -res.reward_value

    def test_combined_loss(self, world, data, pretrained):
        cfg = cfg_for("mimr", pretrain_weight=0.5)
        res = rerefl_step(fresh_copy(pretrained), data, BATCH, world, cfg, derive_rng(2, "step"), update=False)
        assert res.total_loss == pytest.approx(0.5 * res.l_diff + res.l_rerefl, abs=1e-15)

    def test_t_within_truncation_range(self, world, data, pretrained):
        res = rerefl_step(fresh_copy(pretrained), data, np.arange(32), world, cfg_for("mimr"),
                          derive_rng(3, "step"), update=False)
        t = res.diagnostics["t"]
        assert t.min() >= SCHED.T_s and t.max() <= SCHED.T_e

    def test_sft_mode_rejected(self, world, data, pretrained):
        with pytest.raises(DomainError):
            rerefl_step(fresh_copy(pretrained), data, BATCH, world, RunConfig(mode="sft"))

    def test_update_flag(self, world, data, pretrained):
        state = fresh_copy(pretrained)
        before = [p.copy() for p in state.model.params]
        rerefl_step(state, data, BATCH, world, cfg_for("mimr"), derive_rng(4, "step"), update=False)
        assert all(np.array_equal(a, b) for a, b in zip(before, state.model.params)) and state.step == 0
        rerefl_step(state, data, BATCH, world, cfg_for("mimr"), derive_rng(4, "step"))
        assert state.step == 1
        assert any(not np.array_equal(a, b) for a, b in zip(before, state.model.params))

    def test_descent_on_same_sample(self, world, data, pretrained):
        cfg = cfg_for("mimr", pretrain_weight=0.0)
        state = fresh_copy(pretrained)
        state.optimizer.lr = 1e-5
        before = rerefl_step(state, data, BATCH, world, cfg, derive_rng(5, "step"))
        after = rerefl_step(state, data, BATCH, world, cfg, derive_rng(5, "step"), update=False)
        assert after.reward_value > before.reward_value


class TestGradientIsolation:
    def test_gradient_depends_on_rollout_only_through_x_t(self, world, data, pretrained):
        state = fresh_copy(pretrained)
        disturbed = state.model.copy()
        noise = derive_rng(6, "perturb")
        for p in disturbed.params:
            p += 0.5 * noise.standard_normal(p.shape)

        def perturbed_rollout(x_T, t, cond, rng):
            return rollout(disturbed, SCHED, x_T, t, cond, rng)

        cfg = cfg_for("mimr")
        a = rerefl_step(state, data, BATCH, world, cfg, derive_rng(7, "step"), rollout_fn=perturbed_rollout,
                        update=False)
        x_t = a.diagnostics["x_t"]
        b = rerefl_step(state, data, BATCH, world, cfg, derive_rng(7, "step"),
                        rollout_fn=lambda *_: x_t.copy(), update=False)
        for ga, gb in zip(a.diagnostics["grads"], b.diagnostics["grads"]):
            assert np.max(np.abs(ga - gb)) < 1e-12

    def test_constant_reward_stub_has_zero_gradient(self, world, data, pretrained):
        def constant(world, x0_hat, refs, mode, cfg):
            return 0.7, np.zeros_like(x0_hat), None

        cfg = cfg_for("mimr", pretrain_weight=0.0)
        res = rerefl_step(fresh_copy(pretrained), data, BATCH, world, cfg, derive_rng(8, "step"),
                          reward_fn=constant, update=False)
        assert res.reward_value == pytest.approx(0.7)
        assert all(np.all(g == 0.0) for g in res.diagnostics["reward_grads"])
        assert all(np.all(g == 0.0) for g in res.diagnostics["grads"])


class TestNoFace:
    @staticmethod
    def faceless(world, x0_hat, refs, mode, cfg):
        raise NoFaceError("none")

    def test_diffusion_only_fallback(self, world, data, pretrained):
        res = rerefl_step(fresh_copy(pretrained), data, BATCH, world, cfg_for("mimr"), derive_rng(9, "step"),
                          reward_fn=self.faceless, update=False)
        assert res.diagnostics["no_face"] == len(BATCH)
        assert res.l_rerefl == 0.0
        assert res.total_loss == res.l_diff
        assert all(np.all(g == 0.0) for g in res.diagnostics["reward_grads"])

    def test_fixed_penalty_fallback(self, world, data, pretrained):
        cfg = cfg_for("mimr", no_face_fallback="fixed_penalty", no_face_penalty=0.25)
        res = rerefl_step(fresh_copy(pretrained), data, BATCH, world, cfg, derive_rng(9, "step"),
                          reward_fn=self.faceless, update=False)
        assert res.l_rerefl == pytest.approx(0.25)
        assert all(a is None for a in res.assignments)


class TestSampleReward:
    def test_sir_on_perfect_single_identity_output(self, world):
        rng = np.random.default_rng(0)
        ref = sample_identity_instance(world.universe, 2, rng)
        target = sample_identity_instance(world.universe, 2, rng)
        x0 = np.zeros((world.n_slots, world.slot_width))
        x0[1, 0], x0[1, 1:] = 1.0, target
        ref_psi = world.psi.embed_many(ref)
        r, grad, a = sample_reward(world, x0.ravel(), ref_psi, "rerefl_sir", RewardConfig())
        expected = float(ref_psi[0] @ world.psi.embed_many(target)[0])
        assert r == pytest.approx(expected, abs=1e-12)
        assert r > 0.8 and a is None
        # only the detected slot's vector receives gradient
        g = grad.reshape(world.n_slots, world.slot_width)
        assert np.all(g[[0, 2]] == 0.0) and np.all(g[:, 0] == 0.0)

    def test_sir_uses_first_detected_face(self, world):
        rng = np.random.default_rng(1)
        refs = np.vstack([sample_identity_instance(world.universe, i, rng) for i in (0, 1)])
        x0 = np.zeros((world.n_slots, world.slot_width))
        x0[0] = np.r_[1.0, refs[1]]
        x0[2] = np.r_[1.0, refs[0]]
        ref_psi = world.psi.embed_many(refs)
        r, grad, _ = sample_reward(world, x0.ravel(), ref_psi, "rerefl_sir", RewardConfig())
        assert r == pytest.approx(float(ref_psi[0] @ ref_psi[1]), abs=1e-12)
        assert np.all(grad.reshape(world.n_slots, -1)[2] == 0.0)

    def test_mimr_matches_identities(self, world):
        rng = np.random.default_rng(2)
        refs = np.vstack([sample_identity_instance(world.universe, i, rng) for i in (3, 4)])
        x0 = np.zeros((world.n_slots, world.slot_width))
        x0[1] = np.r_[1.0, refs[1]]
        x0[2] = np.r_[1.0, refs[0]]
        ref_psi = world.psi.embed_many(refs)
        r, _, a = sample_reward(world, x0.ravel(), ref_psi, "rerefl_mimr", RewardConfig())
        assert set(a.pairs) == {(0, 1), (1, 0)}
        cross = float(ref_psi[0] @ ref_psi[1])
        assert r == pytest.approx((2 - 2 * cross) / 4, abs=1e-12)

    def test_no_face(self, world):
        with pytest.raises(NoFaceError):
            sample_reward(world, np.zeros(world.composite_dim), world.psi.embed_many(np.ones(8)), "rerefl_mimr",
                          RewardConfig())


class TestTrain:
    def test_zero_steps(self, world, data, pretrained):
        state = fresh_copy(pretrained)
        cfg = RunConfig(mode="mimr", total_steps=0)
        out, history = train(cfg, state, data, world, data.subset(range(4)))
        assert out is state and history == [] and state.step == 0

    def test_empty_dataset(self, world, data, pretrained):
        with pytest.raises(DomainError):
            train(cfg_for("mimr"), fresh_copy(pretrained), data.subset([]), world)

    @pytest.mark.parametrize("mode", ["sft", "sir", "mimr"])
    def test_history_rows(self, world, data, pretrained, mode):
        _, history = train(cfg_for(mode), fresh_copy(pretrained), data, world, data.subset(range(4)))
        assert [r["step"] for r in history] == [3, 6]
        assert set(history[0]) == {"step", "mode", "seed", "id_sim", "id_conf", "mean_reward", "l_diff", "l_rerefl"}
        assert all(0.0 <= r["id_conf"] <= 1.0 for r in history)

    def test_reproducible(self, world, data, pretrained):
        runs = [train(cfg_for("mimr"), fresh_copy(pretrained), data, world, data.subset(range(4))) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][0].model.params, runs[1][0].model.params):
            np.testing.assert_array_equal(a, b)

    def test_resume_equals_uninterrupted(self, tmp_path, world, data, pretrained):
        full, _ = train(cfg_for("mimr"), fresh_copy(pretrained), data, world)
        half_cfg = RunConfig(mode="mimr", batch_size=4, total_steps=3, eval_every=3)
        half, _ = train(half_cfg, fresh_copy(pretrained), data, world)
        save_checkpoint(tmp_path / "ck.json", half, SCHED)
        resumed, _ = load_checkpoint(tmp_path / "ck.json")
        resumed, _ = train(cfg_for("mimr"), resumed, data, world)
        assert resumed.step == full.step == 6
        for a, b in zip(full.model.params, resumed.model.params):
            np.testing.assert_array_equal(a, b)

    def test_nan_aborts_with_snapshot(self, world, data, pretrained):
        state = fresh_copy(pretrained)
        state.model.params[-1][...] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train(cfg_for("mimr"), state, data, world)
        snap = info.value.snapshot
        assert snap["step"] == 0 and math.isnan(snap["total_loss"])
        assert len(snap["param_norms"]) == len(state.model.params)


class TestEvaluate:
    def test_ground_truth_beats_generation(self, world, data, pretrained):
        gt = evaluate(None, SCHED, world, data, 0, samples=data.x0)
        gen = evaluate(pretrained.model, SCHED, world, data, 0)
        assert gt["id_sim"] > gen["id_sim"]
        assert gt["missing_faces"] == 0

    def test_empty_split(self, world, data, pretrained):
        ev = evaluate(pretrained.model, SCHED, world, data.subset([]), 0)
        assert ev["n_samples"] == 0 and ev["reports"] == []

    def test_deterministic(self, world, data, pretrained):
        a = evaluate(pretrained.model, SCHED, world, data, 3)
        b = evaluate(pretrained.model, SCHED, world, data, 3)
        assert (a["id_sim"], a["id_conf"]) == (b["id_sim"], b["id_conf"])


class TestCurve:
    def test_shape(self, world, data, pretrained):
        curve = reward_vs_step_curve(pretrained.model, SCHED, world, data, 0, 3)
        assert curve.shape == (3, SCHED.T + 1)
        assert np.all(curve >= -1.0) and np.all(curve <= 1.0)

    def test_single_seed(self, world, data, pretrained):
        assert reward_vs_step_curve(pretrained.model, SCHED, world, data, 0, 1).shape == (1, SCHED.T + 1)

    def test_stability_statistic_by_hand(self):
        curve = np.array([[0.0, 1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 2.0, 3.0, 4.0]])
        first, last = stability_statistic(curve)
        # two columns per window; std of (0, 2) is 1
        assert (first, last) == (0.5, 0.0)


def test_split_indices():
    train_idx, eval_idx = split_indices(2000)
    assert (len(train_idx), len(eval_idx)) == (1800, 200)
    assert eval_idx[0] == 1800 and train_idx[-1] == 1799
    assert len(split_indices(10, 0.0)[1]) == 0
    with pytest.raises(DomainError):
        split_indices(10, 1.0)
