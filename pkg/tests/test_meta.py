"""Device-pruning controller: the k budget formula, node feature and
pooling layout, lazy embedding refresh, top-k selection, reward-regression
gradients vs finite differences, and checkpoint round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyberdo import nets
from cyberdo.env import (ATTACKER, DEFENDER, OBS_FEATURES_PER_DEVICE,
                         EnvConfig, device_obs_block, observe, reset)
from cyberdo.meta import (ID_DIM, NODE_STATE_FEATURES, MetaController,
                          MetaSample, ceil_log10, compute_k, pool_observation,
                          pooled_obs_size)


def small_state(m=6, seed=3):
    return reset(EnvConfig(device_count=m, seed=seed))


def controller(role=DEFENDER, m=6, **kwargs):
    return MetaController(role=role, device_count=m, **kwargs)


def random_obs(rng, m):
    return rng.normal(size=m * OBS_FEATURES_PER_DEVICE + 1)


def inject_scores(mc, obs, wanted):
    """Overwrite the embedding cache so ``score(obs, i) == wanted[i]``."""
    mc.bias[:] = 0.0
    h = mc.state_embedding(obs)
    norm = float(h @ h)
    assert norm > 1e-9
    for i, value in enumerate(wanted):
        mc.embed_cache[i] = value * h / norm


class TestKFormula:
    def test_reference_values_alpha_one(self):
        assert [compute_k(m, 1) for m in (10, 100, 1000, 10000)] == [1, 2, 3, 4]

    def test_alpha_scales_linearly(self):
        assert compute_k(10000, 5) == 20
        assert compute_k(10, 3) == 3

    def test_small_networks_floor_at_ten(self):
        assert compute_k(1, 1) == 1
        assert compute_k(9, 1) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            compute_k(0, 1)
        with pytest.raises(ValueError):
            compute_k(10, 0)

    def test_ceil_log10_hand_values(self):
        assert [ceil_log10(n) for n in (1, 2, 9, 10, 11, 100, 101, 1000)] == \
               [0, 1, 1, 1, 2, 2, 3, 3]
        with pytest.raises(ValueError):
            ceil_log10(0)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 10 ** 12))
    def test_ceil_log10_bracketing(self, n):
        p = ceil_log10(n)
        assert 10 ** p >= n
        if p > 0:
            assert 10 ** (p - 1) < n


class TestPooling:
    def test_size(self):
        assert pooled_obs_size() == 2 * OBS_FEATURES_PER_DEVICE + 1

    def test_hand_computed_pool(self):
        block = np.arange(1.0, OBS_FEATURES_PER_DEVICE + 1.0)
        obs = np.concatenate([block, np.zeros(OBS_FEATURES_PER_DEVICE), [0.25]])
        pooled = pool_observation(obs)
        np.testing.assert_allclose(pooled[:OBS_FEATURES_PER_DEVICE], block / 2)
        np.testing.assert_allclose(
            pooled[OBS_FEATURES_PER_DEVICE:2 * OBS_FEATURES_PER_DEVICE], block)
        assert pooled[-1] == 0.25

    def test_rejects_bad_layout(self):
        with pytest.raises(ValueError):
            pool_observation(np.zeros(OBS_FEATURES_PER_DEVICE + 2))

    def test_width_independent_of_device_count(self):
        rng = np.random.default_rng(0)
        assert pool_observation(random_obs(rng, 4)).shape == \
               pool_observation(random_obs(rng, 40)).shape


class TestNodeFeatures:
    def test_layout_and_id_block(self):
        mc = controller()
        state = small_state()
        x = mc.node_features(state, 2)
        assert x.shape == (ID_DIM + NODE_STATE_FEATURES,)
        np.testing.assert_array_equal(x[:ID_DIM], mc.id_embeddings[2])

    def test_degree_normalisation(self):
        mc = controller()
        state = small_state()
        max_deg = state.max_degree()
        for node in range(state.device_count):
            assert x_struct(mc, state, node)[0] == pytest.approx(
                state.degree(node) / max_deg)

    def test_defender_sees_every_block(self):
        mc = controller(role=DEFENDER)
        state = small_state()
        for node in range(state.device_count):
            x = mc.node_features(state, node)
            assert x[ID_DIM + 1] == 1.0  # visibility flag
            np.testing.assert_array_equal(
                x[ID_DIM + 3:], device_obs_block(state, DEFENDER, node))

    def test_attacker_hidden_device_contributes_zeros(self):
        mc = controller(role=ATTACKER)
        state = small_state()
        hidden = sorted(set(range(state.device_count))
                        - state.visible_set(ATTACKER))
        assert hidden
        x = mc.node_features(state, hidden[0])
        assert x[ID_DIM + 1] == 0.0
        np.testing.assert_array_equal(x[ID_DIM + 3:], np.zeros(
            OBS_FEATURES_PER_DEVICE))

    def test_attacker_owned_flag(self):
        mc = controller(role=ATTACKER)
        state = small_state()
        owned = [d.device_id for d in state.devices if d.attacker_owned]
        x = mc.node_features(state, owned[0])
        assert x[ID_DIM + 1] == 1.0
        assert x[ID_DIM + 2] == 1.0

    def test_insensitive_to_other_devices(self):
        mc = controller(role=DEFENDER)
        state = small_state()
        before = mc.node_features(state, 1)
        state.devices[4].workload_value += 3.0
        np.testing.assert_array_equal(mc.node_features(state, 1), before)

    def test_own_compromise_changes_features(self):
        # The observation block deliberately separates devices that agree
        # on (degree, visibility, ownership) but differ in compromise.
        mc = controller(role=DEFENDER)
        state = small_state()
        clean = [d for d in state.devices
                 if not d.compromised][0].device_id
        before = mc.node_features(state, clean)
        state.devices[clean].compromised = True
        after = mc.node_features(state, clean)
        assert not np.array_equal(before, after)

    def test_validation(self):
        mc = controller(m=6)
        state = small_state(m=6)
        with pytest.raises(ValueError):
            mc.node_features(state, 6)
        with pytest.raises(ValueError):
            mc.node_features(small_state(m=5), 0)


def x_struct(mc, state, node):
    return mc.node_features(state, node)[ID_DIM:ID_DIM + 3]


class TestRefresh:
    def test_lazy_equals_scratch(self):
        state = small_state()
        a = controller(seed=9)
        b = controller(seed=9)
        a.refresh_embeddings(state)
        # Refresh b one device at a time in scrambled order.
        b.dirty.clear()
        for node in (4, 0, 5, 2, 1, 3):
            b.mark_dirty([node])
            b.refresh_embeddings(state)
        np.testing.assert_allclose(a.embed_cache, b.embed_cache, atol=1e-12)

    def test_clean_refresh_is_bit_identical(self):
        state = small_state()
        mc = controller()
        mc.refresh_embeddings(state)
        snapshot = mc.embed_cache.copy()
        mc.refresh_embeddings(state)
        np.testing.assert_array_equal(mc.embed_cache, snapshot)

    def test_partial_refresh_touches_only_dirty_rows(self):
        state = small_state()
        mc = controller()
        mc.refresh_embeddings(state)
        before = mc.embed_cache.copy()
        state.devices[3].compromised = not state.devices[3].compromised
        mc.mark_dirty([3])
        mc.refresh_embeddings(state)
        others = [i for i in range(6) if i != 3]
        np.testing.assert_array_equal(mc.embed_cache[others], before[others])
        assert not np.array_equal(mc.embed_cache[3], before[3])
        scratch = controller()
        scratch.refresh_embeddings(state)
        np.testing.assert_allclose(mc.embed_cache, scratch.embed_cache,
                                   atol=1e-12)

    def test_mark_dirty_validation(self):
        mc = controller(m=6)
        with pytest.raises(ValueError):
            mc.mark_dirty([6])
        mc.mark_dirty([])
        mc.mark_dirty([1, 1, 2])
        assert {1, 2} <= mc.dirty


class TestSelect:
    def test_top_k_by_injected_scores(self):
        state = small_state()
        mc = controller(alpha=2)  # k = 2 at M=6
        obs = observe(state, DEFENDER)
        mc.refresh_embeddings(state)
        inject_scores(mc, obs, [5.0, 3.0, 9.0, -1.0, 0.0, 1.0])
        assert mc.select(state, obs) == [2, 0]

    def test_ties_break_to_lower_id(self):
        state = small_state()
        mc = controller(alpha=2)
        obs = observe(state, DEFENDER)
        mc.refresh_embeddings(state)
        inject_scores(mc, obs, [1.0] * 6)
        assert mc.select(state, obs) == [0, 1]

    def test_k_at_least_visible_returns_all(self):
        state = small_state()
        mc = controller(alpha=50)
        obs = observe(state, DEFENDER)
        assert sorted(mc.select(state, obs)) == list(range(6))

    def test_attacker_selection_restricted_to_visible(self):
        state = small_state()
        mc = controller(role=ATTACKER, alpha=50)
        obs = observe(state, ATTACKER)
        assert set(mc.select(state, obs)) == state.visible_set(ATTACKER)

    def test_no_visible_devices_gives_empty_selection(self):
        state = small_state()
        for dev in state.devices:
            dev.visible_to_attacker = False
        mc = controller(role=ATTACKER)
        assert mc.select(state, observe(state, ATTACKER)) == []

    def test_selection_size_is_k(self):
        state = small_state(m=10)
        mc = controller(m=10)
        obs = observe(state, DEFENDER)
        assert len(mc.select(state, obs)) == mc.k == 1

    def test_deterministic(self):
        state = small_state()
        mc = controller()
        obs = observe(state, DEFENDER)
        assert mc.select(state, obs) == mc.select(state, obs)

    def test_role_and_shape_validation(self):
        state = small_state()
        mc = controller(role=DEFENDER)
        obs = observe(state, DEFENDER)
        with pytest.raises(ValueError):
            mc.select(state, obs, role=ATTACKER)
        with pytest.raises(ValueError):
            mc.select(small_state(m=5), obs)


class TestScores:
    def test_score_matches_naive_dot_product(self):
        state = small_state()
        mc = controller()
        obs = observe(state, DEFENDER)
        mc.refresh_embeddings(state)
        h = mc.state_projector.forward(pool_observation(obs))
        for node in range(6):
            naive = sum(float(mc.embed_cache[node][j]) * float(h[j])
                        for j in range(mc.embed_dim)) + float(mc.bias[0])
            assert mc.score(obs, node) == pytest.approx(naive, abs=1e-12)
        np.testing.assert_allclose(mc.score_all(obs),
                                   [mc.score(obs, i) for i in range(6)],
                                   atol=1e-12)

    def test_zero_embedding_scores_bias(self):
        state = small_state()
        mc = controller()
        obs = observe(state, DEFENDER)
        mc.refresh_embeddings(state)
        mc.embed_cache[4] = 0.0
        mc.bias[0] = 0.75
        assert mc.score(obs, 4) == pytest.approx(0.75)

    def test_score_validation(self):
        mc = controller(m=6)
        with pytest.raises(ValueError):
            mc.score(np.zeros(6 * OBS_FEATURES_PER_DEVICE + 1), 6)

    def test_predict_reward_is_mean_of_selected_scores(self):
        state = small_state()
        mc = controller()
        obs = observe(state, DEFENDER)
        mc.refresh_embeddings(state)
        inject_scores(mc, obs, [2.0, 4.0, -1.0, 0.0, 0.0, 0.0])
        assert mc.predict_reward(obs, [0, 1]) == pytest.approx(3.0, abs=1e-9)
        assert mc.predict_reward(obs, [2]) == pytest.approx(-1.0, abs=1e-9)

    def test_predict_reward_rejects_empty(self):
        mc = controller()
        with pytest.raises(ValueError):
            mc.predict_reward(np.zeros(6 * OBS_FEATURES_PER_DEVICE + 1), [])

    def test_key_embedding_uses_target_projector(self):
        state = small_state()
        mc = controller()
        obs = observe(state, DEFENDER)
        np.testing.assert_array_equal(mc.key_embedding(obs),
                                      mc.state_embedding(obs))
        rng = np.random.default_rng(0)
        batch = make_batch(rng, mc, n=8)
        mc.train_meta(batch)
        assert not np.array_equal(mc.key_embedding(obs),
                                  mc.state_embedding(obs))


def make_batch(rng, mc, n=6):
    batch = []
    for _ in range(n):
        size = int(rng.integers(1, 4))
        selected = tuple(rng.choice(mc.device_count, size=size, replace=False))
        batch.append(MetaSample(
            obs=random_obs(rng, mc.device_count),
            selected=selected,
            features=rng.normal(size=(size, ID_DIM + NODE_STATE_FEATURES)),
            reward=float(rng.normal())))
    return batch


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_meta_loss_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        mc = controller(m=4)
        batch = make_batch(rng, mc, n=5)
        loss, grads = mc.meta_loss_and_grads(batch)
        assert loss == pytest.approx(mc.meta_loss(batch))
        numeric = nets.numeric_gradient(lambda: mc.meta_loss(batch),
                                        mc._trained_params())
        assert nets.max_relative_error(grads, numeric) <= 1e-4

    def test_batch_validation(self):
        rng = np.random.default_rng(0)
        mc = controller(m=4)
        with pytest.raises(ValueError):
            mc.meta_loss_and_grads([])
        sample = make_batch(rng, mc, n=1)[0]
        bad = MetaSample(obs=sample.obs, selected=(), features=sample.features,
                         reward=0.0)
        with pytest.raises(ValueError):
            mc.meta_loss_and_grads([bad])
        bad = MetaSample(obs=sample.obs, selected=sample.selected,
                         features=sample.features[:-1, :]
                         if sample.features.shape[0] > 1
                         else np.vstack([sample.features, sample.features]),
                         reward=0.0)
        with pytest.raises(ValueError):
            mc.meta_loss_and_grads([bad])


class TestTraining:
    def test_loss_decreases_on_fixed_batch(self):
        rng = np.random.default_rng(7)
        mc = controller()
        batch = make_batch(rng, mc, n=16)
        first = mc.meta_loss(batch)
        for _ in range(150):
            mc.train_meta(batch)
        assert mc.meta_loss(batch) < first * 0.5
        assert mc.train_steps == 150

    def test_train_marks_everything_dirty(self):
        rng = np.random.default_rng(1)
        state = small_state()
        mc = controller()
        mc.refresh_embeddings(state)
        assert not mc.dirty
        mc.train_meta(make_batch(rng, mc, n=4))
        assert mc.dirty == set(range(6))

    def test_target_projector_moves_slowly(self):
        rng = np.random.default_rng(2)
        mc = controller(tau=0.01)
        before_target = [p.copy() for p in mc.state_projector_target.params()]
        mc.train_meta(make_batch(rng, mc, n=4))
        online = mc.state_projector.params()
        target = mc.state_projector_target.params()
        moved = [float(np.max(np.abs(t - b)))
                 for t, b in zip(target, before_target)]
        gap = [float(np.max(np.abs(o - t))) for o, t in zip(online, target)]
        assert max(moved) > 0.0
        assert max(moved) < max(gap)  # target lags the online net


class TestReplay:
    def test_capacity_drops_oldest(self):
        rng = np.random.default_rng(3)
        mc = controller(replay_capacity=5)
        for i in range(8):
            sample = make_batch(rng, mc, n=1)[0]
            sample.reward = float(i)
            mc.record(sample)
        assert len(mc.replay) == 5
        assert [s.reward for s in mc.replay] == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_sample_without_replacement(self):
        rng = np.random.default_rng(4)
        mc = controller()
        for sample in make_batch(rng, mc, n=6):
            mc.record(sample)
        batch = mc.sample_replay(rng, 6)
        assert len({id(s) for s in batch}) == 6
        with pytest.raises(ValueError):
            mc.sample_replay(rng, 7)


class TestSizeAndPersistence:
    def test_trained_param_count_independent_of_device_count(self):
        small = controller(m=10)
        large = controller(m=50)
        assert small.trained_param_count() == large.trained_param_count() > 0

    def test_clone_is_independent(self):
        rng = np.random.default_rng(5)
        mc = controller()
        frozen = mc.clone()
        before = [p.copy() for p in frozen._trained_params()]
        mc.train_meta(make_batch(rng, mc, n=4))
        for p, b in zip(frozen._trained_params(), before):
            np.testing.assert_array_equal(p, b)

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        state = small_state()
        mc = controller(seed=21, alpha=2)
        mc.refresh_embeddings(state)
        mc.train_meta(make_batch(rng, mc, n=4))
        mc.refresh_embeddings(state)
        path = tmp_path / "meta.ckpt"
        mc.save(path)
        loaded = MetaController.load(path)
        assert loaded.role == mc.role and loaded.alpha == mc.alpha
        np.testing.assert_array_equal(loaded.id_embeddings, mc.id_embeddings)
        np.testing.assert_array_equal(loaded.embed_cache, mc.embed_cache)
        obs = observe(state, DEFENDER)
        np.testing.assert_allclose(loaded.score_all(obs), mc.score_all(obs),
                                   atol=1e-12)
        np.testing.assert_allclose(loaded.key_embedding(obs),
                                   mc.key_embedding(obs), atol=1e-12)
        assert loaded.select(state, obs) == mc.select(state, obs)
