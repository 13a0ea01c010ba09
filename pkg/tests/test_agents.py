import numpy as np
import pytest
from hypothesis import given, strategies as st

from uninav.agents import (ExplorationSchedule, Learner, PerConfig, TrainingConfig, beta_at, select_action,
                           td_target, td_targets, train_episode)
from uninav.env import IntersectionEnv, Scenario
from uninav.nn import QNetwork
from uninav.replay import PrioritizedMemory, ReplayMemory, Transition

TINY = dict(in_shape=(3, 6, 6), filters=(2,), hidden=(4,), pool=(2, 2))


def tiny_transition(rng, terminal=False):
    g = lambda: (rng.random((3, 6, 6)) < 0.2).astype(np.float32)
    return Transition(g(), float(rng.uniform(0, 15)), int(rng.integers(4)), float(rng.normal()), g(),
                      float(rng.uniform(0, 15)), terminal)


def test_defaults():
    t, p, e = TrainingConfig(), PerConfig(), ExplorationSchedule()
    assert (t.gamma, t.batch_size, t.replay_capacity, t.warmup, t.target_sync, t.episodes) == \
        (0.95, 32, 10_000, 750, 5_000, 450)
    assert (p.alpha, p.beta0, p.eps) == (0.6, 0.4, 0.01)
    assert (e.start, e.floor, e.decay) == (1.0, 0.05, 0.99)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(warmup=20_000)
    with pytest.raises(ValueError):
        PerConfig(beta0=0.0)
    with pytest.raises(ValueError):
        ExplorationSchedule(floor=2.0)
    with pytest.raises(ValueError):
        Learner("sarsa")


def test_greedy_choice_and_tie_break():
    rng = np.random.default_rng(0)
    assert select_action([1, 3, 2, 0], 0.0, rng) == 1
    assert select_action([5, 5, 0, 0], 0.0, rng) == 0


def test_fully_random_choice_is_uniform():
    rng = np.random.default_rng(0)
    freq = np.bincount([select_action([9, 0, 0, 0], 1.0, rng) for _ in range(100_000)], minlength=4) / 1e5
    np.testing.assert_allclose(freq, 0.25, atol=0.01)


@given(k=st.integers(0, 2000))
def test_epsilon_schedule(k):
    e = ExplorationSchedule()
    assert e.value(k) == max(0.05, 0.99 ** k)
    assert e.value(k + 1) <= e.value(k)


def test_beta_anneal():
    cfg = PerConfig(beta_horizon=1000)
    assert beta_at(0, cfg) == 0.4
    assert beta_at(500, cfg) == pytest.approx(0.7)
    assert beta_at(1000, cfg) == 1.0
    assert beta_at(5000, cfg) == 1.0
    with pytest.raises(ValueError):
        beta_at(0, PerConfig())


def test_default_beta_horizon_covers_training():
    learner = Learner(cfg=TrainingConfig(episodes=2), net_kwargs=TINY)
    assert learner.beta_horizon == 2 * 675


def test_target_examples():
    q_on = np.array([[1.0, 2.0, 0.0, 0.0]])
    q_tg = np.array([[10.0, -1.0, 0.0, 0.0]])
    assert td_targets([-5.0], [True], q_on, q_tg, 0.95, "ddqn")[0] == -5.0
    assert td_targets([0.0], [False], q_on, q_tg, 0.95, "ddqn")[0] == pytest.approx(-0.95)
    assert td_targets([0.0], [False], q_on, q_tg, 0.95, "dqn")[0] == pytest.approx(9.5)
    with pytest.raises(ValueError):
        td_targets([0.0], [False], q_on, q_tg, 0.95, "sarsa")


def test_single_transition_target_uses_networks():
    rng = np.random.default_rng(0)
    online, target = QNetwork(seed=1, **TINY), QNetwork(seed=2, **TINY)
    for p in online.params + target.params:
        p += rng.normal(0, 0.3, p.shape).astype(p.dtype)
    t = tiny_transition(rng)
    q_on = online.forward(t.next_grid, t.next_speed)[0]
    q_tg = target.forward(t.next_grid, t.next_speed)[0]
    assert td_target(t, online, target, 0.9, "ddqn") == pytest.approx(t.reward + 0.9 * q_tg[np.argmax(q_on)])
    assert td_target(t, online, target, 0.9, "dqn") == pytest.approx(t.reward + 0.9 * q_tg.max())
    assert td_target(t, online, None, 0.9, "dqn") == pytest.approx(t.reward + 0.9 * q_on.max())
    done = Transition(t.grid, t.speed, t.action, -5.0, t.next_grid, t.next_speed, True)
    assert td_target(done, online, target, 0.9, "ddqn") == -5.0


def test_double_target_never_exceeds_max_target():
    rng = np.random.default_rng(7)
    q_on, q_tg = rng.normal(size=(1000, 4)), rng.normal(size=(1000, 4))
    r = rng.normal(size=1000)
    done = np.zeros(1000, bool)
    assert np.all(td_targets(r, done, q_on, q_tg, 0.95, "ddqn") <= td_targets(r, done, q_on, q_tg, 0.95, "dqn"))


@pytest.mark.parametrize("algo, memory, has_target", [("dqn", ReplayMemory, False), ("ddqn", ReplayMemory, True),
                                                      ("ddqn-per", PrioritizedMemory, True)])
def test_variant_wiring(algo, memory, has_target):
    learner = Learner(algo, net_kwargs=TINY)
    assert type(learner.memory) is memory
    assert (learner.target is not None) == has_target
    assert learner.beta == (1.0 if algo != "ddqn-per" else 0.4)


def test_no_updates_before_warmup():
    rng = np.random.default_rng(0)
    learner = Learner(net_kwargs=TINY)
    before = [p.copy() for p in learner.online.params]
    for _ in range(749):
        learner.observe(tiny_transition(rng))
    assert learner.n_updates == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, learner.online.params))
    learner.observe(tiny_transition(rng))
    assert learner.n_updates == 1
    assert learner.update_steps == [(750, 750)]


def test_target_sync_every_5000_steps():
    rng = np.random.default_rng(0)
    learner = Learner("ddqn", TrainingConfig(train_every=1000), net_kwargs=TINY)
    pool = [tiny_transition(rng) for _ in range(64)]
    for step in range(1, 5001):
        learner.observe(pool[step % 64])
        if step == 4999:
            assert not all(np.array_equal(a, b) for a, b in zip(learner.target.params, learner.online.params))
    assert learner.sync_steps == [5000]
    assert all(np.array_equal(a, b) for a, b in zip(learner.target.params, learner.online.params))
    assert [s for s, _ in learner.update_steps] == [1000, 2000, 3000, 4000, 5000]


def test_prioritized_update_rewrites_sampled_priorities():
    rng = np.random.default_rng(0)
    learner = Learner("ddqn-per", TrainingConfig(warmup=32), net_kwargs=TINY)
    for _ in range(31):
        learner.observe(tiny_transition(rng))
    assert np.all(learner.memory.priority[:31] == 1.0)
    learner.observe(tiny_transition(rng))
    touched = np.flatnonzero(learner.sample_counts)
    assert len(touched) and np.all(learner.memory.priority[touched] != 1.0)


def test_epsilon_decays_once_per_episode():
    learner = Learner(net_kwargs=TINY)
    learner.end_episode()
    learner.end_episode()
    assert learner.epsilon == pytest.approx(0.99 ** 2)


def run_two_episodes():
    env = IntersectionEnv(Scenario(pedestrians=(6, 6), spawning=False))
    learner = Learner("ddqn-per", TrainingConfig(warmup=64, train_every=8, target_sync=200), seed=11,
                      net_kwargs=dict(filters=(4,), hidden=(8,)))
    records = [train_episode(env, learner, seed) for seed in (101, 202)]
    return records, learner


def test_training_is_deterministic():
    (ra, la), (rb, lb) = run_two_episodes(), run_two_episodes()
    assert la.n_updates > 0
    assert [(r.outcome, r.steps, r.ret) for r in ra] == [(r.outcome, r.steps, r.ret) for r in rb]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(la.online.params, lb.online.params))
    assert la.episodes_done == 2


@pytest.mark.parametrize("algo", ["dqn", "ddqn", "ddqn-per"])
def test_learner_recovers_discounted_values_on_a_chain(algo):
    """Five states in a row; stepping right off the end pays 1 and ends the
    episode, so Q(s, right) = gamma ** (4 - s) under the optimal policy."""
    n = 5

    def obs(i):
        g = np.zeros((3, 6, 6), np.float32)
        g[0, i, i] = 1
        return g

    learner = Learner(algo, TrainingConfig(warmup=64, target_sync=200, replay_capacity=2000),
                      PerConfig(beta_horizon=5000), seed=0,
                      net_kwargs=dict(in_shape=(3, 6, 6), filters=(8,), hidden=(32,), n_actions=2, pool=(2, 2),
                                      input_scale=(1, 1, 1)))
    learner.optimizer.lr = 1e-3
    rng = np.random.default_rng(0)
    for _ in range(6000):
        s, a = int(rng.integers(n)), int(rng.integers(2))
        done = s == n - 1 and a == 1
        nxt = min(s + 1, n - 1) if a == 1 else max(s - 1, 0)
        learner.observe(Transition(obs(s), 0.0, a, float(done), obs(nxt), 0.0, done))
    q = np.array([learner.online.forward(obs(i), 0.0)[0] for i in range(n)])
    np.testing.assert_allclose(q[:, 1], 0.95 ** np.arange(n - 1, -1, -1), atol=0.05)
    assert np.all(q[:, 1] > q[:, 0])
