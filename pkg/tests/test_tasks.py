import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geco.errors import ConfigError
from geco.experiments import ExpertPolicy
from geco.rng import make_rng
from geco.tasks import (
    ID,
    OOD,
    EpisodeRecord,
    MixtureTaskSpec,
    PointMassState,
    Protocol,
    chunk_waypoints,
    env_step,
    expert_modes,
    expert_waypoints,
    gen_mixture_dataset,
    nearest_mode_distance,
    rollout_episode,
    sample_condition,
)
from geco.trainer import fit_normalizer

SPEC = MixtureTaskSpec()


def test_spec_validation():
    with pytest.raises(ConfigError):
        MixtureTaskSpec(d_a=3)
    with pytest.raises(ConfigError):
        MixtureTaskSpec(ood_radii=(0.9, 2.0))
    with pytest.raises(ConfigError):
        MixtureTaskSpec(modes=0)
    assert SPEC.chunk_dim == 32 and SPEC.cond_dim == 2


def test_zero_detour_modes_identical():
    m = expert_modes(np.array([0.6, 0.2]), MixtureTaskSpec(detour=0.0))
    np.testing.assert_array_equal(m[0], m[1])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0.0, 2.0), st.integers(1, 4))
def test_chunks_reach_target(phi, r, modes):
    s = r * np.array([np.cos(phi), np.sin(phi)])
    spec = MixtureTaskSpec(modes=modes)
    for chunk in expert_modes(s, spec):
        np.testing.assert_allclose(chunk.reshape(-1, 2).sum(axis=0), s, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(1.0, 2.0))
def test_modes_differ_by_detour(phi, r):
    s = r * np.array([np.cos(phi), np.sin(phi)])
    wp = expert_waypoints(s, SPEC)
    cheb = np.max(np.abs(wp[0] - wp[1]), axis=1)
    # the bow peaks at mid-chunk with amplitude ``detour`` along the unit normal
    assert np.linalg.norm(wp[1][SPEC.T_a // 2] - wp[0][SPEC.T_a // 2]) == pytest.approx(SPEC.detour, rel=1e-12)
    assert cheb.max() >= SPEC.detour / np.sqrt(2) - 1e-12


def test_bow_shrinks_inside_bow_radius():
    s = np.array([0.1, 0.0])
    wp = expert_waypoints(s, SPEC)
    assert np.linalg.norm(wp[1][8] - wp[0][8]) == pytest.approx(SPEC.detour * 0.1 / SPEC.bow_radius)


def test_dataset_shapes_and_determinism():
    a = gen_mixture_dataset(SPEC, 50, make_rng(3, "data"))
    b = gen_mixture_dataset(SPEC, 50, make_rng(3, "data"))
    assert len(a) == 100 and a.chunk_dim == 32 and a.cond_dim == 2
    np.testing.assert_array_equal(a.chunks, b.chunks)
    assert sorted(set(a.mode_ids.tolist())) == [1, 2]
    assert np.all(np.linalg.norm(a.conditions, axis=1) <= SPEC.train_radii[1] + 1e-12)
    # normalized chunks stay within the declared bound
    assert np.max(np.abs(fit_normalizer(a).normalize(a.chunks))) <= 1.5
    with pytest.raises(ValueError):
        gen_mixture_dataset(SPEC, 0, make_rng(0))


def test_sample_condition_regions():
    rng = make_rng(0, "regions")
    r_id = np.array([np.linalg.norm(sample_condition(ID, SPEC, rng)) for _ in range(2000)])
    r_ood = np.array([np.linalg.norm(sample_condition(OOD, SPEC, rng)) for _ in range(2000)])
    assert r_id.min() >= 0.5 and r_id.max() <= 1.0
    assert r_ood.min() >= 1.5 and r_ood.max() <= 2.0
    with pytest.raises(ValueError):
        sample_condition("test", SPEC, rng)


def test_sample_condition_uniform_chi_square():
    # equal-area bins of the annulus should be equally filled
    from scipy.stats import chisquare

    rng = make_rng(1, "chi2")
    r = np.array([np.linalg.norm(sample_condition(ID, SPEC, rng)) for _ in range(10_000)])
    lo, hi, k = 0.5, 1.0, 10
    edges = np.sqrt(np.linspace(lo**2, hi**2, k + 1))
    counts, _ = np.histogram(r, edges)
    assert chisquare(counts).pvalue > 0.01


def test_nearest_mode_distance():
    s = np.array([0.7, -0.3])
    m = expert_modes(s, SPEC)
    assert nearest_mode_distance(m[0], s, SPEC) == (0.0, 1)
    assert nearest_mode_distance(m[1], s, SPEC) == (0.0, 2)
    mid = 0.5 * (m[0] + m[1])
    d, j = nearest_mode_distance(mid, s, SPEC)
    assert j == 1 and d == pytest.approx(0.5 * np.linalg.norm(m[0] - m[1]))
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = rng.normal(size=32) * 0.1
        brute = min((np.linalg.norm(c - mm), i + 1) for i, mm in enumerate(m))
        assert nearest_mode_distance(c, s, SPEC) == pytest.approx(brute)


def test_env_step_clamps():
    st0 = PointMassState(np.zeros(2), np.ones(2), 0)
    assert np.all(env_step(st0, np.zeros(2)).position == 0)
    st1 = env_step(st0, np.array([10.0, 0.0]))
    np.testing.assert_array_equal(st1.position, [0.25, 0.0])
    assert st1.step_index == 1


def test_expert_replay_reaches_goal():
    s = np.array([0.8, 0.4])
    st_ = PointMassState(np.zeros(2), s, 0)
    for a in expert_modes(s, SPEC)[1].reshape(-1, 2):
        st_ = env_step(st_, a)
    np.testing.assert_allclose(st_.position, s, atol=1e-9)
    np.testing.assert_allclose(chunk_waypoints(expert_modes(s, SPEC)[1], SPEC)[-1], s, atol=1e-12)


def test_rollout_with_expert_policy():
    rec = rollout_episode(ExpertPolicy(SPEC, 1), np.array([0.9, 0.1]), Protocol(), make_rng(0))
    assert rec.success and rec.final_distance <= 0.05
    # executing half of each straight chunk halves the remaining distance per call
    assert len(rec.plans) == int(np.ceil(np.log2(np.hypot(0.9, 0.1) / 0.05)))
    back = EpisodeRecord.from_dict(rec.to_dict())
    assert back.to_dict() == rec.to_dict()


def test_rollout_monitor_first_call_and_zero_horizon():
    rec = rollout_episode(ExpertPolicy(SPEC), np.array([0.9, 0.1]), Protocol(), make_rng(0), monitor=lambda p: True)
    assert rec.t_report == 0 and not rec.success and rec.actions == []
    rec = rollout_episode(ExpertPolicy(SPEC), np.array([0.9, 0.1]), Protocol(T_total=0), make_rng(0))
    assert not rec.success and rec.plans == []
    rec = rollout_episode(ExpertPolicy(SPEC), np.array([0.01, 0.0]), Protocol(T_total=0), make_rng(0))
    assert rec.success


def test_rollout_records_policy_failure():
    def bad(cond, rng):
        raise RuntimeError("boom")

    rec = rollout_episode(bad, np.array([0.9, 0.1]), Protocol(), make_rng(0))
    assert not rec.success and rec.plans[0].error.startswith("RuntimeError")


def test_protocol_validation():
    with pytest.raises(ConfigError):
        Protocol(exec_count=17)
