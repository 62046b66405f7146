import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdelab.world import (
    GRID,
    ConfigError,
    LatentState,
    Renderer,
    SplitError,
    WorldConfig,
    apply_intervention,
    dataset_digest,
    ground_truth_delta,
    load_dataset,
    make_splits,
    render,
    sample_latents,
    save_dataset,
    split_tables,
    stack_pairs,
)

FOUR_ACTIONS = dict(action_names=("open", "close", "turn_on", "turn_off"), inverse_pairs=(("open", "close"), ("turn_on", "turn_off")))


def small(**kw):
    base = dict(num_objects=3, pairs_per_split=24, observation_dim=24, hidden_dim=32)
    base.update(kw)
    return WorldConfig(**base)


# ---------------------------------------------------------------- latents


def test_latent_shapes():
    cfg = WorldConfig(num_objects=2, scene_dims=2, props_per_object=3, observation_dim=16, hidden_dim=16)
    z = sample_latents(cfg, np.random.default_rng(0))
    assert z.z_s.shape == (2,) and z.z_o.shape == (2, 3)


def test_latents_deterministic_per_seed():
    cfg = WorldConfig()
    a = sample_latents(cfg, np.random.default_rng(7))
    b = sample_latents(cfg, np.random.default_rng(7))
    assert np.array_equal(a.flat(), b.flat())


def test_latent_mean_monte_carlo():
    cfg = WorldConfig()
    rng = np.random.default_rng(123)
    draws = np.stack([sample_latents(cfg, rng).flat() for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0)) <= 0.05)
    assert draws.min() >= -1.0 and draws.max() <= 1.0
    # every coordinate sits on the quantisation grid
    assert np.array_equal(np.round(draws / GRID) * GRID, draws)


# ---------------------------------------------------------------- interventions


def test_open_is_one_hot_plus_one():
    cfg = WorldConfig(intervention_noise=0.0)
    z = sample_latents(cfg, np.random.default_rng(1))
    zt = apply_intervention(z, "open", 1, cfg, np.random.default_rng(2))
    diff = zt.z_o - z.z_o
    expected = np.zeros_like(diff)
    expected[1, 0] = 1.0
    assert np.array_equal(diff, expected)
    assert np.array_equal(zt.z_s, z.z_s)


def test_open_then_close_recovers_state():
    cfg = WorldConfig(intervention_noise=0.0)
    rng = np.random.default_rng(3)
    z = sample_latents(cfg, rng)
    back = apply_intervention(apply_intervention(z, "open", 4, cfg, rng), "close", 4, cfg, rng)
    assert np.array_equal(back.flat(), z.flat())


def test_noise_std_monte_carlo():
    cfg = WorldConfig(intervention_noise=0.01)
    rng = np.random.default_rng(5)
    z = sample_latents(cfg, rng)
    shifted = np.array([apply_intervention(z, "turn_on", 2, cfg, rng).z_o[2, 1] for _ in range(1000)])
    assert 0.008 <= shifted.std(ddof=1) <= 0.012
    others = apply_intervention(z, "turn_on", 2, cfg, rng)
    mask = np.ones_like(z.z_o, dtype=bool)
    mask[2, 1] = False
    assert np.array_equal(others.z_o[mask], z.z_o[mask])


def test_object_block_noise_touches_only_that_object():
    cfg = WorldConfig(intervention_noise=0.01, noise_object_block=True)
    z = sample_latents(cfg, np.random.default_rng(0))
    zt = apply_intervention(z, "dirty", 3, cfg, np.random.default_rng(1))
    changed = np.argwhere(zt.z_o != z.z_o)
    assert set(changed[:, 0]) == {3} and len(changed) == cfg.props_per_object


def test_unknown_action_or_object_rejected():
    cfg = WorldConfig()
    z = sample_latents(cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="unknown action"):
        apply_intervention(z, "fly", 0, cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="unknown object"):
        apply_intervention(z, "open", 6, cfg, np.random.default_rng(0))


@given(st.sampled_from(WorldConfig().inverse_pairs), st.integers(0, 5))
def test_inverse_deltas_are_negated(pair, obj):
    cfg = WorldConfig()
    a, b = (ground_truth_delta(name, obj, cfg) for name in pair)
    assert a.target_coord == b.target_coord
    assert (-a).direction == b.direction and a.magnitude == b.magnitude
    assert np.array_equal(a.as_object_vector(cfg), -b.as_object_vector(cfg))
    assert np.count_nonzero(a.as_object_vector(cfg)) == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 5), st.integers(0, 5))
def test_oracle_delta_sparsity(seed, obj, action):
    cfg = WorldConfig(intervention_noise=0.0)
    rng = np.random.default_rng(seed)
    z = sample_latents(cfg, rng)
    zt = apply_intervention(z, action, obj, cfg, rng)
    diff = zt.flat() - z.flat()
    gt = ground_truth_delta(action, obj, cfg)
    assert np.count_nonzero(diff) == 1
    assert diff[np.flatnonzero(diff)[0]] == gt.direction * gt.magnitude


# ---------------------------------------------------------------- rendering


def test_render_is_deterministic():
    cfg = WorldConfig()
    z = sample_latents(cfg, np.random.default_rng(0))
    a = render(z, Renderer.from_config(cfg))
    b = render(z, Renderer.from_config(cfg))
    assert a.shape == (cfg.observation_dim,)
    assert a.tobytes() == b.tobytes()


def test_render_rejects_wrong_dims():
    r = Renderer.from_config(WorldConfig())
    with pytest.raises(ConfigError, match="latent"):
        render(LatentState(np.zeros(3), np.zeros((6, 3))), r)
    with pytest.raises(ConfigError):
        r.render_batch(np.zeros((2, 5)))


def test_render_injective_on_sampled_states():
    cfg = WorldConfig(intervention_noise=0.0)
    r = Renderer.from_config(cfg)
    rng = np.random.default_rng(9)
    z0, z1 = [], []
    for i in range(1000):
        z = sample_latents(cfg, rng)
        z0.append(z.flat())
        z1.append(apply_intervention(z, i % 6, i % 6, cfg, rng).flat())
    dist = np.linalg.norm(r.render_batch(np.array(z0)) - r.render_batch(np.array(z1)), axis=1)
    assert dist.min() > 0


PATCH = dict(num_objects=3, patch_grid=9, observation_dim=16, hidden_dim=32, intervention_noise=0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2), st.integers(0, 5))
def test_patch_locality(seed, obj, action):
    cfg = WorldConfig(**PATCH)
    r = Renderer.from_config(cfg)
    rng = np.random.default_rng(seed)
    z = sample_latents(cfg, rng)
    x, xt = render(z, r), render(apply_intervention(z, action, obj, cfg, rng), r)
    assert x.shape == (9, 16)
    changed = set(np.flatnonzero(np.any(x != xt, axis=1)))
    assert changed == set(np.flatnonzero(r.patch_owner == obj))


def test_patch_locality_survives_object_block_noise():
    cfg = WorldConfig(**{**PATCH, "intervention_noise": 0.05, "noise_object_block": True})
    data = make_splits(replace_pairs(cfg, 32))
    for pair in data.train:
        changed = set(np.flatnonzero(np.any(pair.x != pair.x_tilde, axis=1)))
        assert changed == {3 * pair.object, 3 * pair.object + 1, 3 * pair.object + 2}


def replace_pairs(cfg, m):
    return WorldConfig.from_dict({**cfg.to_dict(), "pairs_per_split": m})


# ---------------------------------------------------------------- splits


def test_compositional_split_four_objects_four_actions():
    cfg = WorldConfig(num_objects=4, props_per_object=2, observation_dim=16, hidden_dim=16, pairs_per_split=64, **FOUR_ACTIONS)
    data = make_splits(cfg)
    ps = data.split_manifest["pair_sets"]
    train = {tuple(p) for p in ps["train"]}
    comp = {tuple(p) for p in ps["ood_compositional"]}
    assert train and comp and not train & comp
    assert {n for n, _ in train} == {n for n, _ in comp}
    observed = {(p.object, p.action) for p in data.ood_compositional}
    assert observed <= comp


def test_systematic_split_disjoint_objects():
    cfg = WorldConfig(num_objects=4, props_per_object=2, observation_dim=16, hidden_dim=16, systematic_holdout=2, **FOUR_ACTIONS)
    data = make_splits(replace_pairs(cfg, 48))
    assert data.split_manifest["train_objects"] == [0, 1]
    assert data.split_manifest["systematic_objects"] == [2, 3]
    assert {p.object for p in data.train} <= {0, 1}
    assert {p.object for p in data.ood_systematic} == {2, 3}


def test_confounded_train_prefers_the_preferred_block():
    cfg = WorldConfig(confounding_strength=0.9, pairs_per_split=4000)
    data = make_splits(cfg)
    blocks = cfg.action_blocks()
    _, _, acts, objs = stack_pairs(data.train)
    for n in sorted(set(objs)):
        mine = acts[objs == n]
        assert np.isin(mine, blocks[n % len(blocks)]).mean() >= 0.8


def test_unconfounded_table_is_uniform_over_allowed():
    cfg = WorldConfig(confounding_strength=0.0)
    table = split_tables(cfg)["train"]
    for row in table[split_tables(cfg)["train_objects"]]:
        nz = row[row > 0]
        assert np.allclose(nz, nz[0])


def test_every_pair_has_oracle_latents():
    data = make_splits(small())
    for _, pairs in data.items():
        assert all(p.oracle_latents is not None for p in pairs)
        assert all(p.x.dtype == np.float32 and p.x.shape == p.x_tilde.shape for p in pairs)


def test_infeasible_split_names_constraint():
    with pytest.raises(SplitError, match="num_objects >= 2"):
        make_splits(WorldConfig(num_objects=1, observation_dim=8, hidden_dim=8))
    with pytest.raises(SplitError, match="two action groups"):
        make_splits(small(action_names=("open", "close"), inverse_pairs=(("open", "close"),)))
    with pytest.raises(SplitError, match="never occur"):
        make_splits(small(num_objects=2, confounding_strength=1.0, systematic_holdout=1))


# ---------------------------------------------------------------- config validation


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(num_objects=0), "num_objects"),
        (dict(delta_magnitude=0.0), "delta_magnitude"),
        (dict(intervention_noise=-1.0), "intervention_noise"),
        (dict(confounding_strength=1.5), "confounding_strength"),
        (dict(observation_dim=10), "observation_dim"),
        (dict(patch_grid=7), "patch_grid"),
        (dict(inverse_pairs=(("open", "close"), ("close", "dirty"))), "already has an inverse"),
        (dict(inverse_pairs=(("open", "fly"),)), "unknown action"),
        (dict(action_names=("a", "a")), "unique"),
        (dict(props_per_object=2), "props_per_object"),
    ],
)
def test_config_validation(kw, match):
    with pytest.raises(ConfigError, match=match):
        WorldConfig(**kw)


def test_config_dict_round_trip():
    cfg = WorldConfig(num_objects=4, seed=2**63 - 1)
    assert WorldConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# ---------------------------------------------------------------- serialisation


def test_dataset_round_trip_is_byte_identical(tmp_path):
    data = make_splits(small())
    a = save_dataset(data, tmp_path / "a")
    back = load_dataset(a)
    b = save_dataset(back, tmp_path / "b")
    for name in ("train", "iid_test", "ood_compositional", "ood_systematic"):
        assert (a / f"{name}.jsonl").read_bytes() == (b / f"{name}.jsonl").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert dataset_digest(back) == dataset_digest(data)
    p, q = data.train[0], back.train[0]
    assert np.array_equal(p.x, q.x) and np.array_equal(p.oracle_latents[1].z_o, q.oracle_latents[1].z_o)


def test_same_seed_same_bytes_other_seed_differs():
    assert dataset_digest(make_splits(small(seed=4))) == dataset_digest(make_splits(small(seed=4)))
    assert dataset_digest(make_splits(small(seed=4))) != dataset_digest(make_splits(small(seed=5)))


def test_pairs_are_order_independent():
    # a pair depends only on (seed, split, index): a longer dataset extends a shorter one
    short = make_splits(small(pairs_per_split=10))
    long = make_splits(small(pairs_per_split=20))
    assert all(np.array_equal(a.x, b.x) and a.action == b.action for a, b in zip(short.train, long.train))
