import json

import numpy as np
import pytest

import config
from conftest import fake_reference
from datagen import (
    HEADER, TIERS, DatasetDimensionError, DatasetTruncatedError, DatasetVersionError, EmptyDatasetError,
    OfflineDataset, ReferenceCache, UnknownTierError, _pick_medium, collect, get_reference_run,
    load, meta_path, sample_indices, save,
)
from env import make_env, normalized_score, step


def test_random_tier_has_n_bounded_transitions(pointmass, reference):
    dataset = collect(pointmass, "random", 1000, 0, reference)
    assert len(dataset) == 1000
    assert dataset.states.shape == (1000, 2) and dataset.actions.shape == (1000, 1)
    assert np.all(np.abs(dataset.actions) <= 1.0)
    assert dataset.behavior_policies == []


def test_stored_transitions_replay_through_the_dynamics(pointmass, medium_dataset):
    for tr in medium_dataset.transitions()[:150]:
        result = step(pointmass, tr.s, tr.a)
        np.testing.assert_array_equal(result.next_state, tr.s_next)
        assert result.reward == tr.r
        assert not tr.done


def test_same_seed_gives_byte_identical_files(tmp_path, pointmass, reference):
    a = save(collect(pointmass, "medium", 250, 9, reference), tmp_path / "a.odrl")
    b = save(collect(pointmass, "medium", 250, 9, reference), tmp_path / "b.odrl")
    assert a.read_bytes() == b.read_bytes()
    assert meta_path(a).read_text() == meta_path(b).read_text()
    c = save(collect(pointmass, "medium", 250, 10, reference), tmp_path / "c.odrl")
    assert a.read_bytes() != c.read_bytes()


def test_medium_expert_concatenates_halves(pointmass, reference):
    mixed = collect(pointmass, "medium-expert", 301, 5, reference)
    assert len(mixed) == 301
    assert mixed.behavior_policies == ["medium", "expert"]
    first, second = mixed.rewards[:150], mixed.rewards[150:]
    low, high = sorted([first.mean(), second.mean()])
    assert low <= mixed.mean_reward() <= high


def test_replay_tiers_take_the_buffer(pointmass, reference):
    medium_replay = collect(pointmass, "medium-replay", 10, 0, reference)
    assert len(medium_replay) == reference.medium_buffer_size
    np.testing.assert_array_equal(medium_replay.states, reference.replay.states[:reference.medium_buffer_size])
    full = collect(pointmass, "full-replay", 10, 0, reference)
    assert len(full) == len(reference.replay)
    assert full.behavior_policies == ["expert"]


def test_tier_and_size_validation(pointmass, reference):
    with pytest.raises(UnknownTierError) as err:
        collect(pointmass, "medium-random", 100, 0, reference)
    for tier in TIERS:
        assert tier in str(err.value)
    with pytest.raises(EmptyDatasetError):
        collect(pointmass, "random", 0, 0, reference)


def test_medium_expert_needs_room_for_both_halves(pointmass, reference):
    with pytest.raises(EmptyDatasetError) as err:
        collect(pointmass, "medium-expert", 1, 0, reference)
    assert "medium-expert" in str(err.value)
    smallest = collect(pointmass, "medium-expert", 2, 0, reference)
    assert len(smallest) == 2


def test_empty_dataset_cannot_be_built(pointmass, reference):
    with pytest.raises(EmptyDatasetError):
        OfflineDataset(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 2)), np.zeros(0),
                       "random", pointmass, 0, reference.anchors)


def test_save_load_round_trip(tmp_path, random_dataset):
    path = save(random_dataset, tmp_path / "random.odrl")
    assert load(path) == random_dataset
    meta = json.loads(meta_path(path).read_text())
    assert meta["tier"] == "random" and meta["count"] == len(random_dataset)
    assert path.stat().st_size == HEADER.size + len(random_dataset) * (2 * 2 + 1 + 2) * 8


def test_corrupt_files_are_rejected(tmp_path, random_dataset):
    path = save(random_dataset, tmp_path / "d.odrl")
    data = path.read_bytes()
    sidecar = meta_path(path).read_text()

    def write(name: str, payload: bytes):
        target = tmp_path / name
        target.write_bytes(payload)
        meta_path(target).write_text(sidecar)
        return target

    with pytest.raises(DatasetVersionError):
        load(write("magic.odrl", b"XXXX" + data[4:]))
    wrong_version = HEADER.pack(config.DATASET_MAGIC, 2, 2, 1, len(random_dataset)) + data[HEADER.size:]
    with pytest.raises(DatasetVersionError):
        load(write("version.odrl", wrong_version))
    with pytest.raises(DatasetTruncatedError):
        load(write("short.odrl", data[:-8]))
    with pytest.raises(DatasetTruncatedError):
        load(write("header.odrl", data[:10]))
    with pytest.raises(DatasetDimensionError):
        load(write("long.odrl", data + b"\x00" * 8))
    empty = HEADER.pack(config.DATASET_MAGIC, config.DATASET_VERSION, 2, 1, 0)
    with pytest.raises(EmptyDatasetError):
        load(write("empty.odrl", empty))


def test_sidecar_must_agree_with_header(tmp_path, random_dataset):
    path = save(random_dataset, tmp_path / "d.odrl")
    meta = json.loads(meta_path(path).read_text())
    meta["count"] = meta["count"] + 1
    meta_path(path).write_text(json.dumps(meta))
    with pytest.raises(DatasetDimensionError):
        load(path)


def test_sample_indices_are_uniform():
    rng = np.random.default_rng(0)
    draws = 1_000_000
    counts = np.bincount(sample_indices(100, draws, rng), minlength=100)
    sigma = np.sqrt(draws * 0.01 * 0.99)
    assert np.all(np.abs(counts - draws / 100) <= 5 * sigma)
    with pytest.raises(EmptyDatasetError):
        sample_indices(0, 4, rng)


def test_dataset_sample_shapes(random_dataset):
    batch = random_dataset.sample(32, np.random.default_rng(1))
    assert batch.states.shape == (32, 2)
    assert batch.rewards.shape == (32, 1) and batch.dones.shape == (32, 1)


def test_pick_medium_prefers_the_band():
    snapshots = [None] * 3
    assert _pick_medium(snapshots, [10.0, 28.0, 35.0]) == 2
    assert _pick_medium(snapshots, [10.0, 28.0, 50.0]) == 1
    assert _pick_medium(snapshots[:2], [10.0, 50.0]) is None


def test_reference_cache_round_trip(tmp_path, pointmass, reference):
    cache = ReferenceCache(tmp_path / "cache")
    params = {"env": pointmass.name, "seed": 0, "steps": 1000}
    assert cache._generate_cache_key(params) == cache._generate_cache_key(dict(reversed(list(params.items()))))
    assert cache._generate_cache_key(params) != cache._generate_cache_key({**params, "seed": 1})
    assert cache.get(pointmass, params) is None

    cache.set(reference, params)
    restored = cache.get(pointmass, params)
    assert restored.replay == reference.replay
    assert restored.medium_buffer_size == reference.medium_buffer_size
    assert restored.history == reference.history
    for a, b in zip(restored.expert.trunk.parameters, reference.expert.trunk.parameters):
        np.testing.assert_array_equal(a, b)


def test_get_reference_run_uses_the_cache(tmp_path, pointmass, reference, monkeypatch):
    import datagen
    calls = []

    def fake_train(spec, seed, steps):
        calls.append(seed)
        return fake_reference(spec, seed)
    monkeypatch.setattr(datagen, "train_reference_policies", fake_train)

    cache = ReferenceCache(tmp_path / "cache")
    first = get_reference_run(pointmass, 0, cache, steps=1000)
    second = get_reference_run(pointmass, 0, cache, steps=1000)
    assert calls == [0]
    assert second.replay == first.replay


@pytest.mark.slow
def test_real_reference_run_brackets_the_medium_policy(tmp_path):
    spec = make_env("pointmass1d")
    run = get_reference_run(spec, 0, ReferenceCache(tmp_path / "cache"))
    low, high = config.MEDIUM_SCORE_FALLBACK
    assert low <= run.medium_score <= high
    assert run.anchors.expert_ref > run.anchors.random_ref
    expert = collect(spec, "expert", 2000, 1, run)
    medium = collect(spec, "medium", 2000, 1, run)
    assert expert.mean_reward() > medium.mean_reward()
    assert normalized_score(run.anchors.random_ref, run.anchors) == 0.0
