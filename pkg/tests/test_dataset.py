import json
import math
from collections import Counter

import numpy as np
import pytest

from omac.dataset import (DatasetFormatError, DatasetValidationError, FingerprintMismatchWarning,
                          OfflineDataset, dumps, exclude_joint_action, generate, load, loads,
                          save, subsample, summary)
from omac.env import make_grid_env, make_matrix_game

PAYOFF = [[1, 0], [0, 2]]


@pytest.fixture(scope="module")
def poor_matrix():
    return generate(make_matrix_game(PAYOFF), "poor", 1000, 0)


def test_poor_matrix_joint_frequencies(poor_matrix):
    counts = Counter(ep.steps[0].act for ep in poor_matrix.episodes)
    assert set(counts) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    for c in counts.values():
        assert abs(c / 1000 - 0.25) <= 0.05


def test_good_tier_optimal_frequency():
    data = generate(make_matrix_game(PAYOFF), "good", 1000, 1)
    freq = sum(ep.steps[0].act == (1, 1) for ep in data.episodes) / 1000
    # each agent plays the planner action with prob 0.9 + 0.1 / 2
    assert freq == pytest.approx(0.95 ** 2, abs=0.03)


def test_tier_returns_are_ordered():
    env = make_grid_env(3, 3, 2, 2, 6)
    means = [summary(generate(env, tier, 200, 0)).mean_return for tier in ("good", "medium", "poor")]
    assert means[0] > means[1] > means[2]


def test_empty_dataset_has_valid_meta(tmp_path):
    data = generate(make_matrix_game(PAYOFF), "poor", 0, 0)
    assert len(data) == 0 and data.meta["format_version"] == "1"
    back = load(save(data, tmp_path / "empty.omd.jsonl"))
    assert len(back) == 0 and back.meta == data.meta
    stats = summary(data)
    assert stats.n_steps == 0 and stats.support == set()
    assert stats.action_histogram.sum() == 0


def test_generation_is_reproducible():
    env = make_grid_env(3, 3, 2, 2, 6)
    a, b = generate(env, "medium", 20, 5), generate(env, "medium", 20, 5)
    assert dumps(a) == dumps(b)
    assert dumps(generate(env, "medium", 20, 6)) != dumps(a)


def test_unknown_tier():
    with pytest.raises(ValueError):
        generate(make_matrix_game(PAYOFF), "expert", 1, 0)


def test_every_stored_action_is_legal():
    env = make_grid_env(3, 3, 2, 2, 6)
    for ep in generate(env, "poor", 50, 2).episodes:
        for s in ep.steps:
            assert all(s.mask[i, a] for i, a in enumerate(s.act))
        assert [s.done for s in ep.steps] == [False] * (len(ep.steps) - 1) + [True]


def test_roundtrip_is_exact(tmp_path):
    env = make_grid_env(3, 3, 2, 2, 6)
    data = generate(env, "medium", 30, 4)
    path = save(data, tmp_path / "d.omd.jsonl")
    back = load(path)
    assert back.episodes == data.episodes and back.meta == data.meta
    assert dumps(back) == path.read_text()


def test_full_precision_reals_survive():
    data = generate(make_matrix_game([[0.1 + 1e-16, 1 / 3], [math.pi, 2]]), "poor", 20, 0)
    back = loads(dumps(data))
    assert [ep.steps[0].rew for ep in back.episodes] == [ep.steps[0].rew for ep in data.episodes]


def test_truncated_file_names_line(tmp_path):
    text = dumps(generate(make_matrix_game(PAYOFF), "poor", 3, 0))
    cut = text[: len(text) - 25]
    with pytest.raises(DatasetFormatError, match="line 4"):
        loads(cut)


def test_missing_episode_line_detected():
    text = dumps(generate(make_matrix_game(PAYOFF), "poor", 3, 0))
    lines = text.splitlines()
    with pytest.raises(DatasetFormatError):
        loads("\n".join(lines[:-1]) + "\n")


def test_illegal_action_names_episode_and_step():
    text = dumps(generate(make_grid_env(3, 3, 2, 2, 4), "poor", 3, 0))
    lines = text.splitlines()
    rec = json.loads(lines[2])
    rec["steps"][1]["act"] = [9, 0]
    lines[2] = json.dumps(rec)
    with pytest.raises(DatasetValidationError, match="episode 1 step 1"):
        loads("\n".join(lines))


def test_fingerprint_mismatch_warns():
    text = dumps(generate(make_matrix_game(PAYOFF), "poor", 2, 0))
    with pytest.warns(FingerprintMismatchWarning):
        loads(text, env=make_matrix_game([[1, 0], [0, 3]]))


def test_subsample_half_is_deterministic():
    data = generate(make_matrix_game(PAYOFF), "poor", 1000, 0)
    a, b = subsample(data, 0.5, 3), subsample(data, 0.5, 3)
    assert len(a) == 500 and dumps(a) == dumps(b)
    assert a.meta["lineage"][-1] == {"ratio": 0.5, "seed": 3, "parent_episodes": 1000,
                                     "parent_hash": data.content_hash()}


def test_subsample_tenth_is_subset(poor_matrix):
    small = subsample(poor_matrix, 0.1, 0)
    assert len(small) == 100
    ids = {id(ep) for ep in poor_matrix.episodes}
    assert all(id(ep) in ids for ep in small.episodes)


def test_subsample_full_ratio_keeps_everything(poor_matrix):
    full = subsample(poor_matrix, 1.0, 9)
    assert len(full) == len(poor_matrix)
    assert sorted(map(id, full.episodes)) == sorted(map(id, poor_matrix.episodes))


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_subsample_rejects_bad_ratio(poor_matrix, ratio):
    with pytest.raises(ValueError):
        subsample(poor_matrix, ratio, 0)


def test_subsample_rejects_empty_selection():
    data = generate(make_matrix_game(PAYOFF), "poor", 5, 0)
    with pytest.raises(ValueError):
        subsample(data, 0.1, 0)


def test_subsample_composes_in_count(poor_matrix):
    direct = subsample(poor_matrix, 0.25, 0)
    nested = subsample(subsample(poor_matrix, 0.5, 1), 0.5, 2)
    assert len(direct) == len(nested) == 250


def test_summary_support_counts_pairs():
    data = generate(make_matrix_game(PAYOFF), "poor", 40, 0)
    data = OfflineDataset([ep for ep in data.episodes if ep.steps[0].act in {(0, 0), (1, 1)}],
                          data.meta)
    stats = summary(data)
    assert stats.support == {(0, (0, 0)), (0, (1, 1))}
    assert stats.n_episodes == stats.n_steps == len(data)


def test_poor_support_covers_all_joint_actions(poor_matrix):
    assert len(summary(poor_matrix).support) == 4


def test_exclude_joint_action_drops_episodes(poor_matrix):
    out = exclude_joint_action(poor_matrix, (1, 1))
    assert all(ep.steps[0].act != (1, 1) for ep in out.episodes)
    assert len(out) == sum(ep.steps[0].act != (1, 1) for ep in poor_matrix.episodes)
    assert out.meta["lineage"][-1]["exclude"] == [1, 1]


def test_transitions_arrays_line_up():
    env = make_grid_env(3, 3, 2, 2, 4)
    data = generate(env, "poor", 5, 0)
    tr = data.transitions()
    assert len(tr) == data.n_steps == 20
    assert tr.obs.shape == (20, 2, env.obs_dim) and tr.mask.shape == (20, 2, env.n_actions)
    # next_mask of a non-terminal step is the mask of the following step
    np.testing.assert_array_equal(tr.next_mask[0], tr.mask[1])
    np.testing.assert_array_equal(tr.next_obs[0], tr.obs[1])
    assert tr.done.sum() == 5
