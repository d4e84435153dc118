import numpy as np
import pytest

from apprentice.dataset import (
    DatasetError,
    DemonstrationSet,
    Observation,
    Schedule,
    load,
    save,
    split,
)
from apprentice.envs import LowDimConfig, generate_lowdim


def _tiny_set(n_schedules=3, n_obs=4):
    rng = np.random.default_rng(0)
    schedules = []
    for i in range(n_schedules):
        obs = [
            Observation(
                context=rng.normal(size=2),
                action_features=rng.normal(size=(2, 2)),
                taken_actions=(int(rng.integers(2)),),
                timestep=t,
            )
            for t in range(n_obs)
        ]
        schedules.append(Schedule(f"s{i}", f"p{i}", obs))
    return DemonstrationSet(schedules, action_count=2, context_dim=2, action_dim=2)


def test_empty_set_round_trip(tmp_path):
    dset = DemonstrationSet([], action_count=2, context_dim=2, action_dim=2)
    path = tmp_path / "empty.txt"
    save(dset, path)
    assert load(path) == dset


def test_generated_lowdim_round_trip(tmp_path):
    dset = generate_lowdim(LowDimConfig(schedule_count=50, seed=3))
    path = tmp_path / "lowdim.txt"
    save(dset, path)
    loaded = load(path)
    assert loaded == dset
    # bit-exact floats
    a = dset.schedules[7].observations[3].context
    b = loaded.schedules[7].observations[3].context
    assert a.tobytes() == b.tobytes()


def test_load_rejects_zero_actions(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("apprentice-dataset v1\tgeneric\t0\t2\t2\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="no actions"):
        load(path)


def test_load_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("something-else v9\tgeneric\t2\t2\t2\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="header"):
        load(path)


def test_load_reports_line_number_for_malformed_record(tmp_path):
    dset = _tiny_set()
    path = tmp_path / "data.txt"
    save(dset, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[2] = lines[2].replace("\t", "|", 1)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(DatasetError, match=":3"):
        load(path)


def test_split_counts():
    dset = generate_lowdim(LowDimConfig(schedule_count=50, seed=0))
    train, test = split(dset, 0.8, seed=1)
    assert len(train.schedules) == 40
    assert len(test.schedules) == 10


def test_split_deterministic_under_seed():
    dset = _tiny_set(n_schedules=8)
    a1, b1 = split(dset, 0.5, seed=42)
    a2, b2 = split(dset, 0.5, seed=42)
    assert [s.schedule_id for s in a1.schedules] == [s.schedule_id for s in a2.schedules]
    assert [s.schedule_id for s in b1.schedules] == [s.schedule_id for s in b2.schedules]


def test_split_two_schedules():
    dset = _tiny_set(n_schedules=2)
    train, test = split(dset, 0.5, seed=0)
    assert len(train.schedules) == 1
    assert len(test.schedules) == 1


def test_split_never_shares_schedules():
    dset = _tiny_set(n_schedules=9)
    train, test = split(dset, 0.6, seed=7)
    train_ids = {s.schedule_id for s in train.schedules}
    test_ids = {s.schedule_id for s in test.schedules}
    assert not (train_ids & test_ids)
    assert len(train_ids) + len(test_ids) == 9


def test_split_rejects_empty_side():
    dset = _tiny_set(n_schedules=3)
    with pytest.raises(DatasetError):
        split(dset, 0.01, seed=0)


def test_schedule_rejects_nonincreasing_timesteps():
    obs = [
        Observation(np.zeros(2), np.zeros((2, 2)), (0,), timestep=1),
        Observation(np.zeros(2), np.zeros((2, 2)), (0,), timestep=1),
    ]
    with pytest.raises(DatasetError):
        Schedule("s", "p", obs)


def test_taken_action_outside_range_rejected():
    with pytest.raises(DatasetError):
        Observation(np.zeros(2), np.zeros((2, 2)), (5,), timestep=0)
