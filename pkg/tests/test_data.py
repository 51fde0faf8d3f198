import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vaerul import data
from vaerul.data import DataConfig, DataError, RawTrajectory
from vaerul.ndcore import RngState


def _row(engine, cycle, settings=(0.0, 0.0, 100.0), sensors=None):
    sensors = sensors if sensors is not None else [1.0] * 21
    return " ".join(str(v) for v in (engine, cycle, *settings, *sensors)) + " \n"


def _traj(engine, sensors, settings=None):
    sensors = np.asarray(sensors, dtype=float)
    L = len(sensors)
    settings = np.zeros((L, 3)) if settings is None else np.asarray(settings, dtype=float)
    return RawTrajectory(engine, np.arange(1, L + 1), settings, sensors)


def test_read_trajectories_counts(tmp_path):
    p = tmp_path / "train.txt"
    p.write_text("".join(_row(e, c) for e in (1, 2) for c in range(1, 4 + e)))
    trajs = data.read_trajectories(p)
    assert [t.engine_id for t in trajs] == [1, 2]
    assert [len(t) for t in trajs] == [4, 5]
    assert trajs[0].sensors.shape == (4, 21) and trajs[0].settings.shape == (4, 3)


def test_read_trajectories_bad_column_count_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    good = _row(1, 1)
    p.write_text(good + " ".join(good.split()[:25]) + "\n")
    with pytest.raises(DataError, match=r"bad\.txt:2.*25"):
        data.read_trajectories(p)


def test_read_trajectories_gap_in_cycles(tmp_path):
    p = tmp_path / "gap.txt"
    p.write_text(_row(1, 1) + _row(1, 3))
    with pytest.raises(DataError, match="gap.txt:2"):
        data.read_trajectories(p)


def test_read_rul_count_mismatch(tmp_path):
    p = tmp_path / "RUL.txt"
    p.write_text("112\n98\n")
    assert data.read_rul(p, 2).tolist() == [112.0, 98.0]
    with pytest.raises(DataError):
        data.read_rul(p, 3)


def test_modes_single_and_six():
    single = [_traj(1, np.ones((5, 21)), np.tile([0.0012, -0.0003, 100.0], (5, 1)))]
    assert data.identify_modes(single).n_modes == 1
    keys = np.array([[0, 0, 100], [10, 0.25, 100], [20, 0.7, 100],
                     [25, 0.62, 60], [35, 0.84, 100], [42, 0.84, 100]], dtype=float)
    settings = np.repeat(keys, 3, axis=0) + 0.001
    six = [_traj(1, np.ones((18, 21)), settings)]
    table = data.identify_modes(six)
    assert table.n_modes == 6
    assert len(np.unique(table.assign(settings))) == 6


def test_mode_assign_unseen_goes_to_nearest():
    table = data.identify_modes([_traj(1, np.ones((2, 21)), [[0, 0, 100], [20, 0.7, 100]])])
    assert table.assign(np.array([[19.0, 0.7, 100.0]])).tolist() == [1]


def test_normalize_hand_case_and_constant():
    sensors = np.ones((3, 21))
    sensors[:, 0] = [2.0, 4.0, 6.0]
    t = _traj(1, sensors)
    modes = data.identify_modes([t])
    (scaled,), _ = data.normalize([t], modes)
    assert scaled[:, 0].tolist() == [0.0, 0.5, 1.0]
    assert np.all(scaled[:, 1] == 0.0)


def test_normalize_test_values_not_clipped():
    train = _traj(1, np.tile(np.linspace(0, 10, 3)[:, None], (1, 21)))
    test = _traj(2, np.full((1, 21), 15.0))
    modes = data.identify_modes([train])
    _, table = data.normalize([train], modes)
    (scaled,), _ = data.normalize([test], modes, table)
    assert scaled[0, 0] == pytest.approx(1.5)


def test_normalize_per_mode():
    settings = np.array([[0, 0, 100]] * 3 + [[20, 0.7, 100]] * 3, dtype=float)
    sensors = np.ones((6, 21))
    sensors[:, 0] = [0, 5, 10, 100, 150, 200]
    t = _traj(1, sensors, settings)
    (scaled,), table = data.normalize([t], data.identify_modes([t]))
    assert scaled[:, 0].tolist() == [0.0, 0.5, 1.0, 0.0, 0.5, 1.0]
    assert table.mins.shape == (2, 21)


def test_denormalize_roundtrip():
    g = np.random.default_rng(0)
    settings = np.repeat([[0, 0, 100], [20, 0.7, 100]], 20, axis=0).astype(float)
    t = _traj(1, g.normal(500, 20, size=(40, 21)), settings)
    modes = data.identify_modes([t])
    (scaled,), table = data.normalize([t], modes)
    back = table.invert(scaled, modes.assign(settings))
    assert np.max(np.abs(back - t.sensors)) < 1e-9


def test_filter_sensors_cases():
    g = np.random.default_rng(1)
    s = g.normal(size=(50, 21))
    s[:, 0] = 3.0                           # constant
    s[:, 1] = g.integers(0, 2, size=50)     # two distinct values
    s[:, 2] = np.arange(50) % 19            # just under the threshold
    s[:, 3] = np.arange(50) % 20            # exactly at the threshold
    t = _traj(1, s)
    scaled, _ = data.normalize([t], data.identify_modes([t]))
    keep = data.filter_sensors([t], scaled, threshold=20)
    assert keep[:4].tolist() == [False, False, False, True]
    assert keep[4:].all()


def test_filter_sensors_all_dropped_is_an_error():
    t = _traj(1, np.ones((5, 21)))
    scaled, _ = data.normalize([t], data.identify_modes([t]))
    with pytest.raises(DataError, match="every sensor"):
        data.filter_sensors([t], scaled)


def test_assign_rul_cases():
    assert data.assign_rul(200).tolist()[:61] == [140.0] * 60 + [139.0]
    assert data.assign_rul(200)[-1] == 0.0
    assert data.assign_rul(100).tolist() == list(np.arange(99, -1, -1.0))
    assert data.assign_rul(1).tolist() == [0.0]


def test_window_counts_and_labels():
    vals = np.arange(40.0)[:, None]
    labels = data.assign_rul(40)
    wins, lab, padded = data.window(vals, 30, 1, labels)
    assert wins.shape == (11, 30, 1) and not padded
    assert wins[0, :, 0].tolist() == list(range(30))
    assert lab[0] == labels[29] and lab[-1] == 0.0
    assert data.window(vals, 30, 5)[0].shape[0] == 3


def test_window_exact_and_short():
    wins, _, padded = data.window(np.arange(30.0)[:, None], 30)
    assert wins.shape[0] == 1 and not padded
    wins, lab, padded = data.window(np.arange(1.0, 11.0)[:, None], 30, labels=np.arange(10.0))
    assert padded and wins.shape == (1, 30, 1)
    assert wins[0, :21, 0].tolist() == [1.0] * 21 and wins[0, -1, 0] == 10.0
    assert lab.tolist() == [9.0]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 80), st.integers(1, 40))
def test_window_count_property(L, T):
    wins, _, padded = data.window(np.zeros((L, 2)), T)
    assert len(wins) == max(L - T + 1, 1) and padded == (L < T)


def test_last_window_is_final_cycles():
    vals = np.arange(50.0)[:, None]
    w, padded = data.last_window(vals, 30)
    assert w[:, 0].tolist() == list(range(20, 50)) and not padded


def test_drop_labels_cases():
    engines = np.arange(1, 101)
    assert data.drop_labels(engines, 1.0, RngState(0)).all()
    assert data.drop_labels(engines, 0.01, RngState(0)).sum() == 1
    assert data.drop_labels(engines, 0.29, RngState(0)).sum() == 29
    a = data.drop_labels(engines, 0.3, RngState(9))
    b = data.drop_labels(engines, 0.3, RngState(9))
    assert np.array_equal(a, b) and a.sum() == 30
    with pytest.raises(ValueError):
        data.drop_labels(engines, 0.0, RngState(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 150), st.floats(0.001, 1.0), st.integers(0, 2**32 - 1))
def test_drop_labels_partition(n, f, seed):
    mask = data.drop_labels(np.arange(n), f, RngState(seed))
    assert mask.sum() == data.label_count(f, n)
    assert 1 <= mask.sum() <= n


@pytest.fixture(scope="module")
def synth(synth_dir):
    return data.load_subset(synth_dir, "SYN001")


def test_preprocess_synthetic_shape(synth):
    s = synth.summary
    assert s["n_train_engines"] == 100 and s["n_test_engines"] == 100
    assert s["n_kept_sensors"] == 17 and synth.n_features == 17
    assert synth.X.shape[1:] == (30, 17) and len(synth.X) == len(synth.y) == len(synth.engine)
    assert synth.test_X.shape == (100, 30, 17)


def test_preprocess_ranges(synth):
    assert synth.y.min() >= 0.0 and synth.y.max() <= 140.0
    assert synth.X.min() >= 0.0 and synth.X.max() <= 1.0
    assert np.all(synth.test_y >= 0)


def test_preprocess_window_count(synth, synth_dir):
    raw = data.read_trajectories(data.subset_files(synth_dir, "SYN001")[0])
    assert len(synth.X) == sum(max(len(t) - 30 + 1, 1) for t in raw)


def test_bundle_roundtrip(synth, tmp_path):
    p = tmp_path / "bundle.npz"
    synth.save(p)
    back = data.ProcessedDataset.load(p)
    assert back.content_hash() == synth.content_hash()
    assert back.summary == synth.summary


def test_preprocess_deterministic(small_synth_dir):
    a = data.load_subset(small_synth_dir, "SYN001")
    b = data.load_subset(small_synth_dir, "SYN001")
    assert a.content_hash() == b.content_hash()


def test_load_subset_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_subset(tmp_path, "FD001")


def test_data_config_validation():
    with pytest.raises(ValueError):
        DataConfig(window=0)
