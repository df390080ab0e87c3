import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clode import dataio as io
from clode import model as m
from clode import simenv as se
from clode import trainer as tr
from clode.trajectory import Trajectory

from support import TINY, TINY_SIM, random_trajectory


@pytest.fixture(scope="module")
def expert():
    return se.generate_expert(se.ExpertConfig(n_agents=4, n_steps=25, seed=6))


# --- CSV -------------------------------------------------------------------


def test_csv_round_trip(tmp_path, expert):
    path = tmp_path / "traj.csv"
    io.save_trajectories(expert, path)
    loaded = io.load_trajectories(path)
    assert len(loaded) == len(expert)
    for a, b in zip(expert, loaded):
        assert a.agent_id == b.agent_id
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.observations, b.observations)


def test_csv_format(tmp_path, expert):
    text = io.trajectories_to_csv(expert[:1])
    lines = text.split("\n")
    assert lines[0] == "time,agent_id,x,y,theta,v,accel,yaw_rate"
    assert text.endswith("\n") and "\r" not in text and '"' not in text
    assert len(lines[1].split(",")) == 8


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=6, max_size=6))
def test_csv_is_lossless_for_arbitrary_floats(tmp_path_factory, vals):
    states = np.array([vals[:4], vals[:4]])
    traj = Trajectory(np.array([0.0, 0.1]), np.array([vals[4:], vals[4:]]), np.zeros((2, 66)), np.abs(states), 3)
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    io.save_trajectories([traj], path)
    (back,) = io.load_trajectories(path)
    assert back.states.tobytes() == traj.states.tobytes()
    assert back.actions.tobytes() == traj.actions.tobytes()


def test_header_only_is_empty(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(io.CSV_HEADER + "\n")
    assert io.load_trajectories(p) == []


def _write(tmp_path, rows):
    p = tmp_path / "bad.csv"
    p.write_text(io.CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    return p


def test_decreasing_time_names_line(tmp_path):
    p = _write(tmp_path, ["0,1,0,0,0,1,0,0", "0.1,1,1,0,0,1,0,0", "0.05,1,2,0,0,1,0,0"])
    with pytest.raises(io.DataError, match=r":4:"):
        io.load_trajectories(p)


@pytest.mark.parametrize(
    "rows, pattern",
    [
        (["0,1,0,0,0,1,0"], r":2: expected 8 fields"),
        (["0,1,0,0,zero,1,0,0"], r":2: malformed"),
        (["0,1,0,0,0,1,0,0", "0,2,0,0,0,1,0,0", "0.1,1,0,0,0,1,0,0"], r":4:.*contiguous"),
        (["0,1,0,0,0,1,0,0", "0.1,1,0,0,0,1,0,0", "0.3,1,0,0,0,1,0,0"], "non-uniform dt"),
    ],
)
def test_malformed_rows_rejected(tmp_path, rows, pattern):
    with pytest.raises(io.DataError, match=pattern):
        io.load_trajectories(_write(tmp_path, rows))


def test_bad_header_rejected(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("t,id\n")
    with pytest.raises(io.DataError, match=":1:"):
        io.load_trajectories(p)


# --- windows / batches -----------------------------------------------------


@pytest.mark.parametrize("T, L, stride, count", [(10, 5, 1, 6), (4, 5, 1, 0), (100, 5, 5, 20), (5, 5, 3, 1)])
def test_window_counts(T, L, stride, count):
    traj = random_trajectory(T, TINY, np.random.default_rng(0))
    wins = io.window_history(traj, L, stride)
    assert len(wins) == count
    assert [w.start for w in wins] == list(range(0, count * stride, stride))


def test_windows_do_not_alias_storage():
    traj = random_trajectory(10, TINY, np.random.default_rng(0))
    before = traj.actions.copy()
    wins = io.window_history(traj, 3)
    wins[0].actions[:] = 99.0
    np.testing.assert_array_equal(traj.actions, before)
    np.testing.assert_array_equal(wins[1].actions, before[1:4])


def test_window_rejects_short_length():
    with pytest.raises(io.DataError):
        io.window_history(random_trajectory(10, TINY, np.random.default_rng(0)), 1)


@pytest.mark.parametrize("n, B, sizes", [(100, 50, [50, 50]), (5, 50, [5]), (7, 3, [3, 3, 1])])
def test_batch_sizes(n, B, sizes):
    assert [len(b) for b in io.batch(list(range(n)), B, seed=1)] == sizes


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 300), st.integers(1, 60), st.integers(0, 10**6))
def test_batch_covers_each_sample_once(n, B, seed):
    batches = io.batch(list(range(n)), B, seed)
    assert sorted(x for b in batches for x in b) == list(range(n))
    assert batches == io.batch(list(range(n)), B, seed)


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = m.init_params(TINY, seed=4)
    p.set_normalization(np.random.default_rng(0).normal(size=(9, 6)), np.random.default_rng(1).normal(size=(9, 2)))
    opt = {"m.embed.w0": np.arange(6.0), "t": np.array(3.0)}
    path = tmp_path / "c.ckpt"
    io.save_checkpoint(p, opt, 17, path, extra={"history_len": 5})
    ck = io.load_checkpoint(path)
    assert ck.step == 17 and ck.meta == {"history_len": 5}
    assert ck.params.dims == TINY
    for (na, a), (nb, b) in zip(p.named_parameters(), ck.params.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    for (_, a), (_, b) in zip(p.buffers(), ck.params.buffers()):
        assert a.tobytes() == b.tobytes()
    assert ck.optimizer["t"] == 3.0
    np.testing.assert_array_equal(ck.optimizer["m.embed.w0"], np.arange(6.0))


def test_empty_checkpoint_is_version_error(tmp_path):
    path = tmp_path / "empty.ckpt"
    path.write_bytes(b"")
    with pytest.raises(io.DataError, match="version"):
        io.load_checkpoint(path)


def test_wrong_version_rejected(tmp_path):
    data = bytearray(io.checkpoint_bytes(m.init_params(TINY)))
    data[8:12] = struct.pack("<I", 99)
    path = tmp_path / "v.ckpt"
    path.write_bytes(bytes(data))
    with pytest.raises(io.DataError, match="version 99"):
        io.load_checkpoint(path)


def test_truncated_checkpoint_rejected(tmp_path):
    data = io.checkpoint_bytes(m.init_params(TINY))
    path = tmp_path / "t.ckpt"
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(io.DataError, match="truncated"):
        io.load_checkpoint(path)


def test_unknown_block_rejected(tmp_path):
    data = io.checkpoint_bytes(m.init_params(TINY))
    name = b"mystery"
    block = b"P" + struct.pack("<H", len(name)) + name + struct.pack("<I", 1) + struct.pack("<Q", 1) + struct.pack("<d", 1.0)
    path = tmp_path / "u.ckpt"
    path.write_bytes(data[:-4] + block + data[-4:])
    with pytest.raises(io.DataError, match="unknown parameter block 'mystery'"):
        io.load_checkpoint(path)


def test_checkpoint_write_is_atomic(tmp_path):
    path = tmp_path / "a.ckpt"
    io.save_checkpoint(m.init_params(TINY), None, 0, path)
    assert sorted(x.name for x in tmp_path.iterdir()) == ["a.ckpt"]


def test_resume_reproduces_next_steps_bit_exactly(tmp_path, expert):
    ckpt = tmp_path / "run.ckpt"
    cfg = tr.TrainConfig(history_len=4, batch_size=8, epochs=3, seed=2, dims=TINY_SIM)
    _, full = tr.train(cfg, expert)
    split = 7
    part_cfg = tr.TrainConfig(
        history_len=4, batch_size=8, epochs=3, seed=2, dims=TINY_SIM, max_steps=split,
        checkpoint_interval=split, checkpoint_path=str(ckpt),
    )
    tr.train(part_cfg, expert)
    ck = io.load_checkpoint(ckpt)
    assert ck.step == split
    _, rest = tr.train(cfg, expert, params=ck.params, optimizer=tr.OptimizerState.from_blocks(ck.optimizer), start_step=ck.step)
    assert rest[0].step == split
    assert [r.elbo for r in rest] == [r.elbo for r in full[split:]]
