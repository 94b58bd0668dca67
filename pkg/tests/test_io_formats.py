import numpy as np
import pytest

from dair.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from dair.envs.trajectory import TrajectoryError, read_dump, write_dump


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.normal(size=(3, 4)), "b": np.array(2.5), "c": rng.normal(size=7)}
    meta = {"seed": 3, "nested": {"x": [1, 2]}}
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, arrays, meta)
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    got, m = load_checkpoint(p)
    assert m == meta
    for k, v in arrays.items():
        np.testing.assert_array_equal(got[k], v)
        assert got[k].shape == np.shape(v)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"a": np.ones(10)}, {})
    raw = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def steps(n, alpha=True):
    for t in range(n):
        yield {
            "episode": 0,
            "step": t + 1,
            "agents": np.array([[0.1 * t, 0.0], [0.0, 0.1]]),
            "objects": np.array([[0.2, 0.2], [0.3, 0.1]]),
            "alpha": np.full((2, 4), 0.25) if alpha else None,
            "reward": 0.0,
        }


def test_trajectory_round_trip(tmp_path):
    p = tmp_path / "d.jsonl"
    write_dump(p, {"task": "push-door", "n_entities": 4}, steps(5))
    header, recs = read_dump(p)
    assert header["task"] == "push-door" and len(recs) == 5
    assert recs[2]["agents"][0][0] == pytest.approx(0.2)
    assert np.asarray(recs[0]["alpha"]).shape == (2, 4)


def test_trajectory_truncation_reports_line(tmp_path):
    p = tmp_path / "d.jsonl"
    write_dump(p, {}, steps(5))
    lines = p.read_text().splitlines(keepends=True)
    (tmp_path / "cut.jsonl").write_text("".join(lines[:4]))
    with pytest.raises(TrajectoryError, match="line 5: dump is truncated"):
        read_dump(tmp_path / "cut.jsonl")
    (tmp_path / "half.jsonl").write_text("".join(lines[:3]) + lines[3][:20])
    with pytest.raises(TrajectoryError, match="line 4"):
        read_dump(tmp_path / "half.jsonl")
    (tmp_path / "junk.jsonl").write_text("".join(lines[:2]) + "{not json\n" + "".join(lines[2:]))
    with pytest.raises(TrajectoryError, match="line 3: unparseable"):
        read_dump(tmp_path / "junk.jsonl")


def test_trajectory_bad_header(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"kind": "step"}\n')
    with pytest.raises(TrajectoryError, match="line 1"):
        read_dump(p)
    p.write_text("")
    with pytest.raises(TrajectoryError, match="empty"):
        read_dump(p)
