import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hierdiff.token_space import (LevelPartition, StateSpaceConfig, TokenGrid, check_grid, mask_fraction,
                                  mask_id, merge, read_corpus, read_corpus_jsonl, split, write_corpus,
                                  write_corpus_jsonl)


def test_split_paper_partition_shapes():
    grid = np.zeros((12, 50), dtype=np.int64)
    low, high = split(grid, LevelPartition(2))
    assert low.shape == (2, 50) and high.shape == (10, 50)


def test_minimal_partition():
    low, high = split(np.array([[1, 2, 3], [4, 5, 6]]), 1)
    assert low.shape == high.shape == (1, 3)


@given(st.integers(2, 8), st.integers(1, 6), st.integers(2, 9), st.data())
def test_split_merge_roundtrip(R, L, V, data):
    k = data.draw(st.integers(1, R - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
    grid = rng.integers(0, V + 1, size=(3, R, L))
    low, high = split(grid, k)
    assert low.shape[-2] == k and high.shape[-2] == R - k
    np.testing.assert_array_equal(merge(low, high), grid)


@pytest.mark.parametrize("k", [0, 4, 5])
def test_split_index_out_of_range(k):
    with pytest.raises(ValueError):
        split(np.zeros((4, 3), dtype=np.int64), k)


def test_partition_invariant():
    with pytest.raises(ValueError):
        LevelPartition(3).check(3)


def test_mask_fraction_examples():
    V = 5
    assert mask_fraction(np.full((2, 4), V), V) == 1.0
    assert mask_fraction(np.zeros((2, 4), dtype=int), V) == 0.0
    half = np.array([[V, 0, V, 1], [2, V, 3, V]])
    assert mask_fraction(half, V) == 0.5


def test_mask_sentinel_never_collides():
    assert mask_id(1024) == 1024
    with pytest.raises(ValueError):
        check_grid(np.array([[1025]]), 1024)
    with pytest.raises(ValueError):
        check_grid(np.array([[1024]]), 1024, allow_mask=False)


def test_token_grid_validates_and_reports():
    g = TokenGrid(np.array([[0, 3], [3, 1]]), vocab_size=3)
    assert (g.levels, g.frames, g.mask_id) == (2, 2, 3)
    assert g.mask_fraction() == 0.5
    with pytest.raises(ValueError):
        TokenGrid(np.array([[4]]), vocab_size=3)


def test_state_space_divisibility():
    with pytest.raises(ValueError):
        StateSpaceConfig(levels=4, frames=10, vocab=8, split=1, emotion_downsample=4)
    assert StateSpaceConfig().emotion_frames == 2


def test_binary_corpus_roundtrip(tmp_path):
    cfg = StateSpaceConfig(levels=3, frames=4, vocab=6, split=1, emotion_downsample=2)
    grids = np.random.default_rng(0).integers(0, 7, size=(5, 3, 4))
    path = tmp_path / "c.hcdt"
    write_corpus(path, grids, cfg)
    back, header = read_corpus(path)
    np.testing.assert_array_equal(back, grids)
    assert header == {"levels": 3, "frames": 4, "vocab": 6, "split": 1, "records": 5}
    raw = path.read_bytes()
    assert raw[:4] == b"HCDT"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert len(raw) == 4 + 2 + 5 * 4 + 5 * 3 * 4 * 2


def test_binary_corpus_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE" + bytes(30))
    with pytest.raises(ValueError):
        read_corpus(path)


def test_jsonl_roundtrip(tmp_path):
    grids = np.array([[[0, 4], [4, 3]]])
    write_corpus_jsonl(tmp_path / "c.jsonl", grids, 4)
    assert "null" in (tmp_path / "c.jsonl").read_text()
    np.testing.assert_array_equal(read_corpus_jsonl(tmp_path / "c.jsonl"), grids)
