import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgrocc.errors import FormatError
from sgrocc.geometry import VoxelGridSpec
from sgrocc.io import (
    csv_to_rows,
    depth_from_pgm,
    depth_to_pgm,
    grid_from_bytes,
    grid_to_bytes,
    image_to_pgm,
    pool_from_bytes,
    pool_to_bytes,
    rows_to_csv,
)
from sgrocc.memory import GaussianPool
from sgrocc.metrics import SemanticVoxelGrid
from sgrocc.scene_sim import N_CLASSES

f32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@st.composite
def pools(draw):
    n = draw(st.integers(0, 20))
    ids = np.array(sorted(draw(st.sets(st.integers(0, 2**40), min_size=n, max_size=n))), dtype=np.int64)
    return GaussianPool(
        ids=ids,
        positions=draw(arrays(np.float32, (n, 3), elements=f32)).astype(np.float64),
        scales=draw(arrays(np.float32, n, elements=st.floats(0.125, 1, width=32))).astype(np.float64),
        logits=draw(arrays(np.float32, (n, N_CLASSES), elements=f32)).astype(np.float64),
        tags=draw(arrays(np.float32, n, elements=st.sampled_from([0.0, 1.0]))).astype(np.float64),
        confidence=draw(arrays(np.float32, n, elements=st.floats(0, 1, width=32))).astype(np.float64),
        next_id=int(ids.max()) + 1 if n else 0,
    )


@given(pools())
def test_pool_roundtrip(pool):
    blob = pool_to_bytes(pool)
    back = pool_from_bytes(blob)
    for a, b in zip(pool.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
    assert back.next_id == pool.next_id
    assert pool_to_bytes(back) == blob


def test_pool_layout():
    pool = GaussianPool(ids=np.array([7]), positions=np.array([[1.0, 2.0, 3.0]]), scales=np.array([0.5]),
                        logits=np.arange(N_CLASSES, dtype=float)[None], tags=np.array([1.0]), confidence=np.array([0.25]))
    blob = pool_to_bytes(pool)
    assert blob[:6] == b"GPOOL1" and struct.unpack_from("<I", blob, 6) == (1,)
    assert len(blob) == 10 + 80
    assert struct.unpack_from("<Q3ff", blob, 10) == (7, 1.0, 2.0, 3.0, 0.5)
    assert struct.unpack_from("<2f", blob, 10 + 80 - 8) == (1.0, 0.25)
    with pytest.raises(FormatError):
        pool_from_bytes(blob[:-1])
    with pytest.raises(FormatError):
        pool_from_bytes(b"NOPE" + blob[4:])


@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2**32 - 1), st.sampled_from([0.04, 0.08, 0.25]))
def test_grid_roundtrip(dims, seed, res):
    rng = np.random.default_rng(seed)
    spec = VoxelGridSpec(origin=(0.5, -0.25, 1.0), dims=dims, resolution=res)
    grid = SemanticVoxelGrid(spec, rng.integers(0, N_CLASSES, dims))
    blob = grid_to_bytes(grid)
    back = grid_from_bytes(blob)
    np.testing.assert_array_equal(back.labels, grid.labels)
    assert grid_to_bytes(back) == blob


def test_grid_layout_is_x_fastest():
    labels = np.zeros((2, 3, 1), np.uint8)
    labels[1, 0, 0] = 5
    labels[0, 1, 0] = 7
    blob = grid_to_bytes(SemanticVoxelGrid(VoxelGridSpec(dims=(2, 3, 1)), labels))
    assert blob[:5] == b"SVOX1"
    assert struct.unpack_from("<3I", blob, 5) == (2, 3, 1)
    assert list(blob[33:]) == [0, 5, 7, 0, 0, 0]
    with pytest.raises(FormatError):
        grid_from_bytes(blob + b"\0")


@given(arrays(np.float64, (5, 7), elements=st.one_of(st.just(np.inf), st.integers(1, 65535).map(lambda m: m / 1000.0))))
def test_depth_pgm_roundtrip(depth):
    back = depth_from_pgm(depth_to_pgm(depth))
    np.testing.assert_array_equal(back, depth)


def test_depth_pgm_header_with_comment_free_whitespace():
    raw = b"P5 2  1\n65535\t" + np.array([1000, 0], ">u2").tobytes()
    np.testing.assert_array_equal(depth_from_pgm(raw), [[1.0, np.inf]])
    with pytest.raises(FormatError):
        depth_from_pgm(b"P2\n1 1\n255\n0")


def test_image_pgm_scales_to_255():
    out = image_to_pgm(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert out.startswith(b"P5\n2 2\n255\n")
    assert list(out[-4:]) == [0, 64, 128, 255]


@given(st.lists(st.fixed_dictionaries({"a": st.integers(-10**6, 10**6), "b": st.floats(allow_nan=False, allow_infinity=False),
                                        "c": st.sampled_from(["x", "ray"])}), min_size=1, max_size=5))
def test_csv_roundtrip(rows):
    back = csv_to_rows(rows_to_csv(rows))
    assert len(back) == len(rows)
    for r, b in zip(rows, back):
        assert b["a"] == r["a"] and b["c"] == r["c"]
        assert float(b["b"]) == r["b"]
