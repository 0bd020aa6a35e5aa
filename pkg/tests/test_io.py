import struct

import numpy as np
import pytest
from conftest import random_spd
from hypothesis import given, settings
from hypothesis import strategies as st

from ndtplace.io import (
    FormatError,
    read_cloud,
    read_descriptors,
    read_manifest,
    read_ndt,
    read_poses,
    read_weights,
    write_cloud,
    write_descriptors,
    write_manifest,
    write_ndt,
    write_poses,
    write_weights,
)
from ndtplace.ndt import NdtMap, regularize_cov
from ndtplace.places import PlaceRecord

seeds = st.integers(0, 2**31)


def random_ndt(rng, n):
    return NdtMap(
        rng.normal(size=(n, 3)) * 20,
        regularize_cov(random_spd(rng, n, scale=0.5)),
        rng.integers(3, 500, n),
        float(rng.uniform(0.1, 2.0)),
    )


def random_state(rng):
    state = {}
    for i in range(int(rng.integers(0, 6))):
        shape = tuple(int(d) for d in rng.integers(1, 5, int(rng.integers(0, 4))))
        state[f"layer.{i}.w" + "é" * (i % 2)] = rng.normal(size=shape)
    return state


@settings(max_examples=30)
@given(seeds, st.integers(0, 300))
def test_cloud_round_trip(seed, n):
    pts = np.random.default_rng(seed).normal(size=(n, 3)) * 100
    first = write_cloud(None, pts)
    assert write_cloud(None, read_cloud(first)) == first
    assert len(first) == 8 + 12 * n


@settings(max_examples=30)
@given(seeds, st.integers(0, 60))
def test_ndt_round_trip(seed, n):
    first = write_ndt(None, random_ndt(np.random.default_rng(seed), n))
    back = read_ndt(first)
    assert write_ndt(None, back) == first
    np.testing.assert_array_equal(back.covs, np.swapaxes(back.covs, -1, -2))


@settings(max_examples=30)
@given(seeds)
def test_weights_round_trip(seed):
    state = random_state(np.random.default_rng(seed))
    first = write_weights(None, state)
    back = read_weights(first)
    assert list(back) == list(state)
    assert all(back[k].shape == np.shape(state[k]) for k in state)
    assert write_weights(None, back) == first


@settings(max_examples=30)
@given(seeds, st.integers(0, 40), st.integers(1, 16))
def test_descriptors_round_trip(seed, n, dim):
    rng = np.random.default_rng(seed)
    ids = rng.choice(2**40, size=n, replace=False)
    first = write_descriptors(None, ids, rng.normal(size=(n, 2)) * 1e3, rng.normal(size=(n, dim)))
    table = read_descriptors(first)
    assert len(table) == n
    assert write_descriptors(None, table.ids, table.positions, table.descriptors.reshape(n, dim)) == first


def test_files_on_disk(tmp_path, rng):
    ndt = random_ndt(rng, 5)
    write_ndt(tmp_path / "a.ndt", ndt)
    assert read_ndt(tmp_path / "a.ndt").resolution == np.float32(ndt.resolution)


@pytest.mark.parametrize(
    "writer, reader",
    [
        (lambda: write_cloud(None, np.zeros((4, 3))), read_cloud),
        (lambda: write_ndt(None, random_ndt(np.random.default_rng(0), 3)), read_ndt),
        (lambda: write_weights(None, {"w": np.ones((2, 3))}), read_weights),
        (lambda: write_descriptors(None, [1, 2], np.zeros((2, 2)), np.ones((2, 4))), read_descriptors),
    ],
)
def test_corruption_detected(writer, reader):
    payload = writer()
    with pytest.raises(FormatError, match="bad magic"):
        reader(b"XXXX" + payload[4:])
    with pytest.raises(FormatError, match="truncated"):
        reader(payload[:-1])


def test_unknown_weights_version():
    payload = b"NDTW" + struct.pack("<II", 99, 0)
    with pytest.raises(FormatError, match="version"):
        read_weights(payload)


def test_manifest_round_trip(tmp_path):
    recs = [PlaceRecord(i, 0.1 * i + 1e-9, -3.25 * i, "test" if i % 2 else "train", f"clouds/{i:06d}.pcd", i % 3) for i in range(7)]
    path = tmp_path / "manifest.csv"
    write_manifest(path, recs)
    back = read_manifest(path)
    assert [(r.id, r.x, r.y, r.split, r.cloud_path, r.run) for r in back] == [
        (r.id, r.x, r.y, r.split, r.cloud_path, r.run) for r in recs
    ]


def test_manifest_without_run_column(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,x,y,split,cloud_path\n3,1.5,2.5,train,a.pcd\n")
    (rec,) = read_manifest(path)
    assert (rec.id, rec.x, rec.run) == (3, 1.5, 0)


def test_bad_manifest_row(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,x,y,split,cloud_path\nthree,1.5,2.5,train,a.pcd\n")
    with pytest.raises(FormatError, match="bad manifest row"):
        read_manifest(path)


def test_poses_round_trip_and_ordering(tmp_path, rng):
    poses = np.c_[np.cumsum(rng.uniform(0.01, 1, 20)), rng.normal(size=(20, 3))]
    path = tmp_path / "poses.csv"
    write_poses(path, poses)
    np.testing.assert_array_equal(read_poses(path), poses)
    poses[5, 0] = poses[4, 0]
    write_poses(path, poses)
    with pytest.raises(FormatError, match="strictly increasing"):
        read_poses(path)
