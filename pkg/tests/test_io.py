import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainstate.exceptions import FormatError
from brainstate.io import (
    NEGATIVE,
    NEUTRAL,
    REST,
    BrainMask,
    GroundTruth,
    SynthSpec,
    VolumeSeries,
    apply_mask,
    block_design,
    load_dataset,
    read_manifest,
    read_mask_file,
    read_volume_file,
    subject_matrices,
    synth_generate,
    write_manifest,
    write_mask_file,
    write_volume_file,
)


def f32_series(rng, t, dims, subject="sub-01", run="run-01"):
    vols = rng.standard_normal((t,) + dims).astype(np.float32)
    return VolumeSeries(subject, run, vols, rng.integers(0, 3, t))


def test_empty_series_is_header_only(tmp_path):
    s = VolumeSeries("s", "r", np.zeros((0, 3, 2, 2)), np.zeros(0))
    path = tmp_path / "e.bvol"
    write_volume_file(path, s)
    assert path.stat().st_size == 24
    assert read_volume_file(path, "s", "r") == s


def test_single_volume_layout(tmp_path):
    # voxel value = its x-fastest flat index
    vol = np.arange(8, dtype=np.float64).reshape(2, 2, 2, order="F")
    s = VolumeSeries("s", "r", vol[None], [NEGATIVE])
    path = tmp_path / "one.bvol"
    write_volume_file(path, s)
    raw = path.read_bytes()
    assert raw[:4] == b"BVOL"
    assert struct.unpack_from("<5I", raw, 4) == (1, 2, 2, 2, 1)
    assert raw[24] == NEGATIVE
    payload = raw[25:]
    assert len(payload) == 32
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), np.arange(8))
    assert read_volume_file(path, "s", "r") == s


def test_random_roundtrip_bit_exact(tmp_path, rng):
    s = f32_series(rng, 10, (4, 3, 5))
    path = tmp_path / "r.bvol"
    write_volume_file(path, s)
    back = read_volume_file(path, "sub-01", "run-01")
    assert back == s
    write_volume_file(tmp_path / "again.bvol", back)
    assert (tmp_path / "again.bvol").read_bytes() == path.read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), st.integers(0, 2**32 - 1))
def test_roundtrip_property(tmp_path_factory, t, dims, seed):
    s = f32_series(np.random.default_rng(seed), t, dims)
    path = tmp_path_factory.mktemp("rt") / "x.bvol"
    write_volume_file(path, s)
    assert read_volume_file(path, "sub-01", "run-01") == s


def test_default_ids_come_from_filename(tmp_path, rng):
    write_volume_file(tmp_path / "abc.bvol", f32_series(rng, 1, (1, 1, 1)))
    s = read_volume_file(tmp_path / "abc.bvol")
    assert s.subject_id == "abc" and s.run_id == "abc"


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda raw: b"XVOL" + raw[4:], 0),
        (lambda raw: raw[:4] + struct.pack("<I", 2) + raw[8:], 4),
        (lambda raw: raw[:10], 10),
        (lambda raw: raw[:-3], None),
        (lambda raw: raw + b"\0", None),
    ],
)
def test_malformed_volume_files(tmp_path, rng, mutate, offset):
    path = tmp_path / "v.bvol"
    write_volume_file(path, f32_series(rng, 2, (2, 2, 2)))
    bad = mutate(path.read_bytes())
    path.write_bytes(bad)
    with pytest.raises(FormatError, match="byte offset") as info:
        read_volume_file(path)
    if offset is not None:
        assert info.value.offset == offset


def test_mask_roundtrip_and_errors(tmp_path):
    keep = np.zeros((3, 2, 2), dtype=bool)
    keep[0, 0, 0] = keep[2, 1, 1] = True
    path = tmp_path / "m.bmsk"
    write_mask_file(path, BrainMask(keep))
    raw = path.read_bytes()
    assert raw[:4] == b"BMSK" and len(raw) == 20 + 12
    np.testing.assert_array_equal(read_mask_file(path).keep, keep)
    path.write_bytes(raw[:-1] + b"\x07")
    with pytest.raises(FormatError):
        read_mask_file(path)
    path.write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        read_mask_file(path)
    with pytest.raises(ValueError):
        BrainMask(np.zeros((2, 2, 2)))


def test_apply_mask_examples():
    vols = np.arange(12, dtype=np.float64).reshape(3, 2, 2, 1)
    s = VolumeSeries("s", "r", vols, [0, 1, 2])
    full = apply_mask(s, BrainMask.full((2, 2, 1)))
    np.testing.assert_array_equal(full, vols.transpose(0, 3, 2, 1).reshape(3, -1))

    one = np.zeros((2, 2, 1), dtype=bool)
    one[1, 1, 0] = True
    np.testing.assert_array_equal(apply_mask(s, BrainMask(one)), vols[:, 1, 1, :])

    # x-fastest indices 0 and 3 are voxels (0,0,0) and (1,1,0)
    two = np.zeros((2, 2, 1), dtype=bool)
    two[0, 0, 0] = two[1, 1, 0] = True
    out = apply_mask(s, BrainMask(two))
    assert out.shape == (3, 2)
    np.testing.assert_array_equal(out[:, 0], vols[:, 0, 0, 0])
    np.testing.assert_array_equal(out[:, 1], vols[:, 1, 1, 0])

    with pytest.raises(ValueError):
        apply_mask(s, BrainMask.full((2, 1, 2)))


def test_apply_mask_column_count(rng):
    keep = rng.random((4, 3, 5)) < 0.4
    keep[0, 0, 0] = True
    s = f32_series(rng, 6, (4, 3, 5))
    assert apply_mask(s, BrainMask(keep)).shape == (6, keep.sum())


def test_manifest_roundtrip_and_errors(tmp_path):
    entries = [("sub-01", "run-01", "a.bvol"), ("sub-02", "run-01", "b.bvol")]
    write_manifest(tmp_path / "m.jsonl", entries)
    assert read_manifest(tmp_path / "m.jsonl") == entries
    (tmp_path / "bad.jsonl").write_text('{"subject_id": "x"}\n')
    with pytest.raises(FormatError, match="bad.jsonl:1"):
        read_manifest(tmp_path / "bad.jsonl")


def test_load_dataset(tmp_path, rng):
    s = f32_series(rng, 3, (2, 2, 2))
    write_volume_file(tmp_path / "x.bvol", s)
    write_manifest(tmp_path / "manifest.jsonl", [("sub-01", "run-01", "x.bvol")])
    series, mask = load_dataset(tmp_path)
    assert series == [s] and mask is None
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_block_design_proportions():
    y = block_design(200, 0)
    assert np.bincount(y).tolist() == [100, 50, 50]
    assert y[:10].tolist() == [REST] * 10 and y[10:20].tolist() == [NEUTRAL] * 10
    odd = block_design(200, 1)
    assert odd[10:20].tolist() == [NEGATIVE] * 10


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(noise_sigma=-1)
    with pytest.raises(ValueError):
        SynthSpec(n_subjects=2, runs_per_subject=[1])
    with pytest.raises(ValueError):
        SynthSpec(n_voxels_latent=0)


def test_synth_deterministic():
    spec = SynthSpec(n_subjects=2, runs_per_subject=1, timepoints_per_run=20, n_voxels_latent=10, dims=(5, 5, 4))
    a, ma, ta = synth_generate(spec)
    b, mb, tb = synth_generate(spec)
    assert a == b
    np.testing.assert_array_equal(ma.keep, mb.keep)
    assert ta.to_json() == tb.to_json()


def test_synth_noiseless_is_exact_mixing():
    spec = SynthSpec(n_subjects=2, runs_per_subject=2, timepoints_per_run=20, n_voxels_latent=12,
                     dims=(6, 5, 4), noise_sigma=0.0)
    series, mask, truth = synth_generate(spec)
    for s in series:
        flat = s.volumes.transpose(0, 3, 2, 1).reshape(len(s), -1)
        idx = truth.informative_indices[s.subject_id]
        expected = truth.latent_patterns[s.labels] @ truth.mixing_for(s.subject_id)
        assert np.linalg.norm(flat[:, idx] - expected) <= 1e-10
        rest = np.delete(flat, idx, axis=1)
        assert not rest.any()
        assert np.all(mask.keep.ravel(order="F")[idx])
    assert truth.mixing_seeds["sub-00"] != truth.mixing_seeds["sub-01"]


def test_ground_truth_json_roundtrip(small_synth):
    _, series, _, truth = small_synth
    back = GroundTruth.from_json(truth.to_json())
    np.testing.assert_array_equal(back.latent_patterns, truth.latent_patterns)
    for s in series:
        np.testing.assert_array_equal(back.mixing_for(s.subject_id), truth.mixing_for(s.subject_id))
    json.loads(truth.to_json())


def test_bayes_oracle_default_geometry():
    spec = SynthSpec(class_signal_amplitude=1.0, noise_sigma=0.1, seed=5)
    series, _, truth = synth_generate(spec)
    correct = sum(int((truth.nearest_mean_predict(s) == s.labels).sum()) for s in series)
    total = sum(len(s) for s in series)
    assert correct / total >= 0.99


def test_subject_matrices(small_synth):
    spec, series, mask, _ = small_synth
    subs = subject_matrices(series, mask)
    assert [s[0] for s in subs] == ["sub-00", "sub-01", "sub-02", "sub-03"]
    for _, X, y in subs:
        assert X.shape == (40, mask.keep.sum()) and y.shape == (40,)
