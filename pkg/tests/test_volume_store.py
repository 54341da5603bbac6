import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fbgan.errors import CorruptionError, FormatError, StorageError, ValidationError
from fbgan.volume import Volume, load_volume, save_volume

from conftest import make_volume


def test_zero_volume_payload_size(tmp_path):
    save_volume(make_volume((2, 4, 4)), tmp_path / "v")
    assert (tmp_path / "v.vol").stat().st_size == 2 * 4 * 4 * 4
    assert (tmp_path / "v.json").exists()


def test_round_trip_identity(tmp_path, rng):
    vol = make_volume((3, 5, 7), rng=rng, spacing=(1.0, 0.5, 0.5), modality="CBCT", fov_radius_px=2.5)
    save_volume(vol, tmp_path / "v")
    assert load_volume(tmp_path / "v").equal(vol)


def test_save_into_non_directory_fails(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("file, not a dir")
    with pytest.raises(StorageError):
        save_volume(make_volume(), blocker / "v")


@settings(max_examples=40, deadline=None)
@given(
    data=st.tuples(
        st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)
    ).flatmap(
        lambda s: arrays(
            np.float32,
            s,
            elements=st.floats(-3000, 3000, width=32, allow_nan=False, allow_infinity=False),
        )
    ),
    spacing=st.tuples(*[st.floats(0.1, 10, allow_nan=False)] * 3),
    modality=st.sampled_from(["CT", "CBCT", "SYNTH"]),
)
def test_round_trip_property(tmp_path_factory, data, spacing, modality):
    tmp = tmp_path_factory.mktemp("vol")
    vol = Volume(data=data, spacing=spacing, modality=modality)
    save_volume(vol, tmp / "v")
    loaded = load_volume(tmp / "v")
    assert loaded.equal(vol)
    assert loaded.data.dtype == np.float32


@pytest.mark.parametrize("delta", [-8, -4, -1, 1, 4, 129])
def test_payload_length_mismatch_rejected(tmp_path, delta):
    save_volume(make_volume((2, 4, 4)), tmp_path / "v")
    payload = (tmp_path / "v.vol").read_bytes()
    resized = payload[:delta] if delta < 0 else payload + b"\x00" * delta
    (tmp_path / "v.vol").write_bytes(resized)
    with pytest.raises(CorruptionError):
        load_volume(tmp_path / "v")


def test_nan_payload_rejected(tmp_path):
    save_volume(make_volume((1, 2, 2)), tmp_path / "v")
    bad = np.array([1.0, np.nan, 0.0, 2.0], dtype="<f4")
    (tmp_path / "v.vol").write_bytes(bad.tobytes())
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "v")


def test_missing_sidecar_is_format_error(tmp_path):
    save_volume(make_volume(), tmp_path / "v")
    (tmp_path / "v.json").unlink()
    with pytest.raises(FormatError):
        load_volume(tmp_path / "v")


def test_wrong_format_version_rejected(tmp_path):
    save_volume(make_volume(), tmp_path / "v")
    sidecar = json.loads((tmp_path / "v.json").read_text())
    sidecar["format"] = "fbgan-vol/999"
    (tmp_path / "v.json").write_text(json.dumps(sidecar))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "v")


def test_sidecar_fields(tmp_path):
    vol = make_volume((2, 3, 4), spacing=(2.0, 1.0, 1.0), modality="SYNTH", fov_radius_px=1.5)
    save_volume(vol, tmp_path / "v")
    sidecar = json.loads((tmp_path / "v.json").read_text())
    assert sidecar["format"] == "fbgan-vol/1"
    assert sidecar["shape"] == [2, 3, 4]
    assert sidecar["spacing"] == [2.0, 1.0, 1.0]
    assert sidecar["modality"] == "SYNTH"
    assert sidecar["fov_radius_px"] == 1.5


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(data=np.zeros((2, 2), dtype=np.float32)),
        dict(data=np.full((1, 2, 2), np.inf, dtype=np.float32)),
        dict(data=np.zeros((1, 2, 2), dtype=np.float32), spacing=(0.0, 1.0, 1.0)),
        dict(data=np.zeros((1, 2, 2), dtype=np.float32), modality="MRI"),
    ],
)
def test_invalid_volumes_rejected(kwargs):
    with pytest.raises(ValidationError):
        Volume(**kwargs)
