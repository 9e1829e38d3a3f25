"""Checkpoint serialization tests: byte-stable round trips and corruption
rejection."""

import numpy as np
import pytest

from kldd.checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from kldd.errors import DataError


def make_state(seed=5, with_moments=True):
    rng = np.random.default_rng(seed)
    rng.standard_normal(17)  # advance so the stream position is nontrivial
    params = {
        "enc.w": rng.normal(size=(4, 3, 3, 3)),
        "enc.b": rng.normal(size=4),
        "head.w": rng.normal(size=(1, 4, 1, 1)),
    }
    moments = None
    if with_moments:
        moments = (
            {k: rng.normal(size=v.shape) for k, v in params.items()},
            {k: np.abs(rng.normal(size=v.shape)) for k, v in params.items()},
        )
    return CheckpointState(
        config_text="epochs=3\nseed=5\n",
        epoch=2,
        adam_step=11,
        rng_state=rng.bit_generator.state,
        params=params,
        moments=moments,
    )


def test_round_trip_preserves_everything(tmp_path):
    path = tmp_path / "model.kldd"
    state = make_state()
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    assert loaded.config_text == state.config_text
    assert loaded.epoch == state.epoch
    assert loaded.adam_step == state.adam_step
    assert loaded.rng_state == state.rng_state
    assert list(loaded.params) == list(state.params)
    for k in state.params:
        np.testing.assert_array_equal(loaded.params[k], state.params[k])
    for got, want in zip(loaded.moments, state.moments):
        for k in want:
            np.testing.assert_array_equal(got[k], want[k])


def test_save_load_save_is_byte_identical(tmp_path):
    a = tmp_path / "a.kldd"
    b = tmp_path / "b.kldd"
    save_checkpoint(a, make_state())
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_file_starts_with_magic(tmp_path):
    path = tmp_path / "m.kldd"
    save_checkpoint(path, make_state())
    assert path.read_bytes()[:4] == b"KLDD"


def test_rng_state_resumes_stream(tmp_path):
    path = tmp_path / "rng.kldd"
    rng = np.random.default_rng(123)
    rng.standard_normal(40)
    state = make_state()
    state = CheckpointState(
        config_text=state.config_text,
        epoch=state.epoch,
        adam_step=state.adam_step,
        rng_state=rng.bit_generator.state,
        params=state.params,
        moments=None,
    )
    save_checkpoint(path, state)
    expected = rng.standard_normal(8)

    revived = np.random.default_rng(0)
    revived.bit_generator.state = load_checkpoint(path).rng_state
    np.testing.assert_array_equal(revived.standard_normal(8), expected)


def test_moments_absent_flag_round_trips(tmp_path):
    path = tmp_path / "nm.kldd"
    save_checkpoint(path, make_state(with_moments=False))
    assert load_checkpoint(path).moments is None


def test_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.kldd"
    save_checkpoint(path, make_state())
    raw = bytearray(path.read_bytes())
    raw[:4] = b"ZZZZ"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)


def test_rejects_unknown_version(tmp_path):
    path = tmp_path / "ver.kldd"
    save_checkpoint(path, make_state())
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        load_checkpoint(path)


def test_rejects_truncation_anywhere(tmp_path):
    path = tmp_path / "trunc.kldd"
    save_checkpoint(path, make_state())
    raw = path.read_bytes()
    for cut in (3, 7, len(raw) // 2, len(raw) - 1):
        clipped = tmp_path / f"cut{cut}.kldd"
        clipped.write_bytes(raw[:cut])
        with pytest.raises(DataError):
            load_checkpoint(clipped)


def test_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "extra.kldd"
    save_checkpoint(path, make_state())
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(path)


def test_rejects_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.kldd")


def test_rejects_non_pcg64_rng(tmp_path):
    state = make_state()
    legacy = np.random.Generator(np.random.MT19937(3))
    bad = CheckpointState(
        config_text=state.config_text,
        epoch=0,
        adam_step=0,
        rng_state=legacy.bit_generator.state,
        params=state.params,
        moments=None,
    )
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "mt.kldd", bad)
