import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dafakd.data import (
    DEFAULT_REAL,
    DEFAULT_SEEN,
    DEFAULT_UNSEEN,
    DatasetFormatError,
    DevicePart,
    DeviceSpec,
    SceneSpec,
    batch_order,
    batches,
    decode_dataset,
    default_devices,
    encode_dataset,
    generate,
    part_hash,
    read_dataset,
    write_dataset,
)

SCENE = SceneSpec(num_classes=4, freq_bins=4, time_frames=3)


@pytest.fixture(scope="module")
def split():
    return generate(SCENE, default_devices(4, seed=1), train_per_cell=5, validation_per_cell=3, seed=1)


class TestGenerate:
    def test_roster_and_balance(self, split):
        assert split.seen_devices == list(DEFAULT_SEEN)
        assert split.unseen_devices == list(DEFAULT_UNSEEN)
        assert [d.device_id for d in split.devices if d.real] == list(DEFAULT_REAL)
        assert len(split.train) == 6 * 4 * 5
        assert len(split.validation) == 9 * 4 * 3
        for d in split.seen_devices:
            counts = np.bincount(split.train.for_device(d).labels, minlength=4)
            np.testing.assert_array_equal(counts, 5)

    def test_unseen_devices_absent_from_training(self, split):
        assert not set(split.train.device_ids) & set(split.unseen_devices)

    def test_deterministic_per_seed(self, split):
        again = generate(SCENE, default_devices(4, seed=1), 5, 3, seed=1)
        assert part_hash(again.train) == part_hash(split.train)
        other = generate(SCENE, default_devices(4, seed=1), 5, 3, seed=2)
        assert part_hash(other.train) != part_hash(split.train)

    def test_features_representable_in_f32(self, split):
        x = split.train.features
        np.testing.assert_array_equal(x.astype(np.float32).astype(np.float64), x)

    def test_devices_shift_the_features(self, split):
        means = [split.validation.for_device(d).features.mean(axis=0) for d in split.device_ids]
        assert min(np.abs(a - b).max() for i, a in enumerate(means) for b in means[i + 1:]) > 0.01

    def test_requires_unseen_device(self):
        devices = [d for d in default_devices(4) if d.seen]
        with pytest.raises(ValueError, match="unseen"):
            generate(SCENE, devices)
        assert len(generate(SCENE, devices, 2, 1, require_unseen=False).unseen_devices) == 0

    def test_band_mismatch(self):
        with pytest.raises(ValueError, match="bands"):
            generate(SCENE, default_devices(5))

    def test_duplicate_ids(self):
        d = default_devices(4)
        with pytest.raises(ValueError, match="duplicate"):
            generate(SCENE, d + [d[0]])

    def test_device_spec_validation(self):
        with pytest.raises(ValueError):
            DeviceSpec("X", (1.0,), (0.0,), -0.1, True, False)


class TestFileFormat:
    def test_round_trip_bit_exact(self, split, tmp_path):
        path = tmp_path / "d.dafa"
        digest = write_dataset(split, path)
        back = read_dataset(path)
        assert back.devices == split.devices
        for a, b in ((back.train, split.train), (back.validation, split.validation)):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert a.device_ids == b.device_ids
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest

    def test_layout(self, split):
        buf = encode_dataset(split)
        assert buf[:4] == b"DAFA"
        n, F, T, c, ndev, n_train = struct.unpack_from("<6I", buf, 6)
        assert (n, F, T, c, ndev, n_train) == (len(split.train) + len(split.validation), 4, 3, 4, 9, len(split.train))

    def test_bad_magic(self, split):
        buf = b"NOPE" + encode_dataset(split)[4:]
        with pytest.raises(DatasetFormatError, match="offset 0"):
            decode_dataset(buf)

    def test_bad_version(self, split):
        buf = bytearray(encode_dataset(split))
        buf[4:6] = struct.pack("<H", 7)
        with pytest.raises(DatasetFormatError) as err:
            decode_dataset(bytes(buf))
        assert err.value.offset == 4

    def test_truncated(self, split):
        buf = encode_dataset(split)
        for cut in (10, 40, len(buf) - 3):
            with pytest.raises(DatasetFormatError, match="truncated"):
                decode_dataset(buf[:cut])

    def test_trailing_bytes(self, split):
        with pytest.raises(DatasetFormatError, match="trailing"):
            decode_dataset(encode_dataset(split) + b"\x00")

    def test_out_of_range_class(self, split):
        buf = bytearray(encode_dataset(split))
        rec_start = len(buf) - (len(split.train) + len(split.validation)) * (4 + 4 * 12)
        buf[rec_start + 2 : rec_start + 4] = struct.pack("<H", 99)
        with pytest.raises(DatasetFormatError, match="record 0") as err:
            decode_dataset(bytes(buf))
        assert err.value.offset == rec_start


class TestBatching:
    def _part(self, counts):
        ids = [d for d, k in counts.items() for _ in range(k)]
        n = len(ids)
        return DevicePart(np.arange(n, dtype=float)[:, None], np.zeros(n, dtype=np.int64), ids)

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.sampled_from("ABCDE"), st.integers(1, 9), min_size=1), st.integers(0, 99),
           st.integers(0, 5))
    def test_order_is_a_permutation(self, counts, seed, epoch):
        part = self._part(counts)
        order = batch_order(part, seed, epoch)
        np.testing.assert_array_equal(np.sort(order), np.arange(len(part)))

    def test_round_robin_stratification(self):
        part = self._part({"A": 4, "B": 4, "C": 4})
        order = batch_order(part, seed=3)
        for r in range(4):
            assert sorted(part.device_ids[i] for i in order[3 * r : 3 * r + 3]) == ["A", "B", "C"]

    def test_epochs_differ_seed_repeats(self):
        part = self._part({"A": 10, "B": 10})
        assert not np.array_equal(batch_order(part, 0, 0), batch_order(part, 0, 1))
        np.testing.assert_array_equal(batch_order(part, 0, 1), batch_order(part, 0, 1))

    def test_no_shuffle_keeps_order(self):
        part = self._part({"A": 3, "B": 2})
        np.testing.assert_array_equal(batch_order(part, 0, shuffle=False), np.arange(5))

    def test_batches_cover_everything_once(self):
        part = self._part({"A": 7, "B": 6})
        seen = np.concatenate([b.features[:, 0] for b in batches(part, 3, 4, seed=1)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(13))
        sizes = [len(b) for b in batches(part, 3, 4, seed=1)]
        assert sizes == [4, 4, 4, 1]
