import numpy as np
import pytest

from qformer import data
from qformer.errors import ConfigError

SMALL = data.SynthSpec(train_count=40, test_count=12, seed=7)


def test_generation_bit_identical():
    a = data.generate(SMALL, "train")
    b = data.generate(SMALL, "train")
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_frozen_checksums():
    # recorded from a reference run; guards cross-platform stability
    assert data.checksum(*data.generate(SMALL, "train")) == \
        "0b3d23d8f5b2d3629defabdadc077c104fe422308b95575fb96014774e5d6f4c"
    assert data.checksum(*data.generate(SMALL, "test")) == \
        "d41833e2a74befa84746329c56513c90edbd3936a14ec210f6b7d07c2d35b72a"


def test_splits_differ():
    assert data.checksum(*data.generate(SMALL, "train")) != data.checksum(*data.generate(SMALL, "test"))


def test_class_balance():
    spec = data.SynthSpec(train_count=400)
    _, y = data.generate(spec, "train")
    assert np.bincount(y).tolist() == [100, 100, 100, 100]


def test_sample_independent_of_split_size():
    big = data.SynthSpec(train_count=80, seed=7)
    assert np.array_equal(data.generate(SMALL)[0][:40], data.generate(big)[0][:40])


def _axis_spread(img):
    ys, xs = np.nonzero(img > 0.5)
    return xs.std(), ys.std()


def test_orientation_oracle():
    horiz = data.render_bar(32, 15.5, 15.5, 0.0, 20, 3)
    vert = data.render_bar(32, 15.5, 15.5, np.pi / 2, 20, 3)
    sx, sy = _axis_spread(horiz)
    assert sx > 3 * sy
    sx, sy = _axis_spread(vert)
    assert sy > 3 * sx
    assert horiz.sum() == pytest.approx(60, rel=0.05)


def test_noise_free_labels_follow_orientation():
    spec = data.SynthSpec(noise_sigma=0.0, angle_jitter=0.0, train_count=4)
    x, y = data.generate(spec)
    sx0, sy0 = _axis_spread(x[0])
    sx2, sy2 = _axis_spread(x[2])
    assert (y[0], y[2]) == (0, 2)
    assert sx0 > sy0 and sy2 > sx2


def test_images_in_unit_range():
    x, _ = data.generate(SMALL)
    assert x.dtype == np.float32 and x.min() >= 0 and x.max() <= 1


def test_write_read_round_trip(tmp_path):
    sums = data.write_dataset(SMALL, tmp_path)
    loaded = data.load_dataset(tmp_path)
    for split, (x, y) in loaded.items():
        assert data.checksum(x, y) == sums[split]
    assert data.SynthSpec.from_dict(__import__("json").loads((tmp_path / "spec.json").read_text())) == SMALL


def test_read_rejects_truncated(tmp_path):
    data.write_split(tmp_path / "a.bin", *data.generate(SMALL, "test"))
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        data.read_split(tmp_path / "b.bin")


@pytest.mark.parametrize("bad", [
    {"num_classes": 1}, {"bar_length": (5, 40)}, {"noise_sigma": -1}, {"angle_jitter": 1.0},
])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        data.SynthSpec(**bad)


def test_unknown_spec_key():
    with pytest.raises(ConfigError):
        data.SynthSpec.from_dict({"n_train": 3})
