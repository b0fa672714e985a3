import numpy as np
import pytest

from convaol.convops import FilterBank
from convaol.errors import FormatError
from convaol.imageio import (bank_from_bytes, bank_to_bytes, filter_mosaic, read_bank,
                             read_image, read_image_dir, write_bank, write_pgm, write_raw)


def test_raw_round_trip(tmp_path, rng):
    x = rng.standard_normal((5, 7))
    write_raw(tmp_path / "a.raw", x)
    assert np.array_equal(read_image(tmp_path / "a.raw"), x)


@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip(tmp_path, rng, bits):
    x = rng.uniform(size=(4, 6))
    write_pgm(tmp_path / "a.pgm", x, bits=bits)
    y = read_image(tmp_path / "a.pgm")
    assert y.shape == x.shape
    assert np.max(np.abs(x - y)) <= 0.5 / (2 ** bits - 1) + 1e-12


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# hi\n2 1\n255\n\x00\xff")
    assert read_image(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]


def test_unknown_format(tmp_path):
    (tmp_path / "x.raw").write_bytes(b"garbage!")
    with pytest.raises(FormatError):
        read_image(tmp_path / "x.raw")


def test_bank_file_layout(tmp_path, rng):
    bank = FilterBank(rng.standard_normal((6, 4)), (2, 3))
    data = bank_to_bytes(bank)
    assert data[:8] == b"CAOLFB00"
    assert np.frombuffer(data[8:20], "<u4").tolist() == [2, 3, 4]
    assert np.array_equal(np.frombuffer(data[20:], "<f8"), bank.D.ravel(order="F"))
    write_bank(tmp_path / "b.caolfb", bank)
    back = read_bank(tmp_path / "b.caolfb")
    assert back.shape == (2, 3) and np.array_equal(back.D, bank.D)
    with pytest.raises(FormatError):
        bank_from_bytes(data[:-3])


def test_directory_listing_is_sorted(tmp_path):
    for name, v in [("b.raw", 2.0), ("a.raw", 1.0)]:
        write_raw(tmp_path / name, np.full((2, 2), v))
    (tmp_path / "notes.txt").write_text("skip")
    imgs = read_image_dir(tmp_path)
    assert [float(x[0, 0]) for x in imgs] == [1.0, 2.0]
    with pytest.raises(FileNotFoundError):
        read_image_dir(tmp_path / "missing")


def test_mosaic_shape(rng):
    bank = FilterBank(rng.standard_normal((9, 5)), (3, 3))
    m = filter_mosaic(bank, gap=1)
    assert m.ndim == 2 and m.min() >= 0 and m.max() <= 1
