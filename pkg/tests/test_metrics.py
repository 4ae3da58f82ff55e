import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polygan import metrics as M
from polygan.errors import PairingError, ShapeError
from polygan.pngio import png_read, png_write
from polygan.rng import RngState


def rand_img(seed, size=20):
    return RngState(seed).uniform(3 * size * size).reshape(3, size, size)


def test_self_similarity_is_exactly_one():
    x = rand_img(1)
    assert M.ssim(x, x) == 1.0


def test_constant_images_closed_form():
    p = M.SsimParams()
    got = M.ssim(np.zeros((3, 16, 16)), np.ones((3, 16, 16)), p)
    want = p.c1 / (1.0 + p.c1)
    assert abs(got - want) < 1e-8


def test_symmetry():
    a, b = rand_img(2), rand_img(3)
    assert M.ssim(a, b) == M.ssim(b, a)


def test_range_bounds():
    for seed in range(10):
        a, b = rand_img(seed), rand_img(seed + 100)
        s = M.ssim(a, b)
        assert -1.0 <= s <= 1.0


def test_one_iff_equal():
    a = rand_img(4)
    b = a.copy()
    b[0, 10, 10] += 0.2
    assert M.ssim(a, b) < 1.0 - 1e-9


def test_monotone_degradation():
    a = rand_img(5)
    noise = rand_img(6)
    scores = [M.ssim(a, (1 - t) * a + t * noise) for t in (0.0, 0.25, 0.5, 1.0)]
    assert all(x >= y for x, y in zip(scores, scores[1:]))


def test_matches_direct_reference():
    for seed in range(10):
        a, b = rand_img(seed), rand_img(seed + 50)
        assert abs(M.ssim(a, b) - M.ssim_reference(a, b)) < 1e-7


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_symmetry_property(seed):
    a, b = rand_img(seed), rand_img(seed + 1)
    assert M.ssim(a, b) == M.ssim(b, a)


def test_shape_and_window_errors():
    with pytest.raises(ShapeError):
        M.ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 15)))
    with pytest.raises(ShapeError):
        M.ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))  # smaller than window
    with pytest.raises(ShapeError):
        M.SsimParams(window=10)


def test_masked_ssim_focuses_on_region():
    a = rand_img(7, 32)
    b = a.copy()
    b[:, 20:28, 20:28] = 0.0  # damage one corner
    damage = np.zeros((32, 32))
    damage[20:28, 20:28] = 1
    intact = np.zeros((32, 32))
    intact[6:14, 6:14] = 1
    assert M.ssim_masked(a, b, damage) < M.ssim_masked(a, b, intact)
    assert M.ssim_masked(a, b, intact) > 0.99


def test_masked_ssim_empty_mask_rejected():
    a = rand_img(8, 20)
    with pytest.raises(ShapeError):
        M.ssim_masked(a, a, np.zeros((20, 20)))


def test_evaluate_dir_identical(tmp_path):
    gen, tgt = tmp_path / "gen", tmp_path / "tgt"
    gen.mkdir()
    tgt.mkdir()
    for i in range(4):
        img = rand_img(i, 16)
        png_write(gen / f"{i}.png", img)
        png_write(tgt / f"{i}.png", img)
    report = M.evaluate_dir(gen, tgt, png_read, csv_path=tmp_path / "r.csv")
    assert report.count == 4
    assert report.mean == 1.0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "file,ssim"
    assert len(lines) == 6  # header + 4 rows + mean
    assert lines[-1].startswith("mean,")


def test_evaluate_dir_orphan_error(tmp_path):
    gen, tgt = tmp_path / "gen", tmp_path / "tgt"
    gen.mkdir()
    tgt.mkdir()
    png_write(gen / "a.png", rand_img(0, 16))
    png_write(tgt / "a.png", rand_img(0, 16))
    png_write(tgt / "orphan.png", rand_img(1, 16))
    with pytest.raises(PairingError, match="orphan.png"):
        M.evaluate_dir(gen, tgt, png_read)


def test_evaluate_dir_empty_error(tmp_path):
    (tmp_path / "gen").mkdir()
    (tmp_path / "tgt").mkdir()
    with pytest.raises(PairingError):
        M.evaluate_dir(tmp_path / "gen", tmp_path / "tgt", png_read)


def test_evaluate_csv_stable_across_runs(tmp_path):
    gen, tgt = tmp_path / "gen", tmp_path / "tgt"
    gen.mkdir()
    tgt.mkdir()
    for i in range(3):
        png_write(gen / f"{i}.png", rand_img(i, 16))
        png_write(tgt / f"{i}.png", rand_img(i + 9, 16))
    M.evaluate_dir(gen, tgt, png_read, csv_path=tmp_path / "a.csv")
    M.evaluate_dir(gen, tgt, png_read, csv_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
