import numpy as np

from selfaffine.io import (
    canonical_json,
    content_hash,
    read_csv,
    read_pnm,
    read_summary,
    write_csv,
    write_pgm,
    write_ppm,
    write_summary,
)
from selfaffine.rng import run_blocks, substream


def test_hash_is_order_independent():
    assert content_hash({"a": 1, "b": [1.5, 2]}) == content_hash({"b": [1.5, 2], "a": 1})
    assert content_hash({"a": 1}) != content_hash({"a": 2})
    assert canonical_json({"x": np.float64(0.1)}) == '{"x":"0.1"}'


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["a", "b"], [(1, 0.5), (2, True)], comments=["config_hash = abc"])
    raw = p.read_bytes()
    assert b"\r" not in raw and raw.startswith(b"# config_hash = abc\n")
    header, rows = read_csv(p)
    assert header == ["a", "b"] and rows == [["1", "0.5"], ["2", "true"]]


def test_summary_roundtrip(tmp_path):
    p = tmp_path / "s.txt"
    write_summary(p, {"s": 0.5, "cfg": {"k": [1, 2]}})
    assert read_summary(p) == {"s": "0.5", "cfg": '{"k":[1,2]}'}


def test_pnm_roundtrip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img, ["viewport = 0 1"])
    magic, comments, back = read_pnm(tmp_path / "a.pgm")
    assert magic == "P5" and comments == ["viewport = 0 1"] and np.array_equal(back, img)
    rgb = np.stack([img] * 3, axis=-1)
    write_ppm(tmp_path / "a.ppm", rgb)
    magic, _, back = read_pnm(tmp_path / "a.ppm")
    assert magic == "P6" and np.array_equal(back, rgb)


def test_blocks_independent_of_workers():
    def fn(b, size):
        return substream(7, 1, b).random(size)

    a = run_blocks(50_000, fn, workers=1, block=4096)
    b = run_blocks(50_000, fn, workers=6, block=4096)
    assert len(a) == 50_000 and np.array_equal(a, b)
