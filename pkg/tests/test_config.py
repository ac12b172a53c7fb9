import pytest

from selfaffine.config import load_config, parse_config
from selfaffine.errors import ConfigError

BASE = """
[system]
matrix = [[3]]
digits = [[0], [2]]
mode = exact-integer
"""


def test_defaults_and_hash():
    cfg = parse_config(BASE)
    assert cfg.norm.variant == "mollified" and cfg.budgets.points == 10**7
    assert cfg.system.mode == "exact-integer"
    same = parse_config(BASE + "\n[run]\nthreads = 8\nout = elsewhere\n")
    assert same.hash == cfg.hash
    assert parse_config(BASE + "\n[run]\nseed = 1\n").hash != cfg.hash


def test_quoted_and_bare_strings_agree():
    assert parse_config(BASE.replace("exact-integer", '"exact-integer"')).hash == parse_config(BASE).hash


@pytest.mark.parametrize("extra", [
    "[norm]\nvariant = fancy\n",
    "[norm]\ndelta = 0.7\n",
    "[budgets]\npoints = -1\n",
    "[nonsense]\nx = 1\n",
    "[system]\nbogus = 1\n",
    "[run]\nseed = -3\n",
])
def test_rejects_bad_values(extra):
    text = BASE + "\n" + extra if not extra.startswith("[system]") else BASE + "bogus = 1\n"
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("matrix,digits", [("[[1]]", "[[0],[1]]"), ("[[2, 4], [1, 2]]", "[[0,0],[1,0]]"),
                                           ("[[3]]", "[[1],[2]]")])
def test_system_validation(matrix, digits):
    cfg = parse_config(f"[system]\nmatrix = {matrix}\ndigits = {digits}\n")
    with pytest.raises(ConfigError):
        cfg.build_system()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.ini")
