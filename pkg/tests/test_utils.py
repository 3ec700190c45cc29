"""
Test the file helpers and the worker pool.
"""

import os
import threading

import numpy as np
from pytest import raises

from fmsv import DataError
from fmsv.utils import format_table, read_panel, read_table, write_panel, write_table
from fmsv import _pool
from fmsv._pool import get_thread_count, map_series

from common import run_tests


def test_panel_roundtrip(tmp_path):
    y = np.array([[0.1, 1 / 3, -2.5], [1e-300, 7.0, np.pi]])
    filename = str(tmp_path / "panel.csv")
    write_panel(filename, y)
    with open(filename, "rb") as f:
        text = f.read().decode()
    assert text.splitlines()[0] == "y1,y2"
    assert len(text.splitlines()) == 4
    back = read_panel(filename)
    assert back.shape == (2, 3)
    assert np.array_equal(back, y)


def test_write_table_is_deterministic(tmp_path):
    rows = [(1, 0.1, "a", True), (2, 1 / 3, "b", False)]
    write_table(str(tmp_path / "a.csv"), ["i", "x", "s", "flag"], rows)
    write_table(str(tmp_path / "b.csv"), ["i", "x", "s", "flag"], rows)
    with open(tmp_path / "a.csv", "rb") as f:
        a = f.read()
    with open(tmp_path / "b.csv", "rb") as f:
        b = f.read()
    assert a == b
    assert a.decode().splitlines()[1] == "1,0.10000000000000001,a,1"
    header, rows = read_table(str(tmp_path / "a.csv"))
    assert header == ["i", "x", "s", "flag"]
    assert rows[1] == ["2", "0.33333333333333331", "b", "0"]


def test_table_cells(tmp_path):
    filename = str(tmp_path / "t.csv")
    rows = [("a,b", None, 1.5), ("c", 2, float("nan"))]
    write_table(filename, ["s", "n", "x"], rows)
    with open(filename, "rb") as f:
        lines = f.read().decode().splitlines()
    assert lines[1] == '"a,b",,1.5'
    assert lines[2] == "c,2,nan"
    header, back = read_table(filename)
    assert back == [["a,b", "", "1.5"], ["c", "2", "nan"]]

    # Integer cells in a float column of a panel are fine
    with open(filename, "wb") as f:
        f.write(b"y1,y2\n1,0.5\n2,1e-300\n")
    assert np.array_equal(read_panel(filename), [[1.0, 2.0], [0.5, 1e-300]])

    with raises(ValueError):
        write_table(filename, ["a", "b"], [(1,)])


def test_read_panel_fails(tmp_path):
    def write(name, text):
        filename = str(tmp_path / name)
        with open(filename, "wb") as f:
            f.write(text.encode())
        return filename

    with raises(DataError) as err:
        read_panel(write("bad.csv", "y1,y2\n1,2\n3,abc\n"))
    assert "row 2" in str(err.value) and "'y2'" in str(err.value)

    with raises(DataError) as err:
        read_panel(write("nan.csv", "y1,y2\n1,nan\n"))
    assert "row 1" in str(err.value)

    with raises(DataError):
        read_panel(write("ragged.csv", "y1,y2\n1,2\n3\n"))
    with raises(DataError):
        read_panel(write("empty.csv", ""))
    with raises(DataError):
        read_panel(write("header.csv", "y1,y2\n"))
    with raises(ValueError):
        write_panel(str(tmp_path / "x.csv"), [1.0, 2.0])


def test_format_table():
    text = format_table(["name", "value"], [("mu_1", 0.123456), ("phi_10", 12.0)])
    lines = text.splitlines()
    assert lines[0].split() == ["name", "value"]
    assert len(lines) == 3
    assert lines[1].split() == ["mu_1", "0.1235"]
    assert lines[2].split() == ["phi_10", "12"]
    assert len(lines[1]) == len(lines[2])
    assert "nan" in format_table(["x"], [(float("nan"),)])


def test_get_thread_count():
    old = os.environ.get("FMSV_THREADS")
    try:
        os.environ.pop("FMSV_THREADS", None)
        assert get_thread_count() == 1
        os.environ["FMSV_THREADS"] = "4"
        assert get_thread_count() == 4
        for value in ("0", "many"):
            os.environ["FMSV_THREADS"] = value
            with raises(ValueError):
                get_thread_count()
    finally:
        if old is None:
            os.environ.pop("FMSV_THREADS", None)
        else:
            os.environ["FMSV_THREADS"] = old


def test_map_series():
    def square(i, offset):
        return i * i + offset, threading.current_thread().name

    args = [(i, 1) for i in range(20)]
    res = map_series(square, args, 1)
    assert [r[0] for r in res] == [i * i + 1 for i in range(20)]
    assert all(not r[1].startswith("fmsv") for r in res)

    res = map_series(square, args, 4)
    assert [r[0] for r in res] == [i * i + 1 for i in range(20)]
    assert all(r[1].startswith("fmsv") for r in res)

    assert map_series(square, [], 4) == []

    def fail(i):
        raise RuntimeError(f"fail {i}")

    with raises(RuntimeError):
        map_series(fail, [(1,), (2,)], 2)


def test_pool_shutdown():
    def name(i):
        return threading.current_thread().name

    map_series(name, [(1,), (2,)], 3)
    pool = _pool._pools[3]
    _pool.shutdown()
    assert _pool._pools == {}
    with raises(RuntimeError):
        pool.submit(name, 1)

    # A new pool is started on demand
    assert all(n.startswith("fmsv") for n in map_series(name, [(1,), (2,)], 3))
    assert 3 in _pool._pools
    _pool.shutdown()


if __name__ == "__main__":
    run_tests(globals())
