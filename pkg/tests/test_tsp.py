import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carss.exceptions import FormatError, InvalidInputError, InvalidTourError, UnsupportedFeatureError
from carss.tsp import (
    Instance,
    Tour,
    distance,
    gap,
    generate_instances,
    instance_seeds,
    read_instance,
    read_instance_set,
    read_tour,
    tour_length,
    write_instance,
    write_instance_set,
    write_tour,
)

from helpers import SQUARE, reference_cycle_length

coord = st.floats(-1e3, 1e3, allow_nan=False)
point = st.tuples(coord, coord)


def test_distance_examples():
    assert distance((0, 0), (3, 4)) == 5.0
    assert distance((0.5, 0.5), (0.5, 0.5)) == 0.0
    assert distance((0, 0), (1, 1)) == pytest.approx(math.sqrt(2), abs=1e-15)


def test_distance_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        distance((0, float("nan")), (1, 1))
    with pytest.raises(InvalidInputError):
        distance((0, 0), (float("inf"), 1))


@given(point, point, point)
def test_metric_axioms(a, b, c):
    assert distance(a, b) >= 0
    assert distance(a, b) == distance(b, a)
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-12 * (1 + distance(a, c))


def test_generate_examples():
    insts = generate_instances(100, 100, 7)
    assert len(insts) == 100
    assert all(inst.n == 100 and inst.in_unit_square for inst in insts)
    assert generate_instances(4, 1, 3)[0].n == 4
    again = generate_instances(100, 100, 7)
    assert all(np.array_equal(a.coords, b.coords) for a, b in zip(insts, again))
    assert not np.array_equal(insts[0].coords, generate_instances(100, 1, 8)[0].coords)


def test_generate_prefix_stable():
    # instance i depends only on (seed, i) through the spawn rule
    few = generate_instances(20, 3, 11)
    many = generate_instances(20, 10, 11)
    for a, b in zip(few, many):
        assert np.array_equal(a.coords, b.coords)
    assert len(instance_seeds(11, 4)) == 4


def test_generate_rejects_small():
    with pytest.raises(InvalidInputError):
        generate_instances(3, 1, 0)
    with pytest.raises(InvalidInputError):
        generate_instances(10, 0, 0)


def test_instance_validation():
    with pytest.raises(InvalidInputError):
        Instance(np.zeros((3, 2)))
    with pytest.raises(InvalidInputError):
        Instance(np.zeros((5, 3)))
    with pytest.raises(InvalidInputError):
        Instance([[0, 0], [1, np.nan], [0, 1], [1, 1]])
    big = Instance([[0, 0], [2, 0], [2, 2], [0, 2]])
    assert not big.in_unit_square
    with pytest.raises(ValueError):
        big.coords[0, 0] = 5.0


def test_tour_length_examples():
    assert tour_length(SQUARE, [0, 1, 2, 3]) == pytest.approx(4.0, abs=1e-15)
    assert tour_length(SQUARE, [0, 2, 1, 3]) == pytest.approx(2 + 2 * math.sqrt(2), abs=1e-12)
    with pytest.raises(InvalidTourError):
        tour_length(SQUARE, [0, 1, 1, 3])
    with pytest.raises(InvalidTourError):
        tour_length(SQUARE, [0, 1, 2])


@settings(max_examples=50)
@given(st.integers(4, 40), st.integers(0, 2**32 - 1), st.integers(0, 39))
def test_tour_length_rotation_reversal(n, seed, shift):
    inst = generate_instances(n, 1, seed)[0]
    order = np.random.default_rng(seed).permutation(n)
    base = tour_length(inst, order)
    assert tour_length(inst, np.roll(order, shift % n)) == pytest.approx(base, rel=1e-12)
    assert tour_length(inst, order[::-1]) == pytest.approx(base, rel=1e-12)
    assert base == pytest.approx(reference_cycle_length(inst.coords.tolist(), order.tolist()), rel=1e-9)


def test_tour_checks_length():
    t = Tour.from_order(SQUARE, [3, 2, 1, 0])
    assert t.length == pytest.approx(4.0)
    with pytest.raises(InvalidTourError):
        Tour(np.array([0, 1, 2, 3]), -1.0)


def test_gap_examples():
    assert gap(10.71, 10.71) == 0.0
    assert gap(1.1, 1.0) == pytest.approx(10.0)
    assert gap(9.45, 7.74) == pytest.approx(22.093, abs=1e-3)
    with pytest.raises(InvalidInputError):
        gap(1.0, 0.0)


def test_native_round_trip(tmp_path):
    inst = generate_instances(37, 1, 5)[0]
    write_instance(inst, tmp_path / "a.tsp")
    back = read_instance(tmp_path / "a.tsp")
    assert np.array_equal(back.coords, inst.coords)
    text = (tmp_path / "a.tsp").read_text().splitlines()
    assert text[0] == "carss-tsp v1" and text[1] == "n 37"


TSPLIB = """NAME: five
TYPE: TSP
COMMENT: tiny
DIMENSION: 5
EDGE_WEIGHT_TYPE: EUC_2D
NODE_COORD_SECTION
1 0 0
2 3 0
3 3 4
4 0 4
5 1.5 2
EOF
"""


def test_tsplib_reader(tmp_path):
    p = tmp_path / "five.tsp"
    p.write_text(TSPLIB)
    inst = read_instance(p)
    assert inst.n == 5
    assert inst.coords[2].tolist() == [3.0, 4.0]
    assert not inst.in_unit_square


def _err(tmp_path, text, name="bad.tsp"):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(FormatError) as info:
        read_instance(p)
    return info.value


def test_tsplib_errors(tmp_path):
    e = _err(tmp_path, TSPLIB.replace("DIMENSION: 5", "DIMENSION: 3"))
    assert e.lineno is not None
    e = _err(tmp_path, TSPLIB.replace("DIMENSION: 5", "DIMENSION: 5\nDIMENSION: 5"))
    assert e.lineno == 5
    e = _err(tmp_path, TSPLIB.replace("3 3 4", "3 3 x"))
    assert e.lineno == 9
    e = _err(tmp_path, TSPLIB.replace("EUC_2D", "GEO"), "geo.tsp")
    assert isinstance(e, UnsupportedFeatureError)
    e = _err(tmp_path, TSPLIB.replace("TYPE: TSP", "TYPE: TSP\nCAPACITY: 10"), "cap.tsp")
    assert isinstance(e, UnsupportedFeatureError)


def test_native_errors(tmp_path):
    e = _err(tmp_path, "carss-tsp v1\nn 4\n0 0\n1 0\n1 1\n")
    assert "n=4" in str(e)
    e = _err(tmp_path, "carss-tsp v1\nn 4\n0 0\n1 0\n1 one\n0 1\n")
    assert e.lineno == 5


def test_tour_io(tmp_path):
    t = Tour.from_order(SQUARE, [0, 1, 2, 3])
    write_tour(t, tmp_path / "t.txt")
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert lines[0] == "0 1 2 3" and lines[1].startswith("length ")
    back = read_tour(tmp_path / "t.txt", SQUARE)
    assert back.order.tolist() == [0, 1, 2, 3] and back.length == t.length


def test_instance_set_io(tmp_path):
    insts = generate_instances(8, 3, 2)
    write_instance_set(insts, tmp_path / "set")
    back = read_instance_set(tmp_path / "set")
    assert [b.id for b in back] == sorted(i.id for i in insts)
    with pytest.raises(FileNotFoundError):
        read_instance_set(tmp_path / "missing.tsp")
