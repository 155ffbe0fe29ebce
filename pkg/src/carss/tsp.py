"""Instances, tours, Euclidean geometry, instance generation and file I/O.

Vertex indices are 0-based everywhere in the library. TSPLIB files are
1-based and are converted when read.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import (
    FormatError,
    InvalidInputError,
    InvalidTourError,
    UnsupportedFeatureError,
)

MIN_VERTICES = 4
#: Largest instance for which :meth:`Instance.distance_matrix` will build a cache.
MATRIX_CACHE_LIMIT = 2000
NATIVE_MAGIC = "carss-tsp v1"


@dataclass(frozen=True, eq=False)
class Instance:
    """A Euclidean TSP instance.

    ``coords`` is stored as a read-only ``(n, 2)`` float64 array. Generated
    instances lie in the unit square; loaded ones may not, which is recorded
    in ``in_unit_square``.
    """

    coords: np.ndarray
    id: str = "instance"
    in_unit_square: bool = field(init=False)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64, copy=True)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInputError(f"coords must have shape (n, 2), got {coords.shape}")
        if coords.shape[0] < MIN_VERTICES:
            raise InvalidInputError(
                f"an instance needs at least {MIN_VERTICES} vertices, got {coords.shape[0]}"
            )
        if not np.all(np.isfinite(coords)):
            raise InvalidInputError("coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        inside = bool(np.all((coords >= 0.0) & (coords <= 1.0)))
        object.__setattr__(self, "in_unit_square", inside)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Instance(id={self.id!r}, n={self.n})"

    def dist(self, i, j):
        """Distances between vertex index arrays ``i`` and ``j`` (broadcasting)."""
        d = self.coords[i] - self.coords[j]
        return np.sqrt((d * d).sum(axis=-1))

    def dist_from(self, i: int, js=None) -> np.ndarray:
        """Distances from vertex ``i`` to ``js`` (all vertices when omitted)."""
        pts = self.coords if js is None else self.coords[js]
        d = pts - self.coords[i]
        return np.sqrt((d * d).sum(axis=-1))

    def distance_matrix(self) -> np.ndarray:
        """Full ``n x n`` matrix, cached. Only allowed for ``n <= MATRIX_CACHE_LIMIT``."""
        if self.n > MATRIX_CACHE_LIMIT:
            raise InvalidInputError(
                f"distance matrix cache is limited to n <= {MATRIX_CACHE_LIMIT}"
            )
        return self._matrix

    @cached_property
    def _matrix(self) -> np.ndarray:
        m = pairwise_distances(self.coords)
        m.setflags(write=False)
        return m


@dataclass(frozen=True, eq=False)
class Tour:
    """A Hamiltonian cycle given as a vertex order; the closing edge is implicit."""

    order: np.ndarray
    length: float

    def __post_init__(self):
        order = check_permutation(self.order, len(self.order)).copy()
        if not (math.isfinite(self.length) and self.length >= 0):
            raise InvalidTourError(f"tour length must be finite and nonnegative, got {self.length}")
        order.setflags(write=False)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "length", float(self.length))

    @classmethod
    def from_order(cls, inst: Instance, order) -> "Tour":
        order = np.asarray(order, dtype=np.int64)
        return cls(order, tour_length(inst, order))

    @property
    def n(self) -> int:
        return len(self.order)

    def __repr__(self):
        return f"Tour(n={self.n}, length={self.length:.6f})"


def pairwise_distances(a, b=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt((d * d).sum(axis=-1))


def distance(a, b) -> float:
    """Euclidean distance between two points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (2,) or b.shape != (2,):
        raise InvalidInputError("points must be 2-D")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("points must be finite")
    return math.hypot(a[0] - b[0], a[1] - b[1])


def instance_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Per-instance seed streams.

    Instance ``i`` of a stream seeded with ``seed`` is drawn from
    ``SeedSequence(seed).spawn(count)[i]``. Child ``i`` does not depend on
    ``count``, so workers can generate disjoint index ranges independently and
    prefixes of a longer stream match shorter streams.
    """
    return np.random.SeedSequence(_as_seed(seed)).spawn(count)


def generate_instances(n: int, count: int, seed: int = 0) -> list[Instance]:
    """Draw ``count`` instances with ``n`` i.i.d. uniform points on the unit square."""
    if n < MIN_VERTICES:
        raise InvalidInputError(f"n must be >= {MIN_VERTICES}, got {n}")
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")
    out = []
    for i, ss in enumerate(instance_seeds(seed, count)):
        coords = np.random.default_rng(ss).random((n, 2))
        out.append(Instance(coords, id=f"u{n}-s{seed}-{i}"))
    return out


def _as_seed(seed) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InvalidInputError("seed must be a 64-bit unsigned integer")
    return seed


def check_permutation(order, n: int) -> np.ndarray:
    order = np.asarray(order)
    if order.ndim != 1 or len(order) != n:
        raise InvalidTourError(f"tour must list exactly {n} vertices, got {order.shape}")
    if not np.issubdtype(order.dtype, np.integer):
        raise InvalidTourError("tour entries must be integers")
    seen = np.zeros(n, dtype=bool)
    if order.min() < 0 or order.max() >= n:
        raise InvalidTourError("tour contains a vertex outside 0..n-1")
    seen[order] = True
    if not seen.all():
        missing = np.flatnonzero(~seen)[:5].tolist()
        raise InvalidTourError(f"tour repeats vertices; missing {missing}")
    return order.astype(np.int64)


def tour_length(inst: Instance, order) -> float:
    """Length of the closed cycle visiting ``order``."""
    order = check_permutation(order, inst.n)
    pts = inst.coords[order]
    d = pts - np.roll(pts, -1, axis=0)
    return float(np.sqrt((d * d).sum(axis=1)).sum())


def gap(obj: float, bks: float) -> float:
    """Optimality gap in percent."""
    if not bks > 0:
        raise InvalidInputError(f"reference objective must be positive, got {bks}")
    return (obj / bks - 1.0) * 100.0


# -- file formats -------------------------------------------------------------


def write_instance(inst: Instance, path) -> None:
    lines = [NATIVE_MAGIC, f"n {inst.n}"]
    lines.extend(f"{x!r} {y!r}" for x, y in inst.coords.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_instance(path) -> Instance:
    """Read a native or TSPLIB (EUC_2D subset) instance file."""
    path = Path(path)
    text = path.read_text()
    first = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
    if first == NATIVE_MAGIC:
        return _read_native(text, path)
    return _read_tsplib(text, path)


def _read_native(text: str, path: Path) -> Instance:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError("missing 'n <count>' line", 2, path)
    parts = lines[1].split()
    if len(parts) != 2 or parts[0] != "n":
        raise FormatError("expected 'n <count>'", 2, path)
    try:
        n = int(parts[1])
    except ValueError:
        raise FormatError(f"bad vertex count {parts[1]!r}", 2, path) from None
    body = [(k + 3, ln) for k, ln in enumerate(lines[2:]) if ln.strip()]
    if len(body) != n:
        raise FormatError(f"header says n={n} but found {len(body)} coordinate lines",
                          body[-1][0] if body else 2, path)
    coords = np.empty((n, 2))
    for i, (lineno, ln) in enumerate(body):
        coords[i] = _parse_xy(ln.split(), lineno, path)
    return _make_instance(coords, path)


def _parse_xy(fields, lineno, path):
    if len(fields) != 2:
        raise FormatError(f"expected 2 coordinates, got {len(fields)}", lineno, path)
    try:
        xy = [float(f) for f in fields]
    except ValueError:
        raise FormatError(f"non-numeric coordinate in {fields!r}", lineno, path) from None
    if not all(math.isfinite(v) for v in xy):
        raise FormatError("non-finite coordinate", lineno, path)
    return xy


def _make_instance(coords, path):
    try:
        return Instance(coords, id=Path(path).stem)
    except InvalidInputError as exc:
        raise FormatError(str(exc), None, path) from None


_TSPLIB_KEYS = {"NAME", "TYPE", "COMMENT", "DIMENSION", "EDGE_WEIGHT_TYPE"}


def _read_tsplib(text: str, path: Path) -> Instance:
    header = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].strip()
        lineno = i + 1
        i += 1
        if not raw:
            continue
        if raw.upper().startswith("NODE_COORD_SECTION"):
            break
        if raw.upper() == "EOF":
            raise FormatError("EOF before NODE_COORD_SECTION", lineno, path)
        if ":" in raw:
            key, _, value = raw.partition(":")
        else:
            key, _, value = raw.partition(" ")
        key, value = key.strip().upper(), value.strip()
        if key not in _TSPLIB_KEYS:
            raise UnsupportedFeatureError(f"unsupported TSPLIB keyword {key!r}", lineno, path)
        if key in header:
            raise FormatError(f"duplicate {key} line", lineno, path)
        header[key] = (value, lineno)
    else:
        raise FormatError("missing NODE_COORD_SECTION", len(lines), path)

    if "TYPE" in header and header["TYPE"][0].upper() != "TSP":
        raise UnsupportedFeatureError(f"unsupported TYPE {header['TYPE'][0]!r}",
                                      header["TYPE"][1], path)
    ewt = header.get("EDGE_WEIGHT_TYPE")
    if ewt is None:
        raise FormatError("missing EDGE_WEIGHT_TYPE", None, path)
    if ewt[0].upper() != "EUC_2D":
        raise UnsupportedFeatureError(f"unsupported EDGE_WEIGHT_TYPE {ewt[0]!r}", ewt[1], path)
    if "DIMENSION" not in header:
        raise FormatError("missing DIMENSION", None, path)
    try:
        n = int(header["DIMENSION"][0])
    except ValueError:
        raise FormatError("bad DIMENSION", header["DIMENSION"][1], path) from None

    coords = np.full((n, 2), np.nan)
    count = 0
    for j in range(i, len(lines)):
        raw = lines[j].strip()
        lineno = j + 1
        if not raw:
            continue
        if raw.upper() == "EOF":
            break
        fields = raw.split()
        if len(fields) != 3:
            raise FormatError("expected '<index> <x> <y>'", lineno, path)
        try:
            idx = int(fields[0])
        except ValueError:
            raise FormatError(f"bad node index {fields[0]!r}", lineno, path) from None
        if count >= n:
            raise FormatError(f"more than DIMENSION={n} coordinate lines", lineno, path)
        if not 1 <= idx <= n:
            raise FormatError(f"node index {idx} outside 1..{n}", lineno, path)
        if not np.isnan(coords[idx - 1, 0]):
            raise FormatError(f"node {idx} listed twice", lineno, path)
        coords[idx - 1] = _parse_xy(fields[1:], lineno, path)
        count += 1
    if count != n:
        raise FormatError(f"DIMENSION={n} but found {count} coordinate lines", None, path)
    name = header.get("NAME", (Path(path).stem, None))[0]
    try:
        return Instance(coords, id=name or Path(path).stem)
    except InvalidInputError as exc:
        raise FormatError(str(exc), None, path) from None


def write_tour(tour: Tour, path) -> None:
    Path(path).write_text(
        " ".join(str(int(v)) for v in tour.order) + f"\nlength {tour.length!r}\n"
    )


def read_tour(path, inst: Instance | None = None) -> Tour:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise FormatError("expected an order line and a length line", None, path)
    try:
        order = [int(v) for v in lines[0].split()]
    except ValueError:
        raise FormatError("non-integer vertex index", 1, path) from None
    key, _, value = lines[1].partition(" ")
    if key != "length":
        raise FormatError("expected 'length <value>'", 2, path)
    try:
        length = float(value)
    except ValueError:
        raise FormatError(f"bad length {value!r}", 2, path) from None
    if inst is not None:
        return Tour.from_order(inst, order)
    check_permutation(order, len(order))
    return Tour(order, length)


def read_instance_set(path) -> list[Instance]:
    """Read one instance file or every instance file in a directory (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.is_file() and p.suffix in (".tsp", ".txt", ".inst"))
        if not files:
            raise FormatError("no instance files found", None, path)
        return [read_instance(p) for p in files]
    if not path.exists():
        raise FileNotFoundError(os.fspath(path))
    return [read_instance(path)]


def write_instance_set(instances, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for inst in instances:
        p = directory / f"{inst.id}.tsp"
        write_instance(inst, p)
        paths.append(p)
    return paths
