"""MAP-Elites archive: behaviour-descriptor grid, insertion, uniform elite
selection, coverage, and persistence."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError
from .nets import ParamVector, read_params, write_params


@dataclass(frozen=True)
class ContinuousDim:
    lo: float
    hi: float
    bins: int

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigurationError("bins must be >= 1")
        if not self.lo < self.hi:
            raise ConfigurationError(f"need lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def size(self) -> int:
        return self.bins


@dataclass(frozen=True)
class CategoricalDim:
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 1:
            raise ConfigurationError("cardinality must be >= 1")

    @property
    def size(self) -> int:
        return self.cardinality


Dim = Union[ContinuousDim, CategoricalDim]

# A behaviour descriptor is a plain tuple: float per continuous dim, int label
# per categorical dim, arity matching its BdSpec.
BehaviourDescriptor = tuple


@dataclass(frozen=True)
class BdSpec:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        if not self.dims:
            raise ConfigurationError("BdSpec needs at least one dimension")
        object.__setattr__(self, "dims", tuple(self.dims))

    @property
    def total_cells(self) -> int:
        n = 1
        for d in self.dims:
            n *= d.size
        return n

    @property
    def arity(self) -> int:
        return len(self.dims)


def bd_to_coords(spec: BdSpec, bd: Sequence) -> tuple[int, ...]:
    """Per-dimension bin indices for a descriptor.

    Continuous values use floor((v - lo) / (hi - lo) * bins) and out-of-range
    values clamp to the edge bins; categorical labels pass through and must be
    in range.
    """
    if len(bd) != spec.arity:
        raise ConfigurationError(
            f"descriptor arity {len(bd)} does not match spec arity {spec.arity}")
    coords = []
    for value, dim in zip(bd, spec.dims):
        if isinstance(dim, ContinuousDim):
            v = float(value)
            b = int(np.floor((v - dim.lo) / (dim.hi - dim.lo) * dim.bins))
            coords.append(min(max(b, 0), dim.bins - 1))
        else:
            label = int(value)
            if not 0 <= label < dim.cardinality:
                raise ConfigurationError(
                    f"categorical label {label} out of range [0, {dim.cardinality})")
            coords.append(label)
    return tuple(coords)


def coords_to_key(spec: BdSpec, coords: Sequence[int]) -> int:
    """Mixed-radix integer cell key, row-major over dims."""
    key = 0
    for c, dim in zip(coords, spec.dims):
        key = key * dim.size + int(c)
    return key


def key_to_coords(spec: BdSpec, key: int) -> tuple[int, ...]:
    coords = []
    for dim in reversed(spec.dims):
        coords.append(key % dim.size)
        key //= dim.size
    return tuple(reversed(coords))


def bd_to_cell(spec: BdSpec, bd: Sequence) -> int:
    """Mixed-radix cell key for a descriptor."""
    return coords_to_key(spec, bd_to_coords(spec, bd))


@dataclass
class Elite:
    params: ParamVector
    bd: tuple
    eval_id: int
    loop_index: int


class Archive:
    """One elite per occupied behaviour cell.

    Pure-diversity collection: by default the first occupant of a cell is
    kept and later arrivals are rejected (replace_on_collision flips this).
    """

    def __init__(self, spec: BdSpec, replace_on_collision: bool = False):
        self.spec = spec
        self.replace_on_collision = replace_on_collision
        self.cells: dict[int, Elite] = {}

    @property
    def total_cells(self) -> int:
        return self.spec.total_cells

    def __len__(self) -> int:
        return len(self.cells)

    def insert(self, params: ParamVector, bd: Sequence, eval_id: int = -1,
               loop_index: int = 0) -> bool:
        key = bd_to_cell(self.spec, bd)
        if key in self.cells and not self.replace_on_collision:
            return False
        self.cells[key] = Elite(params, tuple(bd), eval_id, loop_index)
        return True

    def coverage(self) -> float:
        return len(self.cells) / self.total_cells

    def elites(self) -> list[Elite]:
        """Elites in insertion order (deterministic)."""
        return list(self.cells.values())

    def sample_elite_records(self, n: int,
                             rng: np.random.Generator) -> list[Elite]:
        """n uniform draws over occupied cells, with replacement."""
        if not self.cells:
            raise ConfigurationError("cannot sample from an empty archive")
        pool = self.elites()
        idx = rng.integers(0, len(pool), size=n)
        return [pool[i] for i in idx]

    def sample_elites(self, n: int, rng: np.random.Generator) -> list[ParamVector]:
        return [e.params for e in self.sample_elite_records(n, rng)]


# spec-level operation aliases


def insert(archive: Archive, params: ParamVector, bd: Sequence,
           eval_id: int = -1, loop_index: int = 0) -> bool:
    return archive.insert(params, bd, eval_id, loop_index)


def sample_elites(archive: Archive, n: int,
                  rng: np.random.Generator) -> list[ParamVector]:
    return archive.sample_elites(n, rng)


def coverage(archive: Archive) -> float:
    return archive.coverage()


# ---------------------------------------------------------------------------
# persistence


_ARCHIVE_MAGIC = b"MEAR1"
_DIM_CONTINUOUS = 0
_DIM_CATEGORICAL = 1


def _write_bd_spec(stream: BinaryIO, spec: BdSpec) -> None:
    stream.write(struct.pack("<I", spec.arity))
    for dim in spec.dims:
        if isinstance(dim, ContinuousDim):
            stream.write(struct.pack("<BddI", _DIM_CONTINUOUS, dim.lo, dim.hi,
                                     dim.bins))
        else:
            stream.write(struct.pack("<BI", _DIM_CATEGORICAL, dim.cardinality))


def _read_bd_spec(stream: BinaryIO) -> BdSpec:
    (arity,) = struct.unpack("<I", stream.read(4))
    dims: list[Dim] = []
    for _ in range(arity):
        (kind,) = struct.unpack("<B", stream.read(1))
        if kind == _DIM_CONTINUOUS:
            lo, hi, bins = struct.unpack("<ddI", stream.read(20))
            dims.append(ContinuousDim(lo, hi, bins))
        elif kind == _DIM_CATEGORICAL:
            (card,) = struct.unpack("<I", stream.read(4))
            dims.append(CategoricalDim(card))
        else:
            raise ConfigurationError(f"unknown dimension kind {kind}")
    return BdSpec(tuple(dims))


def save_archive(archive: Archive, path) -> None:
    """Header with the BdSpec, then one record per elite in insertion order."""
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        _write_bd_spec(fh, archive.spec)
        fh.write(struct.pack("<Q", len(archive.cells)))
        for key, elite in archive.cells.items():
            fh.write(struct.pack("<Q", key))
            for value, dim in zip(elite.bd, archive.spec.dims):
                if isinstance(dim, ContinuousDim):
                    fh.write(struct.pack("<d", float(value)))
                else:
                    fh.write(struct.pack("<I", int(value)))
            fh.write(struct.pack("<qI", elite.eval_id, elite.loop_index))
            write_params(fh, elite.params)


def load_archive(path, replace_on_collision: bool = False) -> Archive:
    with open(path, "rb") as fh:
        magic = fh.read(len(_ARCHIVE_MAGIC))
        if magic != _ARCHIVE_MAGIC:
            raise ConfigurationError(f"{path} is not an archive file")
        spec = _read_bd_spec(fh)
        archive = Archive(spec, replace_on_collision)
        (n,) = struct.unpack("<Q", fh.read(8))
        for _ in range(n):
            (key,) = struct.unpack("<Q", fh.read(8))
            bd = []
            for dim in spec.dims:
                if isinstance(dim, ContinuousDim):
                    bd.append(struct.unpack("<d", fh.read(8))[0])
                else:
                    bd.append(struct.unpack("<I", fh.read(4))[0])
            eval_id, loop_index = struct.unpack("<qI", fh.read(12))
            params = read_params(fh)
            derived = bd_to_cell(spec, tuple(bd))
            if derived != key:
                raise ConfigurationError(
                    f"stored cell key {key} disagrees with descriptor-derived "
                    f"key {derived}")
            archive.cells[key] = Elite(params, tuple(bd), eval_id, loop_index)
    return archive


def export_csv(archive: Archive, path) -> None:
    """Companion text export: cell key, per-dim bd values, eval_id."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["cell_key"]
        header += [f"bd_{i}" for i in range(archive.spec.arity)]
        header += ["eval_id"]
        writer.writerow(header)
        for key, elite in archive.cells.items():
            row = [key] + [repr(float(v)) if isinstance(d, ContinuousDim)
                           else int(v)
                           for v, d in zip(elite.bd, archive.spec.dims)]
            row.append(elite.eval_id)
            writer.writerow(row)
