"""Cube-grid occupancy inside a bounding sphere.

Space is divided into axis-aligned cubes sized so that every object fits in
one; at most one object may occupy a cube.  Cube (0, 0, ..) is centered on
the origin (the sphere center), so positions quantize by rounding each
coordinate to the nearest cube center.  A cube is usable when a maximal
object placed at its center still fits inside the bounding sphere.

Newborn cells are placed next to their parent.  When all neighbour cubes are
taken, one direction is chosen and the occupants along it are pushed one cube
forward; a cell blocked by the sphere boundary is relocated sideways to an
adjacent free cube instead (at most one relocation per placement).  When that
fails too, the placement reports fullness and the caller stops the run.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

Cube = Tuple[int, ...]


class OutOfBoundsError(ValueError):
    """A position (plus object radius) does not fit inside the sphere."""


class Full(Exception):
    """No placement is possible; the simulation must stop."""


class GridState:
    """Occupancy of the in-sphere cubes; maps cube index -> object id."""

    def __init__(self, dimension: int, cube_size: float, sphere_radius: float,
                 max_object_radius: float):
        if dimension < 1:
            raise ValueError("dimension must be at least 1")
        if cube_size <= 0 or sphere_radius <= 0:
            raise ValueError("cube size and sphere radius must be positive")
        if cube_size < 2 * max_object_radius:
            raise ValueError(
                "cube size %g cannot hold objects of radius %g"
                % (cube_size, max_object_radius))
        self.dimension = dimension
        self.cube_size = float(cube_size)
        self.sphere_radius = float(sphere_radius)
        self.max_object_radius = float(max_object_radius)
        self.occupancy: dict = {}
        self.usable = frozenset(self._enumerate_usable())

    def _enumerate_usable(self) -> Iterator[Cube]:
        reach = int(math.floor(self.sphere_radius / self.cube_size)) + 1
        def rec(prefix):
            if len(prefix) == self.dimension:
                if self._center_fits(prefix):
                    yield tuple(prefix)
                return
            for i in range(-reach, reach + 1):
                yield from rec(prefix + [i])
        yield from rec([])

    def _center_fits(self, cube) -> bool:
        center = [i * self.cube_size for i in cube]
        norm = math.sqrt(sum(c * c for c in center))
        return norm + self.max_object_radius <= self.sphere_radius + 1e-9

    # -- geometry ----------------------------------------------------------

    def cube_of(self, position) -> Cube:
        """Quantize a position to its cube index (nearest cube center)."""
        if len(position) != self.dimension:
            raise ValueError("position has wrong dimension")
        cube = tuple(int(math.floor(c / self.cube_size + 0.5)) for c in position)
        if cube not in self.usable:
            raise OutOfBoundsError("position %r is outside the usable sphere"
                                   % (position,))
        return cube

    def center_of(self, cube: Cube) -> Tuple[float, ...]:
        return tuple(i * self.cube_size for i in cube)

    def directions(self) -> list:
        """The 2n axis directions, in fixed axis-major order."""
        out = []
        for axis in range(self.dimension):
            for sign in (1, -1):
                out.append((axis, sign))
        return out

    def _step(self, cube: Cube, direction) -> Cube:
        axis, sign = direction
        out = list(cube)
        out[axis] += sign
        return tuple(out)

    def neighbours(self, cube: Cube) -> list:
        return [self._step(cube, d) for d in self.directions()]

    # -- occupancy ---------------------------------------------------------

    def occupant(self, cube: Cube) -> Optional[int]:
        return self.occupancy.get(cube)

    def occupy(self, cube: Cube, obj_id: int):
        if cube not in self.usable:
            raise OutOfBoundsError("cube %r is outside the sphere" % (cube,))
        if cube in self.occupancy:
            raise ValueError("cube %r is already occupied" % (cube,))
        self.occupancy[cube] = obj_id

    def vacate(self, cube: Cube) -> int:
        return self.occupancy.pop(cube)

    def move(self, src: Cube, dst: Cube):
        obj = self.vacate(src)
        self.occupy(dst, obj)

    def cube_by_id(self, obj_id: int) -> Cube:
        for cube, oid in self.occupancy.items():
            if oid == obj_id:
                return cube
        raise KeyError(obj_id)

    def is_full(self) -> bool:
        return len(self.occupancy) == len(self.usable)

    def copy(self) -> "GridState":
        out = GridState.__new__(GridState)
        out.dimension = self.dimension
        out.cube_size = self.cube_size
        out.sphere_radius = self.sphere_radius
        out.max_object_radius = self.max_object_radius
        out.occupancy = dict(self.occupancy)
        out.usable = self.usable
        return out

    # -- placement ---------------------------------------------------------

    def free_neighbours(self, cube: Cube) -> list:
        return [c for c in self.neighbours(cube)
                if c in self.usable and c not in self.occupancy]

    def getpos(self, parent: Cube, rng) -> tuple:
        """Find a cube for a newborn next to ``parent``; returns (cube, moves).

        ``moves`` lists (object id, source cube, destination cube) for every
        occupant displaced by the push chain or the boundary relocation; they
        are already applied to the grid.  The returned cube is left empty for
        the caller to occupy.  Raises :class:`Full` when nothing works.
        """
        if parent not in self.occupancy:
            raise ValueError("parent cube %r is not occupied" % (parent,))
        free = self.free_neighbours(parent)
        if free:
            return free[rng.randrange(len(free))], []
        direction = self.directions()[rng.randrange(2 * self.dimension)]
        return self._push_chain(parent, direction)

    def _push_chain(self, parent: Cube, direction) -> tuple:
        chain = []
        cube = self._step(parent, direction)
        while cube in self.usable and cube in self.occupancy:
            chain.append(cube)
            cube = self._step(cube, direction)
        if not chain:
            # the chosen direction leaves the sphere immediately
            raise Full("direction %r from %r hits the boundary" % (direction, parent))
        target = self._step(parent, direction)
        if cube in self.usable:
            # room at the end: shift every occupant one cube forward
            moves = []
            for src in reversed(chain):
                dst = self._step(src, direction)
                moves.append((self.occupancy[src], src, dst))
                self.move(src, dst)
            moves.reverse()
            return target, moves
        # boundary hit: relocate the blocked end cell sideways, then shift
        blocked = chain[-1]
        for cand in self.neighbours(blocked):
            if cand in self.usable and cand not in self.occupancy:
                moves = [(self.occupancy[blocked], blocked, cand)]
                self.move(blocked, cand)
                for src in reversed(chain[:-1]):
                    dst = self._step(src, direction)
                    moves.append((self.occupancy[src], src, dst))
                    self.move(src, dst)
                return target, moves
        raise Full("no empty position reachable from %r" % (parent,))

    def resolve_conflict(self, cube: Cube, rng) -> Optional[list]:
        """Make room in an occupied cube for an incoming object.

        Moves the incumbent to a free neighbour (or pushes a chain) and
        returns the applied moves, or None when the grid cannot be arranged
        (the caller drops the conflicting application).
        """
        if cube not in self.occupancy:
            return []
        free = self.free_neighbours(cube)
        if free:
            dst = free[rng.randrange(len(free))]
            obj = self.occupancy[cube]
            self.move(cube, dst)
            return [(obj, cube, dst)]
        for direction in self.directions():
            probe = self.copy()
            try:
                target, _ = probe._push_chain(cube, direction)
            except Full:
                continue
            # replay on the live grid: push incumbent into the freed lane
            _, moves = self._push_chain(cube, direction)
            obj = self.occupancy[cube]
            self.move(cube, target)
            return moves + [(obj, cube, target)]
        return None
