"""Stochastic simulation engine: per-cell propensities and the event loop.

The sampler is an exact trajectory method extended in two ways: a reaction is
selected jointly with the cell it occurs in (cumulative sums run rule-major,
cell-minor over the per-cell propensity table), and instantaneous vertical
rules fire between reactions, emitting one scene frame per visual-stage
transition.

State layout
------------
The initial term's single outer compartment (when a bounding-sphere radius is
declared) is the *arena*; its content layer is the *environment*; every
compartment in the environment is a *cell* with a stable integer id.  Index 0
is the environment pseudo-cell: it receives reactions that do not happen
inside a single cell.  Cells keep mutable count maps for their content and
membrane layers so that the hot path (flat molecule reactions) never touches
the term tree; terms are materialized on demand for structural rules, frames
and consistency checks.

Randomness: a single ``random.Random(seed)`` stream drives everything, in a
fixed order per step: waiting-time draw, selection draw, then any draws the
execution itself needs (application choice, division splits with species in
sorted order, grid direction choices).
"""

from __future__ import annotations

import math
import random
from math import comb as _choose
from typing import Callable, Optional

from .grid import Full, GridState, OutOfBoundsError
from .patterns import (ArrangeFailure, Inst, PComp, PLayer, PSeq, RComp,
                       RLayer, SpatLit, SpatVar, instantiate)
from .rewrite import (Application, Model, ModelError, RewriteRule,
                      applications, iter_sites)
from .terms import Comp, EMPTY_MSET, Mset, Par, Seq, SpatialInfo, normalize

FORMAT_VERSION = 1

CLASS_FLAT = "flat"
CLASS_CATCOMP = "catcomp"
CLASS_MEMBRANE = "membrane"
CLASS_GENERIC = "generic"


class EngineError(ValueError):
    """Configuration or state error raised by the engine."""


def sample_tau(a0: float, r1: float) -> float:
    """Waiting time to the next reaction: (1/a0) * ln(1/r1), r1 in (0, 1]."""
    if a0 <= 0:
        raise EngineError("waiting time undefined for a0 <= 0")
    if not (0 < r1 <= 1):
        raise EngineError("r1 must lie in (0, 1]")
    return math.log(1.0 / r1) / a0


def _select(rows, row_tot, a0: float, r2: float):
    """Rule-major, cell-minor cumulative selection using maintained totals."""
    target = r2 * a0
    cum = 0.0
    for j, rsum in enumerate(row_tot):
        if rsum <= 0.0:
            continue
        if cum + rsum < target:
            cum += rsum
            continue
        row = rows[j]
        last = None
        for col, a in enumerate(row):
            if a <= 0.0:
                continue
            cum += a
            last = col
            if cum >= target:
                return j, col
        if last is not None:
            return j, last
    for j in range(len(rows) - 1, -1, -1):
        row = rows[j]
        for col in range(len(row) - 1, -1, -1):
            if row[col] > 0.0:
                return j, col
    raise EngineError("no positive propensity to select")


def select_reaction_cell(rows, a0: float, r2: float):
    """Pick (rule index, cell position) by the cumulative-sum inequality.

    ``rows`` is a list of per-rule lists of propensities ordered by cell;
    the enumeration order is rule-major, cell-minor.  Returns the unique
    pair whose cumulative sum first reaches r2 * a0.
    """
    if a0 <= 0:
        raise EngineError("selection undefined for a0 <= 0")
    if not (0 < r2 <= 1):
        raise EngineError("r2 must lie in (0, 1]")
    target = r2 * a0
    cum = 0.0
    last = None
    for j, row in enumerate(rows):
        row_sum = sum(row)
        if row_sum <= 0:
            continue
        if cum + row_sum < target:
            cum += row_sum
            continue
        for col, a in enumerate(row):
            if a <= 0:
                continue
            cum += a
            last = (j, col)
            if cum >= target:
                return j, col
        if last is not None:
            return last
    # numerical tail: fall back to the last positive entry
    for j in range(len(rows) - 1, -1, -1):
        for col in range(len(rows[j]) - 1, -1, -1):
            if rows[j][col] > 0:
                return j, col
    raise EngineError("no positive propensity to select")


def species_key(s: Seq) -> str:
    return ".".join(s.symbols)


def _delta_add(delta: dict, key: str, n: int):
    v = delta.get(key, 0) + n
    if v:
        delta[key] = v
    else:
        delta.pop(key, None)


# ---------------------------------------------------------------------------
# rule analysis

class RuleInfo:
    """Execution plan for one rule: fast-path class and static dependencies."""

    __slots__ = ("rule", "klass", "consumed", "produced", "env_consumed",
                 "env_produced", "brane_consumed", "brane_produced",
                 "cell_consumed", "cell_produced", "pcomp", "lhs_symbols",
                 "effect_symbols", "index", "content_only")

    def __init__(self, rule: RewriteRule):
        self.rule = rule
        self.klass = CLASS_GENERIC
        self.lhs_symbols = _pattern_symbols(rule.lhs)
        self.pcomp = None
        self.content_only = False
        self._classify()
        self.effect_symbols = self._effects()

    def _effects(self) -> frozenset:
        if self.klass == CLASS_FLAT or self.klass == CLASS_CATCOMP:
            return _net_symbols([(self.consumed, self.produced)])
        if self.klass == CLASS_MEMBRANE:
            return _net_symbols([(self.env_consumed, self.env_produced),
                                 (self.brane_consumed, self.brane_produced),
                                 (self.cell_consumed, self.cell_produced)])
        return self.lhs_symbols | _rhs_symbols(self.rule.rhs)

    def _classify(self):
        rule = self.rule
        flat = _flat_counts(rule.lhs.elems)
        if flat is not None and not rule.rhs.refs:
            rflat = _flat_counts(rule.rhs.elems, rhs=True)
            if rflat is not None:
                self.klass = CLASS_FLAT
                self.consumed = flat
                self.produced = rflat
                return
        plan = _membrane_plan(rule)
        if plan is not None:
            (self.env_consumed, self.env_produced, self.brane_consumed,
             self.brane_produced, self.cell_consumed, self.cell_produced,
             self.pcomp) = plan
            self.klass = CLASS_MEMBRANE
            return
        plan = _catcomp_plan(rule)
        if plan is not None:
            self.consumed, self.produced, self.pcomp = plan
            self.klass = CLASS_CATCOMP
            return
        self.klass = CLASS_GENERIC


def _outside_symbols(model) -> frozenset:
    """Symbols that may occur in membrane or nested layers at any time,
    from the initial term and every rule's right pattern."""
    out: set = set()

    def walk_term(t, in_content_of_cell: bool):
        if isinstance(t, Comp):
            for e in t.brane:
                out.update(e.symbols)
            for child in t.content.children:
                walk_term(child, False)
        # nested sequences below the first compartment level count as outside
        elif isinstance(t, Seq) and not in_content_of_cell:
            out.update(t.symbols)

    root = model.initial_term
    for child in root.children:
        if isinstance(child, Comp):          # arena
            for e in child.brane:
                out.update(e.symbols)
            for cell in child.content.children:
                if isinstance(cell, Comp):
                    for e in cell.brane:
                        out.update(e.symbols)
                    for inner in cell.content.children:
                        if isinstance(inner, Comp):
                            walk_term(inner, False)
    for rule in model.rules:
        _rhs_outside(rule.rhs, out, depth=0)
    return frozenset(out)


def _rhs_outside(node, out: set, depth: int):
    from .patterns import RBrane
    if isinstance(node, RLayer):
        for e in node.elems:
            if isinstance(e, RComp):
                _rhs_outside(e, out, depth)
            elif isinstance(e, PSeq) and depth >= 2:
                for item in e.items:
                    if isinstance(item, str):
                        out.add(item)
    elif isinstance(node, RComp):
        for e in node.brane.elems:
            for item in e.items:
                if isinstance(item, str):
                    out.add(item)
        _rhs_outside(node.content, out, depth + 1)


def _net_symbols(pairs) -> frozenset:
    out: set = set()
    for consumed, produced in pairs:
        net: dict = {}
        for t, k in consumed.items():
            net[t] = net.get(t, 0) - k
        for t, k in produced.items():
            net[t] = net.get(t, 0) + k
        for t, d in net.items():
            if d:
                out.update(t.symbols)
    return frozenset(out)


def _pattern_symbols(node) -> frozenset:
    out: set = set()
    _walk_symbols(node, out)
    return frozenset(out)


def _rhs_symbols(node) -> frozenset:
    out: set = set()
    _walk_symbols(node, out)
    return frozenset(out)


def _walk_symbols(node, out: set):
    if isinstance(node, (PLayer, RLayer)):
        for e in node.elems:
            _walk_symbols(e, out)
    elif isinstance(node, (PComp, RComp)):
        brane = node.brane
        for e in brane.elems:
            _walk_symbols(e, out)
        _walk_symbols(node.content, out)
    elif isinstance(node, PSeq):
        for item in node.items:
            if isinstance(item, str):
                out.add(item)


def _flat_counts(elems, rhs: bool = False) -> Optional[dict]:
    """Ground-sequence count map, or None when any element is not flat."""
    out: dict = {}
    for e in elems:
        if not (isinstance(e, PSeq) and e.is_ground()):
            return None
        if rhs and isinstance(e.d, SpatLit) and e.d.d.center is None and e.d.d.radius:
            return None  # placeholder-looking spatial: treat structurally
        t = e.ground_term()
        out[t] = out.get(t, 0) + 1
    return out


def _split_layer_pattern(p: PLayer):
    """(ground count map, [compartment patterns], var) or None if not that shape."""
    flat: dict = {}
    comps = []
    for e in p.elems:
        if isinstance(e, PSeq) and e.is_ground():
            t = e.ground_term()
            flat[t] = flat.get(t, 0) + 1
        elif isinstance(e, PComp):
            comps.append(e)
        else:
            return None
    return flat, comps, p.var


def _membrane_plan(rule: RewriteRule):
    """Fast plan for rules of the shape: flat env part + one compartment whose
    brane and content are flat parts plus absorbing variables, mirrored on the
    right with the captures reproduced in place."""
    left = _split_layer_pattern(rule.lhs)
    if left is None:
        return None
    lflat, lcomps, _ = left
    if len(lcomps) != 1:
        return None
    lc = lcomps[0]
    if lc.brane.var is None or lc.content.var is None:
        return None
    lbrane = _flat_counts(lc.brane.elems)
    lcontent = _split_layer_pattern(lc.content)
    if lbrane is None or lcontent is None or lcontent[1]:
        return None
    if not isinstance(lc.d, (SpatVar,)):
        return None
    # right side: flat env elems + a single compartment with plain refs
    rflat: dict = {}
    rcomp = None
    if rule.rhs.refs:
        return None
    for e in rule.rhs.elems:
        if isinstance(e, PSeq) and e.is_ground():
            t = e.ground_term()
            rflat[t] = rflat.get(t, 0) + 1
        elif isinstance(e, RComp):
            if rcomp is not None:
                return None
            rcomp = e
        else:
            return None
    if rcomp is None:
        return None
    if rcomp.d != lc.d:
        return None
    if len(rcomp.brane.refs) != 1 or rcomp.brane.refs[0].name != lc.brane.var \
            or rcomp.brane.refs[0].split is not None:
        return None
    if len(rcomp.content.refs) != 1 or rcomp.content.refs[0].name != lc.content.var \
            or rcomp.content.refs[0].split is not None:
        return None
    rbrane = _flat_counts(rcomp.brane.elems)
    rcontent = _flat_counts(rcomp.content.elems)
    if rbrane is None or rcontent is None:
        return None
    return (lflat, rflat, lbrane, rbrane, dict(lcontent[0]), rcontent, lc)


def _catcomp_plan(rule: RewriteRule):
    """Fast plan for catalytic-compartment rules: one compartment pattern
    appearing unchanged on both sides, plus flat ground parts."""
    left = _split_layer_pattern(rule.lhs)
    if left is None or rule.rhs.refs:
        return None
    lflat, lcomps, _ = left
    if len(lcomps) != 1:
        return None
    lc = lcomps[0]
    rflat: dict = {}
    rcomp = None
    for e in rule.rhs.elems:
        if isinstance(e, PSeq) and e.is_ground():
            t = e.ground_term()
            rflat[t] = rflat.get(t, 0) + 1
        elif isinstance(e, RComp):
            if rcomp is not None:
                return None
            rcomp = e
        else:
            return None
    if rcomp is None or not _comp_preserved(lc, rcomp):
        return None
    return lflat, rflat, lc


def _comp_preserved(pc: PComp, rc: RComp) -> bool:
    if pc.d != rc.d:
        return False
    if tuple(pc.brane.elems) != tuple(rc.brane.elems):
        return False
    brefs = [(r.name, r.split) for r in rc.brane.refs]
    expect = [(pc.brane.var, None)] if pc.brane.var else []
    if brefs != expect:
        return False
    if tuple(pc.content.elems) != tuple(rc.content.elems):
        return False
    crefs = [(r.name, r.split) for r in rc.content.refs]
    expect = [(pc.content.var, None)] if pc.content.var else []
    return crefs == expect


# ---------------------------------------------------------------------------
# cells

class CellRec:
    """Mutable per-cell state: membrane and content counters plus placement."""

    __slots__ = ("cell_id", "brane", "content", "d", "cube", "_term",
                 "born", "populations", "_comps")

    def __init__(self, cell_id: int, comp: Comp, born: float):
        self.cell_id = cell_id
        self.brane = dict(comp.brane.items())
        self.content = dict(comp.content.children.items())
        self.d = comp.d
        self.cube = None
        self._term = comp
        self.born = born
        self.populations = {}
        self._comps = None
        self._recount()

    def _recount(self):
        self.populations = {}
        _count_species(self.term(), self.populations)

    def term(self) -> Comp:
        if self._term is None:
            self._term = Comp(Mset(self.brane), self.d, Par(Mset(self.content)))
        return self._term

    def set_term(self, comp: Comp):
        self.brane = dict(comp.brane.items())
        self.content = dict(comp.content.children.items())
        self.d = comp.d
        self._term = comp
        self._comps = None
        self._recount()

    def move_to(self, d: SpatialInfo):
        self.d = d
        self._term = None

    def bump(self, layer: dict, term, n: int):
        v = layer.get(term, 0) + n
        if v < 0:
            raise EngineError("negative count for %r in cell %d" % (term, self.cell_id))
        if v:
            layer[term] = v
        else:
            layer.pop(term, None)
        self._term = None

    def count(self, term) -> int:
        return self.content.get(term, 0)

    def comp_items(self):
        if self._comps is None:
            self._comps = [(t, n) for t, n in self.content.items()
                           if isinstance(t, Comp)]
        return self._comps

    def stage(self) -> Optional[int]:
        for t in self.content:
            if isinstance(t, Seq) and len(t.symbols) == 1:
                name = t.symbols[0]
                if name.startswith("stage") and name[5:].isdigit():
                    return int(name[5:])
        return None

    def layers(self):
        """(count map, weight) for every layer of this cell, content first."""
        out = [(self.content, 1), (self.brane, 1)]
        for t, n in self.content.items():
            if isinstance(t, Comp):
                for layer, w in _comp_layers(t):
                    out.append((layer, w * n))
        return out


def _count_species(t, out: dict):
    if isinstance(t, Seq):
        _delta_add(out, species_key(t), 1)
    elif isinstance(t, Comp):
        for e, n in t.brane.items():
            _delta_add(out, species_key(e), n)
        for e, n in t.content.children.items():
            for _ in range(1):
                _count_species_n(e, n, out)
    elif isinstance(t, Par):
        for e, n in t.children.items():
            _count_species_n(e, n, out)


def _count_species_n(e, n: int, out: dict):
    tmp: dict = {}
    _count_species(e, tmp)
    for k, v in tmp.items():
        _delta_add(out, k, v * n)


_COMP_LAYER_CACHE: dict = {}


def _comp_layers(c: Comp):
    got = _COMP_LAYER_CACHE.get(c)
    if got is None:
        got = [(dict(c.content.children.items()), 1),
               (dict(c.brane.items()), 1)]
        for t, n in c.content.children.items():
            if isinstance(t, Comp):
                for layer, w in _comp_layers(t):
                    got.append((layer, w * n))
        _COMP_LAYER_CACHE[c] = got
    return got


def _flat_ways(layer: dict, needs: dict) -> int:
    ways = 1
    for t, k in needs.items():
        n = layer.get(t, 0)
        if n < k:
            return 0
        ways *= _choose(n, k)
    return ways


# ---------------------------------------------------------------------------
# events / results

class RunResult:
    """Outcome of a run: termination, frames, report and optional event list."""

    def __init__(self):
        self.termination = None
        self.t_final = 0.0
        self.steps = 0
        self.frames: list = []
        self.report: list = []
        self.events: Optional[list] = []

    def __repr__(self):
        return "RunResult(%s, t=%.6g, steps=%d)" % (
            self.termination, self.t_final, self.steps)


class Engine:
    """Simulation state and loop for one model instance."""

    def __init__(self, model: Model, seed: Optional[int] = None,
                 collect_events: bool = True,
                 on_event: Optional[Callable] = None,
                 frames_enabled: bool = True):
        self.model = model
        self.seed = model.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.collect_events = collect_events
        self.on_event = on_event
        self.frames_enabled = frames_enabled

        self.finite_rules = model.finite_rules()
        self.vertical_rules = model.vertical_rules()
        self.infos = [RuleInfo(r) for r in self.finite_rules]
        self.vertical_infos = [RuleInfo(r) for r in self.vertical_rules]
        for idx, info in enumerate(self.infos):
            info.index = idx
        # symbol -> finite rule indices whose left pattern mentions it
        self.symbol_deps: dict = {}
        for info in self.infos:
            for s in info.lhs_symbols:
                self.symbol_deps.setdefault(s, []).append(info.index)
        self.vertical_symbols: set = set()
        for info in self.vertical_infos:
            self.vertical_symbols |= info.lhs_symbols

        self._catcomp_cache: dict = {}
        self.exclusions: set = set()
        outside = _outside_symbols(model)
        for info in self.infos + self.vertical_infos:
            if info.klass in (CLASS_FLAT, CLASS_CATCOMP):
                info.content_only = all(
                    len(t.symbols) == 1 and t.symbols[0] not in outside
                    for t in info.consumed)
        self._load_initial(model)
        self._build_table()
        self.t = 0.0
        self.steps = 0
        self.vertical_dirty = set(self.cells)
        self.result: Optional[RunResult] = None

    # -- state construction -------------------------------------------------

    def _load_initial(self, model: Model):
        term = model.initial_term
        self.arena: Optional[Comp] = None
        self.arena_brane: dict = {}
        self.arena_d = None
        root = term.children
        comps = [(e, n) for e, n in root.items() if isinstance(e, Comp)]
        if (model.sphere_radius > 0 and len(comps) == 1 and comps[0][1] == 1
                and root.total() == 1):
            self.arena = comps[0][0]
            self.arena_brane = dict(self.arena.brane.items())
            self.arena_d = self.arena.d
            env_layer = self.arena.content.children
        else:
            env_layer = root
        self.env: dict = {}
        self.cells: dict = {}
        self.next_cell_id = 1
        init_cells = []
        for e, n in env_layer.items():
            if isinstance(e, Comp):
                for _ in range(n):
                    init_cells.append(e)
            else:
                self.env[e] = n
        self.grid: Optional[GridState] = None
        if model.sphere_radius > 0:
            if model.cube_size <= 0:
                raise EngineError("a bounded model needs a positive cube size")
            self.grid = GridState(model.dimension, model.cube_size,
                                  model.sphere_radius, model.cube_size / 2.0)
        for comp in init_cells:
            self._register_cell(comp, born=0.0)
        self.env_populations: dict = {}
        for e, n in self.env.items():
            _count_species_n(e, n, self.env_populations)
        for e, n in self.arena_brane.items():
            _delta_add(self.env_populations, species_key(e), n)

    def _register_cell(self, comp: Comp, born: float) -> "CellRec":
        cell = CellRec(self.next_cell_id, comp, born)
        self.next_cell_id += 1
        if comp.d.placed():
            if self.grid is None:
                raise EngineError("placed cells need a bounded model")
            if comp.d.radius > self.grid.cube_size / 2.0 + 1e-12:
                raise EngineError(
                    "cell radius %g exceeds half the cube size" % comp.d.radius)
            try:
                cube = self.grid.cube_of(comp.d.center)
            except OutOfBoundsError as exc:
                raise EngineError(str(exc))
            if self.grid.occupant(cube) is not None:
                raise EngineError("initial spatial conflict in cube %r" % (cube,))
            self.grid.occupy(cube, cell.cell_id)
            cell.cube = cube
        self.cells[cell.cell_id] = cell
        return cell

    def _unregister_cell(self, cell_id: int):
        cell = self.cells.pop(cell_id)
        if cell.cube is not None:
            self.grid.vacate(cell.cube)

    # -- term views ----------------------------------------------------------

    def env_layers(self):
        out = [(self.env, 1)]
        if self.arena is not None:
            out.append((self.arena_brane, 1))
        return out

    def env_layer_mset(self) -> Mset:
        items = list(self.env.items())
        for cid in sorted(self.cells):
            items.append((self.cells[cid].term(), 1))
        return Mset(items)

    def root_term(self) -> Par:
        env = self.env_layer_mset()
        if self.arena is None:
            return Par(env)
        arena = Comp(Mset(self.arena_brane), self.arena_d, Par(env))
        return Par(Mset.of(arena))

    def cell_order(self) -> list:
        return [0] + sorted(self.cells)

    # -- propensity table ----------------------------------------------------

    def _build_table(self):
        self.cols = self.cell_order()
        self.col_of = {cid: k for k, cid in enumerate(self.cols)}
        n = len(self.cols)
        self.h = [[0] * n for _ in self.infos]
        self.a = [[0.0] * n for _ in self.infos]
        self.row_tot = [0.0] * len(self.infos)
        self._a0 = 0.0
        for info in self.infos:
            self._recompute_rule(info)
        self._resum()

    def _add_column(self, cell_id: int):
        self.cols.append(cell_id)
        self.col_of[cell_id] = len(self.cols) - 1
        for row in self.h:
            row.append(0)
        for row in self.a:
            row.append(0.0)

    def _drop_column(self, cell_id: int):
        col = self.col_of[cell_id]
        for j in range(len(self.infos)):
            self._set_entry(j, col, 0)

    def _set_entry(self, j: int, col: int, h: int):
        self.h[j][col] = h
        new_a = 0.0 if (j, col) in self.exclusions else self.finite_rules[j].rate * h
        old_a = self.a[j][col]
        if new_a != old_a:
            self.a[j][col] = new_a
            self.row_tot[j] += new_a - old_a
            self._a0 += new_a - old_a

    def a0(self) -> float:
        return self._a0

    def _resum(self):
        self.row_tot = [sum(row) for row in self.a]
        self._a0 = sum(self.row_tot)

    def _recompute_rule(self, info: RuleInfo):
        j = info.index
        if info.klass == CLASS_FLAT:
            for col, cid in enumerate(self.cols):
                self._set_entry(j, col, self._flat_h(info, cid))
        elif info.klass == CLASS_MEMBRANE:
            env_ways = self._env_flat_ways(info.env_consumed)
            for col, cid in enumerate(self.cols):
                if cid == 0:
                    self._set_entry(j, col, 0)
                else:
                    self._set_entry(j, col, env_ways * self._membrane_cell_ways(info, cid))
        elif info.klass == CLASS_CATCOMP:
            for col, cid in enumerate(self.cols):
                self._set_entry(j, col, self._catcomp_h(info, cid))
        else:
            self._recompute_generic_row(info)

    def _flat_h(self, info: RuleInfo, cell_id: int) -> int:
        if info.content_only:
            layer = self.env if cell_id == 0 else self.cells[cell_id].content
            return _flat_ways(layer, info.consumed)
        layers = self.env_layers() if cell_id == 0 else self.cells[cell_id].layers()
        total = 0
        for layer, w in layers:
            total += w * _flat_ways(layer, info.consumed)
        return total

    def _env_flat_ways(self, needs: dict) -> int:
        return _flat_ways(self.env, needs)

    def _membrane_cell_ways(self, info: RuleInfo, cell_id: int) -> int:
        cell = self.cells.get(cell_id)
        if cell is None:
            return 0
        pc = info.pcomp
        from .patterns import _match_spat
        if _match_spat(pc.d, cell.d, Inst()) is None:
            return 0
        return (_flat_ways(cell.brane, info.brane_consumed)
                * _flat_ways(cell.content, info.cell_consumed))

    def _catcomp_h(self, info: RuleInfo, cell_id: int) -> int:
        if info.content_only and cell_id != 0:
            cell = self.cells[cell_id]
            flat = _flat_ways(cell.content, info.consumed)
            if flat == 0:
                return 0
            comp_ways = 0
            for t, n in cell.comp_items():
                comp_ways += n * self._pcomp_ways(info, t)
            return flat * comp_ways
        layers = self.env_layers() if cell_id == 0 else self.cells[cell_id].layers()
        total = 0
        for layer, w in layers:
            flat = _flat_ways(layer, info.consumed)
            if flat == 0:
                continue
            comp_ways = 0
            for t, n in layer.items():
                if isinstance(t, Comp):
                    comp_ways += n * self._pcomp_ways(info, t)
            total += w * flat * comp_ways
        return total

    def _pcomp_ways(self, info: RuleInfo, comp: Comp) -> int:
        key = (info.rule.id, comp)
        got = self._catcomp_cache.get(key)
        if got is None:
            from .patterns import _match_elem
            seen = set()
            got = 0
            for inst, ways, pick in _match_elem(info.pcomp, comp, Inst()):
                if pick in seen:
                    continue
                seen.add(pick)
                got += ways
            self._catcomp_cache[key] = got
        return got

    def _recompute_generic_row(self, info: RuleInfo):
        j = info.index
        n = len(self.cols)
        fresh = [0] * n
        for app in applications(info.rule, self.root_term(), self.grid, normalized=True):
            for cid, share in self._attribute(app):
                fresh[self.col_of[cid]] += share
        for col in range(n):
            self._set_entry(j, col, fresh[col])

    def _attribute(self, app: Application):
        """Split an application's combinations over cell columns.

        Sites inside a cell belong to that cell; environment-layer matches
        touching exactly one cell compartment belong to that cell (shared
        evenly over identical copies); everything else is environment work.
        """
        path = app.site.path
        cpi = 1 if self.arena is not None else 0
        if len(path) > cpi:
            comp = path[cpi]
            ids = sorted(cid for cid, c in self.cells.items() if c.term() == comp)
            if ids:
                share, rem = divmod(app.ways, len(ids))
                if rem:
                    return [(0, app.ways)]
                return [(cid, share) for cid in ids]
            return [(0, app.ways)]
        if len(path) == cpi and app.site.kind == "content":
            comps = [(t, n) for t, n in app.consumed.items() if isinstance(t, Comp)]
            if len(comps) == 1 and comps[0][1] == 1:
                comp = comps[0][0]
                ids = sorted(cid for cid, c in self.cells.items() if c.term() == comp)
                if ids:
                    share, rem = divmod(app.ways, len(ids))
                    if rem:
                        return [(0, app.ways)]
                    return [(cid, share) for cid in ids]
        return [(0, app.ways)]

    def table_oracle(self):
        """Per-rule, per-cell combination counts recomputed from scratch via
        the generic matcher; the incremental table must agree exactly."""
        term = self.root_term()
        n = len(self.cols)
        fresh_h = [[0] * n for _ in self.infos]
        for info in self.infos:
            for app in applications(info.rule, term, self.grid, normalized=True):
                for cid, share in self._attribute(app):
                    fresh_h[info.index][self.col_of[cid]] += share
        fresh_a = [[self.finite_rules[j].rate * fresh_h[j][c] for c in range(n)]
                   for j in range(len(self.infos))]
        return fresh_h, fresh_a

    def recount_populations(self) -> dict:
        """Species counts per cell (and environment) recounted from the term."""
        out = {0: {}}
        for e, n in self.env.items():
            _count_species_n(e, n, out[0])
        for e, n in self.arena_brane.items():
            _delta_add(out[0], species_key(e), n)
        for cid, cell in self.cells.items():
            fresh: dict = {}
            _count_species(cell.term(), fresh)
            out[cid] = fresh
        return out

    # -- dirty propagation -----------------------------------------------

    def _touch(self, cell_id: int, symbols):
        """Recompute table entries depending on changed symbols in a cell."""
        touched = set()
        for s in symbols:
            for j in self.symbol_deps.get(s, ()):
                touched.add(j)
        col = self.col_of.get(cell_id)
        for j in sorted(touched):
            info = self.infos[j]
            if info.klass == CLASS_GENERIC:
                self._recompute_generic_row(info)
            elif cell_id == 0:
                if info.klass == CLASS_MEMBRANE:
                    env_ways = self._env_flat_ways(info.env_consumed)
                    for c2, cid2 in enumerate(self.cols):
                        if cid2 != 0:
                            self._set_entry(j, c2, env_ways
                                            * self._membrane_cell_ways(info, cid2))
                else:
                    self._set_entry(j, col, self._flat_h(info, 0)
                                    if info.klass == CLASS_FLAT
                                    else self._catcomp_h(info, 0))
            else:
                if info.klass == CLASS_FLAT:
                    self._set_entry(j, col, self._flat_h(info, cell_id))
                elif info.klass == CLASS_CATCOMP:
                    self._set_entry(j, col, self._catcomp_h(info, cell_id))
                else:
                    env_ways = self._env_flat_ways(info.env_consumed)
                    self._set_entry(j, col, env_ways
                                    * self._membrane_cell_ways(info, cell_id))
        if cell_id != 0 and not self.vertical_symbols.isdisjoint(symbols):
            self.vertical_dirty.add(cell_id)

    def _rebuild_cell_entries(self, cell_id: int):
        col = self.col_of[cell_id]
        for info in self.infos:
            j = info.index
            if info.klass == CLASS_FLAT:
                self._set_entry(j, col, self._flat_h(info, cell_id))
            elif info.klass == CLASS_CATCOMP:
                self._set_entry(j, col, self._catcomp_h(info, cell_id))
            elif info.klass == CLASS_MEMBRANE:
                env_ways = self._env_flat_ways(info.env_consumed)
                self._set_entry(j, col, env_ways * self._membrane_cell_ways(info, cell_id))
        self.vertical_dirty.add(cell_id)

    def _structural_refresh(self, cell_ids):
        """After a structural change: refresh affected columns and all
        generic rows, and drop stale caches."""
        for cid in cell_ids:
            if cid in self.col_of and cid in self.cells:
                self._rebuild_cell_entries(cid)
        for info in self.infos:
            if info.klass == CLASS_GENERIC:
                self._recompute_generic_row(info)
            elif info.klass == CLASS_FLAT:
                self._set_entry(info.index, 0, self._flat_h(info, 0))
            elif info.klass == CLASS_CATCOMP:
                self._set_entry(info.index, 0, self._catcomp_h(info, 0))
            elif info.klass == CLASS_MEMBRANE:
                env_ways = self._env_flat_ways(info.env_consumed)
                for c2, cid2 in enumerate(self.cols):
                    if cid2 != 0:
                        self._set_entry(info.index, c2, env_ways
                                        * self._membrane_cell_ways(info, cid2))

    # -- event plumbing ----------------------------------------------------

    def _emit(self, kind: str, rule_id: str, cell_id: int, deltas: dict,
              info: Optional[dict] = None):
        event = {"t": self.t, "kind": kind, "rule": rule_id, "cell": cell_id,
                 "deltas": deltas, "info": info or {}}
        if self.on_event is not None:
            self.on_event(event)
        if self.result is not None:
            if self.result.events is not None:
                self.result.events.append(event)

    def _frame(self, event):
        if not self.frames_enabled or self.result is None:
            return
        snapshot = []
        th = self.model.params.get("virusTH")
        vspecies = self.model.params.get("virus_species", "Virus")
        for cid in sorted(self.cells):
            cell = self.cells[cid]
            viruses = cell.populations.get(vspecies, 0)
            if th:
                if viruses == 0:
                    infection, color = "healthy", "orange"
                elif viruses < th:
                    infection, color = "light", "green"
                else:
                    infection, color = "severe", "blue"
            else:
                infection, color = "healthy", "orange"
            nuclei = []
            for t, n in cell.content.items():
                if isinstance(t, Comp):
                    for _ in range(n):
                        if t.d.placed() and cell.d.placed():
                            nuclei.append([a + b for a, b in zip(cell.d.center, t.d.center)])
                        elif t.d.placed():
                            nuclei.append(list(t.d.center))
                        else:
                            nuclei.append(None)
            snapshot.append({
                "id": cid,
                "center": list(cell.d.center) if cell.d.placed() else None,
                "radius": cell.d.radius,
                "stage": cell.stage(),
                "infection": infection,
                "color": color,
                "nuclei": nuclei,
            })
        self.result.frames.append({
            "format_version": FORMAT_VERSION,
            "frame": len(self.result.frames),
            "t": self.t,
            "event": event,
            "cells": snapshot,
        })

    # -- vertical rules ------------------------------------------------------

    def fire_vertical(self):
        """Fire every enabled instantaneous rule, oldest cell first, emitting
        one frame per firing.  Runs to quiescence without advancing time."""
        progress = True
        while progress:
            progress = False
            self.vertical_dirty.intersection_update(self.cells)
            for cid in sorted(self.vertical_dirty):
                cell = self.cells[cid]
                for info in self.vertical_infos:
                    if info.klass != CLASS_FLAT:
                        fired = self._fire_vertical_generic(info, cid)
                    else:
                        fired = self._fire_vertical_flat(info, cell)
                    if fired:
                        progress = True
                        break
                else:
                    self.vertical_dirty.discard(cid)
                if progress:
                    break

    def _fire_vertical_flat(self, info: RuleInfo, cell: CellRec) -> bool:
        for t, k in info.consumed.items():
            if cell.content.get(t, 0) < k:
                if info.content_only:
                    return False
                break
        else:
            pass
        if _flat_ways(cell.content, info.consumed) == 0:
            if info.content_only:
                return False
            # fall back to a full-layer check for unusual models
            found = False
            for layer, w in cell.layers()[1:]:
                if _flat_ways(layer, info.consumed):
                    found = True
                    break
            if not found:
                return False
            return self._fire_vertical_generic(info, cell.cell_id)
        stage = cell.stage()
        self._frame({"type": "stage", "cell": cell.cell_id, "stage": stage,
                     "rule": info.rule.id})
        delta: dict = {}
        for t, k in info.consumed.items():
            cell.bump(cell.content, t, -k)
            _delta_add(delta, species_key(t), -k)
        for t, k in info.produced.items():
            cell.bump(cell.content, t, k)
            _delta_add(delta, species_key(t), k)
        for k in list(delta):
            _delta_add(cell.populations, k, delta[k])
        self._emit("vertical", info.rule.id, cell.cell_id, {cell.cell_id: delta})
        self._touch(cell.cell_id, set(info.effect_symbols))
        return True

    def _fire_vertical_generic(self, info: RuleInfo, cell_id: int) -> bool:
        cell = self.cells[cell_id]
        mine = []
        for app in applications(info.rule, self.root_term(), self.grid, normalized=True):
            for cid, share in self._attribute(app):
                if cid == cell_id and share > 0:
                    mine.append(app)
        if not mine:
            return False
        self._frame({"type": "stage", "cell": cell_id, "stage": cell.stage(),
                     "rule": info.rule.id})
        self._apply_structural(info.rule, mine[0], cell_id)
        return True

    # -- execution -----------------------------------------------------------

    def execute(self, j: int, col: int):
        """Perform one occurrence of finite rule j in the cell at column col."""
        info = self.infos[j]
        cell_id = self.cols[col]
        if info.klass == CLASS_FLAT:
            self._exec_flat(info, cell_id)
        elif info.klass == CLASS_MEMBRANE:
            self._exec_membrane(info, cell_id)
        elif info.klass == CLASS_CATCOMP:
            self._exec_catcomp(info, cell_id)
        else:
            self._exec_generic(info, cell_id)

    def _exec_flat(self, info: RuleInfo, cell_id: int):
        if info.content_only:
            target_cell = self.cells.get(cell_id) if cell_id else None
            layer = self.env if target_cell is None else target_cell.content
            delta: dict = {}
            for t, k in info.consumed.items():
                if target_cell is not None:
                    target_cell.bump(layer, t, -k)
                else:
                    self._env_bump(layer, t, -k)
                _delta_add(delta, t.symbols[0], -k)
            for t, k in info.produced.items():
                if target_cell is not None:
                    target_cell.bump(layer, t, k)
                else:
                    self._env_bump(layer, t, k)
                _delta_add(delta, species_key(t), k)
            pops = target_cell.populations if target_cell is not None else self.env_populations
            for k2, v in delta.items():
                _delta_add(pops, k2, v)
            self._emit("reaction", info.rule.id, cell_id, {cell_id: delta})
            self._touch(cell_id, info.effect_symbols)
            return
        if cell_id == 0:
            layers = self.env_layers()
        else:
            layers = self.cells[cell_id].layers()
        weights = [w * _flat_ways(layer, info.consumed) for layer, w in layers]
        total = sum(weights)
        if total == 0:
            raise EngineError("flat rule %s has no combinations left" % info.rule.id)
        pick = 0
        if len([w for w in weights if w]) > 1:
            x = self.rng.random() * total
            acc = 0.0
            for i, w in enumerate(weights):
                acc += w
                if x <= acc and w:
                    pick = i
                    break
        else:
            pick = next(i for i, w in enumerate(weights) if w)
        if pick >= 2 and cell_id != 0:
            # reaction inside a nested compartment: structural rebuild
            self._exec_generic(info, cell_id)
            return
        layer = layers[pick][0]
        delta: dict = {}
        target_cell = self.cells.get(cell_id)
        for t, k in info.consumed.items():
            if target_cell is not None:
                target_cell.bump(layer, t, -k)
            else:
                self._env_bump(layer, t, -k)
            _delta_add(delta, species_key(t), -k)
        for t, k in info.produced.items():
            if target_cell is not None:
                target_cell.bump(layer, t, k)
            else:
                self._env_bump(layer, t, k)
            _delta_add(delta, species_key(t), k)
        pops = target_cell.populations if target_cell is not None else self.env_populations
        for k2, v in delta.items():
            _delta_add(pops, k2, v)
        self._emit("reaction", info.rule.id, cell_id, {cell_id: delta})
        self._touch(cell_id, info.effect_symbols)

    def _env_bump(self, layer: dict, t, n: int):
        v = layer.get(t, 0) + n
        if v < 0:
            raise EngineError("negative environment count for %r" % (t,))
        if v:
            layer[t] = v
        else:
            layer.pop(t, None)

    def _exec_membrane(self, info: RuleInfo, cell_id: int):
        cell = self.cells[cell_id]
        env_delta: dict = {}
        cell_delta: dict = {}
        for t, k in info.env_consumed.items():
            self._env_bump(self.env, t, -k)
            _delta_add(env_delta, species_key(t), -k)
        for t, k in info.env_produced.items():
            self._env_bump(self.env, t, k)
            _delta_add(env_delta, species_key(t), k)
        for t, k in info.brane_consumed.items():
            cell.bump(cell.brane, t, -k)
            _delta_add(cell_delta, species_key(t), -k)
        for t, k in info.brane_produced.items():
            cell.bump(cell.brane, t, k)
            _delta_add(cell_delta, species_key(t), k)
        for t, k in info.cell_consumed.items():
            cell.bump(cell.content, t, -k)
            _delta_add(cell_delta, species_key(t), -k)
        for t, k in info.cell_produced.items():
            cell.bump(cell.content, t, k)
            _delta_add(cell_delta, species_key(t), k)
        for k2, v in env_delta.items():
            _delta_add(self.env_populations, k2, v)
        for k2, v in cell_delta.items():
            _delta_add(cell.populations, k2, v)
        deltas = {}
        if env_delta:
            deltas[0] = env_delta
        if cell_delta:
            deltas[cell_id] = cell_delta
        self._emit("reaction", info.rule.id, cell_id, deltas)
        self._touch(cell_id, info.effect_symbols)
        self._touch(0, info.effect_symbols)

    def _exec_catcomp(self, info: RuleInfo, cell_id: int):
        # the compartment is preserved, so only the flat part changes
        if cell_id == 0:
            layers = self.env_layers()
        else:
            layers = self.cells[cell_id].layers()
        weights = []
        for layer, w in layers:
            flat = _flat_ways(layer, info.consumed)
            comp_ways = 0
            if flat:
                for t, n in layer.items():
                    if isinstance(t, Comp):
                        comp_ways += n * self._pcomp_ways(info, t)
            weights.append(w * flat * comp_ways)
        total = sum(weights)
        if total == 0:
            raise EngineError("rule %s has no combinations left" % info.rule.id)
        pick = next(i for i, w in enumerate(weights) if w)
        if len([w for w in weights if w]) > 1:
            x = self.rng.random() * total
            acc = 0.0
            for i, w in enumerate(weights):
                acc += w
                if x <= acc and w:
                    pick = i
                    break
        if pick >= 2 and cell_id != 0:
            self._exec_generic(info, cell_id)
            return
        layer = layers[pick][0]
        delta: dict = {}
        target_cell = self.cells.get(cell_id)
        for t, k in info.consumed.items():
            if target_cell is not None:
                target_cell.bump(layer, t, -k)
            else:
                self._env_bump(layer, t, -k)
            _delta_add(delta, species_key(t), -k)
        for t, k in info.produced.items():
            if target_cell is not None:
                target_cell.bump(layer, t, k)
            else:
                self._env_bump(layer, t, k)
            _delta_add(delta, species_key(t), k)
        pops = target_cell.populations if target_cell is not None else self.env_populations
        for k2, v in delta.items():
            _delta_add(pops, k2, v)
        self._emit("reaction", info.rule.id, cell_id, {cell_id: delta})
        self._touch(cell_id, info.effect_symbols)

    def _exec_generic(self, info: RuleInfo, cell_id: int):
        term = self.root_term()
        apps = applications(info.rule, term, self.grid, normalized=True)
        mine = []
        for app in apps:
            for cid, share in self._attribute(app):
                if cid == cell_id and share > 0:
                    mine.append((app, share))
        if not mine:
            raise EngineError("rule %s has no applications in cell %d"
                              % (info.rule.id, cell_id))
        total = sum(share for _, share in mine)
        x = self.rng.random() * total
        acc = 0.0
        app = mine[0][0]
        for cand, share in mine:
            acc += share
            if x <= acc:
                app = cand
                break
        self._apply_structural(info.rule, app, cell_id)

    # -- structural application ------------------------------------------

    RESERVED = -1

    def _apply_structural(self, rule: RewriteRule, app: Application, cell_id: int):
        """Execute an application that may rearrange compartments or space.

        Grid moves are staged first (push chains, conflict resolution); on an
        arrangement failure they are rolled back and nothing else changes, so
        the caller can drop the application and retry the step.
        """
        splits = {}
        for name in sorted(rule.split_vars):
            captured = app.inst.sigma[name]
            splits[name] = self._split_mset(captured)
        moves: list = []
        reserved: list = []

        def placer(radius: float) -> SpatialInfo:
            if self.grid is None:
                raise ArrangeFailure("no grid to place a newborn in")
            parent = self.cells[cell_id].cube if cell_id in self.cells else None
            if parent is None:
                raise ArrangeFailure("newborn has no parent position")
            try:
                cube, mv = self.grid.getpos(parent, self.rng)
            except Full as exc:
                raise ArrangeFailure(str(exc))
            moves.extend(mv)
            reserved.append(cube)
            self.grid.occupy(cube, Engine.RESERVED)
            return SpatialInfo(self.grid.center_of(cube), radius)

        path = app.site.path
        cpi = 1 if self.arena is not None else 0
        try:
            if len(path) > cpi:
                self._apply_inside_cell(rule, app, cell_id, placer, splits)
            elif len(path) == cpi and app.site.kind == "content":
                self._apply_env_site(rule, app, cell_id, placer, splits,
                                     moves, reserved)
            else:
                raise EngineError("unsupported structural site for rule %s" % rule.id)
        except ArrangeFailure:
            for cube in reserved:
                if self.grid.occupant(cube) == Engine.RESERVED:
                    self.grid.vacate(cube)
            for obj, src, dst in reversed(moves):
                self.grid.move(dst, src)
            raise
        # commit: update records of every pushed/relocated cell
        for obj, src, dst in moves:
            cell = self.cells.get(obj)
            if cell is not None:
                cell.move_to(SpatialInfo(self.grid.center_of(dst), cell.d.radius))
                cell.cube = dst

    def _split_mset(self, captured: Mset):
        """Binomial split of a captured multiset, species in canonical order."""
        left: list = []
        right: list = []
        for item, n in captured.items():
            k = 0
            for _ in range(n):
                if self.rng.getrandbits(1):
                    k += 1
            if k:
                left.append((item, k))
            if n - k:
                right.append((item, n - k))
        return Mset(left), Mset(right)

    def _apply_inside_cell(self, rule, app: Application, cell_id: int,
                           placer, splits):
        from .rewrite import replace_at
        cell = self.cells[cell_id]
        old_pop = dict(cell.populations)
        cpi = 1 if self.arena is not None else 0
        local_path = app.site.path[cpi:]
        inner_root = Par(Mset.of(cell.term()))
        new_root = replace_at(inner_root, local_path, app.site.kind,
                              app.target_layer(placer, splits))
        comps = [e for e in new_root.children if isinstance(e, Comp)]
        if len(comps) != 1 or new_root.children.total() != 1:
            raise EngineError("in-cell rewrite changed the cell boundary")
        cell.set_term(comps[0])
        delta = _pop_delta(old_pop, cell.populations)
        self._emit("reaction", rule.id, cell_id, {cell_id: delta})
        self._structural_refresh([cell_id])

    def _map_consumed_cells(self, app: Application, cell_id: int) -> list:
        """Cell ids for the compartments an environment-site match consumes,
        preferring the attributed cell among indistinguishable twins."""
        out: list = []
        for t, n in app.consumed.items():
            if not isinstance(t, Comp):
                continue
            ids = sorted(cid for cid, c in self.cells.items()
                         if c.term() == t and cid not in out)
            if cell_id in ids:
                ids.remove(cell_id)
                ids.insert(0, cell_id)
            if len(ids) < n:
                raise EngineError("could not map consumed compartments to cells")
            out.extend(ids[:n])
        return out

    def _apply_env_site(self, rule, app: Application, cell_id: int,
                        placer, splits, moves: list, reserved: list):
        consumed_cells = self._map_consumed_cells(app, cell_id)
        produced = instantiate(rule.rhs, app.inst, placer, splits).children
        produced_comps = []
        produced_flat = []
        for t, n in produced.items():
            if isinstance(t, Comp):
                produced_comps.extend([t] * n)
            else:
                produced_flat.append((t, n))

        # plan placements before mutating anything but the grid
        vacated = {self.cells[cid].cube for cid in consumed_cells
                   if self.cells[cid].cube is not None}
        placements = []
        taken = set()
        for comp in produced_comps:
            if not comp.d.placed():
                placements.append((comp, None))
                continue
            if self.grid is None:
                raise EngineError("placed compartments need a bounded model")
            if comp.d.radius > self.grid.cube_size / 2.0 + 1e-12:
                raise ArrangeFailure("object radius %g exceeds half the cube size"
                                     % comp.d.radius)
            try:
                cube = self.grid.cube_of(comp.d.center)
            except OutOfBoundsError as exc:
                raise ArrangeFailure(str(exc))
            occ = self.grid.occupant(cube)
            free = (occ is None or occ == Engine.RESERVED and cube in reserved
                    or (cube in vacated and cube not in taken))
            if not free:
                solved = self.grid.resolve_conflict(cube, self.rng)
                if solved is None:
                    raise ArrangeFailure("no arrangement for cube %r" % (cube,))
                moves.extend(solved)
            if cube in taken:
                raise ArrangeFailure("two newborns target cube %r" % (cube,))
            taken.add(cube)
            placements.append((comp, cube))

        # commit
        old_env_pop = dict(self.env_populations)
        for t, n in app.consumed.items():
            if not isinstance(t, Comp):
                self._env_bump(self.env, t, -n)
        for t, n in produced_flat:
            self._env_bump(self.env, t, n)
        in_place = (len(produced_comps) == 1 and len(consumed_cells) == 1)
        deltas: dict = {}
        birth_info = None
        touched_cells: list = []
        if in_place:
            cid = consumed_cells[0]
            cell = self.cells[cid]
            old_pop = dict(cell.populations)
            comp, cube = placements[0]
            if cube is not None and cube != cell.cube:
                if self.grid.occupant(cube) == Engine.RESERVED:
                    self.grid.vacate(cube)
                if cell.cube is not None:
                    self.grid.move(cell.cube, cube)
                else:
                    self.grid.occupy(cube, cid)
                cell.cube = cube
            cell.set_term(comp)
            deltas[cid] = _pop_delta(old_pop, cell.populations)
            touched_cells = [cid]
            primary = cid
        else:
            for cid in consumed_cells:
                self._unregister_cell(cid)
                self._drop_column(cid)
            new_cells = []
            for comp, cube in placements:
                if cube is not None and self.grid.occupant(cube) == Engine.RESERVED:
                    self.grid.vacate(cube)
                rec = CellRec(self.next_cell_id, comp, born=self.t)
                self.next_cell_id += 1
                if cube is not None:
                    self.grid.occupy(cube, rec.cell_id)
                    rec.cube = cube
                self.cells[rec.cell_id] = rec
                self._add_column(rec.cell_id)
                new_cells.append(rec.cell_id)
                deltas[rec.cell_id] = dict(rec.populations)
            birth_info = {"mother": consumed_cells[0] if consumed_cells else None,
                          "retired": consumed_cells, "daughters": new_cells}
            touched_cells = new_cells
            primary = cell_id
        self.env_populations = self._env_pop_recount()
        env_delta = _pop_delta(old_env_pop, self.env_populations)
        if env_delta:
            deltas[0] = env_delta
        self._emit("reaction", rule.id, primary, deltas, birth_info)
        self._structural_refresh(touched_cells)

    def _env_pop_recount(self) -> dict:
        out: dict = {}
        for e, n in self.env.items():
            _count_species_n(e, n, out)
        for e, n in self.arena_brane.items():
            _delta_add(out, species_key(e), n)
        return out

    # -- main loop -----------------------------------------------------------

    def run(self, t_max: float, max_steps: Optional[int] = None) -> RunResult:
        """Run until t_max, a full grid, or quiescence; returns the result."""
        result = RunResult()
        result.events = [] if self.collect_events else None
        self.result = result
        self._frame({"type": "init"})
        arrange_failures = 0
        while True:
            self.fire_vertical()
            if self.grid is not None and self.grid.is_full():
                result.termination = "space_full"
                break
            a0 = self.a0()
            if a0 <= 0:
                if self.exclusions:
                    result.termination = "space_full"
                else:
                    result.termination = "quiescent"
                break
            r1 = 1.0 - self.rng.random()
            tau = sample_tau(a0, r1)
            if self.t + tau > t_max:
                self.t = t_max
                result.termination = "t_max"
                break
            r2 = 1.0 - self.rng.random()
            j, col = _select(self.a, self.row_tot, a0, r2)
            t_before = self.t
            self.t = t_before + tau
            try:
                self.execute(j, col)
            except ArrangeFailure as exc:
                self.t = t_before
                arrange_failures += 1
                result.report.append(
                    "t=%.6f arrangement failed for rule %s in cell %s: %s"
                    % (self.t, self.finite_rules[j].id, self.cols[col], exc))
                self.exclusions.add((j, col))
                delta = -self.a[j][col]
                self.a[j][col] = 0.0
                self.row_tot[j] += delta
                self._a0 += delta
                continue
            if self.exclusions:
                cleared = list(self.exclusions)
                self.exclusions.clear()
                for (j2, col2) in cleared:
                    self._set_entry(j2, col2, self.h[j2][col2])
            self.steps += 1
            if max_steps is not None and self.steps >= max_steps:
                result.termination = "max_steps"
                break
        result.t_final = self.t
        result.steps = self.steps
        for cid in sorted(self.cells):
            cell = self.cells[cid]
            pending = [t.symbols[0] for t in cell.content
                       if isinstance(t, Seq) and len(t.symbols) == 1
                       and t.symbols[0].startswith("visualised")]
            if pending:
                result.report.append(
                    "cell %d ended with %s pending: stage transition condition "
                    "never met" % (cid, ", ".join(sorted(pending))))
        if arrange_failures:
            result.report.append("%d arrangement failures (applications dropped)"
                                 % arrange_failures)
        self.result = None
        return result


def _pop_delta(old: dict, new: dict) -> dict:
    out: dict = {}
    for k in set(old) | set(new):
        d = new.get(k, 0) - old.get(k, 0)
        if d:
            out[k] = d
    return out
