"""Patterns over terms: variables, matching, instantiation and combination counts.

Left patterns are terms enriched with variables:

* symbol variables bind one symbol inside a sequence,
* sequence variables bind a contiguous (possibly empty) sub-sequence,
* term variables absorb the remainder of a compartment's content layer,
* brane variables absorb the remainder of a membrane,
* spatial variables bind an object's full placement, center variables just
  its center.

Right patterns re-use bound variables and may carry placement directives:
a concrete placement, a bound variable, a fresh grid position (``getpos``,
resolved by the caller through a placer callback), or a two-way split of a
captured multiset (used by cell division to partition molecules between
daughters).

Matching a pattern against a layer aggregates choices among indistinguishable
copies into a single result with a combination count (``ways``): for every
distinct consumed element the number of ways to pick its copies is the
binomial coefficient C(available, consumed), and counts from nested layers
multiply.  Results that differ only in variable naming (same consumed copies,
same instantiated outcome) are collapsed by callers via the ``picks`` field.
"""

from __future__ import annotations

from fractions import Fraction
from math import comb as _choose
from typing import Iterator, Optional, Tuple, Union

from .terms import (EMPTY_MSET, Mset, Par, Seq, Comp, SpatialInfo, UNPLACED,
                    normalize, top_multiset)


class PatternError(ValueError):
    """Raised for malformed patterns or unbound variables at instantiation."""


# ---------------------------------------------------------------------------
# variables and spatial patterns

class SymVar:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __eq__(self, o):
        return isinstance(o, SymVar) and o.name == self.name

    def __hash__(self):
        return hash(("?", self.name))

    def __repr__(self):
        return "?" + self.name


class SeqVar:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __eq__(self, o):
        return isinstance(o, SeqVar) and o.name == self.name

    def __hash__(self):
        return hash(("%", self.name))

    def __repr__(self):
        return "%" + self.name


class SpatLit:
    __slots__ = ("d",)

    def __init__(self, d: SpatialInfo):
        self.d = d

    def __eq__(self, o):
        return isinstance(o, SpatLit) and o.d == self.d

    def __hash__(self):
        return hash(("spatlit", self.d))

    def __repr__(self):
        return "@%r" % (self.d,)


class SpatVar:
    """Binds the full spatial info (center and radius) of the matched object."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __eq__(self, o):
        return isinstance(o, SpatVar) and o.name == self.name

    def __hash__(self):
        return hash(("spatvar", self.name))

    def __repr__(self):
        return "@" + self.name


class SpatForm:
    """Spatial pattern with an explicit radius and a center part.

    The center part is one of ``("lit", coords)``, ``("var", name)``,
    ``("unplaced",)`` or, on right patterns only, ``("getpos",)``.
    """

    __slots__ = ("center", "radius")

    def __init__(self, center: tuple, radius: float):
        self.center = center
        self.radius = float(radius)

    def __eq__(self, o):
        return isinstance(o, SpatForm) and o.center == self.center and o.radius == self.radius

    def __hash__(self):
        return hash(("spatform", self.center, self.radius))

    def __repr__(self):
        return "@(%s; %s)" % (self.center, self.radius)


SpatPat = Union[SpatLit, SpatVar, SpatForm]
SPAT_UNPLACED = SpatLit(UNPLACED)


# ---------------------------------------------------------------------------
# left patterns

class PSeq:
    """Sequence pattern: literals, symbol variables and sequence variables."""

    __slots__ = ("items", "d", "_hash")

    def __init__(self, items: tuple, d: SpatPat = SPAT_UNPLACED):
        self.items = tuple(items)
        if not self.items:
            raise PatternError("empty sequence pattern")
        self.d = d
        self._hash = hash((PSeq, self.items, d))

    def is_ground(self) -> bool:
        return (all(isinstance(i, str) for i in self.items)
                and isinstance(self.d, SpatLit))

    def ground_term(self) -> Seq:
        return Seq(self.items, self.d.d)

    def __eq__(self, o):
        return isinstance(o, PSeq) and o.items == self.items and o.d == self.d

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return ".".join(map(str, self.items)) + ("" if self.d == SPAT_UNPLACED else repr(self.d))


class PBrane:
    """Brane pattern: explicit sequence patterns plus an optional brane variable."""

    __slots__ = ("elems", "var", "_hash")

    def __init__(self, elems: tuple, var: Optional[str] = None):
        self.elems = tuple(elems)
        if not all(isinstance(e, PSeq) for e in self.elems):
            raise PatternError("brane patterns hold sequence patterns only")
        self.var = var
        self._hash = hash((PBrane, self.elems, var))

    def __eq__(self, o):
        return isinstance(o, PBrane) and o.elems == self.elems and o.var == self.var

    def __hash__(self):
        return self._hash

    def __repr__(self):
        parts = [repr(e) for e in self.elems] + (["~" + self.var] if self.var else [])
        return " | ".join(parts)


class PComp:
    """Compartment pattern: brane pattern, spatial pattern, content layer pattern."""

    __slots__ = ("brane", "d", "content", "_hash")

    def __init__(self, brane: PBrane, d: SpatPat, content: "PLayer"):
        self.brane = brane
        self.d = d
        self.content = content
        self._hash = hash((PComp, brane, d, content))

    def __eq__(self, o):
        return (isinstance(o, PComp) and o.brane == self.brane
                and o.d == self.d and o.content == self.content)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return "loop(%r)[ %r ]" % (self.brane, self.content)


class PLayer:
    """Layer pattern: explicit elements plus an optional term variable.

    At a rule's root the variable must be absent (rules consume a sub-multiset
    of the layer they are applied to); inside a compartment the variable
    absorbs the untouched remainder of the content.
    """

    __slots__ = ("elems", "var", "_hash", "_order")

    def __init__(self, elems: tuple, var: Optional[str] = None):
        self.elems = tuple(elems)
        if not all(isinstance(e, (PSeq, PComp)) for e in self.elems):
            raise PatternError("layer pattern elements must be sequences or compartments")
        self.var = var
        self._hash = hash((PLayer, self.elems, var))
        # most-constrained-first matching order: ground, compartments, rest
        self._order = sorted(range(len(self.elems)),
                             key=lambda i: _elem_rank(self.elems[i]))

    def __eq__(self, o):
        return isinstance(o, PLayer) and o.elems == self.elems and o.var == self.var

    def __hash__(self):
        return self._hash

    def __repr__(self):
        parts = [repr(e) for e in self.elems] + (["$" + self.var] if self.var else [])
        return " | ".join(parts) if parts else "empty"


# ---------------------------------------------------------------------------
# right patterns

class RRef:
    """Reference to a captured term/brane variable, optionally one split half."""

    __slots__ = ("name", "split")

    def __init__(self, name: str, split: Optional[int] = None):
        if split not in (None, 0, 1):
            raise PatternError("split index must be 0 or 1")
        self.name = name
        self.split = split

    def __eq__(self, o):
        return isinstance(o, RRef) and o.name == self.name and o.split == self.split

    def __hash__(self):
        return hash((RRef, self.name, self.split))

    def __repr__(self):
        if self.split is None:
            return "$" + self.name
        return "split%d($%s)" % (self.split + 1, self.name)


class RBrane:
    __slots__ = ("elems", "refs")

    def __init__(self, elems: tuple, refs: tuple = ()):
        self.elems = tuple(elems)
        self.refs = tuple(refs)

    def __eq__(self, o):
        return isinstance(o, RBrane) and o.elems == self.elems and o.refs == self.refs

    def __hash__(self):
        return hash((RBrane, self.elems, self.refs))


class RComp:
    __slots__ = ("brane", "d", "content")

    def __init__(self, brane: RBrane, d: SpatPat, content: "RLayer"):
        self.brane = brane
        self.d = d
        self.content = content

    def __eq__(self, o):
        return (isinstance(o, RComp) and o.brane == self.brane
                and o.d == self.d and o.content == self.content)

    def __hash__(self):
        return hash((RComp, self.brane, self.d, self.content))


class RLayer:
    __slots__ = ("elems", "refs")

    def __init__(self, elems: tuple, refs: tuple = ()):
        self.elems = tuple(elems)   # PSeq (reused for output) | RComp
        self.refs = tuple(refs)     # RRef to term/brane variables

    def __eq__(self, o):
        return isinstance(o, RLayer) and o.elems == self.elems and o.refs == self.refs

    def __hash__(self):
        return hash((RLayer, self.elems, self.refs))


RightPattern = RLayer


# ---------------------------------------------------------------------------
# variable inventory

KIND_SYM = "symbol"
KIND_SEQ = "sequence"
KIND_TERM = "term"
KIND_BRANE = "brane"
KIND_SPAT = "spatial"
KIND_CENTER = "center"


def _add_var(out: dict, name: str, kind: str):
    old = out.get(name)
    if old is not None and old != kind:
        raise PatternError("variable %r used both as %s and %s" % (name, old, kind))
    out[name] = kind


def _spat_vars(d: SpatPat, out: dict):
    if isinstance(d, SpatVar):
        _add_var(out, d.name, KIND_SPAT)
    elif isinstance(d, SpatForm) and d.center[0] == "var":
        _add_var(out, d.center[1], KIND_CENTER)


def pattern_vars(p) -> dict:
    """Map of variable name -> kind for a left or right pattern tree."""
    out: dict = {}
    _collect_vars(p, out)
    return out


def _collect_vars(p, out: dict):
    if isinstance(p, PLayer):
        for e in p.elems:
            _collect_vars(e, out)
        if p.var:
            _add_var(out, p.var, KIND_TERM)
    elif isinstance(p, PComp):
        _collect_vars(p.brane, out)
        _spat_vars(p.d, out)
        _collect_vars(p.content, out)
    elif isinstance(p, PBrane):
        for e in p.elems:
            _collect_vars(e, out)
        if p.var:
            _add_var(out, p.var, KIND_BRANE)
    elif isinstance(p, PSeq):
        _spat_vars(p.d, out)
        for item in p.items:
            if isinstance(item, SymVar):
                _add_var(out, item.name, KIND_SYM)
            elif isinstance(item, SeqVar):
                _add_var(out, item.name, KIND_SEQ)
    elif isinstance(p, RLayer):
        for e in p.elems:
            _collect_vars(e, out)
        for ref in p.refs:
            _add_var(out, ref.name, KIND_TERM)
    elif isinstance(p, RComp):
        _collect_vars(p.brane, out)
        _spat_vars(p.d, out)
        _collect_vars(p.content, out)
    elif isinstance(p, RBrane):
        for e in p.elems:
            _collect_vars(e, out)
        for ref in p.refs:
            _add_var(out, ref.name, KIND_BRANE)
    else:
        raise PatternError("not a pattern node: %r" % (p,))


def rhs_getpos_radii(r) -> list:
    """Radii of all getpos placements in a right pattern (empty if none)."""
    out = []
    _walk_rhs_spat(r, out)
    return out


def _walk_rhs_spat(p, out: list):
    if isinstance(p, RLayer):
        for e in p.elems:
            _walk_rhs_spat(e, out)
    elif isinstance(p, RComp):
        if isinstance(p.d, SpatForm) and p.d.center[0] == "getpos":
            out.append(p.d.radius)
        _walk_rhs_spat(p.content, out)
    elif isinstance(p, PSeq):
        if isinstance(p.d, SpatForm) and p.d.center[0] == "getpos":
            out.append(p.d.radius)


def rhs_split_vars(r) -> set:
    """Names of variables referenced through split halves in a right pattern."""
    out: set = set()
    _walk_rhs_splits(r, out)
    return out


def _walk_rhs_splits(p, out: set):
    if isinstance(p, (RLayer, RBrane)):
        for ref in p.refs:
            if ref.split is not None:
                out.add(ref.name)
        for e in p.elems:
            _walk_rhs_splits(e, out)
    elif isinstance(p, RComp):
        _walk_rhs_splits(p.brane, out)
        _walk_rhs_splits(p.content, out)


# ---------------------------------------------------------------------------
# matching

class Inst:
    """An instantiation: spatial bindings (tau) and structural bindings (sigma)."""

    __slots__ = ("tau", "sigma")

    def __init__(self, tau=None, sigma=None):
        self.tau = {} if tau is None else tau
        self.sigma = {} if sigma is None else sigma

    def bind_tau(self, name, value) -> Optional["Inst"]:
        old = self.tau.get(name)
        if old is not None:
            return self if old == value else None
        new = dict(self.tau)
        new[name] = value
        return Inst(new, self.sigma)

    def bind_sigma(self, name, value) -> Optional["Inst"]:
        old = self.sigma.get(name)
        if old is not None:
            return self if old == value else None
        new = dict(self.sigma)
        new[name] = value
        return Inst(self.tau, new)

    def frozen(self):
        return (tuple(sorted(self.tau.items())),
                tuple(sorted((k, _freeze(v)) for k, v in self.sigma.items())))

    def __repr__(self):
        return "Inst(tau=%r, sigma=%r)" % (self.tau, self.sigma)


def _freeze(v):
    if isinstance(v, Mset):
        return ("mset", v)
    return v


class LayerMatch:
    """One way a layer pattern fits a layer, with aggregated copy choices.

    ``consumed`` is the multiset of layer elements the explicit pattern part
    takes; ``picks`` identifies the physical choice down to nested layers
    (used to collapse variable-renaming duplicates); ``ways`` counts the
    combinatorially distinct copy selections this match stands for.
    """

    __slots__ = ("consumed", "picks", "inst", "ways")

    def __init__(self, consumed: Mset, picks, inst: Inst, ways: int):
        self.consumed = consumed
        self.picks = picks
        self.inst = inst
        self.ways = ways

    def __repr__(self):
        return "LayerMatch(consumed=%r, ways=%d, inst=%r)" % (self.consumed, self.ways, self.inst)


def match_layer(p: PLayer, layer: Mset, whole: bool, inst: Optional[Inst] = None) -> list:
    """All matches of a layer pattern against a layer multiset.

    With ``whole`` the pattern must account for the entire layer: the term
    variable (if any) absorbs the complement, otherwise the explicit elements
    must cover the layer exactly.  Without ``whole`` the explicit elements
    take any sub-multiset (rule application at a site).
    """
    inst = inst or Inst()
    results: list = []
    elems = [p.elems[i] for i in p._order]
    _assign(elems, 0, layer, {}, [], inst, 1, p, whole, results)
    return results


def _elem_rank(e) -> int:
    if isinstance(e, PSeq) and e.is_ground():
        return 0
    if isinstance(e, PComp):
        return 1
    return 2


def _assign(elems, i, layer: Mset, used: dict, picks: list, inst: Inst,
            ways: int, p: PLayer, whole: bool, results: list):
    if i == len(elems):
        consumed = Mset(used)
        base = 1
        for e, n in consumed.items():
            base *= _choose(layer.count(e), n)
        final = inst
        if whole:
            rest = layer.subtract(consumed)
            if p.var is not None:
                final = final.bind_sigma(p.var, rest)
                if final is None:
                    return
            elif not rest.is_empty():
                return
        results.append(LayerMatch(consumed, Mset([(x, 1) for x in picks]), final, ways * base))
        return
    pe = elems[i]
    if isinstance(pe, PSeq) and pe.is_ground():
        t = pe.ground_term()
        if layer.count(t) > used.get(t, 0):
            used[t] = used.get(t, 0) + 1
            picks.append(("s", t))
            _assign(elems, i + 1, layer, used, picks, inst, ways, p, whole, results)
            picks.pop()
            used[t] -= 1
            if not used[t]:
                del used[t]
        return
    for cand in layer:
        if layer.count(cand) <= used.get(cand, 0):
            continue
        for inst2, inner_ways, pick in _match_elem(pe, cand, inst):
            used[cand] = used.get(cand, 0) + 1
            picks.append(pick)
            _assign(elems, i + 1, layer, used, picks, inst2,
                    ways * inner_ways, p, whole, results)
            picks.pop()
            used[cand] -= 1
            if not used[cand]:
                del used[cand]


def _match_elem(pe, e, inst: Inst) -> Iterator[tuple]:
    """Yield (inst, inner_ways, pick) for a pattern element vs a layer element."""
    if isinstance(pe, PSeq):
        if not isinstance(e, Seq):
            return
        inst2 = _match_spat(pe.d, e.d, inst)
        if inst2 is None:
            return
        for inst3 in _match_symbols(pe.items, e.symbols, inst2):
            yield inst3, 1, ("s", e)
    elif isinstance(pe, PComp):
        if not isinstance(e, Comp):
            return
        inst2 = _match_spat(pe.d, e.d, inst)
        if inst2 is None:
            return
        for bm in _match_brane(pe.brane, e.brane, inst2):
            for cm in match_layer(pe.content, e.content.children, True, bm.inst):
                yield (cm.inst, bm.ways * cm.ways,
                       ("c", e, bm.picks, cm.picks))
    else:
        raise PatternError("unexpected pattern element %r" % (pe,))


def _match_brane(pb: PBrane, brane: Mset, inst: Inst) -> list:
    pseudo = PLayer(pb.elems, pb.var)
    return match_layer(pseudo, brane, True, inst)


def _match_spat(dp: SpatPat, d: SpatialInfo, inst: Inst) -> Optional[Inst]:
    if isinstance(dp, SpatLit):
        return inst if dp.d == d else None
    if isinstance(dp, SpatVar):
        return inst.bind_tau(dp.name, d)
    if isinstance(dp, SpatForm):
        if d.radius != dp.radius:
            return None
        kind = dp.center[0]
        if kind == "lit":
            return inst if d.center == dp.center[1] else None
        if kind == "unplaced":
            return inst if d.center is None else None
        if kind == "var":
            if d.center is None:
                return None
            return inst.bind_tau(dp.center[1], d.center)
        return None  # getpos never matches on the left
    raise PatternError("bad spatial pattern %r" % (dp,))


def _match_symbols(items: tuple, symbols: tuple, inst: Inst) -> Iterator[Inst]:
    """Backtracking match of sequence-pattern items against a symbol tuple."""
    if not items:
        if not symbols:
            yield inst
        return
    head, rest = items[0], items[1:]
    if isinstance(head, str):
        if symbols and symbols[0] == head:
            yield from _match_symbols(rest, symbols[1:], inst)
        return
    if isinstance(head, SymVar):
        if not symbols:
            return
        bound = inst.sigma.get(head.name)
        if bound is not None:
            if symbols[0] == bound:
                yield from _match_symbols(rest, symbols[1:], inst)
            return
        inst2 = inst.bind_sigma(head.name, symbols[0])
        yield from _match_symbols(rest, symbols[1:], inst2)
        return
    if isinstance(head, SeqVar):
        bound = inst.sigma.get(head.name)
        if bound is not None:
            k = len(bound)
            if symbols[:k] == bound:
                yield from _match_symbols(rest, symbols[k:], inst)
            return
        for k in range(len(symbols) + 1):
            inst2 = inst.bind_sigma(head.name, symbols[:k])
            yield from _match_symbols(rest, symbols[k:], inst2)
        return
    raise PatternError("bad sequence item %r" % (head,))


# ---------------------------------------------------------------------------
# instantiation

class ArrangeFailure(Exception):
    """Raised by a placer when no grid position can be found."""


def instantiate(r: RLayer, inst: Inst, placer=None, splits=None) -> Par:
    """Ground a right pattern under an instantiation.

    ``placer(radius)`` supplies spatial info for getpos placements (when
    absent a placeholder unplaced-with-radius marker is used, which keeps the
    result deterministic for bookkeeping before the grid is consulted).
    ``splits`` maps variable names to (half0, half1) multisets for split
    references; unsplit placeholders take (full, empty).
    """
    items: list = []
    _inst_layer(r, inst, placer, splits, items)
    return Par(Mset(items))


def _inst_layer(r: RLayer, inst: Inst, placer, splits, out: list):
    for e in r.elems:
        if isinstance(e, PSeq):
            s = _inst_seq(e, inst, placer)
            if s is not None:
                out.append((s, 1))
        elif isinstance(e, RComp):
            out.append((_inst_comp(e, inst, placer, splits), 1))
        else:
            raise PatternError("bad right-pattern element %r" % (e,))
    for ref in r.refs:
        captured = _lookup_capture(ref, inst, splits)
        for item, n in captured.items():
            out.append((item, n))


def _lookup_capture(ref: RRef, inst: Inst, splits) -> Mset:
    if ref.name not in inst.sigma:
        raise PatternError("unbound variable %r in right pattern" % (ref.name,))
    whole = inst.sigma[ref.name]
    if not isinstance(whole, Mset):
        raise PatternError("variable %r is not a multiset capture" % (ref.name,))
    if ref.split is None:
        return whole
    if splits is not None and ref.name in splits:
        return splits[ref.name][ref.split]
    return whole if ref.split == 0 else EMPTY_MSET


def _inst_comp(e: RComp, inst: Inst, placer, splits) -> Comp:
    brane_items: list = []
    for ps in e.brane.elems:
        s = _inst_seq(ps, inst, placer)
        if s is not None:
            brane_items.append((s, 1))
    for ref in e.brane.refs:
        for item, n in _lookup_capture(ref, inst, splits).items():
            brane_items.append((item, n))
    content_items: list = []
    _inst_layer(e.content, inst, placer, splits, content_items)
    return Comp(Mset(brane_items), _inst_spat(e.d, inst, placer), Par(Mset(content_items)))


def _inst_seq(e: PSeq, inst: Inst, placer) -> Optional[Seq]:
    symbols: list = []
    for item in e.items:
        if isinstance(item, str):
            symbols.append(item)
        elif isinstance(item, SymVar):
            if item.name not in inst.sigma:
                raise PatternError("unbound symbol variable %r" % (item.name,))
            symbols.append(inst.sigma[item.name])
        elif isinstance(item, SeqVar):
            if item.name not in inst.sigma:
                raise PatternError("unbound sequence variable %r" % (item.name,))
            symbols.extend(inst.sigma[item.name])
        else:
            raise PatternError("bad sequence item %r" % (item,))
    if not symbols:
        return None
    return Seq(symbols, _inst_spat(e.d, inst, placer))


def _inst_spat(dp: SpatPat, inst: Inst, placer) -> SpatialInfo:
    if isinstance(dp, SpatLit):
        return dp.d
    if isinstance(dp, SpatVar):
        if dp.name not in inst.tau:
            raise PatternError("unbound spatial variable %r" % (dp.name,))
        return inst.tau[dp.name]
    if isinstance(dp, SpatForm):
        kind = dp.center[0]
        if kind == "lit":
            return SpatialInfo(dp.center[1], dp.radius)
        if kind == "unplaced":
            return SpatialInfo(None, dp.radius)
        if kind == "var":
            if dp.center[1] not in inst.tau:
                raise PatternError("unbound center variable %r" % (dp.center[1],))
            return SpatialInfo(inst.tau[dp.center[1]], dp.radius)
        if kind == "getpos":
            if placer is None:
                return SpatialInfo(None, dp.radius)  # placeholder
            return placer(dp.radius)
    raise PatternError("bad spatial pattern %r" % (dp,))


def pattern_to_rhs(p: PLayer) -> RLayer:
    """Re-interpret a left pattern as a right pattern (round-trip helper)."""
    elems: list = []
    refs: list = []
    for e in p.elems:
        if isinstance(e, PSeq):
            elems.append(e)
        else:
            brefs = (RRef(e.brane.var),) if e.brane.var else ()
            elems.append(RComp(RBrane(e.brane.elems, brefs), e.d,
                               pattern_to_rhs(e.content)))
    if p.var:
        refs.append(RRef(p.var))
    return RLayer(tuple(elems), tuple(refs))


# ---------------------------------------------------------------------------
# combination-count functions

def comb(p: PLayer, inst: Inst) -> int:
    """Number of distinct reactant combinations one instantiation stands for.

    Leaf sequence patterns contribute 1.  A layer pattern with an absorbing
    variable contributes, for each distinct instantiated explicit element,
    the binomial coefficient C(count in the whole layer, count explicit);
    parallel composition multiplies.
    """
    return _comb_layer(p, inst)


def _comb_layer(p: PLayer, inst: Inst) -> int:
    out = 1
    for e in p.elems:
        out *= _comb_elem(e, inst)
    if p.var is not None:
        out *= _absorb_factor([x for x in p.elems], p.var, inst)
    return out


def _comb_elem(e, inst: Inst) -> int:
    if isinstance(e, PSeq):
        return 1
    if isinstance(e, PComp):
        out = _comb_layer(e.content, inst)
        brane = PLayer(e.brane.elems, e.brane.var)
        out *= _comb_layer(brane, inst)
        return out
    raise PatternError("bad pattern element %r" % (e,))


def _absorb_factor(elems: list, var: str, inst: Inst) -> int:
    explicit_items: list = []
    for e in elems:
        explicit_items.append((_instantiate_left_elem(e, inst), 1))
    explicit = Mset(explicit_items)
    captured = inst.sigma.get(var)
    if captured is None:
        raise PatternError("variable %r missing from instantiation" % (var,))
    whole = explicit.union(captured)
    out = 1
    for t, n in explicit.items():
        out *= _choose(whole.count(t), n)
    return out


def _instantiate_left_elem(e, inst: Inst):
    """Ground one explicit left-pattern element under a (total) instantiation."""
    rhs = pattern_to_rhs(PLayer((e,)))
    layer = instantiate(rhs, inst)
    children = list(layer.children.expand())
    if len(children) != 1:
        raise PatternError("left element did not instantiate to one element")
    return children[0]


def binom(t1, t2, t3) -> Fraction:
    """Correction factor relating combination counts across a parallel context.

    For every distinct top element of t1 the factor multiplies
    (count_in_t2 + i) / (count_in_t2 - count_in_t1 + i) for i up to the
    element's count in t3; the empty inner product is 1.
    """
    m1 = top_multiset(t1)
    m2 = top_multiset(t2)
    m3 = top_multiset(t3)
    out = Fraction(1)
    for t, n1 in m1.items():
        n2 = m2.count(t)
        n3 = m3.count(t)
        for i in range(1, n3 + 1):
            den = n2 - n1 + i
            if den == 0:
                raise ZeroDivisionError(
                    "binom denominator vanished for element %r" % (t,))
            out *= Fraction(n2 + i, den)
    return out
