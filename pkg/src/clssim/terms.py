"""Term algebra: sequences, membranes (branes), compartments and parallel layers.

The state of a simulated system is an immutable tree.  A *layer* is a
multiset of elements combined with the parallel operator ``|``; an element
is either a sequence of symbols (a molecule, gene strand, stage token, ...)
or a compartment: a flat membrane (brane) of sequences wrapping an inner
layer.  Sequences and compartments optionally carry spatial information
(a sphere center and radius); objects without quantitative placement are
"unplaced" and take no part in collision handling.

Terms are values: hashable, comparable, and canonically ordered, so layers
can be represented as count multisets and equality is multiset equality.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Optional, Tuple, Union


_SORT_KEY_CACHE: dict = {}


def sort_key(x):
    """Total order over term nodes (and brane elements) for canonical layout."""
    if isinstance(x, Seq):
        return (0, x.symbols, x.d.key())
    if isinstance(x, Comp):
        got = _SORT_KEY_CACHE.get(x)
        if got is None:
            got = (1, tuple(sorted((sort_key(e), n) for e, n in x.brane.items())),
                   x.d.key(), sort_key(x.content))
            _SORT_KEY_CACHE[x] = got
        return got
    if isinstance(x, Par):
        got = _SORT_KEY_CACHE.get(x)
        if got is None:
            got = (2, tuple(sorted((sort_key(e), n) for e, n in x.children.items())))
            _SORT_KEY_CACHE[x] = got
        return got
    # plain tuples/strings used as ad-hoc keys in a few containers
    return (3, repr(x))


class Mset:
    """Immutable multiset with canonically ordered iteration.

    Items must be hashable and orderable via ``sort_key(item)``.  Iteration
    order is fixed at construction (sorted by key), which keeps everything
    downstream (matching, serialization, RNG consumption) deterministic.
    """

    __slots__ = ("_d", "_hash", "_total")

    def __init__(self, items: Union[dict, Iterable[tuple]] = ()):
        d = {}
        pairs = items.items() if isinstance(items, dict) else items
        for item, n in pairs:
            if n < 0:
                raise ValueError("negative multiplicity for %r" % (item,))
            if n:
                d[item] = d.get(item, 0) + n
        self._d = {k: d[k] for k in sorted(d, key=sort_key)}
        self._total = sum(self._d.values())
        self._hash = hash(frozenset(self._d.items()))

    @classmethod
    def of(cls, *elems) -> "Mset":
        return cls([(e, 1) for e in elems])

    def count(self, item) -> int:
        return self._d.get(item, 0)

    def items(self):
        return self._d.items()

    def keys(self):
        return self._d.keys()

    def distinct(self) -> int:
        return len(self._d)

    def total(self) -> int:
        return self._total

    def is_empty(self) -> bool:
        return not self._d

    def add(self, item, n: int = 1) -> "Mset":
        return Mset(list(self._d.items()) + [(item, n)])

    def remove(self, item, n: int = 1) -> "Mset":
        have = self._d.get(item, 0)
        if have < n:
            raise KeyError("cannot remove %d of %r (have %d)" % (n, item, have))
        out = dict(self._d)
        if have == n:
            del out[item]
        else:
            out[item] = have - n
        return Mset(out)

    def union(self, other: "Mset") -> "Mset":
        return Mset(list(self._d.items()) + list(other._d.items()))

    def subtract(self, other: "Mset") -> "Mset":
        out = dict(self._d)
        for item, n in other.items():
            have = out.get(item, 0)
            if have < n:
                raise KeyError("cannot subtract %d of %r (have %d)" % (n, item, have))
            if have == n:
                del out[item]
            else:
                out[item] = have - n
        return Mset(out)

    def contains(self, other: "Mset") -> bool:
        return all(self._d.get(item, 0) >= n for item, n in other.items())

    def expand(self) -> Iterator:
        """Yield every copy individually (item repeated count times)."""
        for item, n in self._d.items():
            for _ in range(n):
                yield item

    def __contains__(self, item) -> bool:
        return item in self._d

    def __iter__(self):
        return iter(self._d)

    def __len__(self):
        return len(self._d)

    def __eq__(self, other):
        return isinstance(other, Mset) and self._d == other._d

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return "Mset(%r)" % (self._d,)


EMPTY_MSET = Mset()


class SpatialInfo:
    """Placement of an object: sphere center (model length units) or unplaced.

    Unplaced objects carry radius 0 and are exempt from collision handling;
    placed objects must have a positive radius.  Positions of objects inside
    a compartment are relative to that compartment's center.
    """

    __slots__ = ("center", "radius", "_hash")

    def __init__(self, center: Optional[Tuple[float, ...]], radius: float):
        if center is None:
            if radius < 0:
                raise ValueError("radius must be non-negative")
        else:
            center = tuple(float(c) for c in center)
            if radius <= 0:
                raise ValueError("placed objects need a positive radius")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(radius))
        object.__setattr__(self, "_hash", hash((center, float(radius))))

    def __setattr__(self, *a):
        raise AttributeError("SpatialInfo is immutable")

    def placed(self) -> bool:
        return self.center is not None

    def with_center(self, center: Tuple[float, ...]) -> "SpatialInfo":
        return SpatialInfo(center, self.radius)

    def key(self):
        if self.center is None:
            return (0, (), self.radius)
        return (1, self.center, self.radius)

    def __eq__(self, other):
        return (isinstance(other, SpatialInfo)
                and self.center == other.center and self.radius == other.radius)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        if self.center is None and self.radius == 0.0:
            return "UNPLACED"
        if self.center is None:
            return "SpatialInfo(None, %r)" % self.radius
        return "SpatialInfo(%r, %r)" % (self.center, self.radius)


UNPLACED = SpatialInfo(None, 0.0)


class Seq:
    """A sequence of symbols with spatial info; a single symbol is a 1-sequence."""

    __slots__ = ("symbols", "d", "_hash")

    def __init__(self, symbols: Iterable[str], d: SpatialInfo = UNPLACED):
        symbols = tuple(symbols)
        if not symbols:
            raise ValueError("empty sequence is not a layer element")
        if not all(isinstance(s, str) and s for s in symbols):
            raise ValueError("symbols must be non-empty strings")
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "_hash", hash((Seq, symbols, d)))

    def __setattr__(self, *a):
        raise AttributeError("Seq is immutable")

    def __eq__(self, other):
        return isinstance(other, Seq) and self.symbols == other.symbols and self.d == other.d

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return render(self)


class Comp:
    """A compartment: membrane multiset (brane) around an inner layer."""

    __slots__ = ("brane", "d", "content", "_hash")

    def __init__(self, brane: Mset, d: SpatialInfo, content: "Par"):
        if any(not isinstance(e, Seq) for e in brane):
            raise ValueError("branes hold sequences only")
        if not isinstance(content, Par):
            raise ValueError("compartment content must be a layer (Par)")
        object.__setattr__(self, "brane", brane)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "content", content)
        object.__setattr__(self, "_hash", hash((Comp, brane, d, content)))

    def __setattr__(self, *a):
        raise AttributeError("Comp is immutable")

    def __eq__(self, other):
        return (isinstance(other, Comp) and self.brane == other.brane
                and self.d == other.d and self.content == other.content)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return render(self)


class Par:
    """A layer: the multiset of elements joined by the parallel operator."""

    __slots__ = ("children", "_hash")

    def __init__(self, children: Mset = EMPTY_MSET):
        if any(isinstance(e, Par) for e in children):
            raise ValueError("layers must be flattened (no Par inside Par)")
        object.__setattr__(self, "children", children)
        object.__setattr__(self, "_hash", hash((Par, children)))

    def __setattr__(self, *a):
        raise AttributeError("Par is immutable")

    def __eq__(self, other):
        return isinstance(other, Par) and self.children == other.children

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return render(self)


Term = Union[Seq, Comp, Par]

EMPTY = Par(EMPTY_MSET)


def mset(*elems) -> Mset:
    return Mset.of(*elems)


def sym(name: str, d: SpatialInfo = UNPLACED) -> Seq:
    return Seq((name,), d)


def seq(*symbols: str, d: SpatialInfo = UNPLACED) -> Seq:
    return Seq(symbols, d)


def comp(brane, d: SpatialInfo = UNPLACED, content: Term = EMPTY) -> Comp:
    """Build a compartment from loose pieces (normalizes brane and content)."""
    if isinstance(brane, Seq):
        brane = [brane]
    if isinstance(brane, str):
        brane = [sym(brane)]
    return Comp(Mset.of(*brane), d, normalize(content))


def par(*elems: Term) -> Par:
    """Parallel-compose elements into a normalized layer."""
    out = []
    for e in elems:
        if isinstance(e, Par):
            out.extend(e.children.expand())
        elif isinstance(e, (Seq, Comp)):
            out.append(e)
        else:
            raise TypeError("not a term: %r" % (e,))
    return Par(Mset([(e, 1) for e in out]))


def normalize(t: Term) -> Par:
    """Canonical form: every term becomes a flattened layer.

    Parallel composition is associative-commutative with the empty layer as
    unit, so nested layers are flattened into one multiset and empty pieces
    vanish.  Compartment branes and contents are normalized recursively.
    Idempotent; preserves the multiset of components at every layer.
    """
    if isinstance(t, Par):
        items = []
        for child, n in t.children.items():
            norm = _normalize_elem(child)
            if norm is not None:
                items.append((norm, n))
        return Par(Mset(items))
    norm = _normalize_elem(t)
    if norm is None:
        return EMPTY
    return Par(Mset.of(norm))


def _normalize_elem(e: Term) -> Optional[Union[Seq, Comp]]:
    if isinstance(e, Seq):
        return e
    if isinstance(e, Comp):
        return Comp(e.brane, e.d, normalize(e.content))
    if isinstance(e, Par):
        raise ValueError("nested Par passed as element; use par(...) to build layers")
    raise TypeError("not a term: %r" % (e,))


def top_multiset(t: Term) -> Mset:
    """The multiset of top-layer components of a normalized term."""
    return normalize(t).children


def count_top(t1: Term, t2: Term) -> int:
    """How many times t1 occurs at the top layer of t2.

    Compartments are compared whole (contents included).  For a multi-element
    t1 the result is the number of disjoint copies of the whole multiset.
    """
    layer = top_multiset(t2)
    block = top_multiset(t1)
    if block.is_empty():
        raise ValueError("count_top of the empty term is undefined")
    if block.total() == 1:
        elem = next(iter(block))
        return layer.count(elem)
    return min(layer.count(e) // n for e, n in block.items())


def walk_compartments(t: Term, path=()) -> Iterator[tuple]:
    """Yield (path, compartment) for every compartment in the tree.

    The path lists the ancestor compartments from the outside in; identical
    sibling compartments are yielded once (they are indistinguishable).
    """
    layer = normalize(t) if not isinstance(t, Par) else t
    for child in layer.children:
        if isinstance(child, Comp):
            here = path + (child,)
            yield here, child
            yield from walk_compartments(child.content, here)


def render(t, inner: bool = False) -> str:
    """Compact text form of a term (same notation the model files use)."""
    if isinstance(t, Seq):
        body = ".".join(t.symbols)
        if t.d != UNPLACED:
            body += " @" + _render_spat(t.d)
        return body
    if isinstance(t, Comp):
        brane = " | ".join(_render_counted(e, n) for e, n in t.brane.items())
        if t.d != UNPLACED:
            brane += " @" + _render_spat(t.d)
        return "loop(%s)[ %s ]" % (brane, render(t.content, inner=True))
    if isinstance(t, Par):
        if t.children.is_empty():
            return "empty"
        return " | ".join(_render_counted(e, n) for e, n in t.children.items())
    raise TypeError("not a term: %r" % (t,))


def _render_counted(e, n: int) -> str:
    body = render(e)
    if n == 1:
        return body
    if isinstance(e, Comp) or (isinstance(e, Seq) and e.d != UNPLACED):
        # counts bind tighter than @; keep such elements unambiguous
        return " | ".join([body] * n)
    return "%s*%d" % (body, n)


def _render_spat(d: SpatialInfo) -> str:
    if d.center is None:
        return "(.; %s)" % _render_num(d.radius)
    coords = ",".join(_render_num(c) for c in d.center)
    return "(%s; %s)" % (coords, _render_num(d.radius))


def _render_num(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)
