"""Brute-force reactant-combination counting by exhaustive enumeration.

This is the independent check for the aggregated combination counts computed
by :mod:`clssim.rewrite`: every copy of every element gets a label, all
sub-multiset choices are enumerated explicitly, and a combination is a
distinct (site, set of consumed copy labels, rewritten term) triple.  No
binomial shortcuts anywhere, so agreement with the counting path is
meaningful evidence.
"""

from __future__ import annotations

from itertools import permutations
from typing import Iterator, Optional

from .terms import Comp, Mset, Par, Seq, normalize
from .patterns import Inst, PComp, PLayer, PSeq, instantiate
from .rewrite import RewriteRule, replace_at


class _Labeled:
    """A layer with one label per element copy."""

    __slots__ = ("path", "kind", "elems")

    def __init__(self, path: tuple, kind: str, layer: Mset):
        self.path = path
        self.kind = kind
        self.elems = [(path + (kind, i), e) for i, e in enumerate(layer.expand())]


def _iter_labeled_sites(layer: Mset, path: tuple) -> Iterator[_Labeled]:
    yield _Labeled(path, "content", layer)
    i = 0
    for elem in layer.expand():
        if isinstance(elem, Comp):
            sub = path + ("content", i, elem)
            yield _Labeled(sub, "brane", elem.brane)
            yield from _iter_labeled_sites(elem.content.children, sub)
        i += 1


def brute_force_applications(rule: RewriteRule, term: Par) -> set:
    """All distinct (site, consumed-copy-labels, result term) applications."""
    term = normalize(term)
    found: set = set()
    for site in _iter_labeled_sites(term.children, ()):
        if site.kind == "brane" and not rule.brane_capable:
            continue
        for labels, inst in _match_subsets(list(rule.lhs.elems), site.elems, Inst()):
            if not rule.precondition(inst.tau):
                continue
            target = _rewrite_site(term, site, labels, rule, inst)
            found.add((site.path, site.kind, frozenset(labels), target))
    return found


def brute_force_count(rule: RewriteRule, term: Par) -> int:
    return len(brute_force_applications(rule, term))


def brute_force_targets(rule: RewriteRule, term: Par) -> dict:
    """Result term -> number of distinct combinations producing it."""
    out: dict = {}
    for _path, _kind, _labels, target in brute_force_applications(rule, term):
        out[target] = out.get(target, 0) + 1
    return out


def _rewrite_site(term: Par, site: _Labeled, labels: frozenset,
                  rule: RewriteRule, inst: Inst) -> Par:
    consumed_here = Mset([(e, 1) for lab, e in site.elems if lab in labels])
    produced = instantiate(rule.rhs, inst)
    layer = Mset([(e, 1) for _lab, e in site.elems])
    new_layer = layer.subtract(consumed_here).union(produced.children)
    path = tuple(x for x in site.path if isinstance(x, Comp))
    return replace_at(term, path, site.kind, new_layer)


def _match_subsets(pelems: list, labeled: list, inst: Inst) -> Iterator[tuple]:
    """Yield (consumed labels incl. nested, inst) for every way the explicit
    pattern elements can take distinct element copies of this layer."""
    k = len(pelems)
    if k == 0:
        yield frozenset(), inst
        return
    for combo in _ordered_subsets(labeled, k):
        dedup: set = set()
        for perm in permutations(combo):
            for labels, inst2 in _match_listed(pelems, list(perm), inst):
                key = (labels, inst2.frozen())
                if key in dedup:
                    continue
                dedup.add(key)
                yield labels, inst2


def _ordered_subsets(labeled: list, k: int) -> Iterator[tuple]:
    def rec(start: int, picked: tuple):
        if len(picked) == k:
            yield picked
            return
        for i in range(start, len(labeled)):
            yield from rec(i + 1, picked + (labeled[i],))
    yield from rec(0, ())


def _match_listed(pelems: list, targets: list, inst: Inst) -> Iterator[tuple]:
    if not pelems:
        yield frozenset(), inst
        return
    pe, (label, elem) = pelems[0], targets[0]
    for inner_labels, inst2 in _brute_elem(pe, label, elem, inst):
        for rest_labels, inst3 in _match_listed(pelems[1:], targets[1:], inst2):
            yield frozenset({label}) | inner_labels | rest_labels, inst3


def _brute_elem(pe, label, elem, inst: Inst) -> Iterator[tuple]:
    if isinstance(pe, PSeq):
        if not isinstance(elem, Seq):
            return
        from .patterns import _match_spat, _match_symbols
        inst2 = _match_spat(pe.d, elem.d, inst)
        if inst2 is None:
            return
        for inst3 in _match_symbols(pe.items, elem.symbols, inst2):
            yield frozenset(), inst3
    elif isinstance(pe, PComp):
        if not isinstance(elem, Comp):
            return
        from .patterns import _match_spat
        inst2 = _match_spat(pe.d, elem.d, inst)
        if inst2 is None:
            return
        brane_labeled = [((label, "b", i), e)
                         for i, e in enumerate(elem.brane.expand())]
        content_labeled = [((label, "c", i), e)
                           for i, e in enumerate(elem.content.children.expand())]
        for blabels, inst3 in _whole_layer(pe.brane.elems, pe.brane.var,
                                           brane_labeled, inst2, is_brane=True):
            for clabels, inst4 in _whole_layer(pe.content.elems, pe.content.var,
                                               content_labeled, inst3, is_brane=False):
                yield blabels | clabels, inst4


def _whole_layer(pelems, var: Optional[str], labeled: list, inst: Inst,
                 is_brane: bool) -> Iterator[tuple]:
    """Match explicit elements inside a compartment; the variable (if any)
    absorbs the complement, otherwise the explicit part must cover everything."""
    k = len(pelems)
    if var is None and k != len(labeled):
        return
    seen: set = set()
    for combo in _ordered_subsets(labeled, k):
        for perm in permutations(combo):
            for labels, inst2 in _match_listed(list(pelems), list(perm), inst):
                all_labels = labels | frozenset(lab for lab, _ in combo)
                inst3 = inst2
                if var is not None:
                    rest = Mset([(e, 1) for lab, e in labeled
                                 if lab not in {l for l, _ in combo}])
                    inst3 = inst2.bind_sigma(var, rest)
                    if inst3 is None:
                        continue
                key = (all_labels, inst3.frozen())
                if key in seen:
                    continue
                seen.add(key)
                yield all_labels, inst3
