"""Rewrite rules, their applications to terms, and the reference step semantics.

A rule applies at a *site*: the root layer, a compartment's content layer,
or (for flat sequence rules) a membrane layer.  The explicit left pattern
consumes a sub-multiset of the site layer; matches that only differ in which
indistinguishable copies they take are aggregated into one application whose
multiplicity counts those choices, including a factor for identical sibling
compartments along the path.

``step_distribution`` implements the exact one-step probabilistic semantics
used as a small-instance validation oracle for the simulation engine; the
engine itself lives in :mod:`clssim.engine`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Optional

from .terms import Comp, Mset, Par, Seq, normalize
from .patterns import (ArrangeFailure, Inst, PBrane, PComp, PLayer, PSeq, RComp,
                       RLayer, SpatForm, instantiate, match_layer, pattern_vars,
                       PatternError, rhs_getpos_radii, rhs_split_vars)

INF = math.inf

LEVEL_VISUAL = "visual"
LEVEL_MOLECULAR = "molecular"
LEVEL_VERTICAL = "vertical"
LEVELS = (LEVEL_VISUAL, LEVEL_MOLECULAR, LEVEL_VERTICAL)


class RuleError(ValueError):
    """Malformed rewrite rule."""


class ModelError(ValueError):
    """Malformed model (bad rates, unbound variables, inconsistent geometry)."""


def _always_true(tau) -> bool:
    return True


PRECONDITIONS: dict = {"true": _always_true}


def register_precondition(name: str, fn: Callable) -> None:
    """Register a named predicate over spatial bindings, usable from model files."""
    PRECONDITIONS[name] = fn


class RewriteRule:
    """A rewrite rule: precondition, left pattern, right pattern, rate, level.

    The rate is per minute; vertical rules (and only vertical rules) carry an
    infinite rate and are executed instantaneously by the engine.  Every
    variable of the right pattern must be bound by the left pattern.
    """

    def __init__(self, rule_id: str, lhs: PLayer, rhs: RLayer, rate,
                 level: str = LEVEL_MOLECULAR, precondition: str = "true",
                 rate_expr: Optional[str] = None, section: Optional[str] = None):
        self.id = rule_id
        self.lhs = lhs
        self.rhs = rhs
        self.rate = float(rate)
        self.rate_expr = rate_expr
        self.level = level
        self.precondition_name = precondition
        self.section = section or level
        try:
            self.precondition = PRECONDITIONS[precondition]
        except KeyError:
            raise RuleError("rule %s: unknown precondition %r" % (rule_id, precondition))
        self._validate()
        self.split_vars = rhs_split_vars(rhs)
        self.getpos_radii = rhs_getpos_radii(rhs)
        self.brane_capable = self._brane_capable()

    def _validate(self):
        if self.level not in LEVELS:
            raise RuleError("rule %s: bad level %r" % (self.id, self.level))
        if self.lhs.var is not None:
            raise RuleError("rule %s: a rule's left pattern cannot have a "
                            "top-level term variable" % self.id)
        if math.isinf(self.rate):
            if self.level != LEVEL_VERTICAL:
                raise RuleError("rule %s: only vertical rules may be "
                                "instantaneous" % self.id)
        elif not (self.rate > 0):
            raise RuleError("rule %s: rate must be positive" % self.id)
        lv = pattern_vars(self.lhs)
        rv = pattern_vars(self.rhs)
        for name, kind in rv.items():
            if name not in lv:
                raise RuleError(
                    "rule %s: right-hand side uses variable %r that is not "
                    "bound on the left-hand side" % (self.id, name))
            if lv[name] != kind:
                raise RuleError(
                    "rule %s: variable %r is %s on the left but %s on the "
                    "right" % (self.id, name, lv[name], kind))
        self.variables = lv
        # split halves must be used exactly once each, with no whole reference
        counts: dict = {}
        _count_refs(self.rhs, counts)
        for name, (whole, half0, half1) in counts.items():
            if half0 or half1:
                if whole or half0 != 1 or half1 != 1:
                    raise RuleError(
                        "rule %s: split variable %r must be referenced exactly "
                        "once per half and never whole" % (self.id, name))

    def _brane_capable(self) -> bool:
        if not all(isinstance(e, PSeq) for e in self.lhs.elems):
            return False
        if self.rhs.refs:
            return False
        return all(isinstance(e, PSeq) for e in self.rhs.elems)

    def is_vertical(self) -> bool:
        return self.level == LEVEL_VERTICAL

    def __eq__(self, other):
        return (isinstance(other, RewriteRule)
                and self.id == other.id and self.lhs == other.lhs
                and self.rhs == other.rhs and self.rate == other.rate
                and self.level == other.level
                and self.precondition_name == other.precondition_name)

    def __hash__(self):
        return hash((self.id, self.lhs, self.rhs, self.rate, self.level))

    def __repr__(self):
        return "RewriteRule(%s)" % self.id


def _count_refs(node, counts: dict):
    from .patterns import RBrane
    if isinstance(node, (RLayer, RBrane)):
        for ref in node.refs:
            whole, h0, h1 = counts.get(ref.name, (0, 0, 0))
            if ref.split is None:
                whole += 1
            elif ref.split == 0:
                h0 += 1
            else:
                h1 += 1
            counts[ref.name] = (whole, h0, h1)
        for e in node.elems:
            _count_refs(e, counts)
    elif isinstance(node, RComp):
        _count_refs(node.brane, counts)
        _count_refs(node.content, counts)


# ---------------------------------------------------------------------------
# sites

class Site:
    """A rewriting site: path of compartments from the root, and a layer kind.

    ``factor`` counts identical sibling copies of the compartments along the
    path; applications found here stand for that many concrete locations.
    """

    __slots__ = ("path", "kind", "layer", "factor")

    def __init__(self, path: tuple, kind: str, layer: Mset, factor: int):
        self.path = path
        self.kind = kind          # "content" or "brane"; root is ((), "content")
        self.layer = layer
        self.factor = factor

    def key(self):
        return (self.path, self.kind)

    def __repr__(self):
        return "Site(depth=%d, kind=%s)" % (len(self.path), self.kind)


def iter_sites(term: Par, descend: Optional[Callable] = None) -> Iterator[Site]:
    """Yield every rewriting site of a normalized term, outside in.

    ``descend(comp)`` may veto walking into a compartment (used to restrict
    matching to the environment); the compartment itself still appears as an
    element of its parent layer.
    """
    yield from _iter_sites(term.children, (), 1, descend)


def _iter_sites(layer: Mset, path: tuple, factor: int, descend) -> Iterator[Site]:
    yield Site(path, "content", layer, factor)
    for elem, n in layer.items():
        if isinstance(elem, Comp) and (descend is None or descend(elem)):
            sub = path + (elem,)
            yield Site(sub, "brane", elem.brane, factor * n)
            yield from _iter_sites(elem.content.children, sub, factor * n, descend)


def replace_at(term: Par, path: tuple, kind: str, new_layer: Mset) -> Par:
    """Rebuild a term with the layer at (path, kind) replaced."""
    if not path:
        if kind != "content":
            raise ValueError("the root has no brane layer")
        return normalize(Par(new_layer))
    head, rest = path[0], path[1:]
    if not rest and kind == "brane":
        new_head = Comp(new_layer, head.d, head.content)
    else:
        inner = replace_at(head.content, rest, kind, new_layer)
        new_head = Comp(head.brane, head.d, inner)
    return Par(term.children.remove(head).add(normalize_comp(new_head)))


def normalize_comp(c: Comp) -> Comp:
    return Comp(c.brane, c.d, normalize(c.content))


# ---------------------------------------------------------------------------
# applications

class Application:
    """One aggregated way to apply a rule: site, consumed reactants, bindings.

    ``ways`` is the number of distinct reactant combinations this application
    stands for (choices among indistinguishable copies, times identical
    compartment copies along the site path).
    """

    __slots__ = ("rule", "site", "consumed", "picks", "inst", "ways", "_placeholder")

    def __init__(self, rule: RewriteRule, site: Site, consumed: Mset,
                 picks, inst: Inst, ways: int):
        self.rule = rule
        self.site = site
        self.consumed = consumed
        self.picks = picks
        self.inst = inst
        self.ways = ways
        self._placeholder = None

    def target_layer(self, placer=None, splits=None) -> Mset:
        produced = instantiate(self.rule.rhs, self.inst, placer, splits)
        return self.site.layer.subtract(self.consumed).union(produced.children)

    def placeholder_layer(self) -> Mset:
        if self._placeholder is None:
            self._placeholder = self.target_layer()
        return self._placeholder

    def apply(self, term: Par, placer=None, splits=None) -> Par:
        """Rebuild the whole term with this application performed."""
        return replace_at(term, self.site.path, self.site.kind,
                          self.target_layer(placer, splits))

    def __repr__(self):
        return "Application(%s, ways=%d, %r)" % (self.rule.id, self.ways, self.site)


def applications(rule: RewriteRule, term: Par, grid=None,
                 descend: Optional[Callable] = None,
                 normalized: bool = False) -> list:
    """The complete set of enabled applications of a rule in a term.

    Applications that would require a grid placement are kept whenever the
    grid still has room (placement conflicts are resolved, and possibly
    rejected, when an application is executed); with no grid they are kept
    unconditionally, which is exact for non-spatial models.  ``normalized``
    skips re-canonicalization for callers that maintain canonical terms.
    """
    if not normalized:
        term = normalize(term)
    if rule.getpos_radii and grid is not None and grid.is_full():
        return []
    out: list = []
    seen: dict = {}
    for site in iter_sites(term, descend):
        if site.kind == "brane" and not rule.brane_capable:
            continue
        for m in match_layer(rule.lhs, site.layer, whole=False):
            if not rule.precondition(m.inst.tau):
                continue
            app = Application(rule, site, m.consumed, m.picks, m.inst,
                              m.ways * site.factor)
            key = (site.key(), m.picks, app.placeholder_layer())
            prev = seen.get(key)
            if prev is not None:
                # same physical choice reached through renamed variables
                continue
            seen[key] = app
            out.append(app)
    return out


def reactant_combinations(rule: RewriteRule, term: Par, grid=None,
                          descend: Optional[Callable] = None) -> int:
    """Total number of distinct enabled reactant combinations for a rule."""
    return sum(app.ways for app in applications(rule, term, grid, descend))


def match(pattern: PLayer, term: Par) -> list:
    """All matches of a left pattern in a term, across every site.

    Patterns with a top-level term variable are matched against whole layers
    (the variable absorbs the remainder); patterns without take sub-multisets.
    Returns :class:`Application`-like matches carrying site, instantiation and
    aggregated multiplicity.
    """
    term = normalize(term)
    whole = pattern.var is not None
    out = []
    for site in iter_sites(term):
        if site.kind == "brane" and not all(isinstance(e, PSeq) for e in pattern.elems):
            continue
        for m in match_layer(pattern, site.layer, whole=whole):
            out.append(Match(site, m.consumed, m.inst, m.ways * site.factor))
    return out


class Match:
    """A pattern match: site, consumed elements, bindings, multiplicity."""

    __slots__ = ("site", "consumed", "inst", "multiplicity")

    def __init__(self, site: Site, consumed: Mset, inst: Inst, multiplicity: int):
        self.site = site
        self.consumed = consumed
        self.inst = inst
        self.multiplicity = multiplicity

    def __repr__(self):
        return "Match(mult=%d, %r)" % (self.multiplicity, self.inst)


# ---------------------------------------------------------------------------
# reference one-step semantics

class StepDistribution:
    """Exact one-step outcome distribution: targets, probabilities, dt."""

    __slots__ = ("entries", "no_reaction_prob", "dt")

    def __init__(self, entries: list, no_reaction_prob: float, dt: float):
        self.entries = entries
        self.no_reaction_prob = no_reaction_prob
        self.dt = dt

    def total(self) -> float:
        return sum(p for _, p in self.entries) + self.no_reaction_prob

    def __repr__(self):
        return "StepDistribution(%d targets, p_none=%g, dt=%g)" % (
            len(self.entries), self.no_reaction_prob, self.dt)


def step_distribution(term: Par, rules: list, N: float) -> StepDistribution:
    """One-step distribution of the probabilistic transition semantics.

    ``N`` bounds the per-step reaction probability; it must satisfy
    0 < rate/N <= 1 for every finite-rate rule.  Used as a reference oracle
    on small models, never as the production stepper.
    """
    for r in rules:
        if math.isinf(r.rate):
            continue
        if not (0 < r.rate / N <= 1):
            raise ModelError("N=%g violates the rate bound for rule %s "
                             "(rate %g)" % (N, r.id, r.rate))
    term = normalize(term)
    per_rule = {r.id: applications(r, term) for r in rules}
    m_total = sum(app.ways for apps in per_rule.values() for app in apps)
    dt = 1.0 / (N * max(1, m_total))
    targets: dict = {}
    for r in rules:
        if math.isinf(r.rate):
            raise ModelError("the reference step semantics does not cover "
                             "instantaneous rules (rule %s)" % r.id)
        for app in per_rule[r.id]:
            tgt = app.apply(term)
            p = (r.rate / (N * m_total)) * app.ways
            targets[tgt] = targets.get(tgt, 0.0) + p
    entries = sorted(targets.items(), key=lambda kv: repr(kv[0]))
    p_none = 1.0 - sum(p for _, p in entries)
    return StepDistribution(entries, p_none, dt)


# ---------------------------------------------------------------------------
# model bundle

class Model:
    """A complete simulation model: geometry, rules, initial term, parameters."""

    def __init__(self, name: str, rules: list, initial_term: Par,
                 dimension: int = 3, sphere_radius: float = 0.0,
                 cube_size: float = 0.0, s: float = 1.0,
                 seed: Optional[int] = None, params: Optional[dict] = None):
        self.name = name
        self.rules = list(rules)
        self.initial_term = normalize(initial_term)
        self.dimension = dimension
        self.sphere_radius = float(sphere_radius)
        self.cube_size = float(cube_size)
        self.s = float(s)
        self.seed = seed
        self.params = dict(params or {})
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate rule ids in model %r" % name)

    def rules_at(self, level: str) -> list:
        return [r for r in self.rules if r.level == level]

    def finite_rules(self) -> list:
        return [r for r in self.rules if not math.isinf(r.rate)]

    def vertical_rules(self) -> list:
        return [r for r in self.rules if r.is_vertical()]

    def rule(self, rule_id: str) -> RewriteRule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise KeyError(rule_id)

    def __eq__(self, other):
        return (isinstance(other, Model)
                and self.name == other.name
                and self.rules == other.rules
                and self.initial_term == other.initial_term
                and self.dimension == other.dimension
                and self.sphere_radius == other.sphere_radius
                and self.cube_size == other.cube_size
                and self.s == other.s
                and self.params == other.params)

    def __repr__(self):
        return "Model(%r, %d rules)" % (self.name, len(self.rules))
