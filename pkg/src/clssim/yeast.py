"""Built-in budding-yeast cell-cycle model, with an optional virus extension.

The model couples two levels.  Four stage rules drive what a cell looks like
(growth, chromosome duplication, nucleus division, cytokinesis), each firing
at the inverse of its stage's mean duration and marking the stage as
visualised.  A molecular network of 28 reactions runs underneath at rates
scaled by a speeding factor ``s``; four instantaneous vertical rules advance
a cell to the next stage once the stage has been visualised and the gating
molecule has accumulated past its threshold (``mc``), introducing the spindle
signal on entry to stage 3 and removing it on exit.

Thresholds and initial populations are configuration with calibrated
defaults; the cycle under the default configuration averages about 100
minutes.  The virus extension models membrane entry, substrate-limited
replication and protein synthesis, receptor degradation, return to the
environment, and destabilisation of the G1/S cyclin by the viral protein:
cells severely infected while still in stage 1 lose the ability to pass the
stage-1 gate and never divide again, while cells infected later finish their
current cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .patterns import (PBrane, PComp, PLayer, PSeq, RBrane, RComp, RLayer,
                       RRef, SeqVar, SpatForm, SpatLit, SpatVar)
from .rewrite import (INF, LEVEL_MOLECULAR, LEVEL_VERTICAL, LEVEL_VISUAL,
                      Model, ModelError, RewriteRule)
from .terms import Comp, Mset, Par, Seq, SpatialInfo

RATE_CATEGORIES = {
    "veryfast": 20.0,
    "fast": 5.0,
    "slow": 1.0,
    "veryslow": 0.25,
}

STAGES = (
    # index, radius factor, nuclei, chromosome sets per nucleus, mean minutes
    (1, 0.75, 1, 1, 40.0),
    (2, 1.00, 1, 1, 30.0),
    (3, 1.00, 1, 2, 25.0),
    (4, 1.00, 2, 2, 5.0),
)

DEFAULT_MC = {
    ("Cln2", 2): 4,
    ("Clb5", 3): 1,
    ("APC-Cdc20", 4): 1,
    ("Sic1", 1): 1,
}

DEFAULT_CELL = {
    "iSBF": 1, "iMBF": 1, "Net1": 2, "Cdc14": 2, "iMcm1": 1,
    "iCdc15": 24, "APC": 4, "SCF": 0, "Cdh1": 0, "Sic1": 0, "VSub": 30,
}

DEFAULT_MEMBRANE = {"GFR": 64}

DEFAULT_ENVIRONMENT = {"GF": 1000000}


@dataclass
class YeastConfig:
    """Tunable parameters for the built-in model."""

    r: float = 1.0                      # stage-2 cell radius (length unit)
    sphere_radius: float = 8.0
    cube_size: Optional[float] = None   # default: one cell diameter (2 r)
    s: float = 1000.0
    seed: int = 1
    mc: Dict[Tuple[str, int], int] = field(default_factory=lambda: dict(DEFAULT_MC))
    virusTH: int = 4
    cell: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_CELL))
    membrane: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_MEMBRANE))
    environment: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_ENVIRONMENT))
    initial_virus: int = 0
    include_virus: bool = True

    def validate(self):
        if self.r <= 0 or self.sphere_radius <= 0 or self.s <= 0:
            raise ModelError("r, sphere radius and s must be positive")
        if self.virusTH < 1:
            raise ModelError("virusTH must be at least 1")
        for key, v in self.mc.items():
            if v < 0:
                raise ModelError("threshold %r must be non-negative" % (key,))
        cube = self.cube()
        if cube < 2 * self.big_radius():
            raise ModelError("cube size %g cannot hold a full-grown cell" % cube)
        if self.small_radius() > self.sphere_radius:
            raise ModelError("the initial cell does not fit in the sphere")

    def cube(self) -> float:
        return self.cube_size if self.cube_size is not None else 2 * self.r

    def big_radius(self) -> float:
        return self.r

    def small_radius(self) -> float:
        return 0.75 * self.r

    def nucleus_radius(self) -> float:
        return 0.4 * self.r


# ---------------------------------------------------------------------------
# small pattern-building helpers

def _s(name: str) -> PSeq:
    return PSeq((name,))


def _many(name: str, n: int):
    return [_s(name)] * n


def _ground(*names: str):
    return tuple(_s(n) for n in names)


def _flat_rule(rule_id: str, lhs_names, rhs_names, category: str, s: float,
               level: str = LEVEL_MOLECULAR, section: Optional[str] = None) -> RewriteRule:
    rate = RATE_CATEGORIES[category] * s
    return RewriteRule(
        rule_id,
        PLayer(tuple(_s(n) for n in lhs_names)),
        RLayer(tuple(_s(n) for n in rhs_names)),
        rate, level=level, rate_expr="%s*s" % category, section=section)


def _gene_rule(rule_id: str, tf: str, gene: str, tf_after: str, product: str,
               category: str, s: float) -> RewriteRule:
    """Transcription: a factor reads a gene inside the nucleus, which is left
    untouched, and the product appears in the surrounding layer."""
    chromo = PSeq((SeqVar("y"), gene, SeqVar("x")))
    nucleus_l = PComp(PBrane((_s("n"),)), SpatVar("u"),
                      PLayer((chromo,), "Y"))
    nucleus_r = RComp(RBrane((_s("n"),)), SpatVar("u"),
                      RLayer((chromo,), (RRef("Y"),)))
    rate = RATE_CATEGORIES[category] * s
    return RewriteRule(
        rule_id,
        PLayer((_s(tf), nucleus_l)),
        RLayer((_s(tf_after), nucleus_r, _s(product))),
        rate, level=LEVEL_MOLECULAR, rate_expr="%s*s" % category)


# ---------------------------------------------------------------------------
# initial term

def build_initial_term(cfg: YeastConfig) -> Par:
    """Bounding sphere holding one small cell at the origin in stage 1."""
    cfg.validate()
    chromosomes = [Seq(("cr", "gN2", "gB5")), Seq(("cr", "gB2", "gC20"))]
    nucleus = Comp(Mset.of(Seq(("n",))),
                   SpatialInfo((0.0, 0.0, 0.0), cfg.nucleus_radius()),
                   Par(Mset.of(*chromosomes)))
    cell_content = [(nucleus, 1), (Seq(("stage1",)), 1)]
    for name in sorted(cfg.cell):
        if cfg.cell[name]:
            cell_content.append((Seq((name,)), cfg.cell[name]))
    brane = [(Seq(("m",)), 1)]
    for name in sorted(cfg.membrane):
        if cfg.membrane[name]:
            brane.append((Seq((name,)), cfg.membrane[name]))
    cell = Comp(Mset(brane),
                SpatialInfo((0.0, 0.0, 0.0), cfg.small_radius()),
                Par(Mset(cell_content)))
    env = [(cell, 1)]
    for name in sorted(cfg.environment):
        if cfg.environment[name]:
            env.append((Seq((name,)), cfg.environment[name]))
    if cfg.initial_virus:
        env.append((Seq(("Virus",)), cfg.initial_virus))
    arena = Comp(Mset.of(Seq(("b",))), SpatialInfo(None, cfg.sphere_radius),
                 Par(Mset(env)))
    return Par(Mset.of(arena))


# ---------------------------------------------------------------------------
# rules

def visual_rules(cfg: YeastConfig) -> list:
    """Stage rules: growth, chromosome duplication, nucleus division, and
    cytokinesis with a grid-placed daughter.  Rates are the inverse mean
    stage durations."""
    r = cfg.r
    small, big, nuc = cfg.small_radius(), cfg.big_radius(), cfg.nucleus_radius()
    m_brane_l = PBrane((_s("m"),), "W")
    m_brane_r = RBrane((_s("m"),), (RRef("W"),))

    rules = []
    # growth: the cell swells from 3/4 of the full radius to the full radius
    rules.append(RewriteRule(
        "R1",
        PLayer((PComp(m_brane_l, SpatForm(("var", "p"), small),
                      PLayer((_s("stage1"),), "X")),)),
        RLayer((RComp(m_brane_r, SpatForm(("var", "p"), big),
                      RLayer((_s("stage1"), _s("visualised1")), (RRef("X"),))),)),
        1.0 / 40.0, level=LEVEL_VISUAL, rate_expr="1/40", section="visual"))

    # chromosome duplication: the marker on each strand doubles
    chromo_l = (PSeq(("cr", SeqVar("x"))), PSeq(("cr", SeqVar("y"))))
    chromo_r = (PSeq(("2cr", SeqVar("x"))), PSeq(("2cr", SeqVar("y"))))
    rules.append(RewriteRule(
        "R2",
        PLayer((PComp(m_brane_l, SpatForm(("var", "p"), big),
                      PLayer((PComp(PBrane((_s("n"),)), SpatVar("u"),
                                    PLayer(chromo_l)),
                              _s("stage2")), "X")),)),
        RLayer((RComp(m_brane_r, SpatForm(("var", "p"), big),
                      RLayer((RComp(RBrane((_s("n"),)), SpatVar("u"),
                                    RLayer(chromo_r)),
                              _s("stage2"), _s("visualised2")), (RRef("X"),))),)),
        1.0 / 30.0, level=LEVEL_VISUAL, rate_expr="1/30", section="visual"))

    # nucleus division: duplicated strands separate into two nuclei pushed
    # to opposite sides of the cell
    rules.append(RewriteRule(
        "R3",
        PLayer((PComp(PBrane((_s("n"),)), SpatForm(("lit", (0.0, 0.0, 0.0)), nuc),
                      PLayer(chromo_r)),
                _s("stage3"))),
        RLayer((RComp(RBrane((_s("n"),)), SpatForm(("lit", (-r / 2, 0.0, 0.0)), nuc),
                      RLayer(chromo_l)),
                RComp(RBrane((_s("n"),)), SpatForm(("lit", (r / 2, 0.0, 0.0)), nuc),
                      RLayer(chromo_l)),
                _s("stage3"), _s("visualised3"))),
        1.0 / 25.0, level=LEVEL_VISUAL, rate_expr="1/25", section="visual"))

    # cytokinesis: one daughter keeps the mother's spot, the other is placed
    # by the grid; membrane material and free molecules split between them
    nucleus_centered = SpatForm(("lit", (0.0, 0.0, 0.0)), nuc)
    rules.append(RewriteRule(
        "R4",
        PLayer((PComp(m_brane_l, SpatForm(("var", "p"), big),
                      PLayer((PComp(PBrane((_s("n"),)), SpatVar("u"), PLayer((), "X")),
                              PComp(PBrane((_s("n"),)), SpatVar("v"), PLayer((), "Y")),
                              _s("stage4")), "Z")),)),
        RLayer((
            RComp(RBrane((_s("m"),), (RRef("W", 0),)),
                  SpatForm(("var", "p"), small),
                  RLayer((RComp(RBrane((_s("n"),)), nucleus_centered,
                                RLayer((), (RRef("X"),))),
                          _s("stage4"), _s("visualised4")),
                         (RRef("Z", 0),))),
            RComp(RBrane((_s("m"),), (RRef("W", 1),)),
                  SpatForm(("getpos",), small),
                  RLayer((RComp(RBrane((_s("n"),)), nucleus_centered,
                                RLayer((), (RRef("Y"),))),
                          _s("stage4"), _s("visualised4")),
                         (RRef("Z", 1),))),
        )),
        1.0 / 5.0, level=LEVEL_VISUAL, rate_expr="1/5", section="visual"))
    return rules


_MOLECULAR = [
    # id, reactants, products, category
    ("S2", ["Cln3", "iSBF", "iMBF"], ["Cln3", "SBF", "MBF"], "slow"),
    ("S5", ["Sic1", "Clb5"], ["Sic1-Clb5"], "fast"),
    ("S6", ["Net1", "Cdc14"], ["Net1-Cdc14"], "fast"),
    ("S7", ["pSic1", "Cdc14"], ["Sic1", "Cdc14"], "veryfast"),
    ("S8", ["Sic1", "Clb2"], ["Sic1-Clb2"], "fast"),
    ("S9", ["Cln2", "Sic1-Clb5"], ["pSic1", "Clb5", "Cln2"], "fast"),
    ("S10", ["pSic1", "SCF"], ["SCF"], "slow"),
    ("S11", ["Cln2", "SCF"], ["SCF"], "slow"),
    ("S12", ["Cln2", "Cdh1"], ["Cln2", "iCdh1"], "veryfast"),
    ("S13", ["Clb5", "Cdh1"], ["iCdh1", "Clb5"], "veryfast"),
    ("S14", ["Clb5", "iMcm1"], ["Mcm1", "Clb5"], "veryslow"),
    ("S16", ["Clb2", "iMcm1"], ["Mcm1", "Clb2"], "veryfast"),
    ("S17", ["Clb2", "MBF"], ["Clb2", "iMBF"], "slow"),
    ("S18", ["Clb2", "SBF"], ["Clb2", "iSBF"], "slow"),
    ("S20", ["Clb2", "APC"], ["APC-P", "Clb2"], "veryfast"),
    ("S21", ["APC-P", "Cdc20"], ["APC-Cdc20"], "slow"),
    ("S22", ["SPN", "iCdc15"], ["SPN", "Cdc15"], "veryslow"),
    ("S23", ["Cdc15", "Net1-Cdc14"], ["Net1", "Cdc14"], "veryslow"),
    ("S24", ["APC-Cdc20", "Clb5"], ["APC"], "slow"),
    ("S25", ["iCdh1", "Cdc14"], ["Cdh1", "Cdc14"], "veryslow"),
    ("S26", ["Cdc14"], ["Sic1", "Cdc14"], "fast"),
    ("S27", ["APC-Cdc20", "Clb2"], ["APC"], "slow"),
    ("S28", ["APC", "Cdh1", "Clb2"], ["APC", "Cdh1"], "veryslow"),
]


def molecular_rules(cfg: YeastConfig) -> list:
    """The 28 molecular reactions, ordered S1..S28."""
    s = cfg.s
    rules = []
    # growth-factor binding: the receptor is spent and the G1 cyclin appears
    # inside the cell
    rules.append(RewriteRule(
        "S1",
        PLayer((_s("GF"),
                PComp(PBrane((_s("GFR"),), "Y"), SpatVar("u"), PLayer((), "X")))),
        RLayer((RComp(RBrane((_s("iGFR"),), (RRef("Y"),)), SpatVar("u"),
                      RLayer((_s("Cln3"),), (RRef("X"),))),)),
        RATE_CATEGORIES["veryfast"] * s, level=LEVEL_MOLECULAR,
        rate_expr="veryfast*s"))
    flat = {rid: (l, rr, cat) for rid, l, rr, cat in _MOLECULAR}
    for i in range(2, 29):
        rid = "S%d" % i
        if rid == "S3":
            rules.append(_gene_rule("S3", "SBF", "gN2", "SBF", "Cln2", "veryslow", s))
        elif rid == "S4":
            rules.append(_gene_rule("S4", "MBF", "gB5", "MBF", "Clb5", "veryslow", s))
        elif rid == "S15":
            rules.append(_gene_rule("S15", "Mcm1", "gB2", "iMcm1", "Clb2", "slow", s))
        elif rid == "S19":
            rules.append(_gene_rule("S19", "Mcm1", "gC20", "iMcm1", "Cdc20", "veryfast", s))
        else:
            l, rr, cat = flat[rid]
            rules.append(_flat_rule(rid, l, rr, cat, s))
    return rules


_VERTICAL = [
    # id, stage, gate molecule, extra reactant, extra product
    ("T1", 1, "Cln2", None, None),
    ("T2", 2, "Clb5", None, "SPN"),
    ("T3", 3, "APC-Cdc20", "SPN", None),
    ("T4", 4, "Sic1", None, None),
]


def vertical_rules(cfg: YeastConfig) -> list:
    """Instantaneous stage transitions gated on molecular thresholds.

    The gating population is preserved across the transition; a threshold of
    zero removes the molecular condition entirely.
    """
    rules = []
    for rid, stage, gate, extra_l, extra_r in _VERTICAL:
        nxt = 1 if stage == 4 else stage + 1
        n = cfg.mc.get((gate, nxt), 0)
        lhs = []
        rhs = []
        if extra_l:
            lhs.append(_s(extra_l))
        lhs.append(_s("visualised%d" % stage))
        lhs.extend(_many(gate, n))
        lhs.append(_s("stage%d" % stage))
        rhs.extend(_many(gate, n))
        rhs.append(_s("stage%d" % nxt))
        if extra_r:
            rhs.append(_s(extra_r))
        rules.append(RewriteRule(
            rid, PLayer(tuple(lhs)), RLayer(tuple(rhs)), INF,
            level=LEVEL_VERTICAL, rate_expr="inf"))
    return rules


def virus_rules(cfg: YeastConfig) -> list:
    """Virus extension: entry, substrate-limited replication and protein
    synthesis, receptor degradation, exit, and G1/S cyclin knockdown."""
    s = cfg.s
    m_brane_l = PBrane((_s("m"),), "W")
    m_brane_r = RBrane((_s("m"),), (RRef("W"),))

    def cellwrap(lhs_in, rhs_in, extra_l=(), extra_r=(), brane_l=None, brane_r=None):
        bl = brane_l or m_brane_l
        br = brane_r or m_brane_r
        lhs = PLayer(tuple(extra_l) + (PComp(bl, SpatVar("u"),
                                             PLayer(tuple(lhs_in), "X")),))
        rhs = RLayer(tuple(extra_r) + (RComp(br, SpatVar("u"),
                                             RLayer(tuple(rhs_in), (RRef("X"),))),))
        return lhs, rhs

    rules = []
    lhs, rhs = cellwrap((), (_s("Virus"),), extra_l=(_s("Virus"),))
    rules.append(RewriteRule("V1", lhs, rhs, RATE_CATEGORIES["slow"] * s,
                             level=LEVEL_MOLECULAR, rate_expr="slow*s",
                             section="virus"))
    lhs, rhs = cellwrap((_s("Virus"), _s("VSub")), (_s("Virus"), _s("Virus")))
    rules.append(RewriteRule("V2", lhs, rhs, RATE_CATEGORIES["fast"] * s,
                             level=LEVEL_MOLECULAR, rate_expr="fast*s",
                             section="virus"))
    lhs, rhs = cellwrap((_s("Virus"), _s("VSub")), (_s("Virus"), _s("VProt")))
    rules.append(RewriteRule("V3", lhs, rhs, RATE_CATEGORIES["slow"] * s,
                             level=LEVEL_MOLECULAR, rate_expr="slow*s",
                             section="virus"))
    lhs, rhs = cellwrap((_s("VProt"),), (_s("VProt"),),
                        brane_l=PBrane((_s("GFR"),), "W"),
                        brane_r=RBrane((), (RRef("W"),)))
    rules.append(RewriteRule("V4", lhs, rhs, RATE_CATEGORIES["slow"] * s,
                             level=LEVEL_MOLECULAR, rate_expr="slow*s",
                             section="virus"))
    lhs, rhs = cellwrap((_s("Virus"),), (), extra_r=(_s("Virus"),))
    rules.append(RewriteRule("V5", lhs, rhs, RATE_CATEGORIES["slow"] * s,
                             level=LEVEL_MOLECULAR, rate_expr="slow*s",
                             section="virus"))
    rules.append(_flat_rule("V6", ["VProt", "Cln2"], ["VProt"], "veryfast", s,
                            section="virus"))
    return rules


def build_yeast_model(cfg: Optional[YeastConfig] = None) -> Model:
    cfg = cfg or YeastConfig()
    cfg.validate()
    rules = (visual_rules(cfg) + molecular_rules(cfg) + vertical_rules(cfg)
             + (virus_rules(cfg) if cfg.include_virus else []))
    params = {
        "mc": {"%s,%d" % k: v for k, v in sorted(cfg.mc.items())},
        "virusTH": cfg.virusTH,
        "virus_species": "Virus",
    }
    return Model("yeast-cell-cycle", rules, build_initial_term(cfg),
                 dimension=3, sphere_radius=cfg.sphere_radius,
                 cube_size=cfg.cube(), s=cfg.s, seed=cfg.seed, params=params)


def infection_class(virus_count: int, virus_threshold: int) -> str:
    """healthy (no virus), light (below threshold) or severe (at/above)."""
    if virus_count <= 0:
        return "healthy"
    if virus_count < virus_threshold:
        return "light"
    return "severe"


INFECTION_COLORS = {"healthy": "orange", "light": "green", "severe": "blue"}
