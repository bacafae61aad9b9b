"""clssim: stochastic simulation of compartmental rewriting models.

Terms describe membranes, molecule multisets and spatial placement; rewrite
rules with stochastic rates drive an exact trajectory sampler extended with
per-cell reaction selection, grid-based placement of newborn cells, and an
instantaneous vertical-rule layer that links molecular conditions to the
visual stages of each cell.  A budding-yeast cell-cycle model (with an
optional virus extension) ships built in, together with a textual model
format and a command-line runner.
"""

from .terms import (EMPTY, Mset, Par, Seq, Comp, SpatialInfo, UNPLACED,
                    count_top, normalize, par, seq, sym, comp, top_multiset,
                    render)
from .patterns import (Inst, PBrane, PComp, PLayer, PSeq, RBrane, RComp,
                       RLayer, RRef, SeqVar, SymVar, SpatForm, SpatLit,
                       SpatVar, binom, comb, instantiate, match_layer,
                       pattern_to_rhs, PatternError, ArrangeFailure)
from .rewrite import (INF, LEVEL_MOLECULAR, LEVEL_VERTICAL, LEVEL_VISUAL,
                      Application, Model, ModelError, RewriteRule, RuleError,
                      applications, match, reactant_combinations,
                      register_precondition, step_distribution)
from .grid import Full, GridState, OutOfBoundsError
from .engine import Engine, EngineError, RunResult, sample_tau, select_reaction_cell
from .yeast import YeastConfig, build_yeast_model, infection_class

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
