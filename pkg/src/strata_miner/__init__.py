"""Beam-search subgroup discovery on binary cohort tables.

Rules are conjunctions of binary features scored by weighted relative
accuracy (WRAcc); feature importance is the mean WRAcc of the pooled rules
that use a feature, aggregated over a grid of search settings and re-run
per demographic stratum.
"""
__version__ = "0.1.0"

from .errors import (CandidateBudgetExceeded, ConfigError, DataError, SchemaError,
                     StrataMinerError)
from .table import CohortTable, TagColumn
from .rulecore import Rule, RuleStats, coverage, evaluate, quality, refine
from .miner import (MinerConfig, RulePool, count_candidates, mine, mine_beam,
                    mine_exhaustive, top_k)
from .importance import (ComparisonTable, FeatureScore, ImportanceReport,
                         fixed_feature_comparison, score_features, top_features)
from .experiments import (GridResult, GridSpec, run_grid, run_stratified, stratify,
                          t_interval)
from .synth import PlantedRule, SynthSpec, generate, planted_pair_spec

__all__ = [
    "CandidateBudgetExceeded", "CohortTable", "ComparisonTable", "ConfigError", "DataError",
    "FeatureScore", "GridResult", "GridSpec", "ImportanceReport", "MinerConfig", "PlantedRule",
    "Rule", "RulePool", "RuleStats", "SchemaError", "StrataMinerError", "SynthSpec", "TagColumn",
    "count_candidates", "coverage", "evaluate", "fixed_feature_comparison", "generate", "mine",
    "mine_beam", "mine_exhaustive", "planted_pair_spec", "quality", "refine", "run_grid",
    "run_stratified", "score_features", "stratify", "t_interval", "top_features", "top_k",
]
