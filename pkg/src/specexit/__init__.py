"""Speculative early exiting for a toy byte-level transformer.

A small deterministic inference engine: a draft model proposes candidate
next tokens, per-layer MLP predictors decide when an intermediate layer
already knows the answer, the full LM head verifies, and a two-level
scheduler keeps the number of predictor calls small.  A compiled kernel
core and a pure-Python fallback produce bit-identical results.
"""

__version__ = "0.1.0"

from .engine import (AlwaysExitPolicy, EngineConfig, ExitEngine, ExitRecord, NeverExitPolicy,
                     OraclePolicy, PredictorPolicy, generate, greedy_generate, oracle_exit_layer)
from .model import ModelConfig, TransformerModel, init_model, load_weights, save_weights
from .pipeline import Pipeline, load_config, run_pipeline
from .predictor import (FeatureVector, PredictorWeights, extract_features, load_predictors,
                        predictor_forward, save_predictors, train_predictor)
from .scheduler import (OfflineProfile, OnlineState, ScheduleConfig, active_layers, load_profile,
                        save_profile)
from .speculation import SpeculativeSet, TokenTree, build_token_tree, propose_topk
from .train_lm import TrainConfig, train_language_model
from .tree import TreeEngine, merge_paths

__all__ = [name for name in dir() if not name.startswith("_")]
