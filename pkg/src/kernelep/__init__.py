"""Learned message operators for expectation propagation.

The package trains a kernel ridge regressor from incoming-message tuples to
projected outgoing messages at a logistic factor, then runs it inside a
factor-graph EP loop in place of the importance-sampling oracle.
"""

from .errors import KernelEpError
from .expfam import BetaDist, Gaussian1D, divide, from_natural, kl_divergence, multiply, to_natural
from .factors import IncomingPrior, IncomingTuple, TrainingPair, gen_training_set
from .kernels import RffSpec, draw_rff, median_heuristic
from .regress import CvReport, RidgeModel, cross_validate, fit, predict, update_online
from .operator import (
    MessageOperator,
    UncertaintyPolicy,
    outgoing_message,
    predict_q,
    train_operator,
)
from .ep_engine import (
    ActiveSource,
    DampingConfig,
    EpResult,
    Factor,
    FactorGraph,
    OperatorSource,
    OracleSource,
    Variable,
    default_sources,
    demo_graph,
    run_ep,
)
from .cli import RunConfig, load_dataset, load_model, main, save_dataset, save_model

__version__ = "0.1.0"

__all__ = [
    "KernelEpError",
    "Gaussian1D",
    "BetaDist",
    "to_natural",
    "from_natural",
    "multiply",
    "divide",
    "kl_divergence",
    "IncomingTuple",
    "IncomingPrior",
    "TrainingPair",
    "gen_training_set",
    "RffSpec",
    "draw_rff",
    "median_heuristic",
    "RidgeModel",
    "CvReport",
    "fit",
    "predict",
    "update_online",
    "cross_validate",
    "MessageOperator",
    "UncertaintyPolicy",
    "predict_q",
    "outgoing_message",
    "train_operator",
    "FactorGraph",
    "Variable",
    "Factor",
    "DampingConfig",
    "EpResult",
    "OracleSource",
    "OperatorSource",
    "ActiveSource",
    "run_ep",
    "default_sources",
    "demo_graph",
    "RunConfig",
    "save_dataset",
    "load_dataset",
    "save_model",
    "load_model",
    "main",
    "__version__",
]
