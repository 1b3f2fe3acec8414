"""Probabilistic integral circuits.

Symbolic circuits with integral units over continuous latent variables,
compiled from latent tree models, materialized into standard
probabilistic circuits by numerical quadrature, and parameterized by
neural energy-based conditionals trained with maximum likelihood.
"""

from .circuit import Circuit, CircuitBuilder, InputDist, check_structure, deserialize, serialize
from .data import Dataset, load_csv, save_csv
from .materialize import materialize_nested, materialize_qpc
from .nets import ParamNets, load_checkpoint, save_checkpoint
from .quadrature import QuadratureRule, make_rule
from .runtime import bpd, log_forward, marginal
from .structures import LatentTree, bn_to_pic, chow_liu_tree, hclt_structure
from .training import TrainConfig, train_hclt_adam, train_hclt_em, train_pic

__version__ = "0.1.0"

__all__ = [
    "Circuit",
    "CircuitBuilder",
    "Dataset",
    "InputDist",
    "LatentTree",
    "ParamNets",
    "QuadratureRule",
    "TrainConfig",
    "bn_to_pic",
    "bpd",
    "check_structure",
    "chow_liu_tree",
    "deserialize",
    "hclt_structure",
    "load_checkpoint",
    "load_csv",
    "log_forward",
    "make_rule",
    "marginal",
    "materialize_nested",
    "materialize_qpc",
    "save_checkpoint",
    "save_csv",
    "serialize",
    "train_hclt_adam",
    "train_hclt_em",
    "train_pic",
    "__version__",
]
