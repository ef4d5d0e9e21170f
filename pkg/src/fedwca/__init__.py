"""FedWCA: clustered, weighted federated source-free domain adaptation in numpy."""

from .aggregation import (
    GlobalCoefficients,
    WeightBundle,
    compose_initial_model,
    expand_weights,
    make_soft_models,
    server_estimate_AB,
    snd,
    snd_from_outputs,
)
from .checkpoint import load_checkpoint, load_model, manifest, save_checkpoint
from .clustering import ClusterAssignment, cluster_clients, finch_partition, purity
from .config import ExperimentConfig
from .data import DomainSpec, gen_multidomain, load_idx, partition, shifted_domains
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    DataError,
    FedWCAError,
    ProtocolError,
)
from .experiment import build_benchmark, run_grid, run_single
from .federation import METHODS, Federation, MethodConfig, RoundState
from .model import Batch, Model, combine, init_model
from .optim import pretrain_source, train_epoch
from .pseudo_label import build_pseudo_dataset

__version__ = "0.1.0"
