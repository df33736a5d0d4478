"""Continual federated learning with incrementally aggregated gradients and replay memory."""
from .client import ClientState, LocalRoundResult, client_prologue, compose_update, local_round
from .datagen import (PartitionSpec, TaskStream, dirichlet_partition, make_permuted_features,
                      make_split_gaussians, read_csv, write_csv)
from .errors import ConfigurationError, ConvergenceError, ParseError
from .experiments import (AccuracyMatrix, ExperimentConfig, RunArtifacts, avg_accuracy,
                          forgetting, run_experiment)
from .iag import IagState, delayed_grad, gradient_error, iag_accumulate, iag_init, iag_refresh
from .memory import RingBuffer, bias_diagnostic, build_memory, memory_gradient
from .model import (Dataset, LossModel, accuracy, component_L, estimate_L, grad,
                    grad_component, loss)
from .server import (RoundReport, ServerState, adap_lr, broadcast_grads, gamma,
                     gamma_surrogate, overfit_B, run_round, server_aggregate, task_transition)

__version__ = "0.1.0"
