"""Training harness: configs, metrics, and the training/EM loops."""

from flipmatch.harness.config import (
    OBJECTIVES,
    TrainConfig,
    load_train_config,
    save_train_config,
)
from flipmatch.harness.em import data_marginal_loglik, latent_imap, train_em
from flipmatch.harness.loops import interaction_graph, train_delta, train_ebm, train_gfn
from flipmatch.harness.metrics import (
    METRIC_COLUMNS,
    MetricsRow,
    metric_mmd_linear,
    metric_nll,
    read_metrics_csv,
    write_metrics_csv,
)

__all__ = [
    "OBJECTIVES",
    "TrainConfig",
    "load_train_config",
    "save_train_config",
    "METRIC_COLUMNS",
    "MetricsRow",
    "metric_nll",
    "metric_mmd_linear",
    "write_metrics_csv",
    "read_metrics_csv",
    "interaction_graph",
    "train_delta",
    "train_gfn",
    "train_ebm",
    "train_em",
    "latent_imap",
    "data_marginal_loglik",
]
