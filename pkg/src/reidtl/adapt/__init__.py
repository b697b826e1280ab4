from reidtl.adapt.autoencoder import AEConfig, AutoEncoder, autoencoder_baseline
from reidtl.adapt.cotrain import (
    SoftLabeling,
    build_cross_view_graph,
    co_train,
    select_lambda,
    self_train,
    self_train_round,
    soft_labels_from_features,
    subspace_codes,
)
from reidtl.adapt.dictionary import DictModel, graph_penalty, solve_graph_dictionary

__all__ = [
    "AEConfig",
    "AutoEncoder",
    "DictModel",
    "SoftLabeling",
    "autoencoder_baseline",
    "build_cross_view_graph",
    "co_train",
    "graph_penalty",
    "select_lambda",
    "self_train",
    "self_train_round",
    "soft_labels_from_features",
    "solve_graph_dictionary",
    "subspace_codes",
]
