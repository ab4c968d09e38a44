from .gmm import (
    GmmHyperParams,
    MeanFieldGmmObjective,
    gmm_hyper_from_data,
    gmm_negelbo_eval_grad,
    init_global_from_labels,
    init_global_from_seeds,
    negative_elbo,
    pack_global,
    unpack_global,
)
from .potts import SpatialGraph, edge_weight, edge_weights, potts_penalty_eval_grad
from .quadratic import (
    QuadraticInstance,
    QuadraticObjective,
    generate_quadratic_instance,
    quadratic_eval_grad,
)

__all__ = [
    "GmmHyperParams", "MeanFieldGmmObjective", "gmm_hyper_from_data",
    "gmm_negelbo_eval_grad", "init_global_from_labels", "init_global_from_seeds",
    "negative_elbo",
    "pack_global", "unpack_global", "SpatialGraph", "edge_weight", "edge_weights",
    "potts_penalty_eval_grad", "QuadraticInstance", "QuadraticObjective",
    "generate_quadratic_instance", "quadratic_eval_grad",
]
