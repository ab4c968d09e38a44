"""Ready-made experiment setups built from named presets.

An :class:`Experiment` bundles the consensus problem, the common starting
point, the batch schedule and the data it was built from, so that the
primal-dual solvers and the baselines can be run on identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, ConsensusProblem, PreconditionerSpec
from .data import (
    PRESETS,
    Dataset,
    biased_batches,
    build_knn_graph,
    partition_patches,
    sample_gmm,
    synth_spatial,
)
from .objectives.gmm import (
    GmmHyperParams,
    MeanFieldGmmObjective,
    gmm_hyper_from_data,
    init_global_from_seeds,
)
from .objectives.quadratic import QuadraticInstance, QuadraticObjective, generate_quadratic_instance
from .solver import BatchSchedule, default_preconditioner

# Step settings per preset. quad-desk and gmm-desk were tuned once on seed 100
# (never an evaluation seed) by fewest iterations to 1e-8 or lowest final
# objective over a log grid; the other presets reuse those values, except
# quad-blocks whose c is fixed because its runs compare methods at equal c.
# ``baseline_step`` is the SGD / SVI-constant step; svi_diminishing starts
# from it.
TUNED = {
    "quad-desk": dict(eta=0.001, c=1.9, iters=2000, baseline_step=0.003),
    "quad-full": dict(eta=0.001, c=1.9, iters=2000, baseline_step=0.003),
    "quad-blocks": dict(eta=None, c=1.0, iters=3000, baseline_step=0.003),
    "gmm-desk": dict(eta=None, c=0.1, iters=1000, baseline_step=0.01),
    "gmm-full": dict(eta=None, c=0.1, iters=1000, baseline_step=0.01),
    "spatial-desk": dict(eta=None, c=0.1, iters=300, baseline_step=0.01),
}


@dataclass
class Experiment:
    name: str
    kind: str
    problem: ConsensusProblem
    init_lambda0: np.ndarray
    schedule: BatchSchedule
    dataset: Dataset | None = None
    hyper: GmmHyperParams | None = None
    settings: dict = field(default_factory=dict)

    @property
    def lipschitz(self) -> np.ndarray:
        return self.problem.oracle.lipschitz_estimates(self.init_lambda0)

    def preconditioner(self, optimizer="p2dvi", eta=None, c=None) -> PreconditionerSpec:
        """Step sizes for ``pdvi`` (uniform) or ``p2dvi`` (``c / L_j`` per block).

        An explicit ``eta`` (scalar or one value per block) wins; otherwise
        ``c`` defaults to the preset's tuned value and PD-VI uses the uniform
        step ``c / max_j L_j``.
        """
        B = self.problem.partition.n_blocks
        if eta is not None:
            etas = np.broadcast_to(np.asarray(eta, float), (B,))
            return PreconditionerSpec(tuple(float(e) for e in etas))
        c = self.settings.get("c", 0.5) if c is None else c
        L = self.lipschitz
        if optimizer == "p2dvi":
            return default_preconditioner(L, c)[0]
        if optimizer == "pdvi":
            if self.settings.get("eta") is not None:
                return PreconditionerSpec.uniform(self.settings["eta"], B)
            return PreconditionerSpec.uniform(c / float(np.max(L)), B)
        raise ConfigurationError(f"{optimizer!r} is not a primal-dual optimizer")


def resolve_preset(preset: str | dict, **overrides) -> dict:
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        spec = dict(PRESETS[preset], name=preset)
    else:
        spec = dict(preset)
        spec.setdefault("name", spec.get("kind", "custom"))
    spec.update({k: v for k, v in overrides.items() if v is not None})
    return spec


def build_experiment(preset: str | dict, seed: int = 0, dataset=None, **overrides) -> Experiment:
    """Construct the problem, start and schedule for ``preset`` at ``seed``.

    Keyword overrides replace preset fields (for instance ``batch_size`` or
    ``bias``; ``bias=0`` gives unbiased uniform batches for the GMM). A given
    ``dataset`` (a :class:`Dataset`, or a :class:`QuadraticInstance` for the
    quadratic kind) replaces the generated data; ``seed`` then only drives
    the start and the batches.
    """
    spec = resolve_preset(preset, **overrides)
    kind = spec["kind"]
    settings = dict(TUNED.get(spec["name"], {}))
    if kind == "quadratic":
        return _quadratic(spec, seed, settings, dataset)
    if kind == "gmm":
        return _gmm(spec, seed, settings, dataset)
    if kind == "spatial":
        return _spatial(spec, seed, settings, dataset)
    raise ConfigurationError(f"unknown experiment kind {kind!r}")


def generate_data(preset: str | dict, seed: int = 0, **overrides):
    """The raw data behind ``preset``: a Dataset, or a QuadraticInstance."""
    spec = resolve_preset(preset, **overrides)
    if spec["kind"] == "quadratic":
        return generate_quadratic_instance(spec["n"], spec["d_phi"], spec["d_lambda"],
                                           spec["cond"], seed=seed,
                                           block_scales=spec.get("block_scales"),
                                           block_dims=spec.get("block_dims"))
    if spec["kind"] == "gmm":
        return sample_gmm(spec["n"], spec["K"], spec["d"], seed=seed)
    if spec["kind"] == "spatial":
        return synth_spatial(spec["n_side"], spec["K"], spec["d"], seed=seed,
                             separation=spec.get("separation", 20.0))
    raise ConfigurationError(f"unknown experiment kind {spec['kind']!r}")


def _quadratic(spec, seed, settings, inst=None):
    if inst is None:
        inst = generate_data(spec, seed)
    elif not isinstance(inst, QuadraticInstance):
        raise ConfigurationError("the quadratic objective needs a quadratic instance")
    oracle = QuadraticObjective(inst, block_dims=spec.get("block_dims"))
    lam0 = np.random.default_rng([seed, 1]).standard_normal(inst.d_lambda)
    schedule = BatchSchedule(batch_size=spec["batch_size"], seed=seed)
    return Experiment(spec["name"], "quadratic", ConsensusProblem(oracle), lam0, schedule,
                      settings=settings)


def _gmm(spec, seed, settings, ds=None):
    ds = generate_data(spec, seed) if ds is None else ds
    hyper, _ = gmm_hyper_from_data(ds.X, spec["K"], seed=seed)
    oracle = MeanFieldGmmObjective(ds.X, hyper)
    lam0 = init_global_from_seeds(ds.X, hyper, seed=seed)
    bias = spec.get("bias", 0.0)
    if bias > 0:
        if ds.true_labels is None:
            raise ConfigurationError("biased batches need true labels")
        schedule = BatchSchedule.fixed(biased_batches(ds.true_labels, spec["batch_size"], bias,
                                                      seed=seed), seed=seed)
    else:
        schedule = BatchSchedule(batch_size=spec["batch_size"], seed=seed)
    return Experiment(spec["name"], "gmm", ConsensusProblem(oracle), lam0, schedule, ds, hyper,
                      settings)


def _spatial(spec, seed, settings, ds=None):
    ds = generate_data(spec, seed) if ds is None else ds
    if ds.coords is None:
        raise ConfigurationError("the spatial objective needs coordinates")
    graph = build_knn_graph(ds.coords, k=spec.get("k", 6), X=ds.X, tau=spec.get("tau", 0.5))
    patches = partition_patches(ds.coords, spec["patches"])
    groups = [np.flatnonzero(patches == g) for g in range(patches.max() + 1)]
    hyper, _ = gmm_hyper_from_data(ds.X, spec["K"], seed=seed)
    oracle = MeanFieldGmmObjective(ds.X, hyper, groups=groups, graph=graph.with_patches(patches))
    lam0 = init_global_from_seeds(ds.X, hyper, seed=seed)
    schedule = BatchSchedule(batch_size=min(spec.get("batch_size", 5), len(groups)), seed=seed)
    return Experiment(spec["name"], "spatial", ConsensusProblem(oracle), lam0, schedule, ds,
                      hyper, settings)
