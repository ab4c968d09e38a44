"""
Gaussian mixture under cluster-biased mini-batches
==================================================

Each mini-batch draws 90% of its points from a single cluster. The primal-dual
solvers keep one dual variable per point, which corrects for the batch drift.
SVI with a diminishing rate has no such memory. A reduced problem
(2,000 points) keeps the run short.
"""

from pdvi import SolveConfig, run
from pdvi.baselines import BaselineConfig, run_baseline
from pdvi.experiments import build_experiment
from pdvi.metrics import adjusted_rand_index, mixture_w2_matched, variational_mixture

exp = build_experiment("gmm-desk", seed=0, n=2000, batch_size=100, bias=0.9)
truth = exp.dataset.true_mixture
T = 300


def report(name, state):
    w2 = mixture_w2_matched(truth, variational_mixture(state.lambda0, exp.hyper))
    ari = adjusted_rand_index(exp.dataset.true_labels, exp.problem.oracle.labels(state.phi))
    print(f"{name:16s} W2 to truth {w2:.3f}   ARI {ari:.3f}")


# Every method starts from the same k-means++ seeded global variables
for opt in ("p2dvi", "pdvi"):
    cfg = SolveConfig(exp.preconditioner(opt), exp.schedule, max_iters=T, trace_every=T)
    state, _ = run(exp.problem, cfg, exp.init_lambda0)
    report(opt, state)

cfg = BaselineConfig("svi_diminishing", exp.schedule, step=0.01, diminish=(0.01, 0.01),
                     max_iters=T, trace_every=T)
state, _ = run_baseline(exp.problem, cfg, exp.init_lambda0)
report("svi_diminishing", state)
