#!/usr/bin/env python3
"""Smoke test for the latentfit_py extension module.

Builds nothing itself: run `cargo build -p latentfit-py` first, then
`python3 python/smoke_test.py`. The script locates the compiled cdylib,
exposes it under the importable module name, and exercises one operation
from each bound surface.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("debug", "release")
        for name in ("liblatentfit_py.so", "latentfit_py.so", "liblatentfit_py.dylib")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("extension not built; run: cargo build -p latentfit-py")
    staging = Path(tempfile.mkdtemp(prefix="latentfit_py_"))
    shutil.copy(built, staging / "latentfit_py.so")
    sys.path.insert(0, str(staging))
    import latentfit_py

    return latentfit_py


def main():
    lf = load_module()

    # EM on a seeded mixture dataset: the log-likelihood must climb.
    data = lf.gen_data("gmm2d", 400, 1)
    assert len(data) == 400 and len(data[0]) == 2
    gmm = lf.Gmm.kmeans_init(data, 2, 0)
    trace = [gmm.loglik(data)]
    for _ in range(30):
        gmm = gmm.em_step(data, 0)
        trace.append(gmm.loglik(data))
    assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:])), "EM went downhill"
    assert len(gmm.weights) == 2 and abs(sum(gmm.weights) - 1.0) < 1e-12
    resampled = gmm.sample(5, 7)
    assert len(resampled) == 5 and len(resampled[0]) == 2

    # Linear-Gaussian: the bound sits under the exact marginal and
    # refinement recovers the exact posterior.
    lg = lf.LinearGaussian([[0.9], [-0.6], [0.3]], [0.5, -0.2, 0.1], 0.25)
    x = lg.sample(1, 3)[0]
    marginal = lg.log_marginal(x)
    post_mean, post_cov = lg.posterior(x)
    alpha, log_beta = lg.fit_local(x, steps=1500, seed=4)
    assert abs(alpha[0] - post_mean[0]) < 1e-2, "posterior mean not recovered"
    assert abs(math.exp(log_beta[0]) - math.sqrt(post_cov[0][0])) < 1e-2
    exact = lg.elbo_exact(alpha, log_beta, x)
    assert exact <= marginal + 1e-12, "bound exceeded the marginal"
    assert marginal - exact < 1e-3, "refined bound should be nearly tight"
    estimate = lg.elbo(alpha, log_beta, x, 4096, 5)
    assert abs(estimate - exact) < 0.05, "estimator disagrees with closed form"

    # A short denoiser run: training reduces the loss, samples have the
    # right shape and a sane scale.
    blob = lf.LinearGaussian([[0.0], [0.0]], [1.0, -1.0], 1.0).sample(300, 8)
    ddm = lf.Diffusion(2, [16], t_steps=8, phi_start=0.99, phi_end=0.9, seed=2)
    before = ddm.loss(blob, draws=8, seed=9)
    ddm.train(blob, epochs=40, batch_size=64, seed=10)
    after = ddm.loss(blob, draws=8, seed=9)
    assert after < before, f"training did not reduce the loss ({before} -> {after})"
    draws = ddm.sample(200, 11)
    assert len(draws) == 200 and len(draws[0]) == 2
    assert all(abs(v) < 10.0 for row in draws for v in row)

    # Self-audits exposed to Python.
    for name, value, bound, ok in lf.gradcheck(0, 5):
        assert ok, f"gradient audit failed: {name} {value} > {bound}"
    for name, value, bound, ok in lf.verify("em", 0):
        assert ok, f"verification failed: {name} {value} vs {bound}"

    print("smoke test passed")


if __name__ == "__main__":
    main()
