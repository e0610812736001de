"""Smoke test for the activebed_py extension module.

Build and run from the repository root:

    cargo build --release -p activebed-py --features extension-module
    cp target/release/libactivebed_py.so python/activebed_py.so
    python3 python/smoke_test.py
"""

import json
import math
import sys
import os

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import activebed_py as ab


def main():
    cfg = json.loads(ab.default_config("parametric"))
    assert cfg["scenario"] == "parametric"
    assert cfg["model_grid"]["points"] == 101

    # Sources.
    s = ab.true_source((0.45, 0.25), (0.45, 0.25, 0.05, 2.0))
    assert abs(s - 2.0 / (2 * math.pi * 0.05**2)) < 1e-9

    # Solver + observation on a coarse grid.
    fields = ab.simulate(21, (0.5, 0.5, 0.3, 2.0), 20.0, [0.0, 0.05, 0.1])
    assert len(fields) == 2 and len(fields[0]) == 21 * 21
    u = ab.observe(fields[1], (0.5, 0.5))
    assert u > 0.0

    # Grid posterior.
    prior = ab.Posterior.uniform(11)
    nodes = prior.nodes()
    preds = [-(x - 0.3) ** 2 - (y - 0.7) ** 2 for x, y in nodes]
    post = prior.update(0.0, preds, 0.05)
    assert abs(sum(post.mass()) - 1.0) < 1e-12
    mx, my = post.map()
    assert abs(mx - 0.3) < 1e-9 and abs(my - 0.7) < 1e-9
    assert post.kld(prior) > 0.0

    # Design candidates.
    c = ab.candidates((0.5, 0.5, 0.0))
    assert len(c) == 25 and all(abs(t - 0.05) < 1e-15 for _, _, t in c)

    # EKI on g(θ) = θ against the scalar Kalman gain.
    members = [[-1.0], [0.0], [2.0], [3.0]]
    mean = sum(m[0] for m in members) / 4
    var = sum((m[0] - mean) ** 2 for m in members) / 3
    gamma = 0.5
    k = var / (var + gamma)
    updated = ab.eki_step_linear(members, [[1.0]], [1.0], gamma)
    for old, new in zip(members, updated):
        assert abs(new[0] - (old[0] + k * (1.0 - old[0]))) < 1e-12
    assert ab.ensemble_kld(updated, members) > 0.0

    # Network.
    net = ab.DiscrepancyNet.random(3)
    assert len(net.params()) == 37
    g = net.param_gradient([0.1, 0.2, 0.3, 0.4])
    assert len(g) == 37

    # Gradient audit (a few draws keep this quick).
    err = ab.validate_gradients("parametric", 2)
    assert err < 1e-3, err

    print("smoke test passed")


if __name__ == "__main__":
    main()
