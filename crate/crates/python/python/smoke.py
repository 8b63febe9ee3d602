"""Smoke test for the pydyensemble extension.

Run after building the extension, e.g.

    cargo build -p dyensemble-python --release
    python3 crates/python/python/smoke.py

If the module is not installed, the freshly built library under
target/release is copied into a temporary directory and imported from there.
"""

import json
import math
import os
import shutil
import sys
import tempfile


def load():
    try:
        import pydyensemble

        return pydyensemble
    except ImportError:
        pass
    root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))
    for profile in ("release", "debug"):
        lib = os.path.join(root, "target", profile, "libpydyensemble.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "pydyensemble.so"))
            sys.path.insert(0, tmp)
            import pydyensemble

            return pydyensemble
    raise SystemExit("pydyensemble not built; run cargo build -p dyensemble-python --release")


def close(a, b, tol=1e-12):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


def main():
    dy = load()

    assert close(dy.forgetting_predict([0.9, 0.1], 0.5), [0.75, 0.25])
    assert close(dy.update_model_posterior([0.75, 0.25], [0.0, math.log(3.0)]), [0.5, 0.5])
    assert dy.systematic_indices([0.5, 0.5], 0.1) == [0, 1]
    assert abs(dy.correlation_coefficient([1, 2, 3], [1, 2, 4]) - 0.98198) < 1e-5

    states, ys = dy.simulate_series(0, noiseless=True)
    assert len(states) == 300 and abs(states[0] - 1.12533) < 1e-5

    models = dy.simulation_candidates()
    assert close(models[0].predict_mean([2.0]), [1.0])

    # Linear-Gaussian decode on surrogate cortex data.
    x, counts, informative = dy.synth_cortex(seed=1, duration_bins=1600)
    train_x, train_y = x[:1200], counts[:1200]
    test_x, test_y = x[1200:], counts[1200:]
    ranking = dy.rank_channels(train_x, train_y, 0, 20)
    assert sorted(ranking) == list(range(20))

    a, q = dy.fit_state_transition(train_x)
    full = dy.fit_observation(train_x, train_y, list(range(20)))
    mean = [sum(r[i] for r in train_x) / len(train_x) for i in range(3)]
    cov = [[1.0 if i == j else 0.0 for j in range(3)] for i in range(3)]
    kf = dy.KalmanFilter(full, a, q, mean, cov)
    kalman = [kf.step(y)[0] for y in test_y]

    cands = dy.generate_candidates(train_x, train_y, 8, 15, 0.1, seed=4)
    assert len(cands) == 8 and all(len(c.mask) == 15 for c in cands)
    ens = dy.EnsembleFilter(cands, a, q, mean, cov, alpha=0.1, n_particles=300, seed=2)
    first = ens.step(test_y[0])
    assert abs(sum(first["posterior"]) - 1.0) < 1e-10
    est = [first["estimate"][0]] + [e[0] for e in ens.run(test_y[1:])]
    truth = [r[0] for r in test_x]
    cc_k = dy.correlation_coefficient(kalman, truth)
    cc_e = dy.correlation_coefficient(est, truth)
    assert cc_k > 0.5 and cc_e > 0.5, (cc_k, cc_e)

    noisy = dy.inject_noise(test_y, [2, 5], 0, 10, seed=7)
    assert all(0 <= r[2] <= 10 and r[2] == int(r[2]) for r in noisy)
    assert all(r[0] == o[0] for r, o in zip(noisy, test_y))

    trace = [[0.1, 0.9]] * 10
    assert dy.segment_dominance(list(range(1, 11)), trace, [(1, 10, 1)]) == [1.0]

    try:
        dy.forgetting_predict([0.5, 0.5], 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha = 1 must be rejected")

    out = tempfile.mkdtemp()
    cfg = {"scenario": "simulation", "seeds": [0]}
    dy.run_scenario(json.dumps(cfg), out)
    assert os.path.exists(os.path.join(out, "trace_seed0_alpha0.5.csv"))

    print(f"smoke ok: kalman cc {cc_k:.3f}, ensemble cc {cc_e:.3f}")


if __name__ == "__main__":
    main()
