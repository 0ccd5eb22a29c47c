"""Smoke test for the distilkit_py extension module.

Build first:  pip install --no-build-isolation -e crates/distilkit-py
"""

import math
import os
import tempfile

import distilkit_py as dk


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def raises(exc, fn, msg):
    try:
        fn()
    except exc:
        check(True, msg)
    else:
        check(False, msg)


def networks(tmp):
    net = dk.Network("6-relu-5-logsoftmax-3", seed=4)
    lp = net.log_probs([0.1, -0.2, 0.3, 0.0, 1.0, 0.5])
    check(abs(sum(math.exp(v) for v in lp) - 1.0) < 1e-12, "network class probabilities sum to one")
    path = os.path.join(tmp, "a.net")
    net.save(path)
    back = dk.Network.load(path)
    check(back.params == net.params and back.arch == net.arch, "network save/load round trip")
    ens = dk.Ensemble([net, dk.Network("6-relu-5-logsoftmax-3", seed=5)])
    check(abs(sum(ens.predict([0.0] * 6)) - 1.0) < 1e-12, "ensemble prediction is a distribution")
    raises(ValueError, lambda: dk.Network("6-bogus-3"), "bad architecture raises ValueError")
    raises(FileNotFoundError, lambda: dk.Network.load(os.path.join(tmp, "absent.net")), "missing model file raises FileNotFoundError")


def rbm_and_nade(tmp):
    rbm = dk.Rbm(8, 4, seed=1)
    nade = dk.Nade(8, 12, seed=2)
    states = [[float((s >> i) & 1) for i in range(8)] for s in range(256)]
    total = sum(math.exp(nade.log_prob(x)) for x in states)
    check(abs(total - 1.0) < 1e-10, "NADE probabilities sum to one over 8 bits")

    kl0 = dk.exact_kl_divergence(rbm, nade)
    trace = dk.distill_rbm(rbm, nade, iterations=3000, n_chains=200, burn_in=200, seed=3)
    kl1 = dk.exact_kl_divergence(rbm, nade)
    check(len(trace) > 0 and kl1 < 0.5 * kl0, f"distillation lowers KL ({kl0:.3f} -> {kl1:.3f})")

    exact = rbm.exact_log_z()
    ests = dk.estimate_logz(rbm, nade, methods=["importance", "bridge", "trivial"], n_samples=4000, burn_in=200, seed=9)
    by = {e.method: e for e in ests}
    for m in ("importance", "bridge"):
        e = by[m]
        check(abs(e.estimate - exact) <= 4 * e.se + 1e-9, f"{m} log Z {e.estimate:.4f} ± {e.se:.4f} vs exact {exact:.4f}")
    check(by["trivial"].estimate <= exact, "trivial bound is below log Z")
    perfect = dk.estimate_logz(rbm, None, methods=["importance"], n_samples=500, seed=1)[0]
    check(abs(perfect.estimate - exact) < 1e-9, "exact proposal gives exact log Z")

    path = os.path.join(tmp, "m.nade")
    nade.save(path)
    check(dk.Nade.load(path).log_prob(states[5]) == nade.log_prob(states[5]), "NADE save/load round trip")


def mixtures():
    truth = dk.Mixture([0.5, 0.5], [[-3.0], [3.0]], [[1.0], [1.0]])
    data = truth.sample(4000, seed=1)
    fit = dk.fit_mixture(data, 2, seed=2)
    means = sorted(m[0] for m in fit.means)
    check(abs(means[0] + 3) < 0.15 and abs(means[1] - 3) < 0.15, f"EM recovers means {means}")
    post = dk.distill_mog_posterior(200, seed=3, n_posterior=2000, n_draws=500)
    check(abs(sum(post.weights) - 1.0) < 1e-9 and len(post.means) == 3, "posterior predictive mixture is valid")


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        networks(tmp)
        rbm_and_nade(tmp)
        mixtures()
    print("all smoke checks passed")
