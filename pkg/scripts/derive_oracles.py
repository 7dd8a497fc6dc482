"""Independent reference values frozen into the test suite.

Uses only numpy/scipy, never the package, so the tests compare two separate
computations.  Run ``python scripts/derive_oracles.py`` to regenerate.
"""

import numpy as np
from scipy import optimize


def softmax_rows(theta, x, n_labels):
    """Likelihood for a batch of flattened parameter vectors ``(n, d)``."""
    z = np.append(x, 1.0)
    eta = theta.reshape(theta.shape[0], n_labels, z.size) @ z
    eta -= eta.max(axis=1, keepdims=True)
    p = np.exp(eta)
    return p / p.sum(axis=1, keepdims=True)


def mc_predicted(mean, cov, x, n_labels, n=10**6, seed=12345):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov)
    theta = mean + rng.standard_normal((n, mean.size)) @ chol.T
    return softmax_rows(theta, x, n_labels).mean(axis=0)


def log_joint(theta, mean, cov, data, n_labels):
    diff = theta - mean
    val = -0.5 * diff @ np.linalg.solve(cov, diff)
    for x, o in data:
        val += np.log(softmax_rows(theta[None], x, n_labels)[0, o])
    return val


def grad_log_joint(theta, mean, cov, data, n_labels):
    g = -np.linalg.solve(cov, theta - mean)
    for x, o in data:
        z = np.append(x, 1.0)
        p = softmax_rows(theta[None], x, n_labels)[0]
        r = -p
        r[o] += 1.0
        g += np.outer(r, z).reshape(-1)
    return g


def gradient_ascent(mean, cov, data, n_labels, steps=10**5, lr=1e-3):
    theta = mean.copy()
    for _ in range(steps):
        theta = theta + lr * grad_log_joint(theta, mean, cov, data, n_labels)
    return theta


def joint_map(mean, cov, data, n_labels):
    res = optimize.minimize(
        lambda t: -log_joint(t, mean, cov, data, n_labels),
        mean,
        jac=lambda t: -grad_log_joint(t, mean, cov, data, n_labels),
        method="BFGS",
        options={"gtol": 1e-12, "maxiter": 10_000},
    )
    return res.x


if __name__ == "__main__":
    np.set_printoptions(precision=17)
    # predicted observation, C=1, F=2, unit covariance
    mean = np.array([0.3, -0.2, -0.4, 0.1])
    print("mc_predicted", repr(mc_predicted(mean, np.eye(4), np.array([0.7]), 2)))
    # MAP by plain gradient ascent, C=1, F=2, standard normal prior
    print("ascent_map", repr(gradient_ascent(np.zeros(4), np.eye(4), [(np.array([1.5]), 0)], 2)))
    # two observations at once, C=1, F=2, standard normal prior
    data = [(np.array([1.0]), 0), (np.array([-0.5]), 1)]
    print("joint_map", repr(joint_map(np.zeros(4), np.eye(4), data, 2)))
