"""Covariance matrix adaptation evolution strategy.

Standard (mu/mu_w, lambda) CMA-ES with rank-one and rank-mu covariance
updates and cumulative step-size control.  All decisions depend only on
fitness ranks and differences, so adding a constant to the objective
leaves the search trajectory unchanged for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CmaConfig:
    population: int = 50
    max_iterations: int = 3000
    max_evaluations: float = 1e8
    mean_learning_rate: float = 0.25
    tol_fun: float = 1e-3
    tol_fun_hist: float = 1e-12
    tol_x: float = 5e-4
    max_std: float = 4.0
    stagnation: int = 100


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    iterations: int
    evaluations: int
    termination: str
    history: list = field(default_factory=list)  # per-generation records


def cmaes_minimize(
    objective,
    x0,
    sigma0: float,
    config: CmaConfig | None = None,
    rng: np.random.Generator | None = None,
    map_fn=None,
    callback=None,
) -> CmaResult:
    """Minimize ``objective`` starting from ``x0`` with step size ``sigma0``.

    ``map_fn`` evaluates a list of candidate vectors and returns their
    fitnesses (swap in a process-pool map for parallel populations).
    Deterministic for a fixed seed.
    """
    cfg = config or CmaConfig()
    rng = rng or np.random.default_rng(0)
    if map_fn is None:
        map_fn = lambda f, xs: [f(x) for x in xs]

    m = np.asarray(x0, dtype=float).copy()
    n = len(m)
    lam = cfg.population
    mu = lam // 2
    raw = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / np.sum(weights**2)

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(
        1.0 - c_1,
        2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff),
    )
    chi_n = np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
    cm = cfg.mean_learning_rate

    sigma = float(sigma0)
    C = np.eye(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)
    B = np.eye(n)
    D = np.ones(n)

    best_x = m.copy()
    best_f = np.inf
    best_hist: list[float] = []
    evals = 0
    history = []
    termination = "max_iterations"

    it = 0
    for it in range(1, cfg.max_iterations + 1):
        Z = rng.standard_normal((lam, n))
        Y = Z @ (B * D).T  # y_i = B D z_i
        X = m + sigma * Y
        fitness = np.asarray(map_fn(objective, list(X)), dtype=float)
        evals += lam

        order = np.argsort(fitness, kind="stable")
        gen_best = float(fitness[order[0]])
        if gen_best < best_f:
            best_f = gen_best
            best_x = X[order[0]].copy()
        best_hist.append(best_f)

        y_w = weights @ Y[order[:mu]]
        m = m + cm * sigma * y_w

        # step-size path in the isotropic frame
        c_inv_half = B @ np.diag(1.0 / D) @ B.T
        p_sigma = (1.0 - c_sigma) * p_sigma + np.sqrt(
            c_sigma * (2.0 - c_sigma) * mu_eff
        ) * (c_inv_half @ y_w)
        sigma *= float(
            np.exp((c_sigma / d_sigma) * (np.linalg.norm(p_sigma) / chi_n - 1.0))
        )

        h_sig = float(
            np.linalg.norm(p_sigma)
            / np.sqrt(1.0 - (1.0 - c_sigma) ** (2.0 * it))
            < (1.4 + 2.0 / (n + 1.0)) * chi_n
        )
        p_c = (1.0 - c_c) * p_c + h_sig * np.sqrt(
            c_c * (2.0 - c_c) * mu_eff
        ) * y_w

        Ys = Y[order[:mu]]
        rank_mu = (weights[:, None] * Ys).T @ Ys
        C = (
            (1.0 - c_1 - c_mu) * C
            + c_1 * (np.outer(p_c, p_c) + (1.0 - h_sig) * c_c * (2.0 - c_c) * C)
            + c_mu * rank_mu
        )
        C = 0.5 * (C + C.T)
        eigval, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(eigval, 1e-20))

        history.append(
            {
                "iteration": it,
                "best_f": best_f,
                "gen_best": gen_best,
                "gen_median": float(np.median(fitness)),
                "sigma": sigma,
            }
        )
        if callback is not None:
            callback(history[-1])

        stds = sigma * np.sqrt(np.diag(C))
        span = 10 + int(np.ceil(30.0 * n / lam))
        recent = best_hist[-span:]
        gen_range = float(fitness.max() - fitness.min())
        if evals >= cfg.max_evaluations:
            termination = "max_evaluations"
            break
        if (
            len(best_hist) >= span
            and gen_range < cfg.tol_fun
            and max(recent) - min(recent) < cfg.tol_fun
        ):
            termination = "tol_fun"
            break
        if len(best_hist) >= span and max(recent) - min(recent) < cfg.tol_fun_hist:
            termination = "tol_fun_hist"
            break
        if np.all(stds < cfg.tol_x * sigma0) and np.all(
            np.abs(sigma * p_c) < cfg.tol_x * sigma0
        ):
            termination = "tol_x"
            break
        if float(stds.max()) > cfg.max_std:
            termination = "max_std"
            break
        if len(best_hist) > cfg.stagnation and (
            best_hist[-1] >= best_hist[-1 - cfg.stagnation]
        ):
            termination = "stagnation"
            break

    return CmaResult(
        best_x=best_x,
        best_f=best_f,
        iterations=it,
        evaluations=evals,
        termination=termination,
        history=history,
    )
