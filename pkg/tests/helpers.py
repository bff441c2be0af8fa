"""Shared test oracles and training-job helpers (importable from any test module)."""

import math
import time

import numpy as np

from groupcomm.densemath import Rng
from groupcomm.evalcli import train_run
from groupcomm.neuralnet import (
    PipelineConfig,
    cross_entropy_loss,
    init_pipeline,
    param_arrays,
    pipeline_backward,
    pipeline_forward,
    save_checkpoint,
)


def monolithic_forward(theta, obs_matrix, delta=None):
    """Straight-line reimplementation of the full forward math on stacked rows."""

    def mlp(p, x):
        h = x @ p.layers[0][0].T + p.layers[0][1]
        h = np.maximum(h, 0.0)
        return h @ p.layers[1][0].T + p.layers[1][1]

    x = np.asarray(obs_matrix)
    mu = mlp(theta.theta_q, x)
    kappa = mlp(theta.theta_k, x)
    feats = mlp(theta.theta_e, x)
    k_dim = theta.w_g.shape[1]
    scores = mu @ theta.w_g @ kappa.T / math.sqrt(k_dim)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    m = e / e.sum(axis=1, keepdims=True)
    if delta is not None:
        m = np.where(m >= delta, m, 0.0)
    fused = m @ feats
    u = np.concatenate([feats, fused], axis=1)
    return mlp(theta.theta_d, u), m


def fd_gradcheck(theta, obs, labels, eps=1e-5):
    """Max relative error of analytic gradients vs central finite differences."""
    result = pipeline_forward(theta, obs, mode="training")
    analytic = pipeline_backward(result.cache, theta, labels)

    def loss_now():
        r = pipeline_forward(theta, obs, mode="training")
        return cross_entropy_loss(r.logits, labels)

    worst = 0.0
    for arr, g in zip(param_arrays(theta), param_arrays(analytic)):
        flat, gflat = arr.ravel(), g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_now()
            flat[idx] = orig - eps
            down = loss_now()
            flat[idx] = orig
            fd = (up - down) / (2.0 * eps)
            rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-6)
            worst = max(worst, rel)
    return worst


def random_small_pipeline(rng: Rng, n_agents=None):
    """Random small configuration for gradient and equivalence checks."""
    n = n_agents if n_agents is not None else 1 + rng.randint(4)
    cfg = PipelineConfig(
        d_obs=4 + rng.randint(5),
        q_dim=1 + rng.randint(3),
        k_dim=2 + rng.randint(4),
        f_dim=3 + rng.randint(4),
        n_classes=2 + rng.randint(3),
        hidden=5 + rng.randint(5),
    )
    theta = init_pipeline(cfg, rng)
    obs = [rng.normal(cfg.d_obs) for _ in range(n)]
    labels = [rng.randint(cfg.n_classes) for _ in range(n)]
    return cfg, theta, obs, labels


def training_job(out_path: str, seed: int, policy: str = "when2com", q_dim: int = 4,
                 k_dim: int = 16, steps: int = 5000, n_episodes: int = 40000) -> tuple[str, float]:
    """Train one model (picklable worker for process pools); saves a checkpoint."""
    start = time.time()
    run = train_run(
        case="srms",
        n_episodes=n_episodes,
        steps=steps,
        seed=seed,
        policy=policy,
        q_dim=q_dim,
        k_dim=k_dim,
    )
    save_checkpoint(out_path, run.theta, run.config.pipeline)
    return out_path, time.time() - start
