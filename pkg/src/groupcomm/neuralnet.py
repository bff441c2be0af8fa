"""Trainable pipeline: query/key generators, encoder, decoder, and exact backprop.

Four small fully-connected heads share each agent's observation: a query
generator (obs -> Q), key generator (obs -> K), feature encoder (obs -> F),
and a class decoder on the concatenation of the local feature with the fused
feature (2F -> C logits).  A learnable Q x K bilinear form scores query/key
pairs; row-softmax over scores yields the matching matrix used for fusion.

Training fuses with the full soft matching rows so every agent sees every
feature (gradients flow through the softmax and the bilinear scores);
inference fuses with delta-pruned rows and is never differentiated.

Gradients are derived by hand and validated against central finite
differences; see tests.  All per-agent computations run through the same
single-vector primitives as the decentralized simulator, so centralized and
distributed execution agree bit-for-bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .commgraph import build_matching_matrix, fuse, prune
from .densemath import Rng, relu, relu_grad, softmax_row

CHECKPOINT_MAGIC = b"GRPCOMM1"
CHECKPOINT_VERSION = 1

ATTENTION_POLICIES = ("when2com", "forced_top1", "fully_connected")
FIXED_ROW_POLICIES = ("nocom", "randcom", "catall")


@dataclass
class MlpParams:
    """Ordered (weight, bias) pairs; rectifier between layers, none after the last."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


@dataclass
class PipelineConfig:
    d_obs: int = 32
    q_dim: int = 4
    k_dim: int = 16
    f_dim: int = 32
    n_classes: int = 10
    hidden: int = 64


@dataclass
class PipelineParams:
    """All learnable parameters: four MLP heads plus the bilinear matching form."""

    theta_q: MlpParams
    theta_k: MlpParams
    theta_e: MlpParams
    theta_d: MlpParams
    w_g: np.ndarray


# Gradient trees are shape-congruent with the parameters they differentiate.
Gradients = PipelineParams


def init_mlp(sizes: list[int], rng: Rng) -> MlpParams:
    """He-scaled weights (Normal with variance 2/fan_in), zero biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(fan_out * fan_in).reshape(fan_out, fan_in) * math.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out, dtype=np.float64)))
    return MlpParams(layers)


def init_pipeline(config: PipelineConfig, rng: Rng) -> PipelineParams:
    c = config
    theta_q = init_mlp([c.d_obs, c.hidden, c.q_dim], rng)
    theta_k = init_mlp([c.d_obs, c.hidden, c.k_dim], rng)
    theta_e = init_mlp([c.d_obs, c.hidden, c.f_dim], rng)
    theta_d = init_mlp([2 * c.f_dim, c.hidden, c.n_classes], rng)
    # Bilinear form scaled to variance 1/sqrt(Q*K).
    w_g = rng.normal(c.q_dim * c.k_dim).reshape(c.q_dim, c.k_dim) * (c.q_dim * c.k_dim) ** -0.25
    return PipelineParams(theta_q, theta_k, theta_e, theta_d, w_g)


def param_arrays(theta: PipelineParams) -> list[np.ndarray]:
    """Live references to every parameter array, in fixed declaration order."""
    out = []
    for head in (theta.theta_q, theta.theta_k, theta.theta_e, theta.theta_d):
        for w, b in head.layers:
            out.append(w)
            out.append(b)
    out.append(theta.w_g)
    return out


def clone_params(theta: PipelineParams) -> PipelineParams:
    return PipelineParams(
        theta_q=MlpParams([(w.copy(), b.copy()) for w, b in theta.theta_q.layers]),
        theta_k=MlpParams([(w.copy(), b.copy()) for w, b in theta.theta_k.layers]),
        theta_e=MlpParams([(w.copy(), b.copy()) for w, b in theta.theta_e.layers]),
        theta_d=MlpParams([(w.copy(), b.copy()) for w, b in theta.theta_d.layers]),
        w_g=theta.w_g.copy(),
    )


def zeros_like_params(theta: PipelineParams) -> Gradients:
    return PipelineParams(
        theta_q=MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in theta.theta_q.layers]),
        theta_k=MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in theta.theta_k.layers]),
        theta_e=MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in theta.theta_e.layers]),
        theta_d=MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in theta.theta_d.layers]),
        w_g=np.zeros_like(theta.w_g),
    )


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Affine-rectifier chain on a single vector; cache retains pre-activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.in_dim:
        raise ValueError(f"input shape {x.shape} does not match first layer ({p.in_dim})")
    inputs, pre = [], []
    h = x
    last = len(p.layers) - 1
    for idx, (w, b) in enumerate(p.layers):
        inputs.append(h)
        z = w @ h + b
        pre.append(z)
        h = z if idx == last else relu(z)
    return h, MlpCache(inputs, pre)


def mlp_backward(
    p: MlpParams, cache: MlpCache, dout: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradients of all layers plus the derivative w.r.t. the input vector."""
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(p.layers)  # type: ignore[list-item]
    dz = np.asarray(dout, dtype=np.float64)
    for idx in range(len(p.layers) - 1, -1, -1):
        w, _ = p.layers[idx]
        if idx < len(p.layers) - 1:
            dz = dz * relu_grad(cache.pre[idx])
        grads[idx] = (np.outer(dz, cache.inputs[idx]), dz.copy())
        dz = w.T @ dz
    return grads, dz


@dataclass
class ForwardCache:
    mode: str
    observations: list[np.ndarray]
    queries: list[np.ndarray] | None
    keys: list[np.ndarray] | None
    features: list[np.ndarray]
    fused: list[np.ndarray]
    m: np.ndarray
    q_caches: list[MlpCache] | None
    k_caches: list[MlpCache] | None
    e_caches: list[MlpCache]
    d_caches: list[MlpCache]
    logits: list[np.ndarray]
    attention_path: bool


@dataclass
class ForwardResult:
    logits: list[np.ndarray]
    cache: ForwardCache
    m: np.ndarray
    m_bar: np.ndarray | None


def decode_agent(theta: PipelineParams, feature: np.ndarray, fused: np.ndarray):
    """Class logits for one agent from its local and fused features."""
    u = np.concatenate([feature, fused])
    return mlp_forward(theta.theta_d, u)


def pipeline_forward(
    theta: PipelineParams,
    observations: list[np.ndarray],
    mode: str = "training",
    delta: float = 0.0,
    fixed_rows: np.ndarray | None = None,
) -> ForwardResult:
    """Full per-episode forward pass.

    ``training`` fuses with the soft matching rows; ``inference`` prunes the
    rows at ``delta`` first.  With delta = 0 the two modes agree bit-exactly
    (pruning keeps every positive entry).  ``fixed_rows`` substitutes a
    constant matching matrix (baseline policies); the attention heads are then
    neither evaluated nor differentiated.
    """
    if mode not in ("training", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(observations)
    if n < 1:
        raise ValueError("need at least one agent")
    obs = [np.asarray(x, dtype=np.float64) for x in observations]

    features, e_caches = [], []
    for x in obs:
        f, cache = mlp_forward(theta.theta_e, x)
        features.append(f)
        e_caches.append(cache)

    if fixed_rows is None:
        queries, q_caches, keys, k_caches = [], [], [], []
        for x in obs:
            mu, qc = mlp_forward(theta.theta_q, x)
            queries.append(mu)
            q_caches.append(qc)
            kappa, kc = mlp_forward(theta.theta_k, x)
            keys.append(kappa)
            k_caches.append(kc)
        m = build_matching_matrix(queries, keys, theta.w_g)
        attention_path = True
    else:
        fixed_rows = np.asarray(fixed_rows, dtype=np.float64)
        if fixed_rows.shape != (n, n):
            raise ValueError(f"fixed_rows shape {fixed_rows.shape} != ({n}, {n})")
        queries = keys = q_caches = k_caches = None
        m = fixed_rows
        attention_path = False

    m_bar = prune(m, delta) if mode == "inference" else None
    rows = m_bar if m_bar is not None else m

    fused, logits, d_caches = [], [], []
    for i in range(n):
        g = fuse(rows[i], features)
        fused.append(g)
        z, dc = decode_agent(theta, features[i], g)
        logits.append(z)
        d_caches.append(dc)

    cache = ForwardCache(
        mode=mode,
        observations=obs,
        queries=queries,
        keys=keys,
        features=features,
        fused=fused,
        m=m,
        q_caches=q_caches,
        k_caches=k_caches,
        e_caches=e_caches,
        d_caches=d_caches,
        logits=logits,
        attention_path=attention_path,
    )
    return ForwardResult(logits=logits, cache=cache, m=m, m_bar=m_bar)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z)
    return shifted - math.log(np.sum(np.exp(shifted)))


def cross_entropy_loss(logits: list[np.ndarray], labels: list[int]) -> float:
    """Mean over agents of -log softmax(logits)[label]."""
    if len(logits) != len(labels):
        raise ValueError(f"{len(logits)} logit vectors vs {len(labels)} labels")
    total = 0.0
    for z, y in zip(logits, labels):
        z = np.asarray(z, dtype=np.float64)
        if not 0 <= y < z.shape[0]:
            raise ValueError(f"label {y} out of range [0, {z.shape[0]})")
        total += -_log_softmax(z)[y]
    return total / len(logits)


def pipeline_backward(
    cache: ForwardCache, theta: PipelineParams, labels: list[int]
) -> Gradients:
    """Exact gradients of the mean cross-entropy w.r.t. every parameter.

    Only valid for a training-mode forward: inference-time pruning is a hard
    gate and is never differentiated.
    """
    if cache.mode != "training":
        raise ValueError("backward requires a training-mode forward cache")
    n = len(cache.observations)
    if len(labels) != n:
        raise ValueError(f"cache holds {n} agents but got {len(labels)} labels")

    grads = zeros_like_params(theta)
    f_dim = cache.features[0].shape[0]
    sqrt_k = math.sqrt(theta.w_g.shape[1])

    d_fused = []
    df_total = [np.zeros(f_dim) for _ in range(n)]
    for i in range(n):
        z = cache.logits[i]
        p = softmax_row(z)
        dlogits = p.copy()
        dlogits[labels[i]] -= 1.0
        dlogits /= n
        head_grads, du = mlp_backward(theta.theta_d, cache.d_caches[i], dlogits)
        for l, (dw, db) in enumerate(head_grads):
            grads.theta_d.layers[l][0][:] += dw
            grads.theta_d.layers[l][1][:] += db
        df_total[i] += du[:f_dim]
        d_fused.append(du[f_dim:])

    # Fusion: fused_i = sum_j m[i, j] f_j.
    dm = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            dm[i, j] = float(np.dot(d_fused[i], cache.features[j]))
    for j in range(n):
        for i in range(n):
            df_total[j] += cache.m[i, j] * d_fused[i]

    if cache.attention_path:
        # Row-softmax jacobian: ds = m * (dm - (dm . m)) per row.
        ds = np.empty((n, n))
        for i in range(n):
            row = cache.m[i]
            dot = float(np.dot(dm[i], row))
            ds[i] = row * (dm[i] - dot)

        d_mu = [np.zeros_like(cache.queries[0]) for _ in range(n)]
        d_kappa = [np.zeros_like(cache.keys[0]) for _ in range(n)]
        for i in range(n):
            for j in range(n):
                coeff = ds[i, j] / sqrt_k
                if coeff == 0.0:
                    continue
                grads.w_g += coeff * np.outer(cache.queries[i], cache.keys[j])
                d_mu[i] += coeff * (theta.w_g @ cache.keys[j])
                d_kappa[j] += coeff * (theta.w_g.T @ cache.queries[i])

        for i in range(n):
            head_grads, _ = mlp_backward(theta.theta_q, cache.q_caches[i], d_mu[i])
            for l, (dw, db) in enumerate(head_grads):
                grads.theta_q.layers[l][0][:] += dw
                grads.theta_q.layers[l][1][:] += db
            head_grads, _ = mlp_backward(theta.theta_k, cache.k_caches[i], d_kappa[i])
            for l, (dw, db) in enumerate(head_grads):
                grads.theta_k.layers[l][0][:] += dw
                grads.theta_k.layers[l][1][:] += db

    for i in range(n):
        head_grads, _ = mlp_backward(theta.theta_e, cache.e_caches[i], df_total[i])
        for l, (dw, db) in enumerate(head_grads):
            grads.theta_e.layers[l][0][:] += dw
            grads.theta_e.layers[l][1][:] += db

    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, theta: PipelineParams) -> "AdamState":
        arrays = param_arrays(theta)
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], t=0)


def adam_step(
    theta: PipelineParams,
    grads: Gradients,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[PipelineParams, AdamState]:
    """One bias-corrected Adam update; returns fresh parameters and state."""
    t = state.t + 1
    new_theta = clone_params(theta)
    new_m, new_v = [], []
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for a, g, m, v in zip(param_arrays(new_theta), param_arrays(grads), state.m, state.v):
        m_next = beta1 * m + (1.0 - beta1) * g
        v_next = beta2 * v + (1.0 - beta2) * g * g
        a -= lr * (m_next / bc1) / (np.sqrt(v_next / bc2) + eps)
        new_m.append(m_next)
        new_v.append(v_next)
    return new_theta, AdamState(m=new_m, v=new_v, t=t)


@dataclass
class TrainConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    policy: str = "when2com"
    log_every: int = 1
    eval_every: int = 500


def _fixed_policy_rows(policy: str, n: int, rng: Rng) -> np.ndarray:
    """Constant fusion rows for the non-attention baseline policies."""
    if policy == "nocom":
        return np.eye(n)
    if policy == "catall":
        return np.full((n, n), 1.0 / n)
    if policy == "randcom":
        rows = np.zeros((n, n))
        for i in range(n):
            j = rng.randint(n - 1)
            if j >= i:
                j += 1
            rows[i, j] = 1.0
        return rows
    raise ValueError(f"unknown fixed-row policy {policy!r}")


def episode_loss_and_grads(
    theta: PipelineParams, episode, policy: str, rng: Rng
) -> tuple[float, Gradients]:
    """Training-mode loss and exact gradients for one episode."""
    observations = list(episode.observations)
    if policy in ATTENTION_POLICIES:
        result = pipeline_forward(theta, observations, mode="training")
    elif policy in FIXED_ROW_POLICIES:
        rows = _fixed_policy_rows(policy, len(observations), rng)
        result = pipeline_forward(theta, observations, mode="training", fixed_rows=rows)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    loss = cross_entropy_loss(result.logits, list(episode.labels))
    grads = pipeline_backward(result.cache, theta, list(episode.labels))
    return loss, grads


def _accumulate(total: Gradients, part: Gradients, scale: float) -> None:
    for t, p in zip(param_arrays(total), param_arrays(part)):
        t += scale * p


def evaluate_task_accuracy(
    theta: PipelineParams, episodes, delta: float, policy: str = "when2com", rng: Rng | None = None
) -> float:
    """Fraction of (episode, agent) predictions matching labels at inference."""
    correct = 0
    total = 0
    for ep in episodes:
        observations = list(ep.observations)
        if policy in ATTENTION_POLICIES and policy != "forced_top1":
            eff_delta = 0.0 if policy == "fully_connected" else delta
            result = pipeline_forward(theta, observations, mode="inference", delta=eff_delta)
        elif policy == "forced_top1":
            soft = pipeline_forward(theta, observations, mode="training")
            n = len(observations)
            rows = np.zeros((n, n))
            for i in range(n):
                masked = soft.m[i].copy()
                masked[i] = -np.inf
                rows[i, int(np.argmax(masked))] = 1.0
            result = pipeline_forward(theta, observations, mode="inference", delta=0.0, fixed_rows=rows)
        else:
            local_rng = rng if rng is not None else Rng(0)
            rows = _fixed_policy_rows(policy, len(observations), local_rng)
            result = pipeline_forward(theta, observations, mode="inference", delta=0.0, fixed_rows=rows)
        for z, y in zip(result.logits, ep.labels):
            correct += int(np.argmax(z) == y)
            total += 1
    return correct / total if total else 0.0


def train(config: TrainConfig, dataset, rng: Rng) -> tuple[PipelineParams, list[dict]]:
    """Minibatch Adam loop over training episodes.

    The log records the batch loss at every ``log_every`` steps and validation
    task accuracy every ``eval_every`` steps.  The run is single-threaded and
    bit-reproducible for a fixed seed.
    """
    train_eps = list(dataset.train_episodes)
    if not train_eps:
        raise ValueError("training dataset is empty")
    val_eps = list(dataset.val_episodes)

    theta = init_pipeline(config.pipeline, rng)
    state = AdamState.for_params(theta)
    log: list[dict] = []
    n_train = len(train_eps)

    for step in range(1, config.steps + 1):
        batch = [train_eps[rng.randint(n_train)] for _ in range(config.batch_size)]
        total = zeros_like_params(theta)
        loss_sum = 0.0
        for ep in batch:
            loss, grads = episode_loss_and_grads(theta, ep, config.policy, rng)
            loss_sum += loss
            _accumulate(total, grads, 1.0 / config.batch_size)
        theta, state = adam_step(
            theta, total, state, config.lr, config.beta1, config.beta2, config.eps
        )
        if config.log_every and step % config.log_every == 0:
            log.append({"step": step, "loss": loss_sum / config.batch_size})
        if config.eval_every and val_eps and step % config.eval_every == 0:
            n_agents = len(val_eps[0].labels)
            acc = evaluate_task_accuracy(
                theta, val_eps, delta=1.0 / n_agents, policy=config.policy, rng=Rng(rng.seed ^ step)
            )
            log.append({"step": step, "val_task_acc": acc})
    return theta, log


def save_checkpoint(path: str, theta: PipelineParams, config: PipelineConfig) -> None:
    """Flat binary layout: magic, version, dims, then tensors in declaration order.

    Tensors are little-endian float64, row-major; shapes are implied by the
    dimension tuple (all heads are two-layer).
    """
    header = struct.pack(
        "<8sI6I",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        config.d_obs,
        config.q_dim,
        config.k_dim,
        config.f_dim,
        config.n_classes,
        config.hidden,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in param_arrays(theta):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[PipelineParams, PipelineConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<8sI6I")
    magic, version, d_obs, q, k, f, c, hidden = struct.unpack("<8sI6I", blob[:head_size])
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = PipelineConfig(d_obs=d_obs, q_dim=q, k_dim=k, f_dim=f, n_classes=c, hidden=hidden)
    shapes = []
    for sizes in ([d_obs, hidden, q], [d_obs, hidden, k], [d_obs, hidden, f], [2 * f, hidden, c]):
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes.append((fan_out, fan_in))
            shapes.append((fan_out,))
    shapes.append((q, k))
    offset = head_size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays.append(np.array(arr, dtype=np.float64))
        offset += count * 8
    if offset != len(blob):
        raise ValueError("checkpoint size does not match its dimension header")
    it = iter(arrays)
    heads = []
    for _ in range(4):
        heads.append(MlpParams([(next(it), next(it)), (next(it), next(it))]))
    w_g = next(it)
    return PipelineParams(heads[0], heads[1], heads[2], heads[3], w_g), config
