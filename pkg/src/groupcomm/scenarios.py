"""Synthetic multi-agent perception scenarios with communication ground truth.

Observation model
-----------------
Each observation is a vector of two halves:

* a *scene signature* (first ``scene_dim`` entries): one of the world's
  fixed orthonormal scene codes, identifying what the agent is looking at.
  Agents that view the same scene (a degraded agent and the peer holding its
  clean counterpart, or members of one triplet) share the signature up to a
  small perturbation; agents on distinct scenes hold distinct (orthogonal)
  codes.  The signature carries no class information whatsoever.
* *content* (remaining entries): the class prototype plus a small
  perturbation for a clean view, or pure noise for a degraded view.

Degradation therefore destroys everything a classifier could use (the
degraded vector is statistically independent of its label) while the scene
signature still identifies which peers hold relevant views.  That asymmetry
is what makes learned grouping possible at all: a requester's query can only
advertise *where it is looking*, never the label it cannot see.

Cases
-----
``srms``   five agents, one designated agent degraded with probability
           ``degrade_prob``; when degraded, one random other agent carries the
           clean counterpart (same signature, same label).
``mrms``   every agent degraded independently (capped at N//2 so that each
           degraded agent gets a distinct clean counterpart).
``mrmps``  degraded agents have only partial support: each clean agent
           overlaps a random degraded requester by a uniform fraction, and
           ground-truth supporters are those overlapping above the threshold.
``triplet`` 3k agents in k triplets; a triplet shares one class and one
           signature, with at most one degraded member per triplet whose
           supporters are its two peers.

Generation is pure given an Rng; parallel generation requires independent
seeded Rngs per worker.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .densemath import Rng

CASES = ("srms", "mrms", "mrmps", "triplet")

PERTURBATION_SIGMA = 0.05
MIN_PROTOTYPE_DISTANCE = 0.1
DEFAULT_AGENTS = {"srms": 5, "mrms": 5, "mrmps": 5, "triplet": 9}


@dataclass
class World:
    n_agents: int
    obs_dim: int
    n_classes: int
    case: str
    degrade_prob: float
    noise_sigma: float
    overlap_frac: float
    prototypes: np.ndarray  # (C, obs_dim), zero on the scene half, unit norm
    scene_dim: int
    scene_codes: np.ndarray  # (scene_dim, scene_dim) orthonormal scene codebook

    @property
    def content_dim(self) -> int:
        return self.obs_dim - self.scene_dim

    @property
    def n_scenes(self) -> int:
        return self.scene_codes.shape[0]


@dataclass
class Episode:
    """One synchronized frame of N observations with ground truth.

    ``needs_comm[i]`` is true exactly when agent i is degraded (its own view
    is insufficient).  ``gt_support[i]`` lists the agents holding informative
    views for i; it is empty whenever ``needs_comm[i]`` is false, and may also
    be empty for mrmps requesters with no sufficiently overlapping peer.
    """

    observations: np.ndarray  # (N, obs_dim)
    labels: list[int]
    degraded: list[bool]
    needs_comm: list[bool]
    gt_support: list[set[int]] = field(default_factory=list)


@dataclass
class Dataset:
    world: World
    episodes: list[Episode]
    train_idx: list[int]
    val_idx: list[int]
    test_idx: list[int]

    @property
    def train_episodes(self) -> list[Episode]:
        return [self.episodes[i] for i in self.train_idx]

    @property
    def val_episodes(self) -> list[Episode]:
        return [self.episodes[i] for i in self.val_idx]

    @property
    def test_episodes(self) -> list[Episode]:
        return [self.episodes[i] for i in self.test_idx]


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def _orthonormal_rows(rng: Rng, n: int, dim: int) -> np.ndarray:
    """n mutually orthonormal random directions via modified Gram-Schmidt."""
    if n > dim:
        raise ValueError(f"cannot draw {n} orthonormal vectors in {dim} dimensions")
    rows = rng.normal(n * dim).reshape(n, dim)
    for i in range(n):
        for _ in range(2):  # re-orthogonalize once for numerical hygiene
            for j in range(i):
                rows[i] -= np.dot(rows[i], rows[j]) * rows[j]
        rows[i] = _unit(rows[i])
    return rows


def make_world(
    case: str,
    n_agents: int | None = None,
    obs_dim: int = 32,
    n_classes: int = 10,
    degrade_prob: float = 0.5,
    noise_sigma: float = 1.0,
    overlap_frac: float = 0.5,
    rng: Rng | None = None,
) -> World:
    """Build a world: validated parameters plus rejection-sampled prototypes."""
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
    if n_agents is None:
        n_agents = DEFAULT_AGENTS[case]
    if case == "triplet" and n_agents % 3 != 0:
        raise ValueError(f"triplet case needs a multiple of 3 agents, got {n_agents}")
    if n_agents < 1:
        raise ValueError("need at least one agent")
    if obs_dim < 4 or obs_dim % 2 != 0:
        raise ValueError(f"obs_dim must be an even integer >= 4, got {obs_dim}")
    if not 0.0 <= degrade_prob <= 1.0:
        raise ValueError(f"degrade_prob must lie in [0, 1], got {degrade_prob}")
    if not 0.0 <= overlap_frac <= 1.0:
        raise ValueError(f"overlap_frac must lie in [0, 1], got {overlap_frac}")
    if noise_sigma <= 0.0:
        raise ValueError(f"noise_sigma must be positive, got {noise_sigma}")
    scene_dim = obs_dim // 2
    if n_agents > scene_dim:
        raise ValueError(
            f"{n_agents} agents need {n_agents} orthogonal scene signatures "
            f"but only {scene_dim} scene dimensions are available"
        )
    if rng is None:
        rng = Rng(0)
    content_dim = obs_dim - scene_dim
    # Rejection-sample unit prototypes until pairwise separated.
    for _ in range(1000):
        protos = rng.normal(n_classes * content_dim).reshape(n_classes, content_dim)
        protos = np.stack([_unit(p) for p in protos])
        dists = [
            float(np.linalg.norm(protos[a] - protos[b]))
            for a in range(n_classes)
            for b in range(a + 1, n_classes)
        ]
        if not dists or min(dists) > MIN_PROTOTYPE_DISTANCE:
            break
    else:
        raise RuntimeError("prototype rejection sampling failed to separate classes")
    full = np.zeros((n_classes, obs_dim), dtype=np.float64)
    full[:, scene_dim:] = protos
    # The world's scenes form a fixed orthonormal codebook; each episode views
    # a subset of them.
    scene_codes = _orthonormal_rows(rng, scene_dim, scene_dim)
    return World(
        n_agents=n_agents,
        obs_dim=obs_dim,
        n_classes=n_classes,
        case=case,
        degrade_prob=degrade_prob,
        noise_sigma=noise_sigma,
        overlap_frac=overlap_frac,
        prototypes=full,
        scene_dim=scene_dim,
        scene_codes=scene_codes,
    )


def _episode_signatures(world: World, rng: Rng, n_scenes: int) -> np.ndarray:
    """Distinct (hence orthogonal) scene codes for this episode's viewpoints."""
    picks = rng.permutation(world.n_scenes)[:n_scenes]
    return world.scene_codes[picks].copy()


def _clean_obs(world: World, signature: np.ndarray, label: int, rng: Rng) -> np.ndarray:
    scene = signature + PERTURBATION_SIGMA * rng.normal(world.scene_dim)
    content = (
        world.prototypes[label, world.scene_dim :]
        + PERTURBATION_SIGMA * rng.normal(world.content_dim)
    )
    return np.concatenate([scene, content])


def _degraded_obs(world: World, signature: np.ndarray, rng: Rng) -> np.ndarray:
    scene = signature + PERTURBATION_SIGMA * rng.normal(world.scene_dim)
    content = world.noise_sigma * rng.normal(world.content_dim)
    return np.concatenate([scene, content])


def _mixed_obs(
    world: World, signature: np.ndarray, label_mix: np.ndarray, rng: Rng
) -> np.ndarray:
    scene = signature + PERTURBATION_SIGMA * rng.normal(world.scene_dim)
    content = label_mix + PERTURBATION_SIGMA * rng.normal(world.content_dim)
    return np.concatenate([scene, content])


def _generate_srms(world: World, rng: Rng) -> Episode:
    n = world.n_agents
    labels = [rng.randint(world.n_classes) for _ in range(n)]
    signatures = _episode_signatures(world, rng, n)
    designated = rng.randint(n)
    degraded = [False] * n
    gt_support: list[set[int]] = [set() for _ in range(n)]
    supporter = None
    if rng.uniform_scalar() < world.degrade_prob:
        degraded[designated] = True
        off = rng.randint(n - 1)
        supporter = off if off < designated else off + 1
        labels[supporter] = labels[designated]
        signatures[supporter] = signatures[designated]
        gt_support[designated] = {supporter}
    obs = np.empty((n, world.obs_dim), dtype=np.float64)
    for i in range(n):
        if degraded[i]:
            obs[i] = _degraded_obs(world, signatures[i], rng)
        else:
            obs[i] = _clean_obs(world, signatures[i], labels[i], rng)
    return Episode(obs, labels, degraded, list(degraded), gt_support)


def _generate_mrms(world: World, rng: Rng) -> Episode:
    n = world.n_agents
    labels = [rng.randint(world.n_classes) for _ in range(n)]
    signatures = _episode_signatures(world, rng, n)
    degraded = [rng.uniform_scalar() < world.degrade_prob for _ in range(n)]
    # Each degraded agent needs a distinct clean counterpart, so at most
    # N//2 agents may stay degraded; surplus picks are cleared at random.
    while 2 * sum(degraded) > n:
        deg_list = [i for i, d in enumerate(degraded) if d]
        degraded[deg_list[rng.randint(len(deg_list))]] = False
    deg_list = [i for i, d in enumerate(degraded) if d]
    clean_list = [i for i, d in enumerate(degraded) if not d]
    perm = rng.permutation(len(clean_list))
    gt_support: list[set[int]] = [set() for _ in range(n)]
    for t, r in enumerate(deg_list):
        s = clean_list[perm[t]]
        labels[s] = labels[r]
        signatures[s] = signatures[r]
        gt_support[r] = {s}
    obs = np.empty((n, world.obs_dim), dtype=np.float64)
    for i in range(n):
        if degraded[i]:
            obs[i] = _degraded_obs(world, signatures[i], rng)
        else:
            obs[i] = _clean_obs(world, signatures[i], labels[i], rng)
    return Episode(obs, labels, degraded, list(degraded), gt_support)


def _generate_mrmps(world: World, rng: Rng) -> Episode:
    n = world.n_agents
    labels = [rng.randint(world.n_classes) for _ in range(n)]
    signatures = _episode_signatures(world, rng, n)
    degraded = [rng.uniform_scalar() < world.degrade_prob for _ in range(n)]
    deg_list = [i for i, d in enumerate(degraded) if d]
    gt_support: list[set[int]] = [set() for _ in range(n)]
    content = world.prototypes[:, world.scene_dim :]
    obs = np.empty((n, world.obs_dim), dtype=np.float64)
    for i in range(n):
        if degraded[i]:
            obs[i] = _degraded_obs(world, signatures[i], rng)
        elif deg_list:
            r = deg_list[rng.randint(len(deg_list))]
            overlap = rng.uniform_scalar()
            # Overlap is an energy fraction: the supporter's signature leans
            # toward the requester's scene by sqrt(overlap).
            mixed_sig = _unit(
                math.sqrt(overlap) * signatures[r] + math.sqrt(1.0 - overlap) * signatures[i]
            )
            mix = overlap * content[labels[r]] + (1.0 - overlap) * content[labels[i]]
            if overlap > 0.5:
                labels[i] = labels[r]
            if overlap > world.overlap_frac:
                gt_support[r].add(i)
            obs[i] = _mixed_obs(world, mixed_sig, mix, rng)
        else:
            obs[i] = _clean_obs(world, signatures[i], labels[i], rng)
    return Episode(obs, labels, degraded, list(degraded), gt_support)


def _generate_triplet(world: World, rng: Rng) -> Episode:
    n = world.n_agents
    k = n // 3
    classes = [rng.randint(world.n_classes) for _ in range(k)]
    signatures = _episode_signatures(world, rng, k)
    perm = rng.permutation(n)
    triplet_of = [0] * n
    members: list[list[int]] = []
    for t in range(k):
        group = [perm[3 * t], perm[3 * t + 1], perm[3 * t + 2]]
        members.append(group)
        for a in group:
            triplet_of[a] = t
    labels = [classes[triplet_of[i]] for i in range(n)]
    degraded = [False] * n
    gt_support: list[set[int]] = [set() for _ in range(n)]
    for t in range(k):
        if rng.uniform_scalar() < world.degrade_prob:
            victim = members[t][rng.randint(3)]
            degraded[victim] = True
            gt_support[victim] = set(members[t]) - {victim}
    obs = np.empty((n, world.obs_dim), dtype=np.float64)
    for i in range(n):
        sig = signatures[triplet_of[i]]
        if degraded[i]:
            obs[i] = _degraded_obs(world, sig, rng)
        else:
            obs[i] = _clean_obs(world, sig, labels[i], rng)
    return Episode(obs, labels, degraded, list(degraded), gt_support)


_GENERATORS = {
    "srms": _generate_srms,
    "mrms": _generate_mrms,
    "mrmps": _generate_mrmps,
    "triplet": _generate_triplet,
}


def generate_episode(world: World, rng: Rng) -> Episode:
    """Draw one episode under the world's case-specific construction."""
    try:
        gen = _GENERATORS[world.case]
    except KeyError:
        raise ValueError(f"unknown case {world.case!r}") from None
    return gen(world, rng)


def generate_dataset(world: World, n_episodes: int, seed: int) -> Dataset:
    """Seeded episode list with a deterministic, disjoint 80/10/10 split."""
    if n_episodes < 10:
        raise ValueError(f"need at least 10 episodes for a split, got {n_episodes}")
    rng = Rng(seed)
    episodes = [generate_episode(world, rng) for _ in range(n_episodes)]
    n_train = int(0.8 * n_episodes)
    n_val = int(0.1 * n_episodes)
    train_idx = list(range(0, n_train))
    val_idx = list(range(n_train, n_train + n_val))
    test_idx = list(range(n_train + n_val, n_episodes))
    return Dataset(world, episodes, train_idx, val_idx, test_idx)


def save_dataset(path: str, dataset: Dataset) -> None:
    """Structured-text export: world parameters plus per-episode arrays."""
    w = dataset.world
    doc = {
        "world": {
            "case": w.case,
            "n_agents": w.n_agents,
            "obs_dim": w.obs_dim,
            "scene_dim": w.scene_dim,
            "n_classes": w.n_classes,
            "degrade_prob": w.degrade_prob,
            "noise_sigma": w.noise_sigma,
            "overlap_frac": w.overlap_frac,
            "prototypes": w.prototypes.tolist(),
            "scene_codes": w.scene_codes.tolist(),
        },
        "episodes": [
            {
                "observations": ep.observations.tolist(),
                "labels": list(ep.labels),
                "degraded": list(ep.degraded),
                "needs_comm": list(ep.needs_comm),
                "gt_support": [sorted(s) for s in ep.gt_support],
            }
            for ep in dataset.episodes
        ],
        "splits": {
            "train": dataset.train_idx,
            "val": dataset.val_idx,
            "test": dataset.test_idx,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    w = doc["world"]
    world = World(
        n_agents=w["n_agents"],
        obs_dim=w["obs_dim"],
        n_classes=w["n_classes"],
        case=w["case"],
        degrade_prob=w["degrade_prob"],
        noise_sigma=w["noise_sigma"],
        overlap_frac=w["overlap_frac"],
        prototypes=np.asarray(w["prototypes"], dtype=np.float64),
        scene_dim=w["scene_dim"],
        scene_codes=np.asarray(w["scene_codes"], dtype=np.float64),
    )
    episodes = [
        Episode(
            observations=np.asarray(e["observations"], dtype=np.float64),
            labels=list(e["labels"]),
            degraded=list(e["degraded"]),
            needs_comm=list(e["needs_comm"]),
            gt_support=[set(s) for s in e["gt_support"]],
        )
        for e in doc["episodes"]
    ]
    return Dataset(
        world,
        episodes,
        list(doc["splits"]["train"]),
        list(doc["splits"]["val"]),
        list(doc["splits"]["test"]),
    )
