"""Token-factorized candidate scorer and the distributions built on it.

A two-layer tanh network reads ``task tag ⊕ features ⊕ prefix encoding`` and
emits logits over the whole vocabulary. An action's log-probability is the sum
of its token log-probabilities; candidate distributions softmax the
length-normalized scores. Everything is batched over observations, and
``Scorer.backward`` gives exact gradients by hand-written reverse accumulation.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .observation import (
    VOCAB,
    CandidateAction,
    CandidateSet,
    ObservationBundle,
    candidate_set,
    tokenize,
)

OBS_WIDTH = 13  # task tag (3) + features (10)
HIDDEN = 32
POSITION_SCALE = 0.25

KINDS = ("sub", "joint", "joint_topk", "full_topk")


class NumericalError(FloatingPointError):
    pass


class DistributionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


@dataclass
class PolicyParams:
    """Flat parameter vector with named views into it."""

    vector: np.ndarray
    n_in: int = OBS_WIDTH + len(VOCAB) + 1
    hidden: int = HIDDEN
    vocab: int = len(VOCAB)

    def __post_init__(self):
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.count(self.n_in, self.hidden, self.vocab),):
            raise ValueError("parameter vector has the wrong length")

    @staticmethod
    def count(n_in, hidden, vocab) -> int:
        return n_in * hidden + hidden + hidden * vocab + vocab

    @property
    def parameter_count(self) -> int:
        return self.vector.shape[0]

    def _slices(self):
        a = self.n_in * self.hidden
        b = a + self.hidden
        c = b + self.hidden * self.vocab
        return a, b, c

    @property
    def W1(self):
        a, _, _ = self._slices()
        return self.vector[:a].reshape(self.n_in, self.hidden)

    @property
    def b1(self):
        a, b, _ = self._slices()
        return self.vector[a:b]

    @property
    def W2(self):
        _, b, c = self._slices()
        return self.vector[b:c].reshape(self.hidden, self.vocab)

    @property
    def b2(self):
        _, _, c = self._slices()
        return self.vector[c:]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vector.copy(), self.n_in, self.hidden, self.vocab)

    @classmethod
    def zeros(cls) -> "PolicyParams":
        n_in, h, v = OBS_WIDTH + len(VOCAB) + 1, HIDDEN, len(VOCAB)
        return cls(np.zeros(cls.count(n_in, h, v)))

    @classmethod
    def init(cls, rng: np.random.Generator, init_scale: float = 0.1) -> "PolicyParams":
        """Glorot-ish hidden layer, output layer shrunk by ``init_scale``."""
        p = cls.zeros()
        p.W1[...] = rng.standard_normal(p.W1.shape) / np.sqrt(p.n_in)
        p.W2[...] = init_scale * rng.standard_normal(p.W2.shape) / np.sqrt(p.hidden)
        return p


# ---------------------------------------------------------------------------
# prefixes and scoring templates


@dataclass(frozen=True)
class PrefixEncoding:
    bag: tuple[int, ...]
    position: int

    def __post_init__(self):
        if sum(self.bag) != self.position:
            raise ValueError("prefix bag counts must sum to its position")

    @classmethod
    def of(cls, tokens) -> "PrefixEncoding":
        bag = [0] * len(VOCAB)
        for t in tokens:
            bag[t] += 1
        return cls(tuple(bag), len(tokens))

    def vector(self) -> np.ndarray:
        return np.array(list(self.bag) + [self.position * POSITION_SCALE], dtype=np.float64)


class Scorer:
    """Batched length-normalized candidate scores for one candidate list."""

    def __init__(self, actions):
        self.actions = tuple(actions)
        rows: dict[PrefixEncoding, int] = {}
        ent_row, ent_tok, ent_cand = [], [], []
        for ci, act in enumerate(self.actions):
            for i, tok in enumerate(act.tokens):
                pre = PrefixEncoding.of(act.tokens[:i])
                r = rows.setdefault(pre, len(rows))
                ent_row.append(r)
                ent_tok.append(tok)
                ent_cand.append(ci)
        V = len(VOCAB)
        self.prefixes = np.stack([p.vector() for p in rows])
        self.ent_row = np.array(ent_row)
        self.ent_tok = np.array(ent_tok)
        E, A, R = len(ent_row), len(self.actions), len(rows)
        self.member = np.zeros((E, A))
        self.member[np.arange(E), ent_cand] = 1.0
        self.lengths = np.array([a.length_L for a in self.actions], dtype=np.float64)
        self.scatter = np.zeros((E, R * V))
        self.scatter[np.arange(E), self.ent_row * V + self.ent_tok] = 1.0
        self.n_rows = R

    def forward(self, params: PolicyParams, X: np.ndarray):
        """Scores ``(N, A)`` and a cache for :meth:`backward`."""
        X = np.atleast_2d(X)
        W1 = params.W1
        pre = (X @ W1[:OBS_WIDTH])[:, None, :] + (self.prefixes @ W1[OBS_WIDTH:] + params.b1)[None]
        H = np.tanh(pre)
        Z = H @ params.W2 + params.b2
        zmax = Z.max(axis=-1, keepdims=True)
        ez = np.exp(Z - zmax)
        sz = ez.sum(axis=-1, keepdims=True)
        logp = Z - zmax - np.log(sz)
        if not np.all(np.isfinite(logp)):
            raise NumericalError("non-finite activation in policy forward pass")
        ent = logp[:, self.ent_row, self.ent_tok]
        logP = ent @ self.member
        scores = logP / self.lengths
        cache = (X, H, ez / sz)
        return scores, logP, cache

    def backward(self, params: PolicyParams, cache, g_scores: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(g_scores * scores)`` with respect to ``params.vector``."""
        X, H, probs = cache
        N, R, V = probs.shape
        g_ent = (g_scores / self.lengths) @ self.member.T
        G = (g_ent @ self.scatter).reshape(N, R, V)
        dZ = G - probs * G.sum(axis=-1, keepdims=True)
        grad = PolicyParams(np.zeros_like(params.vector), params.n_in, params.hidden, params.vocab)
        grad.W2[...] = H.reshape(-1, H.shape[-1]).T @ dZ.reshape(-1, V)
        grad.b2[...] = dZ.sum(axis=(0, 1))
        dA = (dZ @ params.W2.T) * (1.0 - H * H)
        grad.W1[:OBS_WIDTH] = X.T @ dA.sum(axis=1)
        grad.W1[OBS_WIDTH:] = self.prefixes.T @ dA.sum(axis=0)
        grad.b1[...] = dA.sum(axis=(0, 1))
        return grad.vector


_SCORERS: dict[str, Scorer] = {}


def scorer(task: str) -> Scorer:
    if task not in _SCORERS:
        _SCORERS[task] = Scorer(candidate_set(task).actions)
    return _SCORERS[task]


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# scalar scoring


def token_logprob(params: PolicyParams, obs: ObservationBundle, prefix: PrefixEncoding, token_id: int) -> float:
    if not 0 <= token_id < params.vocab:
        raise DistributionError(f"token id {token_id} outside vocabulary")
    x = np.concatenate([obs.policy_input, prefix.vector()])
    h = np.tanh(x @ params.W1 + params.b1)
    z = h @ params.W2 + params.b2
    logp = log_softmax(z)
    if not np.all(np.isfinite(logp)):
        raise NumericalError("non-finite activation in policy forward pass")
    return float(logp[token_id])


def action_logprob(params: PolicyParams, obs: ObservationBundle, action) -> float:
    tokens = action.tokens if hasattr(action, "tokens") else tokenize(action)
    return sum(token_logprob(params, obs, PrefixEncoding.of(tokens[:i]), t) for i, t in enumerate(tokens))


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class PolicyDist:
    support: tuple[str, ...]
    log_probs: np.ndarray = field(compare=False)
    kind: str = "sub"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DistributionError(f"unknown distribution kind {self.kind!r}")
        if len(self.support) != len(self.log_probs):
            raise DistributionError("support and log_probs differ in length")

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def prob(self, action: str) -> float:
        return float(np.exp(self.log_probs[self.support.index(action)]))


def _softmax_dist(support, scores, kind) -> PolicyDist:
    if len(support) == 0:
        raise DistributionError("empty candidate set")
    return PolicyDist(tuple(support), log_softmax(np.asarray(scores, dtype=np.float64)), kind)


def sub_policy(params: PolicyParams, obs: ObservationBundle, candidates: CandidateSet) -> PolicyDist:
    if len(candidates) == 0:
        raise DistributionError("empty candidate set")
    if obs.task != candidates.task or obs.task not in ("direction", "distance"):
        raise DistributionError("sub_policy needs a sub-task observation matching the candidates")
    sc = scorer(candidates.task) if candidates == candidate_set(candidates.task) else Scorer(candidates.actions)
    scores, _, _ = sc.forward(params, obs.policy_input)
    return _softmax_dist(candidates.surfaces, scores[0], "sub")


def joint_policy(dist_dir: PolicyDist, dist_dist: PolicyDist) -> PolicyDist:
    if dist_dir.kind != "sub" or dist_dist.kind != "sub":
        raise DistributionError("joint_policy combines two sub-task distributions")
    support = tuple(f"{a} and {b}" for a in dist_dir.support for b in dist_dist.support)
    lp = (dist_dir.log_probs[:, None] + dist_dist.log_probs[None, :]).ravel()
    return PolicyDist(support, lp, "joint")


def topk_order(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ties to lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def topk(joint: PolicyDist, k: int) -> PolicyDist:
    n = len(joint.support)
    if not 1 <= k <= n:
        raise DistributionError(f"k={k} outside [1, {n}]")
    idx = topk_order(joint.log_probs, k)
    lp = joint.log_probs[idx]
    lp = lp - np.log(np.exp(lp - lp.max()).sum()) - lp.max()
    return PolicyDist(tuple(joint.support[i] for i in idx), lp, "joint_topk")


def full_policy_topk(params: PolicyParams, composite_obs: ObservationBundle, topk_support) -> PolicyDist:
    if composite_obs.task != "integrated":
        raise DistributionError("full_policy_topk needs a composite observation")
    support = tuple(topk_support.support if isinstance(topk_support, PolicyDist) else topk_support)
    acts = [CandidateAction.from_surface(s) for s in support]
    scores, _, _ = Scorer(acts).forward(params, composite_obs.policy_input)
    return _softmax_dist(support, scores[0], "full_topk")


def kl_divergence(p_log: np.ndarray, q_log: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis from log-probabilities."""
    p = np.exp(p_log)
    return np.sum(np.where(p > 0, p * (p_log - q_log), 0.0), axis=-1)


def consistency_loss(target: PolicyDist, model: PolicyDist) -> float:
    if tuple(target.support) != tuple(model.support):
        raise DistributionError("consistency loss needs identical supports in identical order")
    return float(max(kl_divergence(target.log_probs, model.log_probs), 0.0))


def sample(dist: PolicyDist, rng: np.random.Generator) -> tuple[str, float]:
    cdf = np.cumsum(dist.probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    i = min(i, len(dist.support) - 1)
    return dist.support[i], float(dist.log_probs[i])


def batch_sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"NARCPCK\x00"
VERSION = 1
_HEADER = struct.Struct("<8sHII32s")


def config_hash(task_config: dict) -> bytes:
    blob = json.dumps(task_config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def architecture_fingerprint(task: str, params: PolicyParams) -> dict:
    return {"task": task, "vocab": list(VOCAB.words), "n_in": params.n_in,
            "hidden": params.hidden, "position_scale": POSITION_SCALE}


def save_checkpoint(path, params: PolicyParams, task_config: dict, extra: np.ndarray | None = None) -> None:
    """Header (magic, version, counts, config hash) then little-endian float64s."""
    extra = np.zeros(0) if extra is None else np.asarray(extra, dtype=np.float64)
    head = _HEADER.pack(MAGIC, VERSION, params.parameter_count, extra.shape[0], config_hash(task_config))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(params.vector.astype("<f8").tobytes())
        fh.write(extra.astype("<f8").tobytes())


def load_checkpoint(path, task_config: dict) -> tuple[PolicyParams, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, count, n_extra, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if digest != config_hash(task_config):
        raise CheckpointError("checkpoint was written for a different task configuration")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if body.shape[0] != count + n_extra:
        raise CheckpointError("checkpoint body length does not match header")
    params = PolicyParams(body[:count].astype(np.float64))
    if not np.all(np.isfinite(params.vector)):
        raise CheckpointError("checkpoint holds non-finite parameters")
    return params, body[count:].astype(np.float64)
