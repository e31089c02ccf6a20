"""Observation rendering, feature encoding and the closed action vocabulary.

Numbers in rendered text carry exactly three decimals, so neighbouring 10 Hz
states usually render almost identically. The policy itself reads the numeric
feature vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sim
from .sim import SimBatch, SimState, ScenarioConfig

FEATURE_WIDTH = 10
TASK_INDEX = {"direction": 0, "distance": 1, "integrated": 2}

# action words first, then filler words the scorer may still put mass on
WORDS = (
    "turn", "left", "right", "hard", "soft", "hold", "heading", "speed",
    "up", "down", "slow", "and", "stop", "climb", "dive", "fast",
)


class TokenizationError(ValueError):
    pass


class EncodingError(ValueError):
    pass


class Vocabulary:
    def __init__(self, words=WORDS):
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary words")
        self.words = tuple(words)
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise TokenizationError(f"word {word!r} is not in the vocabulary") from None

    def token(self, idx: int) -> str:
        return self.words[idx]


VOCAB = Vocabulary()


def tokenize(surface: str, vocab: Vocabulary = VOCAB) -> tuple[int, ...]:
    words = surface.split(" ")
    if not surface or any(w == "" for w in words):
        raise TokenizationError(f"malformed action text {surface!r}")
    return tuple(vocab.id(w) for w in words)


@dataclass(frozen=True)
class CandidateAction:
    surface: str
    tokens: tuple[int, ...]

    @property
    def length_L(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_surface(cls, surface: str) -> "CandidateAction":
        return cls(surface, tokenize(surface))


@dataclass(frozen=True)
class CandidateSet:
    task: str
    actions: tuple[CandidateAction, ...]

    def __len__(self):
        return len(self.actions)

    @property
    def surfaces(self) -> tuple[str, ...]:
        return tuple(a.surface for a in self.actions)


_CANDIDATES: dict[str, CandidateSet] = {}


def candidate_set(task: str) -> CandidateSet:
    """Canonical candidate set for a task (cached; ordering is fixed)."""
    if task not in _CANDIDATES:
        surfaces = sim.action_space(task)
        _CANDIDATES[task] = CandidateSet(task, tuple(CandidateAction.from_surface(s) for s in surfaces))
    return _CANDIDATES[task]


@dataclass(frozen=True)
class ObservationBundle:
    task: str
    text: str
    features: np.ndarray = field(compare=False)
    components: tuple = field(default=(), compare=False, repr=False)

    @property
    def task_tag(self) -> np.ndarray:
        tag = np.zeros(3)
        tag[TASK_INDEX[self.task]] = 1.0
        return tag

    @property
    def policy_input(self) -> np.ndarray:
        return np.concatenate([self.task_tag, self.features])


# ---------------------------------------------------------------------------
# text


def _direction_text(bearing, heading, distance) -> str:
    return f"target bearing {bearing:.3f} rad, heading {heading:.3f} rad, distance {distance:.3f} m"


def _distance_text(distance, d_star, closing, speed) -> str:
    return (f"distance {distance:.3f} m, desired distance {d_star:.3f} m, "
            f"closing speed {closing:.3f} m/s, speed {speed:.3f} m/s")


def _texts(state: SimState) -> tuple[str, str, str]:
    g = sim.geometry(state)
    dir_text = _direction_text(g.bearing, state.pursuer_heading, g.distance)
    dist_text = _distance_text(g.distance, state.d_star, g.closing_speed, state.pursuer_speed)
    suffix = f"; target color {state.color}" if state.color else ""
    return dir_text, dist_text, suffix


def render_text(state: SimState, config: ScenarioConfig | None = None, task: str | None = None) -> str:
    """Render the textual observation for ``task`` (defaults to ``config.task``)."""
    task = task or (config.task if config is not None else "integrated")
    dir_text, dist_text, suffix = _texts(state)
    if task == "direction":
        return dir_text + suffix
    if task == "distance":
        return dist_text + suffix
    return dir_text + "; " + dist_text + suffix


# ---------------------------------------------------------------------------
# features


def batch_features(b: SimBatch, geom: dict | None = None) -> dict[str, np.ndarray]:
    """Direction (n, 6) and distance (n, 4) feature blocks."""
    g = geom if geom is not None else sim.batch_geometry(b)
    bear = g["bearing"]
    direction = np.stack([
        np.sin(bear), np.cos(bear), np.sin(b.heading), np.cos(b.heading),
        g["e_dir"] / 2.0, g["distance"] / 20.0,
    ], axis=1)
    distance = np.stack([
        g["distance_error"] / 20.0, g["closing_speed"] / 10.0, b.speed / 10.0, b.d_star / 10.0,
    ], axis=1)
    if not (np.all(np.isfinite(direction)) and np.all(np.isfinite(distance))):
        raise EncodingError("non-finite geometry in feature encoding")
    return {"direction": direction, "distance": distance}


def batch_policy_inputs(b: SimBatch, geom: dict | None = None) -> dict[str, np.ndarray]:
    """Tag-prefixed policy inputs (n, 13) for each task view of the batch.

    Direction features occupy slots 0-5 and distance features slots 6-9 in
    every view; the unused slots of a sub-task view are zero.
    """
    f = batch_features(b, geom)
    n = b.n
    out = {}
    for task in ("direction", "distance", "integrated"):
        x = np.zeros((n, 3 + FEATURE_WIDTH))
        x[:, TASK_INDEX[task]] = 1.0
        if task in ("direction", "integrated"):
            x[:, 3:9] = f["direction"]
        if task in ("distance", "integrated"):
            x[:, 9:13] = f["distance"]
        out[task] = x
    return out


def encode_features(state: SimState, task: str, config: ScenarioConfig | None = None) -> ObservationBundle:
    if task not in TASK_INDEX:
        raise EncodingError(f"unknown task {task!r}")
    views = batch_policy_inputs(sim.to_batch(state))
    if task == "integrated":
        parts = (encode_features(state, "direction", config), encode_features(state, "distance", config))
        return ObservationBundle("integrated", render_text(state, task="integrated"),
                                 views["integrated"][0, 3:].copy(), components=parts)
    return ObservationBundle(task, render_text(state, task=task), views[task][0, 3:].copy())


def decouple(composite: ObservationBundle) -> tuple[ObservationBundle, ObservationBundle]:
    """Split a composite bundle into its direction and distance bundles."""
    if composite.task != "integrated" or len(composite.components) != 2:
        raise ValueError("decouple needs a composite (integrated) observation bundle")
    return composite.components

