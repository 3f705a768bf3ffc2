"""scikit-learn style wrappers around landmark selection and the speaker model.

``LandmarkSelector`` is a stateless transformer; ``InstructionSpeaker`` trains
on a :class:`~navspeak.dataset.Corpus` and predicts instructions for
trajectories. Both expose ``get_params``/``set_params`` through ``BaseEstimator``.
"""
from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .dataset import Corpus
from .errors import ConfigError, DataError
from .landmarks import STRATEGIES, select_landmarks
from .world import STYLES, InstructionSample, Trajectory, WorldGrid


def check_trajectories(X):
    """List of trajectories; rejects anything else with a clear message."""
    if isinstance(X, Trajectory):
        X = [X]
    X = list(X)
    if not X:
        raise DataError("no trajectories given")
    for i, t in enumerate(X):
        if not isinstance(t, Trajectory):
            raise DataError(f"item {i} is {type(t).__name__}, expected Trajectory")
    return X


def check_landmark_inputs(X):
    """``(trajectory, world, instruction)`` triples."""
    X = list(X)
    for i, item in enumerate(X):
        if len(item) != 3:
            raise DataError(f"item {i}: expected (trajectory, world, instruction)")
        traj, world, inst = item
        if not isinstance(traj, Trajectory) or not isinstance(world, WorldGrid) \
                or not isinstance(inst, InstructionSample):
            raise DataError(f"item {i}: expected (Trajectory, WorldGrid, InstructionSample)")
    return X


def check_style(style):
    if style not in STYLES:
        raise ConfigError(f"unknown style {style!r}; expected one of {STYLES}")
    return style


class LandmarkSelector(TransformerMixin, BaseEstimator):
    """Maps (trajectory, world, instruction) triples to landmark sets."""

    def __init__(self, beta=0.25, strategy="full"):
        self.beta = beta
        self.strategy = strategy

    def fit(self, X=None, y=None):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown landmark strategy {self.strategy!r}")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return [select_landmarks(t, w, inst, self.beta, self.strategy) for t, w, inst in check_landmark_inputs(X)]


class InstructionSpeaker(BaseEstimator):
    """Trains the speaker on a corpus and generates instructions.

    ``predict`` returns one token list per trajectory.
    """

    def __init__(self, config=None, steps=None, style="fine_grained", temperature=None, seed=0, greedy=False):
        self.config = config
        self.steps = steps
        self.style = style
        self.temperature = temperature
        self.seed = seed
        self.greedy = greedy

    def _config(self):
        cfg = self.config if self.config is not None else RunConfig.toy()
        if not isinstance(cfg, RunConfig):
            raise ConfigError("config must be a RunConfig")
        cfg.validate()
        return cfg

    def fit(self, X: Corpus, y=None):
        from . import trainer
        from .model import SpeakerModel

        if not isinstance(X, Corpus):
            raise DataError("fit expects a Corpus")
        cfg = self._config()
        vocab, _, train_streams, val_streams = trainer.prepare(cfg, X)
        model = SpeakerModel(cfg, vocab)
        _, history = trainer.fit(model, cfg, train_streams, val_streams, steps=self.steps)
        self.model_ = model
        self.history_ = history
        return self

    def predict(self, X, landmarks=None):
        """Instruction tokens per trajectory; ``landmarks`` optionally overrides stage one."""
        from .generator import GenerationRequest, Generator

        check_is_fitted(self, "model_")
        check_style(self.style)
        X = check_trajectories(X)
        if landmarks is not None and len(landmarks) != len(X):
            raise DataError("landmarks must align with trajectories")
        gen = Generator(self.model_)
        reqs = [
            GenerationRequest(t, self.style, None if landmarks is None else list(landmarks[i]), self.temperature,
                              self.model_.cfg.generate.max_tokens, self.seed + i)
            for i, t in enumerate(X)
        ]
        return [r.instruction for r in gen.generate_many(reqs, greedy=self.greedy)]

    def score(self, X, y):
        """Corpus BLEU-4 of predictions against reference lists ``y``."""
        from .evaluator import corpus_bleu

        preds = self.predict(X)
        return corpus_bleu(preds, y, 4)
