"""scikit-learn compatible classifiers wrapping the frozen dual encoder.

``fit`` never trains anything: it only turns one clean template image per
class into the fixed class-embedding matrix (unless one is supplied). All
adaptation happens per sample inside ``predict_proba``.

>>> from noisetune import TestTimeNoiseTuner
>>> clf = TestTimeNoiseTuner(n_views=8, random_state=0).fit(templates)  # doctest: +SKIP
>>> clf.predict(images)  # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .encoder import ClassEmbeddings, EncoderModel, derive_class_embeddings, init_model
from .engine import AdaptationConfig, adapt, perturb_views, run_episode, zero_shot_infer
from .augment import generate_views
from .rng import stream

__all__ = ["ZeroShotClassifier", "TestTimeNoiseTuner"]


class _DualEncoderClassifier(ClassifierMixin, BaseEstimator):
    def _fit_classes(self, X, y):
        model = self.encoder if self.encoder is not None else init_model(seed=self.random_state or 0)
        if self.class_embeddings is not None:
            classes = self.class_embeddings
            if not isinstance(classes, ClassEmbeddings):
                classes = ClassEmbeddings(classes)
            n = classes.n_classes
        else:
            X = check_images(X, model.config, name="templates")
            classes = derive_class_embeddings(model, X)
            n = X.shape[0]
        self.classes_ = np.arange(n) if y is None else check_labels(y, n)
        self.encoder_ = model
        self.class_embeddings_ = classes
        self.n_features_in_ = model.config.channels * model.config.image_size**2
        return self

    def fit(self, X=None, y=None):
        """Build class embeddings from ``X`` (one template per class, labels ``y``)."""
        return self._fit_classes(X, y)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def _check(self, X):
        check_is_fitted(self, "class_embeddings_")
        return check_images(X, self.encoder_.config)


class ZeroShotClassifier(_DualEncoderClassifier):
    """Plain cosine-similarity zero-shot classification, one clean forward per image."""

    def __init__(self, encoder: EncoderModel | None = None, class_embeddings=None, random_state: int = 0):
        self.encoder = encoder
        self.class_embeddings = class_embeddings
        self.random_state = random_state

    def predict_proba(self, X):
        X = self._check(X)
        return np.stack(
            [zero_shot_infer(self.encoder_, self.class_embeddings_, x).probabilities for x in X]
        )


class TestTimeNoiseTuner(TransformerMixin, _DualEncoderClassifier):
    """Per-sample learnable input noise tuned on augmented views before predicting.

    Parameters mirror :class:`~noisetune.engine.AdaptationConfig`.
    ``random_state`` is the master seed: image ``i`` of a ``predict_proba``
    call draws its views from stream ``(random_state, "augment", i)`` and its
    initial noise from ``(random_state, "noise", i)``.

    After ``predict_proba`` the per-sample records (with adaptation traces)
    are available as ``records_``.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(
        self,
        encoder: EncoderModel | None = None,
        class_embeddings=None,
        epsilon: float = 1.0 / 255.0,
        lr: float = 1e-3,
        steps: int = 1,
        n_views: int = 64,
        top_k_fraction: float = 0.1,
        alpha: float = 1.0,
        beta: float = 1.0,
        tau: float = 7e-3,
        use_consistency_loss: bool = True,
        use_temperature: bool = True,
        use_topk_inference: bool = True,
        reuse_last_k: bool = False,
        random_state: int = 0,
    ):
        self.encoder = encoder
        self.class_embeddings = class_embeddings
        self.epsilon = epsilon
        self.lr = lr
        self.steps = steps
        self.n_views = n_views
        self.top_k_fraction = top_k_fraction
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.use_consistency_loss = use_consistency_loss
        self.use_temperature = use_temperature
        self.use_topk_inference = use_topk_inference
        self.reuse_last_k = reuse_last_k
        self.random_state = random_state

    def adaptation_config(self) -> AdaptationConfig:
        names = AdaptationConfig.__dataclass_fields__
        return AdaptationConfig(**{k: v for k, v in self.get_params(deep=False).items() if k in names})

    def fit(self, X=None, y=None):
        self.config_ = self.adaptation_config()
        return self._fit_classes(X, y)

    def predict_proba(self, X):
        X = self._check(X)
        seed = self.random_state
        self.records_ = [
            run_episode(
                self.encoder_,
                self.class_embeddings_,
                x,
                self.config_,
                stream(seed, "augment", i),
                stream(seed, "noise", i),
                sample_id=i,
            )
            for i, x in enumerate(X)
        ]
        return np.stack([r.probabilities for r in self.records_])

    def transform(self, X):
        """Return each image with its adapted noise map applied (clamped to ``[0, 1]``)."""
        X = self._check(X)
        out = np.empty_like(X)
        cfg = self.config_
        for i, x in enumerate(X):
            views = generate_views(x, cfg.n_views, stream(self.random_state, "augment", i),
                                   *cfg.crop_scale, flip_prob=cfg.flip_prob)
            noise, _ = adapt(self.encoder_, self.class_embeddings_, views, cfg,
                             seed=stream(self.random_state, "noise", i))
            out[i] = perturb_views(x[None], noise.xi.detach()).data[0]
        return out
