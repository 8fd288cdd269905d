"""scikit-learn compatible wrappers around the model and the degradation operators."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .bench.synthetic import ImageSample
from .degrade import apply_degradation, make_spec, sample_degradation
from .exceptions import ConfigurationError
from .fusion import CheckpointBundle, load_checkpoint, save_checkpoint
from .model import ModelConfig, PromptSet, SamModel
from .train import TrainConfig, predict_masks, sample_point_prompts, train_loop
from .validation import check_images, check_masks, check_prompts


class DegradationTransformer(TransformerMixin, BaseEstimator):
    """Apply one degradation per image.

    With ``kind`` set every image gets that operator at ``severity``;
    otherwise a (kind, severity) pair is drawn from ``modality``'s menu.
    Image ``i`` always uses the stream ``(seed, i)``, so output does not
    depend on batch composition.

    :param kind: operator name, or None to sample from the modality menu
    :param severity: 0 (identity) to 3
    :param modality: modality tag used when ``kind`` is None
    :param seed: base seed
    """

    def __init__(self, kind=None, severity=2, modality="ct", seed=0):
        self.kind = kind
        self.severity = severity
        self.modality = modality
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X)
        self.image_shape_ = X.shape[1:]
        # resolving one spec validates kind, severity and modality up front
        self.spec_for(0)
        return self

    def spec_for(self, index: int):
        rng = np.random.default_rng([int(self.seed), int(index)])
        if self.kind is None:
            return sample_degradation(self.modality, rng)
        return make_spec(self.kind, int(self.severity), int(rng.integers(0, 2**63 - 1)))

    def transform(self, X):
        check_is_fitted(self, "image_shape_")
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ConfigurationError(f"image shape {X.shape[1:]} does not match fit shape {self.image_shape_}")
        return np.stack([apply_degradation(x, self.spec_for(i)) for i, x in enumerate(X)])


class PromptableSegmenter(BaseEstimator):
    """Point/box promptable segmenter with optional clean/degraded pair training.

    ``fit`` trains from ``init_checkpoint`` when given, else from a fresh
    model seeded by ``seed``. ``predict`` needs prompts; ``score`` samples
    ``prompt_k`` foreground points from the ground truth and reports mean Dice.
    """

    def __init__(self, model_config=None, init_checkpoint=None, epochs=10, learning_rate=5e-4, batch_size=4,
                 paired=True, robust_mode=True, freeze="none", prompt_mode="points", prompt_k=3,
                 svd_mode=False, modality="ct", seed=0):
        self.model_config = model_config
        self.init_checkpoint = init_checkpoint
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.paired = paired
        self.robust_mode = robust_mode
        self.freeze = freeze
        self.prompt_mode = prompt_mode
        self.prompt_k = prompt_k
        self.svd_mode = svd_mode
        self.modality = modality
        self.seed = seed

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           paired=self.paired, robust_mode=self.robust_mode, freeze=self.freeze,
                           prompt_mode=self.prompt_mode, prompt_k=self.prompt_k, svd_mode=self.svd_mode,
                           seed=self.seed, image_size=self._config().image_size)

    def _config(self):
        if self.init_checkpoint is not None:
            return load_checkpoint(self.init_checkpoint).config
        mc = self.model_config
        if mc is None:
            return ModelConfig()
        return mc if isinstance(mc, ModelConfig) else ModelConfig.from_dict(mc)

    def fit(self, X, y, modalities=None):
        cfg = self._config()
        X = check_images(X, cfg.image_size)
        y = check_masks(y, len(X), X.shape[2:])
        if modalities is None:
            modalities = [self.modality] * len(X)
        elif isinstance(modalities, str):
            modalities = [modalities] * len(X)
        if len(modalities) != len(X):
            raise ConfigurationError("need one modality per image")
        samples = [ImageSample(x, m, mod, self.seed, sample_id=str(i)) for i, (x, m, mod) in
                   enumerate(zip(X, y, modalities))]
        if self.init_checkpoint is not None:
            model = load_checkpoint(self.init_checkpoint).to_model()
        else:
            model = SamModel(cfg, seed=self.seed)
        result = train_loop(model, samples, self._train_config(), label="estimator")
        self.model_ = result.model
        self.history_ = [{"epoch": s.epoch, **s.losses} for s in result.stats]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X, prompts):
        """Binary masks ``(N, H, W)``; ``prompts`` is a PromptSet, ``(N, K, 2)`` points or ``(N, 4)`` boxes."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.cfg.image_size)
        ps = check_prompts(prompts, len(X), self.model_.cfg.image_size)
        return predict_masks(self.model_, X, ps, self.robust_mode).astype(np.uint8)

    def score(self, X, y, prompts=None):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.cfg.image_size)
        y = check_masks(y, len(X), X.shape[2:])
        if prompts is None:
            prompts = PromptSet.stack([
                sample_point_prompts(m, self.prompt_k, np.random.default_rng([int(self.seed), 29, i]))
                for i, m in enumerate(y)
            ])
        pred = self.predict(X, prompts)
        return float(np.mean([metrics.dice(p, g) for p, g in zip(pred, y)]))

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(CheckpointBundle.from_model(self.model_, robust_decoding=self.robust_mode), path)

    @classmethod
    def from_checkpoint(cls, path, **params):
        """An already-fitted estimator wrapping the model stored at ``path``."""
        bundle = load_checkpoint(path)
        params.setdefault("robust_mode", bool(bundle.meta.get("robust_decoding", True)))
        est = cls(init_checkpoint=str(path), **params)
        est.model_ = bundle.to_model()
        est.history_ = []
        est.n_features_in_ = 3 * bundle.config.image_size ** 2
        return est
