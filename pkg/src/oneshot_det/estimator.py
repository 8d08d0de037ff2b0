"""Scikit-learn style wrapper around pretraining, one-shot adaptation and scoring."""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapt import AdaptConfig, adapt_batch, adapt_one
from .checkpoint import Checkpoint
from .detcore import DetectorArch, extract_features
from .evalkit import mean_average_precision, tide_decompose
from .train import TrainConfig, meta_pretrain, pretrain_multitask
from .validation import check_dataset


class OneShotDetector(BaseEstimator):
    """Detector pretrained on a labelled source set and adapted per test image.

    ``fit`` runs multi-task pretraining (plus meta-learning for the meta
    variants).  ``predict``, ``transform`` and ``score`` adapt a fresh copy
    of the feature extractor to each image for ``gamma`` rotation steps;
    with ``gamma=0`` they are plain inference.

    Parameters mirror :class:`TrainConfig` and :class:`AdaptConfig`;
    ``adapt_lr=None`` reuses ``inner_lr`` so test-time steps match the
    meta-training inner loop.  ``warm_start`` is a checkpoint (or path) that
    meta variants start from instead of running pretraining themselves.
    """

    def __init__(self, variant="oshot", lambda_rot=0.05, K=4, eta=5, inner_lr=1e-3, outer_lr=1e-4, lr=1e-3,
                 epochs=10, batch_size=16, meta_epochs=1, meta_images=0, meta_grad_mode="exact",
                 gamma=5, adapt_lr=None, seed=0, arch=None, warm_start=None, n_jobs=1):
        self.variant = variant
        self.lambda_rot = lambda_rot
        self.K = K
        self.eta = eta
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.meta_epochs = meta_epochs
        self.meta_images = meta_images
        self.meta_grad_mode = meta_grad_mode
        self.gamma = gamma
        self.adapt_lr = adapt_lr
        self.seed = seed
        self.arch = arch
        self.warm_start = warm_start
        self.n_jobs = n_jobs

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            variant=self.variant, lambda_rot=self.lambda_rot, K=self.K, eta=self.eta, inner_lr=self.inner_lr,
            outer_lr=self.outer_lr, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            meta_epochs=self.meta_epochs, meta_images=self.meta_images, seed=self.seed,
            meta_grad_mode=self.meta_grad_mode,
        )

    def _adapt_config(self, gamma=None) -> AdaptConfig:
        lr = self.inner_lr if self.adapt_lr is None else self.adapt_lr
        return AdaptConfig(gamma=self.gamma if gamma is None else gamma, inner_lr=lr, seed=self.seed)

    def _arch(self) -> DetectorArch:
        return self.arch if self.arch is not None else DetectorArch()

    def fit(self, X, y=None):
        """Pretrain on labelled source images ``X`` (with labels in ``y`` or on the images)."""
        cfg = self._train_config()
        errs = cfg.validate() + self._adapt_config().validate()
        if errs:
            raise ValueError("; ".join(errs))
        arch = self._arch()
        source = check_dataset(X, y, num_classes=arch.num_classes, stride=arch.stride, require_labels=True)
        if cfg.variant in ("meta-oshot", "full-oshot"):
            init = self.warm_start
            if isinstance(init, (str, bytes)) or hasattr(init, "__fspath__"):
                init = Checkpoint.load(init)
            if init is None:
                base = "tran-oshot" if cfg.variant == "full-oshot" else "oshot"
                init = pretrain_multitask(source, TrainConfig(**{**cfg.to_dict(), "variant": base}), arch)
            self.checkpoint_ = meta_pretrain(source, cfg, init, arch)
        else:
            self.checkpoint_ = pretrain_multitask(source, cfg, arch)
        self.metric_log_ = list(self.checkpoint_.metric_log)
        self.n_features_in_ = 3
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str, **params) -> "OneShotDetector":
        """A fitted estimator around an existing checkpoint."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        known = cls().get_params()
        cfg = {k: v for k, v in ckpt.config.items() if k in known}
        est = cls(**{**cfg, "arch": ckpt.arch, **params})
        est.checkpoint_ = ckpt
        est.metric_log_ = list(ckpt.metric_log)
        est.n_features_in_ = 3
        return est

    def _images(self, X):
        check_is_fitted(self, "checkpoint_")
        arch = self.checkpoint_.arch
        return check_dataset(X, stride=arch.stride)

    def adapt(self, X, gamma=None):
        """Per-image adaptation outcomes (detections, traces, timings)."""
        return adapt_batch(self._images(X), self.checkpoint_, self._adapt_config(gamma), workers=self.n_jobs)

    def predict(self, X, gamma=None):
        """One list of :class:`Detection` per image."""
        return [o.detections for o in self.adapt(X, gamma)]

    def transform(self, X, gamma=None):
        """Feature maps of each image under its own adapted extractor."""
        images = self._images(X)
        cfg = self._adapt_config(gamma)
        out = []
        for im in images:
            res = adapt_one(im, self.checkpoint_, cfg, image_id=im.id)
            out.append(extract_features(im.pixels, {**self.checkpoint_.params, **res.theta_f}, self.checkpoint_.arch))
        return out

    def score(self, X, y=None, gamma=None) -> float:
        """mAP@0.5 of the adapted predictions against the labels."""
        check_is_fitted(self, "checkpoint_")
        images = check_dataset(X, y, num_classes=self.checkpoint_.arch.num_classes,
                               stride=self.checkpoint_.arch.stride)
        dets = self.predict(images, gamma)
        return mean_average_precision(dets, [im.labels for im in images])

    def error_breakdown(self, X, y=None, gamma=None):
        check_is_fitted(self, "checkpoint_")
        images = check_dataset(X, y, num_classes=self.checkpoint_.arch.num_classes,
                               stride=self.checkpoint_.arch.stride)
        return tide_decompose(self.predict(images, gamma), [im.labels for im in images])
