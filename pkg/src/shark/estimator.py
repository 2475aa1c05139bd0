"""scikit-learn style wrappers around the deraining network and the corner detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ImagePair, crop_to, pad_to_multiple, resize_to
from .losses import HarrisParams, LossWeights, corner_map_hard, harris_response
from .metrics import psnr
from .network import DEPTH, ModelConfig, NetworkParams, params_from_arrays, shark_forward
from .trainer import TrainConfig, train
from .validation import check_images, check_paired


def derain_image(image: Tensor, params: NetworkParams, resize: int | None = None) -> Tensor:
    """Restore one ``(1, 3, h, w)`` image of any size.

    The input is reflection-padded to a multiple of 16 and the output cropped
    back. With ``resize`` the image is processed at ``resize x resize`` and
    the result scaled back to the original size.
    """
    h, w = image.shape[2:]
    x = resize_to(image, resize, resize) if resize else image
    padded, size = pad_to_multiple(x, 2**DEPTH)
    with ad.no_grad():
        out = crop_to(shark_forward(padded, params), size)
    if resize:
        out = Tensor(np.clip(resize_to(out, h, w).data, 0.0, 1.0))
    return out


class SharkDerainer(BaseEstimator, TransformerMixin):
    """Single-image rain removal network trained with L1, SSIM and Harris-corner losses.

    ``fit(X, y)`` takes rainy images ``X`` and their clean counterparts ``y``
    as ``(n, 3, h, w)`` arrays (or sequences of ``(3, h, w)`` arrays) in [0, 1].
    ``predict``/``transform`` return restored images with the input shapes.
    """

    def __init__(
        self,
        base_channels=16,
        cbam_reduction=8,
        epochs=500,
        batch_size=4,
        learning_rate=1e-4,
        lambda_l1=10.0,
        lambda_ssim=5.0,
        lambda_harris=5.0,
        use_ssim=True,
        use_harris=True,
        harris_k=0.08,
        harris_tau=0.01,
        soft_beta=50.0,
        image_size=None,
        max_steps=None,
        random_state=0,
    ):
        self.base_channels = base_channels
        self.cbam_reduction = cbam_reduction
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_l1 = lambda_l1
        self.lambda_ssim = lambda_ssim
        self.lambda_harris = lambda_harris
        self.use_ssim = use_ssim
        self.use_harris = use_harris
        self.harris_k = harris_k
        self.harris_tau = harris_tau
        self.soft_beta = soft_beta
        self.image_size = image_size
        self.max_steps = max_steps
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        size = self.image_size
        if isinstance(size, int):
            size = (size, size)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            lr=self.learning_rate,
            weights=LossWeights(self.lambda_l1, self.lambda_ssim, self.lambda_harris, self.use_ssim, self.use_harris),
            harris=HarrisParams(k=self.harris_k, tau=self.harris_tau, soft_beta=self.soft_beta),
            model=ModelConfig(self.base_channels, self.cbam_reduction),
            image_size=tuple(size) if size else None,
            max_steps=self.max_steps,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        config = self._train_config()
        xs, ys = check_paired(X, y)
        pairs = [ImagePair(f"{i:06d}", Tensor(a), Tensor(b)) for i, (a, b) in enumerate(zip(xs, ys))]
        if config.image_size is not None:
            pairs = [ImagePair(p.id, resize_to(p.rainy, *config.image_size), resize_to(p.clean, *config.image_size))
                     for p in pairs]
        val = None
        if X_val is not None:
            vx, vy = check_paired(X_val, y_val)
            val = [ImagePair(f"{i:06d}", Tensor(a), Tensor(b)) for i, (a, b) in enumerate(zip(vx, vy))]
        result = train(config, pairs, val)
        self.checkpoint_ = result.checkpoint
        self.params_ = result.params
        self.history_ = result.log
        self.n_steps_ = result.checkpoint.step
        return self

    def predict(self, X, resize=None):
        """Restored images; an ndarray when all inputs share one shape, else a list."""
        check_is_fitted(self, "params_")
        outs = [derain_image(Tensor(x), self.params_, resize).data[0] for x in check_images(X)]
        if len({o.shape for o in outs}) == 1:
            return np.stack(outs)
        return outs

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y):
        """Mean PSNR (dB) of the restored ``X`` against clean ``y``."""
        xs, ys = check_paired(X, y)
        preds = self.predict(xs)
        return float(np.mean([psnr(p, t[0]) for p, t in zip(preds, ys)]))

    def save(self, path) -> None:
        check_is_fitted(self, "checkpoint_")
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, source) -> "SharkDerainer":
        """Build a fitted estimator from a checkpoint object or file."""
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        est = cls(base_channels=ckpt.config.base_channels, cbam_reduction=ckpt.config.cbam_reduction,
                  random_state=ckpt.seed)
        est.checkpoint_ = ckpt
        est.params_ = params_from_arrays(ckpt.config, ckpt.params, requires_grad=False)
        est.history_ = []
        est.n_steps_ = ckpt.step
        return est


class HarrisCornerDetector(BaseEstimator, TransformerMixin):
    """Harris corner maps ``R > tau * max(R)`` (per image) for RGB images.

    Stateless: ``fit`` only validates its input. ``transform`` returns
    ``(n, 1, h, w)`` binary maps; :meth:`response` gives the raw ``R``.
    """

    def __init__(self, k=0.08, tau=0.01, gauss_sigma=1.0, gauss_size=5):
        self.k = k
        self.tau = tau
        self.gauss_sigma = gauss_sigma
        self.gauss_size = gauss_size

    def _params(self) -> HarrisParams:
        return HarrisParams(k=self.k, tau=self.tau, gauss_size=self.gauss_size, gauss_sigma=self.gauss_sigma)

    def fit(self, X, y=None):
        self._params()
        check_images(X)
        return self

    def response(self, X):
        p = self._params()
        with ad.no_grad():
            outs = [harris_response(Tensor(x), p).data for x in check_images(X)]
        return np.concatenate(outs) if len({o.shape for o in outs}) == 1 else outs

    def transform(self, X):
        p = self._params()
        maps = []
        with ad.no_grad():
            for x in check_images(X):
                maps.append(corner_map_hard(harris_response(Tensor(x), p), p))
        return np.concatenate(maps) if len({m.shape for m in maps}) == 1 else maps
