"""scikit-learn style front end: ``TextDetector().fit(scenes).predict(images)``."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evalkit import evaluate, quad_iou
from .labelgen import CharScene, generate_targets
from .network import ModelConfig
from .postprocess import MIN_AREA, TAU_AFFINITY, TAU_REGION, DetectionSet, detect
from .synthdata import resize_keep_aspect, word_quads
from .tensor import Tensor, no_grad
from .train import OptState, TrainConfig, load_checkpoint, save_checkpoint, train_loop

ABLATIONS = ("baseline", "bifpn", "kl", "full")


def check_image(image) -> np.ndarray:
    """Validate one image: (3, H, W) float array with values in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected an image of shape (3, H, W), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"expected a floating point image, got dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains NaN or infinite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_scenes(scenes, require_nonempty: bool = True) -> list[CharScene]:
    """Validate a sequence of annotated scenes."""
    if isinstance(scenes, CharScene):
        raise TypeError("expected a sequence of CharScene, got a single scene")
    scenes = list(scenes)
    if require_nonempty and not scenes:
        raise ValueError("need at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, CharScene):
            raise TypeError(f"item {i} is {type(s).__name__}, expected CharScene")
        check_image(s.image)
        for word in s.words:
            for q in word:
                if np.asarray(q).shape != (4, 2):
                    raise ValueError(f"scene {i}: character quads must have shape (4, 2)")
    return scenes


def check_images(images) -> list[np.ndarray]:
    """Accept CharScenes, a (N, 3, H, W) array, or a list of (3, H, W) arrays."""
    if isinstance(images, CharScene):
        raise TypeError("expected a sequence of images, got a single scene")
    if isinstance(images, np.ndarray) and images.ndim == 3:
        raise ValueError("expected a batch of images; wrap a single image in a list")
    out = []
    for item in images:
        out.append(check_image(item.image if isinstance(item, CharScene) else item))
    return out


def check_is_fitted(est: "TextDetector") -> None:
    if getattr(est, "model_", None) is None:
        raise NotFittedError("TextDetector is not fitted yet; call fit() or load()")


THRESHOLD_GRID = (0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)


def calibrate_threshold(scenes, grid=THRESHOLD_GRID, tolerance: float = 0.02) -> float:
    """Pick a shared region/affinity threshold from ground-truth geometry alone.

    Runs ``detect`` on each scene's own target maps and scores the median best
    IoU against the true word quads. Returns the largest threshold whose median
    IoU is within ``tolerance`` (relative) of the best one; larger thresholds
    leave more room for imperfect predictions. The default tolerance is about
    the IoU swing of a half-pixel edge shift on a small word at map scale. No
    model output is involved.
    """
    scenes = check_scenes(scenes)
    maps = [generate_targets(s).full for s in scenes]
    gts = [word_quads(s) for s in scenes]
    medians = []
    for tau in grid:
        best = [max((quad_iou(d, g) for d in detect(m, tau, tau).quads), default=0.0)
                for m, gs in zip(maps, gts) for g in gs]
        medians.append(float(np.median(best)) if best else 0.0)
    top = max(medians)
    return max(t for t, m in zip(grid, medians) if m >= top * (1 - tolerance))


def image_score_maps(model, image: np.ndarray, long_side: int) -> np.ndarray:
    """Eval-mode region/affinity maps for one (3, H, W) image.

    The image is resized so its longer side is ``long_side`` and padded to a
    multiple of 32; the returned maps are cropped back to the resized content.
    """
    H, W = image.shape[1:]
    scene, scale = resize_keep_aspect(CharScene(image, []), long_side)
    dtype = model.parameters()[0].data.dtype
    with no_grad():
        maps = model.forward(Tensor(scene.image[None].astype(dtype), dtype=dtype),
                             mode="eval").scores.data[0]
    nh, nw = max(1, round(H * scale)), max(1, round(W * scale))
    return maps[:, :-(-nh // 2), :-(-nw // 2)]


def maps_to_detections(maps: np.ndarray, image_hw, long_side: int, tau_r: float,
                       tau_a: float, min_area: float) -> DetectionSet:
    """Detect on maps from :func:`image_score_maps`; quads in original image coordinates."""
    H, W = image_hw
    scale = long_side / max(H, W)
    dets = detect(maps, tau_r, tau_a, min_area)
    for d in dets:
        d.quad = np.clip(d.quad / scale, 0, [W, H])
    return dets


class TextDetector(BaseEstimator):
    """Region/affinity text detector trained on character-annotated scenes.

    Hyper-parameters mirror :class:`ModelConfig`, :class:`TrainConfig` and the
    post-processing thresholds. Fitted attributes end with an underscore.
    """

    def __init__(self, ablation: str = "full", width_mult: float = 0.125, num_bifpn: int = 3,
                 min_width: int = 16, max_iters: int = 500, batch_size: int = 8,
                 lr: float = 1e-3, decay: float = 0.95, decay_every: int = 1000,
                 kl_weight: float = 1.0, long_side: int = 128, augment: bool = True,
                 seed: int = 0, tau_r: float = TAU_REGION, tau_a: float = TAU_AFFINITY,
                 min_area: float = MIN_AREA, iou_threshold: float = 0.5):
        self.ablation = ablation
        self.width_mult = width_mult
        self.num_bifpn = num_bifpn
        self.min_width = min_width
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.decay_every = decay_every
        self.kl_weight = kl_weight
        self.long_side = long_side
        self.augment = augment
        self.seed = seed
        self.tau_r = tau_r
        self.tau_a = tau_a
        self.min_area = min_area
        self.iou_threshold = iou_threshold

    # -- configuration ------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        return ModelConfig.for_ablation(self.ablation, width_mult=self.width_mult,
                                        num_bifpn=self.num_bifpn, min_width=self.min_width)

    def train_config(self) -> TrainConfig:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.long_side % 32:
            raise ValueError("long_side must be divisible by 32")
        return TrainConfig(lr0=self.lr, decay=self.decay, decay_every=self.decay_every,
                           batch_size=self.batch_size, max_iters=self.max_iters,
                           kl_weight=self.kl_weight, seed=self.seed, long_side=self.long_side,
                           augment=self.augment)

    def _check_thresholds(self) -> None:
        for name in ("tau_r", "tau_a"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    # -- training -----------------------------------------------------------------

    def fit(self, X, y=None, out_dir=None, callback=None) -> "TextDetector":
        """Train from scratch on annotated scenes ``X`` (``y`` is ignored)."""
        scenes = check_scenes(X)
        result = train_loop(scenes, self.model_config(), self.train_config(), out_dir=out_dir,
                            callback=callback)
        self.model_ = result.model
        self.history_ = result.history
        self.opt_state_ = result.opt
        self.n_iter_ = self.max_iters
        self.fit_seconds_ = result.seconds
        return self

    # -- inference ----------------------------------------------------------------

    def predict_maps(self, X) -> list[np.ndarray]:
        """Region/affinity maps (2, h, w) per image, covering the resized image content."""
        check_is_fitted(self)
        return [image_score_maps(self.model_, img, self.long_side) for img in check_images(X)]

    def predict(self, X) -> list[DetectionSet]:
        """Detected quads per image, in the coordinates of the original image."""
        check_is_fitted(self)
        self._check_thresholds()
        images = check_images(X)
        return [maps_to_detections(maps, img.shape[1:], self.long_side, self.tau_r, self.tau_a,
                                   self.min_area)
                for img, maps in zip(images, self.predict_maps(images))]

    def score(self, X, y=None) -> float:
        """H-mean of word detections against the scenes' word boxes."""
        return self.evaluate(X).hmean

    def evaluate(self, X):
        scenes = check_scenes(X)
        dets = [d.quads for d in self.predict(scenes)]
        return evaluate(dets, [word_quads(s) for s in scenes], self.iou_threshold)

    # -- persistence --------------------------------------------------------------

    def save(self, path) -> Path:
        check_is_fitted(self)
        return save_checkpoint(path, self.model_, getattr(self, "n_iter_", 0),
                               getattr(self, "opt_state_", None), self.train_config())

    @classmethod
    def load(cls, path, **overrides) -> "TextDetector":
        """Rebuild an estimator from a checkpoint directory."""
        model, manifest, opt = load_checkpoint(path)
        mc, tc = manifest["config"], manifest.get("train_config", {})
        ablation = {(False, False): "baseline", (True, False): "bifpn",
                    (False, True): "kl", (True, True): "full"}[(mc["use_bifpn"],
                                                                 mc["use_bottleneck_kl"])]
        params = dict(ablation=ablation, width_mult=mc["width_mult"], num_bifpn=mc["num_bifpn"],
                      min_width=mc.get("min_width", 1))
        for key, name in (("lr0", "lr"), ("decay", "decay"), ("decay_every", "decay_every"),
                          ("batch_size", "batch_size"), ("max_iters", "max_iters"),
                          ("kl_weight", "kl_weight"), ("seed", "seed"),
                          ("long_side", "long_side"), ("augment", "augment")):
            if key in tc:
                params[name] = tc[key]
        params.update(overrides)
        est = cls(**params)
        est.model_ = model
        est.opt_state_ = opt or OptState()
        est.n_iter_ = manifest["iteration"]
        est.history_ = []
        return est
