"""A desk-scale segmentation model whose first layer is a patch embedding.

The model embeds ``p x p`` patches with ``z0 = x_p @ E + E_pos`` and decodes
every embedded patch independently with a two-layer network::

    logits_patch = gelu(z0 @ W1 + b1) @ W2 + b2        # p^2 * C values

which are placed back at the patch's pixels. Training uses pixel-wise
softmax cross-entropy, SGD with momentum and a polynomial learning-rate
decay. Gradients are computed analytically with NumPy.

The synthetic dataset paints 1 to 3 rectangles or discs in class-specific
colours over a noisy grey background (class 0).

Example:
    >>> train_set = gen_dataset(seed=0, n=256)
    >>> model = train(TrainConfig(), train_set)
    >>> labels = predict(model, train_set[0].image)
"""

import glob
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from . import formats
from .core import ShapeError, TrainingError, UndefinedLossError
from .protect import PatchEmbedWeights, patch_embed, read_weights, write_weights
from .segmetrics import IGNORE_LABEL
from .tensorpatch import (
    PatchMatrix,
    as_image,
    check_geometry,
    from_patches,
    load_label_ppm,
    load_tensor,
    save_label_ppm,
    save_tensor,
    to_patches,
)
from .utils import Logger

logger = logging.getLogger("PatchLock.toymodel")

HEAD_MAGIC = b"PLH1"

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(eq=False)
class ToyModel:
    """Patch embedding plus per-patch two-layer decoder.

    Attributes:
        embed: First-layer weights (possibly encrypted)
        head_w1: ``(D, H)``
        head_b1: ``(H,)``
        head_w2: ``(H, p^2 C)``
        head_b2: ``(p^2 C,)``
        num_classes: ``C``
    """

    embed: PatchEmbedWeights
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        d = self.embed.embed_dim
        hidden = self.head_w1.shape[1] if self.head_w1.ndim == 2 else -1
        k = self.embed.patch_size ** 2 * self.num_classes
        expected = {
            "head_w1": (d, hidden),
            "head_b1": (hidden,),
            "head_w2": (hidden, k),
            "head_b2": (k,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def hidden(self) -> int:
        return self.head_w1.shape[1]

    @property
    def patch_size(self) -> int:
        return self.embed.patch_size

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays by name (updates write through to the model)."""
        return {
            "E": self.embed.E,
            "E_pos": self.embed.E_pos,
            "head_w1": self.head_w1,
            "head_b1": self.head_b1,
            "head_w2": self.head_w2,
            "head_b2": self.head_b2,
        }

    def parameter_count(self) -> int:
        return sum(int(v.size) for v in self.parameters().values())

    def copy(self) -> "ToyModel":
        """Deep copy of all parameters."""
        embed = replace(self.embed, E=self.embed.E.copy(), E_pos=self.embed.E_pos.copy())
        return ToyModel(
            embed,
            self.head_w1.copy(),
            self.head_b1.copy(),
            self.head_w2.copy(),
            self.head_b2.copy(),
            self.num_classes,
        )

    def with_embed(self, embed: PatchEmbedWeights) -> "ToyModel":
        """Same decoder, different first layer (e.g. after encryption)."""
        return replace(self, embed=embed)


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe and architecture of the toy model."""

    iterations: int = 2000
    batch_size: int = 8
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    poly_power: float = 0.9
    seed: int = 0
    patch_size: int = 4
    embed_dim: int = 32
    hidden: int = 64
    num_classes: int = 4
    log_every: int = 200

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class DatasetConfig:
    """Geometry and appearance of the synthetic shapes dataset."""

    height: int = 32
    width: int = 32
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    min_extent: int = 5
    max_extent: int = 11
    background_noise: float = 0.05
    shape_noise: float = 0.03


# RGB of classes 1..3; class 0 is the grey background
CLASS_COLOURS = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.85, 0.20],
        [0.20, 0.25, 0.90],
    ]
)


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    image: np.ndarray
    labels: np.ndarray


def _paint_sample(rng: np.random.Generator, cfg: DatasetConfig) -> SyntheticSample:
    h, w = cfg.height, cfg.width
    base = rng.uniform(0.35, 0.55)
    image = base + cfg.background_noise * rng.standard_normal((h, w, 3))
    labels = np.zeros((h, w), dtype=np.int64)
    rows, cols = np.mgrid[0:h, 0:w]

    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        cls = int(rng.integers(1, cfg.num_classes))
        extent_h = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        extent_w = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        top = int(rng.integers(0, h - extent_h + 1))
        left = int(rng.integers(0, w - extent_w + 1))
        if rng.random() < 0.5:
            mask = (
                (rows >= top) & (rows < top + extent_h) & (cols >= left) & (cols < left + extent_w)
            )
        else:
            radius = min(extent_h, extent_w) / 2.0
            cy, cx = top + extent_h / 2.0 - 0.5, left + extent_w / 2.0 - 0.5
            mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        colour = CLASS_COLOURS[(cls - 1) % len(CLASS_COLOURS)]
        image[mask] = colour + cfg.shape_noise * rng.standard_normal((int(mask.sum()), 3))
        labels[mask] = cls

    return SyntheticSample(np.clip(image, 0.0, 1.0), labels)


def gen_dataset(
    seed: int, n: int, start: int = 0, config: Optional[DatasetConfig] = None
) -> List[SyntheticSample]:
    """Generate ``n`` synthetic samples with indices ``start .. start + n - 1``.

    Sample ``i`` depends only on ``(seed, i)``, so disjoint index ranges of the
    same seed give disjoint train and test splits.

    Raises:
        ValueError: If ``n < 1``
    """
    if n < 1:
        raise ValueError(f"Dataset size must be >= 1, got {n}")
    cfg = config or DatasetConfig()
    return [
        _paint_sample(np.random.default_rng([seed, index]), cfg)
        for index in range(start, start + n)
    ]


def split_dataset(
    seed: int, n_train: int, n_test: int, config: Optional[DatasetConfig] = None
) -> Tuple[List[SyntheticSample], List[SyntheticSample]]:
    """Train and held-out samples from one seed, with no index in common."""
    train_set = gen_dataset(seed, n_train, 0, config)
    test_set = gen_dataset(seed, n_test, n_train, config)
    return train_set, test_set


def init_model(
    image_shape: Tuple[int, int, int],
    patch_size: int = 4,
    embed_dim: int = 32,
    hidden: int = 64,
    num_classes: int = 4,
    seed: int = 0,
) -> ToyModel:
    """Gaussian initialisation scaled by ``1 / sqrt(fan_in)``; biases start at zero."""
    rng = np.random.default_rng(seed)
    return _init_model(rng, image_shape, patch_size, embed_dim, hidden, num_classes)


def _init_model(rng, image_shape, patch_size, embed_dim, hidden, num_classes) -> ToyModel:
    gh, gw = check_geometry(image_shape, patch_size)
    c = image_shape[2]
    patch_dim = patch_size * patch_size * c
    out_dim = patch_size * patch_size * num_classes
    E = rng.standard_normal((patch_dim, embed_dim)) / np.sqrt(patch_dim)
    E_pos = rng.standard_normal((gh * gw, embed_dim)) / np.sqrt(embed_dim)
    return ToyModel(
        PatchEmbedWeights(E, E_pos, patch_size, c),
        rng.standard_normal((embed_dim, hidden)) / np.sqrt(embed_dim),
        np.zeros(hidden),
        rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden),
        np.zeros(out_dim),
        num_classes,
    )


def gelu(a: np.ndarray) -> np.ndarray:
    return 0.5 * a * (1.0 + erf(a / _SQRT_2))


def gelu_grad(a: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(a / _SQRT_2))
    return cdf + a * _INV_SQRT_2PI * np.exp(-0.5 * a * a)


def _stack_patches(model: ToyModel, images) -> Tuple[np.ndarray, Tuple[int, int]]:
    patches = []
    grid = (0, 0)
    for x in images:
        pm = to_patches(x, model.patch_size)
        if pm.channels != model.embed.channels or pm.n_patches != model.embed.n_patches:
            raise ShapeError(
                f"Image of shape {np.shape(x)} does not fit a model for "
                f"{model.embed.n_patches} patches of {model.embed.channels} channels"
            )
        patches.append(pm.data)
        grid = pm.grid
    return np.stack(patches), grid


def _patch_logits_to_image(model: ToyModel, out: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    return from_patches(PatchMatrix(out, model.patch_size, grid, model.num_classes))


def _forward_patches(model: ToyModel, xp: np.ndarray):
    w = model.embed
    z0 = xp @ w.E + w.E_pos
    a1 = z0 @ model.head_w1 + model.head_b1
    h1 = gelu(a1)
    out = h1 @ model.head_w2 + model.head_b2
    return z0, a1, h1, out


def forward(model: ToyModel, x) -> np.ndarray:
    """Per-pixel logits of shape ``(h, w, C)`` for one image.

    The first layer is exactly :func:`patchlock.protect.patch_embed`.
    """
    z0 = patch_embed(as_image(x), model.embed)
    out = gelu(z0 @ model.head_w1 + model.head_b1) @ model.head_w2 + model.head_b2
    gh, gw = check_geometry(np.shape(x), model.patch_size)
    return _patch_logits_to_image(model, out, (gh, gw))


def forward_batch(model: ToyModel, images) -> np.ndarray:
    """Logits ``(B, h, w, C)`` for a sequence of images."""
    xp, grid = _stack_patches(model, images)
    out = _forward_patches(model, xp)[3]
    return np.stack([_patch_logits_to_image(model, o, grid) for o in out])


def predict(model: ToyModel, x) -> np.ndarray:
    """Arg-max label map ``(h, w)``; ties go to the lowest class index."""
    return np.argmax(forward(model, x), axis=-1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(model: ToyModel, images, labels) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean pixel-wise cross-entropy and its gradient for every parameter.

    Args:
        model: Model to differentiate
        images: Sequence or ``(B, h, w, c)`` array of images
        labels: ``(B, h, w)`` ground truth; ``IGNORE_LABEL`` pixels are skipped

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like :meth:`ToyModel.parameters`

    Raises:
        UndefinedLossError: If every pixel is ignored
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("Batch must not be empty")
    xp, grid = _stack_patches(model, images)
    z0, a1, h1, out = _forward_patches(model, xp)
    batch = xp.shape[0]
    logits = np.stack([_patch_logits_to_image(model, o, grid) for o in out])
    if labels.shape != logits.shape[:3]:
        raise ShapeError(f"Labels of shape {labels.shape} do not match logits {logits.shape}")

    valid = labels != IGNORE_LABEL
    count = int(valid.sum())
    if count == 0:
        raise UndefinedLossError("Every pixel in the batch carries the ignore label")

    probs = _softmax(logits)
    target = np.where(valid, labels, 0)
    picked = np.take_along_axis(probs, target[..., None], axis=-1)[..., 0]
    loss = float(-np.log(np.maximum(picked[valid], 1e-300)).sum() / count)

    dlogits = probs.copy()
    np.put_along_axis(dlogits, target[..., None], picked[..., None] - 1.0, axis=-1)
    dlogits *= valid[..., None] / count

    dout = np.stack([to_patches(d, model.patch_size).data for d in dlogits])
    grads = {
        "head_w2": np.einsum("bnh,bnk->hk", h1, dout),
        "head_b2": dout.sum(axis=(0, 1)),
    }
    da1 = (dout @ model.head_w2.T) * gelu_grad(a1)
    grads["head_w1"] = np.einsum("bnd,bnh->dh", z0, da1)
    grads["head_b1"] = da1.sum(axis=(0, 1))
    dz0 = da1 @ model.head_w1.T
    grads["E"] = np.einsum("bnp,bnd->pd", xp, dz0)
    grads["E_pos"] = dz0.sum(axis=0)
    logger.debug(f"Loss {loss:.6f} over {count} pixels in a batch of {batch}")
    return loss, grads


def poly_lr(t: int, iterations: int, lr0: float, power: float) -> float:
    """Polynomial decay ``lr0 * (1 - t / iterations) ** power``."""
    return lr0 * (1.0 - t / iterations) ** power


class SGDMomentum:
    """SGD with momentum and L2 weight decay.

    Velocity follows ``v = momentum * v + (g + weight_decay * w)`` and the
    update is ``w -= lr * v``.
    """

    def __init__(self, params: Dict[str, np.ndarray], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, param in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * param
            v = self.velocity[name]
            v *= self.momentum
            v += g
            param -= lr * v


def train(
    cfg: TrainConfig,
    data: Sequence[SyntheticSample],
    model: Optional[ToyModel] = None,
) -> ToyModel:
    """Train a toy model with SGD, momentum and polynomial learning-rate decay.

    Deterministic for a fixed ``cfg.seed``: initialisation and batch sampling
    share one seeded generator.

    Args:
        cfg: Training recipe
        data: Training samples
        model: Starting point; a fresh model is initialised when omitted
            (it is copied, never modified)

    Returns:
        Trained model

    Raises:
        TrainingError: If the loss becomes non-finite
    """
    if len(data) == 0:
        raise ValueError("Training data must not be empty")
    rng = np.random.default_rng(cfg.seed)
    image_shape = data[0].image.shape
    if model is None:
        model = _init_model(
            rng, image_shape, cfg.patch_size, cfg.embed_dim, cfg.hidden, cfg.num_classes
        )
    else:
        model = model.copy()

    images = np.stack([s.image for s in data])
    labels = np.stack([s.labels for s in data])
    optimizer = SGDMomentum(model.parameters(), cfg.momentum, cfg.weight_decay)
    log = Logger("PatchLock.train")
    replace_batches = cfg.batch_size > len(data)

    for t in range(cfg.iterations):
        index = rng.choice(len(data), size=cfg.batch_size, replace=replace_batches)
        loss, grads = loss_and_grads(model, images[index], labels[index])
        if not np.isfinite(loss):
            raise TrainingError(f"Loss diverged to {loss} at iteration {t}", t)
        lr = poly_lr(t, cfg.iterations, cfg.lr0, cfg.poly_power)
        optimizer.step(grads, lr)
        if cfg.log_every and (t % cfg.log_every == 0 or t == cfg.iterations - 1):
            log.info("train", iteration=t, loss=loss, lr=lr)

    for name, value in model.parameters().items():
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"Parameter {name} became non-finite", cfg.iterations)
    return model


def write_head(fh, model: ToyModel) -> None:
    """Write a PLH1 block: magic, u32 D, H, p^2 C, C, then W1, b1, W2, b2."""
    formats.write_magic(fh, HEAD_MAGIC)
    formats.write_u32(
        fh, model.embed.embed_dim, model.hidden, model.head_w2.shape[1], model.num_classes
    )
    for array in (model.head_w1, model.head_b1, model.head_w2, model.head_b2):
        formats.write_f64(fh, array)


def read_head(fh, embed: PatchEmbedWeights) -> ToyModel:
    formats.read_magic(fh, HEAD_MAGIC)
    d, hidden, k, num_classes = formats.read_u32(fh, 4)
    if d != embed.embed_dim or k != embed.patch_size ** 2 * num_classes:
        raise ShapeError(
            f"Head block (D={d}, outputs={k}) does not match embedding "
            f"(D={embed.embed_dim}, p={embed.patch_size}, C={num_classes})"
        )
    w1 = formats.read_f64(fh, (d, hidden))
    b1 = formats.read_f64(fh, (hidden,))
    w2 = formats.read_f64(fh, (hidden, k))
    b2 = formats.read_f64(fh, (k,))
    return ToyModel(embed, w1, b1, w2, b2, num_classes)


def save_checkpoint(model: ToyModel, path: str) -> None:
    """Write a checkpoint: a PLW1 weights block followed by a PLH1 head block."""
    with open(path, "wb") as fh:
        write_weights(fh, model.embed)
        write_head(fh, model)
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: str) -> ToyModel:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        embed = read_weights(fh)
        return read_head(fh, embed)


def save_dataset(samples: Sequence[SyntheticSample], directory: str) -> None:
    """Cache samples as ``image_NNNNN.plt`` tensors and ``label_NNNNN.ppm`` maps."""
    os.makedirs(directory, exist_ok=True)
    for i, sample in enumerate(samples):
        save_tensor(sample.image, os.path.join(directory, f"image_{i:05d}.plt"))
        save_label_ppm(sample.labels, os.path.join(directory, f"label_{i:05d}.ppm"))
    logger.info(f"Wrote {len(samples)} samples to {directory}")


def load_dataset(directory: str) -> List[SyntheticSample]:
    """Load a dataset cached by :func:`save_dataset`."""
    samples = []
    for image_path in sorted(glob.glob(os.path.join(directory, "image_*.plt"))):
        stem = os.path.basename(image_path)[len("image_"):-len(".plt")]
        labels = load_label_ppm(os.path.join(directory, f"label_{stem}.ppm"))
        samples.append(SyntheticSample(load_tensor(image_path), labels))
    if not samples:
        raise FileNotFoundError(f"No image_*.plt files in {directory}")
    return samples
