"""Image tensors and patch tiling.

An image is a float64 array of shape ``(h, w, c)``. :func:`to_patches`
divides it into non-overlapping ``p x p`` blocks, enumerated in raster
order over the block grid, and flattens every block in ``(row, col,
channel)`` order with the channel index fastest. :func:`from_patches` is the
exact inverse. Both the model side and the image side rely on this one
order; changing it silently breaks the encryption.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from PIL import Image

from . import formats
from .core import GeometryError, ShapeError

TENSOR_MAGIC = b"PLT1"


@dataclass(frozen=True, eq=False)
class PatchMatrix:
    """Flattened patches of one image.

    Attributes:
        data: ``(N, p^2 c)`` array, row ``i`` is block ``B_i``
        patch_size: Patch side ``p``
        grid: Block grid ``(h / p, w / p)``
        channels: Channel count ``c``
    """

    data: np.ndarray
    patch_size: int
    grid: Tuple[int, int]
    channels: int

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.grid[0] * self.patch_size, self.grid[1] * self.patch_size, self.channels)

    def with_data(self, data: np.ndarray) -> "PatchMatrix":
        """Same geometry, new rows (e.g. after multiplying by a key matrix)."""
        return PatchMatrix(data, self.patch_size, self.grid, self.channels)


def as_image(x, name: str = "image") -> np.ndarray:
    """Validate and convert ``x`` to an ``(h, w, c)`` finite float64 array.

    Raises:
        ShapeError: If ``x`` is not three-dimensional
        ValueError: If ``x`` has non-finite entries
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name} must have shape (h, w, c), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_geometry(shape: Tuple[int, ...], patch_size: int) -> Tuple[int, int]:
    """Return the block grid for an image shape, or raise.

    Raises:
        GeometryError: If ``h`` or ``w`` is not a multiple of ``p``
    """
    h, w = shape[0], shape[1]
    if patch_size < 1:
        raise GeometryError(f"Patch size must be >= 1, got {patch_size}")
    if h == 0 or w == 0 or h % patch_size or w % patch_size:
        raise GeometryError(
            f"Image of height {h} and width {w} cannot be tiled by patch size {patch_size}"
        )
    return h // patch_size, w // patch_size


def to_patches(x, patch_size: int) -> PatchMatrix:
    """Divide an image into flattened ``p x p`` blocks.

    Args:
        x: Image of shape ``(h, w, c)``
        patch_size: Patch side ``p``

    Returns:
        PatchMatrix with ``N = h w / p^2`` rows

    Raises:
        GeometryError: If the image is not divisible by ``p`` (no padding)

    Example:
        >>> to_patches(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]), 2).data
        array([[1., 2., 3., 4.]])
    """
    x = as_image(x)
    gh, gw = check_geometry(x.shape, patch_size)
    c = x.shape[2]
    p = patch_size
    blocks = x.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return PatchMatrix(blocks.reshape(gh * gw, p * p * c).copy(), p, (gh, gw), c)


def from_patches(pm: PatchMatrix) -> np.ndarray:
    """Reassemble an image from its patches (exact inverse of :func:`to_patches`).

    Raises:
        GeometryError: If the data does not match the grid metadata
    """
    gh, gw = pm.grid
    p, c = pm.patch_size, pm.channels
    if pm.data.ndim != 2 or pm.data.shape != (gh * gw, p * p * c):
        raise GeometryError(
            f"Patch data of shape {pm.data.shape} does not match grid {pm.grid}, "
            f"patch size {p} and {c} channels"
        )
    blocks = pm.data.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * p, gw * p, c).copy()


def save_tensor(x, path: str) -> None:
    """Write a PLT1 file: magic, u32 h, w, c, float64 data in canonical layout."""
    x = as_image(x)
    with open(path, "wb") as fh:
        formats.write_magic(fh, TENSOR_MAGIC)
        formats.write_u32(fh, *x.shape)
        formats.write_f64(fh, x)


def load_tensor(path: str) -> np.ndarray:
    """Read a PLT1 file.

    Raises:
        FormatError: On bad magic or truncation
    """
    with open(path, "rb") as fh:
        formats.read_magic(fh, TENSOR_MAGIC)
        h, w, c = formats.read_u32(fh, 3)
        return formats.read_f64(fh, (h, w, c))


def load_ppm(path: str) -> np.ndarray:
    """Load an 8-bit image and map pixels to ``[0, 1]``.

    Returns:
        ``(h, w, 3)`` float64 array
    """
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return pixels.astype(np.float64) / 255.0


def save_ppm(x, path: str) -> None:
    """Save a plain ``[0, 1]`` image as 8-bit binary PPM (P6).

    Values are clipped to ``[0, 1]`` and rounded, so encrypted tensors belong
    in PLT1 files instead.
    """
    x = as_image(x)
    if x.shape[2] == 1:
        x = np.repeat(x, 3, axis=2)
    if x.shape[2] != 3:
        raise ShapeError(f"PPM needs 1 or 3 channels, got {x.shape[2]}")
    pixels = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def save_label_ppm(labels, path: str) -> None:
    """Save a label map as P6 with the label value in every channel."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"Label map must be 2-D, got shape {labels.shape}")
    gray = labels.astype(np.uint8)
    Image.fromarray(np.stack([gray] * 3, axis=2)).save(path, format="PPM")


def load_label_ppm(path: str) -> np.ndarray:
    """Read a label map written by :func:`save_label_ppm`."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)[:, :, 0].astype(np.int64)


def load_image(path: str) -> np.ndarray:
    """Load either a PLT1 tensor or an 8-bit image, chosen by the file's magic."""
    with open(path, "rb") as fh:
        is_tensor = formats.peek_magic(fh) == TENSOR_MAGIC
    if is_tensor:
        return load_tensor(path)
    return load_ppm(path)
