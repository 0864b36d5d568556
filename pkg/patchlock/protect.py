"""Model-side and image-side encryption of a patch embedding.

The protected asset is the patch embedding ``E`` of shape ``(p^2 c, D)``.
The model owner replaces it with ``E' = E_enc @ E``; an authorized user
multiplies every flattened patch of a test image by ``E_enc^-1`` on the
right. Inside the first layer the two cancel::

    x_hat_i @ E' + E_pos_i = x_i @ E_enc^-1 @ E_enc @ E + E_pos_i = x_i @ E + E_pos_i

so the encrypted model behaves exactly like the plain one for key holders.
Position embeddings stay in plaintext.

Example:
    >>> key_material = derive_matrices(generate_key(), patch_size=4, channels=3)
    >>> protected = encrypt_model(weights, key_material)
    >>> x_hat = encrypt_image(x, key_material)
    >>> verify_equivalence(x, weights, key_material).passed
    True
"""

import logging
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Optional

import numpy as np

from . import formats
from .core import FormatError, GeometryError, InvalidStateError, ShapeError
from .keygen import KeyMaterial
from .linalg import as_matrix, mat_mul
from .tensorpatch import from_patches, to_patches

logger = logging.getLogger("PatchLock.protect")

WEIGHTS_MAGIC = b"PLW1"
DEFAULT_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class PatchEmbedWeights:
    """Patch and position embeddings of the first layer.

    Attributes:
        E: Patch embedding, ``(p^2 c, D)``
        E_pos: Position embeddings, ``(N, D)``; row ``i`` belongs to patch ``i``
        patch_size: Patch side ``p``
        channels: Channel count ``c``
        encrypted: Whether ``E`` currently holds ``E_enc @ E``
    """

    E: np.ndarray
    E_pos: np.ndarray
    patch_size: int
    channels: int
    encrypted: bool = False

    def __post_init__(self) -> None:
        E = as_matrix(self.E, "patch embedding")
        E_pos = as_matrix(self.E_pos, "position embedding")
        side = self.patch_size * self.patch_size * self.channels
        if E.shape[0] != side:
            raise ShapeError(
                f"Patch embedding for p={self.patch_size}, c={self.channels} needs "
                f"{side} rows, got shape {E.shape}"
            )
        if E_pos.shape[1] != E.shape[1]:
            raise ShapeError(
                f"Position embedding {E_pos.shape} does not match patch embedding {E.shape}"
            )
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "E_pos", E_pos)

    @property
    def embed_dim(self) -> int:
        return self.E.shape[1]

    @property
    def n_patches(self) -> int:
        return self.E_pos.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.E.shape[0]


@dataclass(frozen=True)
class EquivalenceReport:
    """Result of comparing plain and encrypted embeddings."""

    max_diff: float
    mean_diff: float
    tol: float
    passed: bool

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        relation = "<=" if self.passed else ">"
        return f"{status}, max diff {self.max_diff:.3e} {relation} {self.tol:.1e}"


def patch_embed(x, w: PatchEmbedWeights) -> np.ndarray:
    """Embed an image: row ``i`` is ``flatten(B_i) @ E + E_pos[i]``.

    Args:
        x: Image ``(h, w, c)``
        w: Embedding weights

    Returns:
        ``(N, D)`` embedded patches

    Raises:
        ShapeError: If channels or patch count do not match the weights
    """
    pm = to_patches(x, w.patch_size)
    if pm.channels != w.channels:
        raise ShapeError(f"Image has {pm.channels} channels, weights expect {w.channels}")
    if pm.n_patches != w.n_patches:
        raise ShapeError(
            f"Image yields {pm.n_patches} patches, weights carry {w.n_patches} positions"
        )
    return pm.data @ w.E + w.E_pos


def _check_key(w: PatchEmbedWeights, km: KeyMaterial) -> None:
    if km.patch_size != w.patch_size or km.channels != w.channels:
        raise ShapeError(
            f"Key derived for p={km.patch_size}, c={km.channels} cannot be used with "
            f"weights for p={w.patch_size}, c={w.channels}"
        )


def encrypt_model(w: PatchEmbedWeights, km: KeyMaterial) -> PatchEmbedWeights:
    """Replace ``E`` with ``E_enc @ E``.

    Raises:
        ShapeError: If the key does not match the weight geometry
        InvalidStateError: If the weights are already encrypted
    """
    if w.encrypted:
        raise InvalidStateError("Weights are already encrypted")
    _check_key(w, km)
    logger.debug(f"Encrypting {w.patch_dim}x{w.embed_dim} patch embedding")
    return replace(w, E=mat_mul(km.enc, w.E), encrypted=True)


def decrypt_model(w: PatchEmbedWeights, km: KeyMaterial) -> PatchEmbedWeights:
    """Recover the plain ``E`` from ``E'`` by left-multiplying with ``E_enc^-1``.

    Raises:
        InvalidStateError: If the weights are not encrypted
    """
    if not w.encrypted:
        raise InvalidStateError("Weights are not encrypted")
    _check_key(w, km)
    return replace(w, E=mat_mul(km.inv, w.E), encrypted=False)


def rekey_model(
    w: PatchEmbedWeights, old: KeyMaterial, new: KeyMaterial
) -> PatchEmbedWeights:
    """Move encrypted weights from one key to another without retraining."""
    return encrypt_model(decrypt_model(w, old), new)


def _transform_patches(x, km: KeyMaterial, matrix: np.ndarray) -> np.ndarray:
    pm = to_patches(x, km.patch_size)
    if pm.channels != km.channels:
        raise GeometryError(f"Image has {pm.channels} channels, key expects {km.channels}")
    return from_patches(pm.with_data(pm.data @ matrix))


def encrypt_image(x, km: KeyMaterial) -> np.ndarray:
    """Multiply every flattened patch by ``E_enc^-1`` and reassemble.

    The result is generally outside ``[0, 1]``.

    Raises:
        GeometryError: If the image does not fit the key's patch geometry
    """
    return _transform_patches(x, km, km.inv)


def decrypt_image(x_hat, km: KeyMaterial) -> np.ndarray:
    """Undo :func:`encrypt_image` by multiplying patches with ``E_enc``."""
    return _transform_patches(x_hat, km, km.enc)


def compare_embeddings(
    x,
    plain_w: PatchEmbedWeights,
    x_hat,
    enc_w: PatchEmbedWeights,
    tol: float = DEFAULT_TOLERANCE,
) -> EquivalenceReport:
    """Compare ``patch_embed(x, plain_w)`` with ``patch_embed(x_hat, enc_w)``."""
    diff = np.abs(patch_embed(x_hat, enc_w) - patch_embed(x, plain_w))
    max_diff = float(diff.max())
    return EquivalenceReport(max_diff, float(diff.mean()), tol, max_diff <= tol)


def verify_equivalence(
    x,
    plain_w: PatchEmbedWeights,
    km: KeyMaterial,
    tol: float = DEFAULT_TOLERANCE,
    model_km: Optional[KeyMaterial] = None,
) -> EquivalenceReport:
    """Check that encryption leaves the embedded patches unchanged.

    Args:
        x: Plain image
        plain_w: Plain weights
        km: Key used to encrypt the image
        tol: Largest acceptable absolute difference
        model_km: Key used to encrypt the model, ``km`` when omitted; pass a
            different key to measure the wrong-key case

    Returns:
        EquivalenceReport
    """
    enc_w = encrypt_model(plain_w, model_km if model_km is not None else km)
    report = compare_embeddings(x, plain_w, encrypt_image(x, km), enc_w, tol)
    logger.debug(f"Equivalence check: {report.summary()}")
    return report


def write_weights(fh: BinaryIO, w: PatchEmbedWeights) -> None:
    """Write a PLW1 block: magic, u32 p, c, D, N, flag byte, E, E_pos."""
    formats.write_magic(fh, WEIGHTS_MAGIC)
    formats.write_u32(fh, w.patch_size, w.channels, w.embed_dim, w.n_patches)
    fh.write(struct.pack("<B", 1 if w.encrypted else 0))
    formats.write_f64(fh, w.E)
    formats.write_f64(fh, w.E_pos)


def read_weights(fh: BinaryIO) -> PatchEmbedWeights:
    """Read a PLW1 block from an open stream."""
    formats.read_magic(fh, WEIGHTS_MAGIC)
    p, c, d, n = formats.read_u32(fh, 4)
    flag = fh.read(1)
    if len(flag) != 1 or flag[0] > 1:
        raise FormatError(f"Bad encrypted flag {flag!r} in weights block")
    E = formats.read_f64(fh, (p * p * c, d))
    E_pos = formats.read_f64(fh, (n, d))
    return PatchEmbedWeights(E, E_pos, p, c, encrypted=bool(flag[0]))


def save_weights(w: PatchEmbedWeights, path: str) -> None:
    with open(path, "wb") as fh:
        write_weights(fh, w)


def load_weights(path: str) -> PatchEmbedWeights:
    """Read the PLW1 block at the start of ``path`` (a trailing head block is ignored)."""
    with open(path, "rb") as fh:
        return read_weights(fh)
