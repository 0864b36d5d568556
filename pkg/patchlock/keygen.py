"""Secret keys and the encryption matrices derived from them.

A :class:`SecretKey` is 32 random bytes. :func:`derive_matrices` expands it
into the model-side matrix ``E_enc`` (``p^2 c`` square, standard normal
entries) and the image-side matrix ``E_enc^-1``.

Derivation is bit-reproducible across machines. The byte stream comes from
a Philox-4x64 counter generator keyed by
``SHA-256(label || seed || u32 p || u32 c || u32 attempt)[:16]`` read as a
little-endian integer. Each raw 64-bit word ``w`` becomes the uniform
``(w >> 11) * 2**-53``; consecutive pairs ``(u1, u2)`` become the normals
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` and ``... * sin(2 pi u2)`` and fill
the matrix in row-major order. See ``docs/file-formats.md``.
"""

import hashlib
import logging
import os
import secrets
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import formats
from .core import (
    EntropyError,
    FormatError,
    KeyGenerationError,
    ShapeError,
    SingularMatrixError,
)
from .linalg import as_matrix, condition_estimate, identity_residual, lu_factor, mat_inverse
from .utils import KeyDirectory

logger = logging.getLogger("PatchLock.keygen")

KEY_MAGIC = b"PLK1"
SEED_BYTES = 32
MAX_SIDE = 4096
KAPPA_MAX = 1e6
MAX_ATTEMPTS = 8

_MATRIX_LABEL = b"patchlock/enc-matrix/v1"
_SEED_LABEL = b"patchlock/key-from-seed/v1"


@dataclass(frozen=True)
class SecretKey:
    """32-byte secret seed.

    Example:
        >>> key = generate_key()
        >>> key_material = derive_matrices(key, patch_size=4, channels=3)
    """

    seed: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if not isinstance(self.seed, (bytes, bytearray)):
            raise TypeError(f"Key seed must be bytes, got {type(self.seed).__name__}")
        if len(self.seed) != SEED_BYTES:
            raise ValueError(f"Key seed must be {SEED_BYTES} bytes, got {len(self.seed)}")
        object.__setattr__(self, "seed", bytes(self.seed))

    def __repr__(self) -> str:
        return f"SecretKey(fingerprint={self.fingerprint()})"

    @classmethod
    def from_hex(cls, text: str) -> "SecretKey":
        """Parse 64 hexadecimal characters."""
        text = text.strip()
        if len(text) != 2 * SEED_BYTES:
            raise ValueError(f"Hex key must be {2 * SEED_BYTES} characters, got {len(text)}")
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.seed.hex()

    def fingerprint(self) -> str:
        """Short non-secret identifier, safe to print in logs."""
        return hashlib.sha256(b"patchlock/fingerprint" + self.seed).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class KeyMaterial:
    """Matrices derived from a key for one patch geometry.

    Attributes:
        enc: Model-side matrix ``E_enc`` (``p^2 c`` square)
        inv: Image-side matrix ``E_enc^-1``
        patch_size: Patch side ``p``
        channels: Channel count ``c``
        kappa: 1-norm condition estimate of ``enc``
        attempts: Draws needed to reach an acceptable matrix
    """

    enc: np.ndarray
    inv: np.ndarray
    patch_size: int
    channels: int
    kappa: float
    attempts: int = 1

    @property
    def side(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def residual(self) -> float:
        """Largest absolute entry of ``enc @ inv - I``."""
        return identity_residual(self.enc, self.inv)

    @classmethod
    def from_matrix(cls, enc, patch_size: int, channels: int) -> "KeyMaterial":
        """Wrap an explicit matrix, e.g. the identity for a no-op key.

        Raises:
            ShapeError: If ``enc`` is not ``p^2 c`` square
            SingularMatrixError: If ``enc`` cannot be inverted
            KeyGenerationError: If ``enc`` is too badly conditioned to use
        """
        enc = as_matrix(enc, "encryption matrix")
        side = patch_size * patch_size * channels
        if enc.shape != (side, side):
            raise ShapeError(
                f"Encryption matrix for p={patch_size}, c={channels} must be "
                f"{side}x{side}, got {enc.shape}"
            )
        factors = lu_factor(enc)
        kappa = condition_estimate(enc, factors)
        if kappa > KAPPA_MAX:
            raise KeyGenerationError(
                f"Encryption matrix has kappa {kappa:.3e}, above the limit of {KAPPA_MAX:.0e}"
            )
        return cls(enc, mat_inverse(enc, factors), patch_size, channels, kappa)


def generate_key() -> SecretKey:
    """Draw a fresh key from the operating system's CSPRNG.

    Raises:
        EntropyError: If no entropy source is available
    """
    try:
        seed = secrets.token_bytes(SEED_BYTES)
    except (NotImplementedError, OSError) as e:
        raise EntropyError(f"No entropy source available: {e}") from e
    return SecretKey(seed)


def key_from_seed(seed: int) -> SecretKey:
    """Deterministic key for reproducible runs. Never use for real protection."""
    digest = hashlib.sha256(_SEED_LABEL + str(int(seed)).encode("ascii")).digest()
    return SecretKey(digest)


def _philox_key(key: SecretKey, patch_size: int, channels: int, attempt: int) -> int:
    material = _MATRIX_LABEL + key.seed + struct.pack("<III", patch_size, channels, attempt)
    return int.from_bytes(hashlib.sha256(material).digest()[:16], "little")


def gaussian_stream(philox_key: int, count: int) -> np.ndarray:
    """Standard normal draws from a keyed Philox stream (documented mapping).

    Args:
        philox_key: 128-bit Philox key
        count: Number of normals

    Returns:
        Array of ``count`` float64 values
    """
    pairs = (count + 1) // 2
    raw = np.random.Philox(key=philox_key).random_raw(2 * pairs).astype(np.uint64)
    uniform = (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    u1, u2 = uniform[0::2], uniform[1::2]
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    normals = np.empty(2 * pairs, dtype=np.float64)
    normals[0::2] = radius * np.cos(angle)
    normals[1::2] = radius * np.sin(angle)
    return normals[:count]


def derive_matrices(key: SecretKey, patch_size: int, channels: int) -> KeyMaterial:
    """Expand ``key`` into ``E_enc`` and its inverse.

    Draws are rejected and regenerated under a new domain-separated seed
    when the matrix is numerically singular or its condition estimate
    exceeds ``KAPPA_MAX``.

    Args:
        key: Secret key
        patch_size: Patch side ``p`` (>= 1)
        channels: Channel count ``c`` (>= 1)

    Returns:
        KeyMaterial for this geometry

    Raises:
        ValueError: If the geometry is out of range
        KeyGenerationError: If every attempt was rejected
    """
    if patch_size < 1 or channels < 1:
        raise ValueError(f"patch_size and channels must be >= 1, got {patch_size}, {channels}")
    side = patch_size * patch_size * channels
    if side > MAX_SIDE:
        raise ValueError(f"Matrix side p^2*c = {side} exceeds the limit of {MAX_SIDE}")

    for attempt in range(MAX_ATTEMPTS):
        enc = gaussian_stream(_philox_key(key, patch_size, channels, attempt), side * side)
        enc = enc.reshape(side, side)
        try:
            factors = lu_factor(enc)
            kappa = condition_estimate(enc, factors)
        except SingularMatrixError:
            logger.warning(f"Draw {attempt} for key {key.fingerprint()} is singular, retrying")
            continue
        if kappa > KAPPA_MAX:
            logger.warning(
                f"Draw {attempt} for key {key.fingerprint()} has kappa {kappa:.3e}, retrying"
            )
            continue
        inv = mat_inverse(enc, factors)
        logger.debug(
            f"Derived {side}x{side} matrix for key {key.fingerprint()} "
            f"(attempt {attempt}, kappa {kappa:.3e})"
        )
        return KeyMaterial(enc, inv, patch_size, channels, kappa, attempt + 1)

    raise KeyGenerationError(
        f"No well-conditioned {side}x{side} matrix after {MAX_ATTEMPTS} attempts"
    )


def save_key(key: SecretKey, path: str) -> None:
    """Write a PLK1 key file (magic + 32 seed bytes)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        formats.write_magic(fh, KEY_MAGIC)
        fh.write(key.seed)
    logger.info(f"Key {key.fingerprint()} written to {path}")


def load_key(path: str) -> SecretKey:
    """Read a PLK1 key file.

    Raises:
        FormatError: If the magic or length is wrong
    """
    with open(path, "rb") as fh:
        formats.read_magic(fh, KEY_MAGIC)
        seed = fh.read(SEED_BYTES + 1)
    if len(seed) != SEED_BYTES:
        raise FormatError(f"Key file {path} must hold {SEED_BYTES} seed bytes, got {len(seed)}")
    return SecretKey(seed)


def parse_key(reference: str, key_dir: Optional[KeyDirectory] = None) -> SecretKey:
    """Load a key given as a file path, a name in the key directory, or 64 hex chars.

    Args:
        reference: Path, bare key name, or hexadecimal key
        key_dir: Directory for bare names (defaults to ``$PATCHLOCK_KEY_DIR``)

    Returns:
        The key
    """
    if os.path.exists(reference):
        return load_key(reference)
    if len(reference) == 2 * SEED_BYTES:
        try:
            return SecretKey.from_hex(reference)
        except ValueError:
            pass
    return load_key((key_dir or KeyDirectory()).resolve(reference))
