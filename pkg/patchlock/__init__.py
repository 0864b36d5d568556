"""PatchLock - secret-key access control for patch-embedding segmentation models.

A model owner encrypts the patch embedding ``E`` of a trained model with a
matrix derived from a secret key. Users holding the key encrypt their test
images patch-wise with the inverse matrix and get exactly the accuracy of the
unprotected model; anyone else gets a collapsed one.

Basic Usage:
    >>> from patchlock import generate_key, derive_matrices, encrypt_model, encrypt_image
    >>> from patchlock.toymodel import TrainConfig, split_dataset, train
    >>>
    >>> train_set, test_set = split_dataset(seed=0, n_train=256, n_test=64)
    >>> model = train(TrainConfig(), train_set)
    >>>
    >>> key = generate_key()
    >>> km = derive_matrices(key, patch_size=4, channels=3)
    >>> protected = model.with_embed(encrypt_model(model.embed, km))
    >>> x_hat = encrypt_image(test_set[0].image, km)

See docs/ for the file formats and the command-line tool.
"""

from .core import (
    PatchLockError,
    ShapeError,
    GeometryError,
    SingularMatrixError,
    KeyGenerationError,
    EntropyError,
    InvalidStateError,
    LabelError,
    UndefinedLossError,
    TrainingError,
    StatisticsError,
    FormatError,
)
from .keygen import KeyMaterial, SecretKey, derive_matrices, generate_key
from .protect import (
    PatchEmbedWeights,
    decrypt_model,
    encrypt_image,
    encrypt_model,
    patch_embed,
    rekey_model,
    verify_equivalence,
)
from . import linalg, tensorpatch, segmetrics, toymodel, experiments
from .__version__ import __version__, __author__, __license__

__all__ = [
    "PatchLockError",
    "ShapeError",
    "GeometryError",
    "SingularMatrixError",
    "KeyGenerationError",
    "EntropyError",
    "InvalidStateError",
    "LabelError",
    "UndefinedLossError",
    "TrainingError",
    "StatisticsError",
    "FormatError",
    "KeyMaterial",
    "SecretKey",
    "derive_matrices",
    "generate_key",
    "PatchEmbedWeights",
    "decrypt_model",
    "encrypt_image",
    "encrypt_model",
    "patch_embed",
    "rekey_model",
    "verify_equivalence",
    "linalg",
    "tensorpatch",
    "segmetrics",
    "toymodel",
    "experiments",
    "__version__",
]
