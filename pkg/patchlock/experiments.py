"""Access-control experiment: baseline, correct key and wrong keys.

One run evaluates a trained toy model four ways on the same test set:

* baseline: plain model, plain images;
* correct key: model encrypted with key ``K``, images encrypted with ``K``;
* plain images: encrypted model fed unencrypted images (a user without a key);
* wrong keys: encrypted model, images encrypted with ``n_wrong`` other keys.

The wrong keys are derived from ``trial_seed``, so a run is reproducible.
"""

import csv
import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import InvalidStateError, ShapeError, StatisticsError
from .keygen import KeyMaterial, SecretKey, derive_matrices
from .protect import encrypt_image, encrypt_model
from .segmetrics import ConfusionCounts
from .tensorpatch import check_geometry
from .toymodel import SyntheticSample, ToyModel, forward_batch
from .utils import Logger

DEFAULT_WRONG_KEYS = 50
EVAL_BATCH = 32
MIN_TRIALS = 4

_WRONG_KEY_LABEL = b"patchlock/wrong-key/v1"


@dataclass(frozen=True)
class ExperimentReport:
    """mIoU values of one access-control run.

    Attributes:
        baseline_miou: Plain model on plain images
        correct_key_miou: Encrypted model on images encrypted with the same key
        plain_image_miou: Encrypted model on unencrypted images
        wrong_key_mious: One value per wrong key, in trial order
        wrong_key_fingerprints: Fingerprints of the wrong keys, in trial order
        correct_key_disagreements: Pixels where the correct-key prediction
            differs from baseline although the baseline top-logit margin
            exceeds ``1e-5``
    """

    baseline_miou: float
    correct_key_miou: float
    plain_image_miou: float
    wrong_key_mious: Tuple[float, ...]
    wrong_key_fingerprints: Tuple[str, ...]
    correct_key_disagreements: int = 0

    @property
    def wrong_key_mean(self) -> float:
        return float(np.mean(self.wrong_key_mious))

    @property
    def wrong_key_max(self) -> float:
        return float(np.max(self.wrong_key_mious))

    @property
    def wrong_key_min(self) -> float:
        return float(np.min(self.wrong_key_mious))


@dataclass(frozen=True)
class BoxplotStats:
    """Quartiles, Tukey fences and whisker ends of a set of trial values.

    Whisker ends are the most extreme values still inside the fences
    ``[Q1 - 1.5 IQR, Q3 + 1.5 IQR]``; everything outside is an outlier.
    """

    count: int
    q1: float
    median: float
    q3: float
    lower_fence: float
    upper_fence: float
    lower_whisker: float
    upper_whisker: float
    outliers: Tuple[float, ...]


def boxplot_stats(values: Sequence[float]) -> BoxplotStats:
    """Box-plot statistics with linearly interpolated quantiles.

    Raises:
        StatisticsError: If fewer than four values are given
    """
    data = np.asarray(values, dtype=np.float64)
    if data.size < MIN_TRIALS:
        raise StatisticsError(f"Need at least {MIN_TRIALS} trials, got {data.size}")
    q1, median, q3 = np.percentile(data, [25.0, 50.0, 75.0], method="linear")
    iqr = q3 - q1
    lower_fence, upper_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = data[(data >= lower_fence) & (data <= upper_fence)]
    outliers = tuple(float(v) for v in np.sort(data[(data < lower_fence) | (data > upper_fence)]))
    return BoxplotStats(
        count=int(data.size),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        lower_fence=float(lower_fence),
        upper_fence=float(upper_fence),
        lower_whisker=float(inside.min()),
        upper_whisker=float(inside.max()),
        outliers=outliers,
    )


def _logits(model: ToyModel, images: Sequence[np.ndarray]) -> np.ndarray:
    chunks = [
        forward_batch(model, images[i:i + EVAL_BATCH]) for i in range(0, len(images), EVAL_BATCH)
    ]
    return np.concatenate(chunks)


def _miou_from_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    cc = ConfusionCounts(num_classes)
    cc.accumulate(np.argmax(logits, axis=-1), labels)
    result = cc.miou()
    if result.miou is None:
        raise ValueError("Test set has no labelled pixel; mIoU is undefined")
    return result.miou


def evaluate_model(
    model: ToyModel,
    samples: Sequence[SyntheticSample],
    image_key: Optional[KeyMaterial] = None,
) -> ConfusionCounts:
    """Confusion counts of ``model`` on ``samples``.

    Args:
        model: Plain or encrypted model
        samples: Test samples with plain images
        image_key: When given, images are encrypted with it before inference

    Returns:
        Accumulated ConfusionCounts
    """
    images = [s.image for s in samples]
    if image_key is not None:
        images = [encrypt_image(x, image_key) for x in images]
    cc = ConfusionCounts(model.num_classes)
    for s, logits in zip(samples, _logits(model, images)):
        cc.accumulate(np.argmax(logits, axis=-1), s.labels)
    return cc


def wrong_keys(key: SecretKey, n_wrong: int, trial_seed: int) -> List[SecretKey]:
    """Derive ``n_wrong`` keys distinct from ``key``, deterministically from ``trial_seed``."""
    keys = []
    counter = 0
    while len(keys) < n_wrong:
        material = _WRONG_KEY_LABEL + struct.pack("<qQ", trial_seed, counter)
        candidate = SecretKey(hashlib.sha256(material).digest())
        counter += 1
        if candidate.seed != key.seed:
            keys.append(candidate)
    return keys


def _confident_disagreements(baseline: np.ndarray, other: np.ndarray, margin: float) -> int:
    top2 = np.sort(baseline, axis=-1)[..., -2:]
    confident = (top2[..., 1] - top2[..., 0]) > margin
    changed = np.argmax(baseline, axis=-1) != np.argmax(other, axis=-1)
    return int(np.count_nonzero(confident & changed))


def run_access_control_experiment(
    model: ToyModel,
    testset: Sequence[SyntheticSample],
    key: SecretKey,
    n_wrong: int = DEFAULT_WRONG_KEYS,
    trial_seed: int = 0,
    max_workers: Optional[int] = None,
    margin: float = 1e-5,
) -> ExperimentReport:
    """Compare baseline, correct-key, no-key and wrong-key mIoU.

    Args:
        model: Trained plain model
        testset: Non-empty test samples
        key: The owner's key
        n_wrong: Number of wrong keys to try
        trial_seed: Seed for the wrong keys
        max_workers: Run wrong-key trials on a thread pool of this size;
            results are reduced in trial order either way
        margin: Top-logit margin above which correct-key labels must match baseline

    Returns:
        ExperimentReport

    Raises:
        InvalidStateError: If the model weights are already encrypted
        ShapeError: If the test images do not fit the model
    """
    if not testset:
        raise ValueError("Test set must not be empty")
    if model.embed.encrypted:
        raise InvalidStateError("Experiment expects the plain model; got encrypted weights")
    image_shape = testset[0].image.shape
    gh, gw = check_geometry(image_shape, model.patch_size)
    if image_shape[2] != model.embed.channels or gh * gw != model.embed.n_patches:
        raise ShapeError(
            f"Test images of shape {image_shape} do not fit a model for "
            f"{model.embed.n_patches} patches of {model.embed.channels} channels"
        )

    log = Logger("PatchLock.experiments")
    p, c = model.patch_size, model.embed.channels
    images = [s.image for s in testset]
    labels = np.stack([s.labels for s in testset])

    baseline_logits = _logits(model, images)
    baseline = _miou_from_logits(baseline_logits, labels, model.num_classes)
    log.info("baseline", miou=baseline)

    km = derive_matrices(key, p, c)
    protected = model.with_embed(encrypt_model(model.embed, km))
    correct_logits = _logits(protected, [encrypt_image(x, km) for x in images])
    correct = _miou_from_logits(correct_logits, labels, model.num_classes)
    disagreements = _confident_disagreements(baseline_logits, correct_logits, margin)
    log.info("correct key", miou=correct, disagreements=disagreements)

    plain = _miou_from_logits(_logits(protected, images), labels, model.num_classes)
    log.info("plain images on protected model", miou=plain)

    candidates = wrong_keys(key, n_wrong, trial_seed)

    def trial(index: int) -> float:
        wrong = derive_matrices(candidates[index], p, c)
        logits = _logits(protected, [encrypt_image(x, wrong) for x in images])
        value = _miou_from_logits(logits, labels, model.num_classes)
        log.debug("wrong key", trial=index, key=candidates[index].fingerprint(), miou=value)
        return value

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            mious = list(pool.map(trial, range(n_wrong)))
    else:
        mious = [trial(i) for i in range(n_wrong)]

    report = ExperimentReport(
        baseline_miou=baseline,
        correct_key_miou=correct,
        plain_image_miou=plain,
        wrong_key_mious=tuple(mious),
        wrong_key_fingerprints=tuple(k.fingerprint() for k in candidates),
        correct_key_disagreements=disagreements,
    )
    if mious:
        log.info("wrong keys", trials=n_wrong, mean=report.wrong_key_mean, max=report.wrong_key_max)
    return report


def emit_boxplot_stats(report: ExperimentReport) -> str:
    """Box-plot summary of the wrong-key trials as ``name,value`` CSV lines.

    The baseline is included as the reference line value.

    Raises:
        StatisticsError: If the report has fewer than four trials
    """
    stats = boxplot_stats(report.wrong_key_mious)
    rows = [
        ("trials", str(stats.count)),
        ("baseline", f"{report.baseline_miou:.6f}"),
        ("q1", f"{stats.q1:.6f}"),
        ("median", f"{stats.median:.6f}"),
        ("q3", f"{stats.q3:.6f}"),
        ("lower_fence", f"{stats.lower_fence:.6f}"),
        ("upper_fence", f"{stats.upper_fence:.6f}"),
        ("lower_whisker", f"{stats.lower_whisker:.6f}"),
        ("upper_whisker", f"{stats.upper_whisker:.6f}"),
        ("outliers", " ".join(f"{v:.6f}" for v in stats.outliers)),
    ]
    return "\n".join(f"{name},{value}" for name, value in rows)


def format_summary_table(report: ExperimentReport) -> str:
    """Human-readable table with Baseline / Correct (K) / Incorrect (K') columns."""
    incorrect = f"{report.wrong_key_mean:.4f}" if report.wrong_key_mious else "-"
    lines = [
        "  Baseline |  Correct (K) |  Incorrect (K') |   No key",
        f"{report.baseline_miou:>10.4f} | {report.correct_key_miou:>12.4f} | "
        f"{incorrect:>15} | {report.plain_image_miou:>8.4f}",
    ]
    if report.wrong_key_mious:
        lines.append(
            f"wrong keys: {len(report.wrong_key_mious)} trials, "
            f"min {report.wrong_key_min:.4f}, max {report.wrong_key_max:.4f}"
        )
    return "\n".join(lines)


def write_trials_csv(report: ExperimentReport, path: str) -> None:
    """Write one CSV row per wrong-key trial (trial, key fingerprint, mIoU)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "key_fingerprint", "miou"])
        for i, (fingerprint, value) in enumerate(
            zip(report.wrong_key_fingerprints, report.wrong_key_mious)
        ):
            writer.writerow([i, fingerprint, repr(value)])
