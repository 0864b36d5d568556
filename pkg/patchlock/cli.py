"""Command-line interface for PatchLock.

Covers the whole workflow: the model owner trains and encrypts a model and
hands out the key; an authorized user encrypts test images with that key.

Exit codes: 0 on success (including a verification that reports FAIL),
1 on a domain error such as a bad file or a double encryption, 2 on a
usage error.

Example:
    $ patchlock keygen -o owner.plk
    $ patchlock train-toy -o model.plw --seed 1
    $ patchlock encrypt-model -k owner.plk -i model.plw -o model_enc.plw
    $ patchlock verify -k owner.plk -m model.plw
    PASS, max diff 3.109e-15 <= 1.0e-06
"""

import argparse
import logging
import os
import sys
from typing import Callable, List, Optional, Sequence

from .__version__ import __version__
from .core import InvalidStateError, PatchLockError
from .experiments import (
    emit_boxplot_stats,
    evaluate_model,
    format_summary_table,
    run_access_control_experiment,
    write_trials_csv,
)
from .keygen import (
    KeyMaterial,
    SecretKey,
    derive_matrices,
    generate_key,
    key_from_seed,
    load_key,
    parse_key,
    save_key,
)
from .protect import (
    DEFAULT_TOLERANCE,
    PatchEmbedWeights,
    compare_embeddings,
    encrypt_image,
    encrypt_model,
    load_weights,
    read_weights,
    rekey_model,
    verify_equivalence,
    write_weights,
)
from .segmetrics import format_table, to_key_values
from .tensorpatch import load_image, save_label_ppm, save_tensor
from .toymodel import (
    SyntheticSample,
    ToyModel,
    TrainConfig,
    gen_dataset,
    load_checkpoint,
    load_dataset,
    predict,
    save_checkpoint,
    save_dataset,
    train,
)
from .utils import KeyDirectory, configure_logging

logger = logging.getLogger("PatchLock.cli")

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE = 2

# Synthetic evaluation samples start here so they never overlap a training split
HELD_OUT_START = 100_000


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Input file not found: {path}")
    return path


def _load_key(reference: str, args: argparse.Namespace) -> SecretKey:
    return parse_key(reference, KeyDirectory(args.key_dir))


def _rewrite_weights(
    src: str, dst: str, transform: Callable[[PatchEmbedWeights], PatchEmbedWeights]
) -> PatchEmbedWeights:
    """Apply ``transform`` to the PLW1 block of ``src``, keeping any trailing blocks."""
    with open(_require_file(src), "rb") as fh:
        weights = read_weights(fh)
        rest = fh.read()
    result = transform(weights)
    with open(dst, "wb") as fh:
        write_weights(fh, result)
        fh.write(rest)
    return result


def _eval_samples(args: argparse.Namespace) -> List[SyntheticSample]:
    if args.data:
        return load_dataset(args.data)
    return gen_dataset(args.data_seed, args.n, start=HELD_OUT_START)


def cmd_keygen(args: argparse.Namespace) -> int:
    key = key_from_seed(args.seed) if args.seed is not None else generate_key()
    output = args.output
    if output is None:
        output = os.path.join(KeyDirectory(args.key_dir).ensure(), "key.plk")
    save_key(key, output)
    print(f"key {key.fingerprint()} -> {output}")
    if args.print_hex:
        print(key.hex())
    return EXIT_OK


def cmd_keys(args: argparse.Namespace) -> int:
    key_dir = KeyDirectory(args.key_dir)
    names = key_dir.list_keys()
    if not names:
        print(f"no keys in {key_dir.path}")
    for name in names:
        key = load_key(os.path.join(key_dir.path, name))
        print(f"{name:<24} {key.fingerprint()}")
    return EXIT_OK


def cmd_derive(args: argparse.Namespace) -> int:
    key = _load_key(args.key, args)
    km = derive_matrices(key, args.patch_size, args.channels)
    print(f"key          {key.fingerprint()}")
    print(f"dims         {km.side}x{km.side} (p={km.patch_size}, c={km.channels})")
    print(f"kappa_1      {km.kappa:.6e}")
    print(f"attempts     {km.attempts}")
    print(f"residual     {km.residual():.3e}")
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace) -> int:
    cfg = TrainConfig(
        iterations=args.iterations,
        batch_size=args.batch_size,
        lr0=args.lr,
        poly_power=args.poly_power,
        seed=args.seed,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        hidden=args.hidden,
    )
    data_seed = args.seed if args.data_seed is None else args.data_seed
    data = gen_dataset(data_seed, args.train_size)
    if args.save_dataset:
        save_dataset(data, args.save_dataset)
    model = train(cfg, data)
    save_checkpoint(model, args.output)
    print(f"model ({model.parameter_count()} parameters) -> {args.output}")
    return EXIT_OK


def cmd_encrypt_model(args: argparse.Namespace) -> int:
    key = _load_key(args.key, args)

    def transform(w: PatchEmbedWeights) -> PatchEmbedWeights:
        if w.encrypted:
            raise InvalidStateError(f"{args.input} is already encrypted")
        return encrypt_model(w, derive_matrices(key, w.patch_size, w.channels))

    _rewrite_weights(args.input, args.output, transform)
    print(f"encrypted with key {key.fingerprint()} -> {args.output}")
    return EXIT_OK


def cmd_rekey(args: argparse.Namespace) -> int:
    old = _load_key(args.old_key, args)
    new = _load_key(args.new_key, args)

    def transform(w: PatchEmbedWeights) -> PatchEmbedWeights:
        return rekey_model(
            w,
            derive_matrices(old, w.patch_size, w.channels),
            derive_matrices(new, w.patch_size, w.channels),
        )

    _rewrite_weights(args.input, args.output, transform)
    print(f"re-encrypted {old.fingerprint()} -> {new.fingerprint()}: {args.output}")
    return EXIT_OK


def cmd_encrypt_image(args: argparse.Namespace) -> int:
    key = _load_key(args.key, args)
    x = load_image(_require_file(args.input))
    km = derive_matrices(key, args.patch_size, x.shape[2])
    save_tensor(encrypt_image(x, km), args.output)
    print(f"encrypted {x.shape[0]}x{x.shape[1]}x{x.shape[2]} image -> {args.output}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    key = _load_key(args.key, args)
    plain = load_weights(_require_file(args.model))
    if plain.encrypted:
        raise InvalidStateError(f"{args.model} holds encrypted weights; pass the plain model")
    if args.image:
        x = load_image(_require_file(args.image))
    else:
        x = gen_dataset(args.seed, 1, start=HELD_OUT_START)[0].image
    km = derive_matrices(key, plain.patch_size, plain.channels)

    if args.encrypted_model:
        enc = load_weights(_require_file(args.encrypted_model))
        report = compare_embeddings(x, plain, encrypt_image(x, km), enc, args.tol)
    else:
        model_km = None
        if args.model_key:
            model_key = _load_key(args.model_key, args)
            model_km = derive_matrices(model_key, plain.patch_size, plain.channels)
        report = verify_equivalence(x, plain, km, args.tol, model_km)
    print(report.summary())
    return EXIT_OK


def _save_predictions(
    model: ToyModel, samples: Sequence[SyntheticSample], image_key: Optional[KeyMaterial],
    directory: str,
) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, sample in enumerate(samples):
        x = sample.image if image_key is None else encrypt_image(sample.image, image_key)
        save_label_ppm(predict(model, x), os.path.join(directory, f"prediction_{i:05d}.ppm"))
    logger.info(f"Wrote {len(samples)} label maps to {directory}")


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(_require_file(args.model))
    samples = _eval_samples(args)
    image_key = None
    if args.key:
        key = _load_key(args.key, args)
        image_key = derive_matrices(key, model.patch_size, model.embed.channels)
        if not model.embed.encrypted:
            model = model.with_embed(encrypt_model(model.embed, image_key))
    elif model.embed.encrypted:
        logger.warning("Evaluating an encrypted model on plain images")
    cc = evaluate_model(model, samples, image_key)
    if args.save_predictions:
        _save_predictions(model, samples, image_key, args.save_predictions)
    if args.format == "kv":
        for name, value in to_key_values(cc).items():
            print(f"{name}={value}")
    else:
        print(format_table(cc))
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    model = load_checkpoint(_require_file(args.model))
    samples = _eval_samples(args)
    key = _load_key(args.key, args) if args.key else key_from_seed(args.seed)
    report = run_access_control_experiment(
        model, samples, key, args.n_wrong, args.seed, max_workers=args.workers
    )
    print(format_summary_table(report))
    if len(report.wrong_key_mious) >= 4:
        print(emit_boxplot_stats(report))
    if args.csv:
        write_trials_csv(report, args.csv)
    return EXIT_OK


def _add_key(p: argparse.ArgumentParser, flag: str = "-k", name: str = "--key") -> None:
    p.add_argument(flag, name, required=True,
                   help="key file, key name in the key directory, or 64 hex characters")


def _add_eval_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory written by train-toy --save-dataset")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic test split")
    p.add_argument("-n", "--n", type=int, default=64, help="synthetic test samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchlock",
        description="Secret-key access control for patch-embedding segmentation models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    parser.add_argument("--key-dir", help="key directory (default: $PATCHLOCK_KEY_DIR)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("keygen", help="write a new key file")
    p.add_argument("-o", "--output", help="key file (default: <key dir>/key.plk)")
    p.add_argument("--seed", type=int, help="derive the key from an integer (reproducible runs)")
    p.add_argument("--print-hex", action="store_true", help="also print the key as hex")
    p.set_defaults(handler=cmd_keygen)

    p = sub.add_parser("keys", help="list the key files in the key directory")
    p.set_defaults(handler=cmd_keys)

    p = sub.add_parser("derive", help="show the encryption matrix derived from a key")
    _add_key(p)
    p.add_argument("-p", "--patch-size", type=int, default=4)
    p.add_argument("-c", "--channels", type=int, default=3)
    p.set_defaults(handler=cmd_derive)

    p = sub.add_parser("train-toy", help="train the toy segmentation model")
    p.add_argument("-o", "--output", required=True, help="checkpoint file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, help="dataset seed (default: --seed)")
    p.add_argument("--train-size", type=int, default=256)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--poly-power", type=float, default=0.9)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--save-dataset", metavar="DIR", help="also cache the training set here")
    p.set_defaults(handler=cmd_train_toy)

    p = sub.add_parser("encrypt-model", help="encrypt the patch embedding of a weights file")
    _add_key(p)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_encrypt_model)

    p = sub.add_parser("rekey", help="move an encrypted model to a new key without retraining")
    p.add_argument("--old-key", required=True)
    p.add_argument("--new-key", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_rekey)

    p = sub.add_parser("encrypt-image", help="encrypt an image (PPM or PLT1) patch-wise")
    _add_key(p)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True, help="PLT1 tensor file")
    p.add_argument("-p", "--patch-size", type=int, default=4)
    p.set_defaults(handler=cmd_encrypt_image)

    p = sub.add_parser("verify", help="check that encryption leaves the embedding unchanged")
    _add_key(p)
    p.add_argument("-m", "--model", required=True, help="plain weights or checkpoint")
    p.add_argument("-i", "--image", help="image to test (default: a synthetic sample)")
    p.add_argument("--model-key", help="encrypt the model with this key instead of --key")
    p.add_argument("--encrypted-model", help="compare against this already-encrypted file")
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--seed", type=int, default=0, help="seed of the synthetic sample")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("eval", help="mIoU of a checkpoint, optionally with a key")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-k", "--key", help="encrypt images (and a plain model) with this key")
    p.add_argument("--format", choices=("table", "kv"), default="table")
    p.add_argument("--save-predictions", metavar="DIR",
                   help="write predicted label maps as prediction_NNNNN.ppm")
    _add_eval_data(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("experiment", help="baseline vs correct key vs wrong keys")
    p.add_argument("-m", "--model", required=True, help="plain trained checkpoint")
    p.add_argument("-k", "--key", help="owner key (default: derived from --seed)")
    p.add_argument("--n-wrong", type=int, default=50)
    p.add_argument("--seed", type=int, default=0, help="seed of the wrong keys")
    p.add_argument("--workers", type=int, help="thread pool size for wrong-key trials")
    p.add_argument("--csv", help="write one row per wrong-key trial")
    _add_eval_data(p)
    p.set_defaults(handler=cmd_experiment)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else "INFO"
    configure_logging(level)

    try:
        return args.handler(args)
    except (PatchLockError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return EXIT_DOMAIN_ERROR


if __name__ == "__main__":
    sys.exit(main())
