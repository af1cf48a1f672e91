"""
``ppap`` command line: synth, train, precompute, infer, sweep, bench, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical
failure. ``PPAP_VERBOSITY`` (DEBUG, INFO, WARNING, ERROR) sets the log level.
"""

import argparse
import json
import logging
import os
import sys
from itertools import product
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from vivarium_ppap import data as data_mod
from vivarium_ppap.dsp import log_mel_spectrogram, read_wav
from vivarium_ppap.errors import EXIT_NUMERICAL, EXIT_OK, DataValidationError, UsageError, exit_code_for
from vivarium_ppap.inference import (
    SILENT_ID, SWEEP_COLUMNS, QueryPlan, benchmark_schedules, gain_sweep, load_bank,
    precompute_bank, query_optimized, rank, save_bank,
)
from vivarium_ppap.model import AttentionVariant, AugmentationVariant, gradcheck_model, load_weights
from vivarium_ppap.training import save_training_artifacts, train
from vivarium_ppap.utils.atomic import atomic_path, atomic_write_text
from vivarium_ppap.utils.simple_config import RunConfig, save_config_file

logger = logging.getLogger(__name__)

VERBOSITY_ENV = 'PPAP_VERBOSITY'


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def configure_logging():
    level = os.environ.get(VERBOSITY_ENV, 'INFO').upper()
    if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
        level = 'INFO'
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def parse_range(spec: str, with_count: bool) -> Tuple[float, ...]:
    """``lo:hi`` or ``lo:hi:count`` on the log10 gain axis."""
    parts = spec.split(':')
    expected = 3 if with_count else 2
    if len(parts) != expected:
        form = 'lo:hi:count' if with_count else 'lo:hi'
        raise UsageError(f"Expected a gain range of the form {form}, got '{spec}'")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        count = int(parts[2]) if with_count else None
    except ValueError:
        raise UsageError(f"Could not parse gain range '{spec}'") from None
    if lo > hi:
        raise UsageError(f"Gain range '{spec}' runs backwards")
    return (lo, hi, count) if with_count else (lo, hi)


def _ensure_empty(out_dir: Path, force: bool):
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise UsageError(f"{out_dir} exists and is not empty; pass --force to write into it")


def _soundscape_spectrogram(path, model):
    return log_mel_spectrogram(read_wav(path), **model.config.spectrogram_kwargs())


def cmd_synth(args) -> int:
    if args.seed is None:
        raise UsageError("`synth` needs --seed")
    out_dir = Path(args.out_dir)
    _ensure_empty(out_dir, args.force)
    specs = data_mod.default_scene_specs(noise_std=args.noise_std)
    manifest = data_mod.generate_synthetic_dataset(
        specs,
        n_scenes=args.n_scenes,
        seed=args.seed,
        out_dir=out_dir,
        records_per_scene=args.records_per_scene,
        maskers_per_class=args.maskers_per_class,
        duration=args.duration,
        write_mixtures=args.write_mixtures,
    )
    print(f"Wrote {len(manifest)} records for {args.n_scenes} scenes to {out_dir / 'manifest.jsonl'}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    return RunConfig.from_sources(
        args.config,
        manifest=args.manifest,
        output_dir=args.out_dir,
        seed=args.seed,
        fold=args.fold,
        lr=args.lr,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        model_overrides={
            'augmentation': args.augmentation,
            'attention': args.attention,
            'dropout': args.dropout,
        },
    )


def _train_one(training_data, config: RunConfig, fold: Optional[int], seed: int, out_dir: Path) -> dict:
    result = train(
        training_data, fold, config.model, seed,
        lr=config.lr, max_epochs=config.max_epochs, batch_size=config.batch_size,
    )
    save_training_artifacts(result, out_dir)
    echo = config.to_dict()
    echo.update(seed=seed, fold=fold)
    save_config_file(echo, out_dir / 'config.json')
    return {'seed': seed, 'fold': fold, 'best_epoch': result.best_epoch, **result.final_metrics()}


def cmd_train(args) -> int:
    config = _run_config(args)
    config.validate('train')
    if not config.output_dir:
        raise UsageError("`train` needs --out-dir")
    out_dir = Path(config.output_dir)

    manifest_path = Path(config.manifest)
    manifest = data_mod.read_manifest(manifest_path)
    training_data = data_mod.build_training_data(manifest, manifest_path.parent, config.model)

    if not args.cross_validate:
        summary = _train_one(training_data, config, config.fold, config.seed, out_dir)
        print(json.dumps(summary, indent=2))
        return EXIT_OK

    rows = []
    seeds = range(config.seed, config.seed + args.seeds)
    for seed, fold in product(seeds, range(data_mod.N_FOLDS)):
        rows.append(_train_one(training_data, config, fold, seed, out_dir / f"seed{seed}_fold{fold}"))
    summary = pd.DataFrame(rows)
    with atomic_path(out_dir / 'cross_validation.csv') as tmp:
        summary.to_csv(tmp, index=False)
    print(f"{len(rows)} runs: val_mse {summary['val_mse'].mean():.4f} +/- {summary['val_mse'].std(ddof=0):.4f}")
    return EXIT_OK


def _masker_files(paths: Sequence[str]) -> List[Path]:
    files = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files.extend(sorted(path.glob('*.wav')))
        elif path.exists():
            files.append(path)
        else:
            raise FileNotFoundError(f"Masker path not found: {path}")
    if not files:
        raise UsageError("No masker WAV files found")
    return files


def _load_model(command: str, args):
    RunConfig(weights=args.weights, cache=getattr(args, 'cache', None)).validate(command)
    model, _ = load_weights(args.weights)
    return model


def cmd_precompute(args) -> int:
    model = _load_model('precompute', args)
    kwargs = model.config.spectrogram_kwargs()
    maskers = [(path.stem, log_mel_spectrogram(read_wav(path), **kwargs)) for path in _masker_files(args.maskers)]
    bank = precompute_bank(maskers, model)
    save_bank(args.out, bank)
    print(f"Cached {len(bank)} masker embeddings in {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model('infer', args)
    bank = load_bank(args.cache, model)
    lo, hi, count = parse_range(args.gains, with_count=True)
    masker_ids = args.maskers or bank.masker_ids
    if args.include_silent:
        masker_ids = list(masker_ids) + [SILENT_ID]
    plan = QueryPlan.from_range(masker_ids, lo, hi, count)
    result = query_optimized(model, _soundscape_spectrogram(args.soundscape, model), plan, bank=bank)
    ranked = [pair.to_dict() for pair in rank(result, args.top_k)]
    text = json.dumps(ranked, indent=2)
    if args.out:
        atomic_write_text(args.out, text + '\n')
    else:
        print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = _load_model('sweep', args)
    bank = load_bank(args.cache, model)
    lo, hi = parse_range(args.range, with_count=False)
    masker_ids = list(args.maskers or bank.masker_ids)
    unknown = [m for m in masker_ids if m not in bank and m != SILENT_ID]
    if unknown:
        raise DataValidationError(
            f"Unknown masker(s) {unknown}; available: {', '.join(bank.masker_ids)}"
        )
    if args.include_silent and SILENT_ID not in masker_ids:
        masker_ids.append(SILENT_ID)
    soundscape = _soundscape_spectrogram(args.soundscape, model)
    frames = [gain_sweep(model, soundscape, m, bank, (lo, hi), args.count) for m in masker_ids]
    sweep = pd.concat(frames, ignore_index=True)[SWEEP_COLUMNS]
    with atomic_path(args.out) as tmp:
        sweep.to_csv(tmp, index=False)
    print(f"Wrote {len(sweep)} sweep rows for {len(masker_ids)} masker(s) to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load_model('bench', args)
    report = benchmark_schedules(model, args.eta_m, args.eta_g, args.repeats, seed=args.seed)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        atomic_write_text(args.out, text + '\n')
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    augmentations = [args.augmentation] if args.augmentation else [v.value for v in AugmentationVariant]
    attentions = [args.attention] if args.attention else [v.value for v in AttentionVariant]
    failed = 0
    for augmentation, attention in product(augmentations, attentions):
        report = gradcheck_model(
            augmentation, attention, seed=args.seed,
            max_elements=args.max_elements, corrupt_backward=args.corrupt_backward,
        )
        for group in report:
            status = 'ok' if group.passed else 'FAIL'
            print(f"{augmentation:>4} {attention:<11} {group.name:<32} {group.max_relative_error:.3e} {status}")
            failed += not group.passed
    if failed:
        logger.error(f"{failed} parameter group(s) exceeded the gradient tolerance")
        return EXIT_NUMERICAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='ppap', description='Gain-conditioned soundscape augmentation predictor')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', help='generate a synthetic-oracle dataset')
    synth.add_argument('--n-scenes', type=int, required=True)
    synth.add_argument('--seed', type=int)
    synth.add_argument('--out-dir', required=True)
    synth.add_argument('--records-per-scene', type=int, default=20)
    synth.add_argument('--maskers-per-class', type=int, default=2)
    synth.add_argument('--duration', type=float, default=30.0, help='clip length in seconds')
    synth.add_argument('--noise-std', type=float, default=0.1)
    synth.add_argument('--write-mixtures', action='store_true')
    synth.add_argument('--force', action='store_true')
    synth.set_defaults(func=cmd_synth)

    tr = sub.add_parser('train', help='train one fold, or every fold and seed with --cross-validate')
    tr.add_argument('--config', help='JSON run config; flags override it')
    tr.add_argument('--manifest')
    tr.add_argument('--out-dir')
    tr.add_argument('--seed', type=int)
    tr.add_argument('--fold', type=int)
    tr.add_argument('--lr', type=float)
    tr.add_argument('--max-epochs', type=int)
    tr.add_argument('--batch-size', type=int)
    tr.add_argument('--augmentation', choices=[v.value for v in AugmentationVariant])
    tr.add_argument('--attention', choices=[v.value for v in AttentionVariant])
    tr.add_argument('--dropout', type=float)
    tr.add_argument('--cross-validate', action='store_true', help='loop over seeds x all folds')
    tr.add_argument('--seeds', type=int, default=10, help='number of seeds for --cross-validate')
    tr.set_defaults(func=cmd_train)

    pre = sub.add_parser('precompute', help='cache masker embeddings for a weight file')
    pre.add_argument('--weights', required=True)
    pre.add_argument('--maskers', nargs='+', required=True, help='WAV files or directories of WAVs')
    pre.add_argument('--out', required=True)
    pre.set_defaults(func=cmd_precompute)

    inf = sub.add_parser('infer', help='rank masker-gain pairs for a soundscape')
    inf.add_argument('--weights', required=True)
    inf.add_argument('--soundscape', required=True)
    inf.add_argument('--cache', required=True)
    inf.add_argument('--gains', default='-2:2:9', help='lo:hi:count on the log10 gain axis')
    inf.add_argument('--maskers', nargs='*')
    inf.add_argument('--include-silent', action='store_true')
    inf.add_argument('--top-k', type=int, default=5)
    inf.add_argument('--out')
    inf.set_defaults(func=cmd_infer)

    sw = sub.add_parser('sweep', help='write a gain sweep CSV')
    sw.add_argument('--weights', required=True)
    sw.add_argument('--soundscape', required=True)
    sw.add_argument('--cache', required=True)
    sw.add_argument('--maskers', nargs='*')
    sw.add_argument('--range', default='-2:2', help='lo:hi on the log10 gain axis')
    sw.add_argument('--count', type=int, default=256)
    sw.add_argument('--include-silent', action='store_true')
    sw.add_argument('--out', required=True)
    sw.set_defaults(func=cmd_sweep)

    bench = sub.add_parser('bench', help='time naive, optimized and cached query schedules')
    bench.add_argument('--weights', required=True)
    bench.add_argument('--eta-m', type=int, default=32)
    bench.add_argument('--eta-g', type=int, default=8)
    bench.add_argument('--repeats', type=int, default=3)
    bench.add_argument('--seed', type=int, default=0)
    bench.add_argument('--out')
    bench.set_defaults(func=cmd_bench)

    gc = sub.add_parser('gradcheck', help='finite-difference check at the tiny config')
    gc.add_argument('--seed', type=int, default=0)
    gc.add_argument('--augmentation', choices=[v.value for v in AugmentationVariant])
    gc.add_argument('--attention', choices=[v.value for v in AttentionVariant])
    gc.add_argument('--max-elements', type=int, default=None)
    gc.add_argument('--corrupt-backward', action='store_true', help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except Exception as e:
        logger.error(str(e))
        logger.debug("Traceback", exc_info=True)
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
