"""
Command-line interface.

    langevin-flow generate --out data/lorenz
    langevin-flow train --data data/lorenz --out runs/full
    langevin-flow eval --data data/lorenz --ckpt runs/full/checkpoint_best.lgvc --report runs/full/report.txt
    langevin-flow export-latents --data data/lorenz --ckpt runs/full/checkpoint_best.lgvc --out runs/full/latents
    langevin-flow plot --data data/lorenz --ckpt runs/full/checkpoint_best.lgvc --out runs/full/figures

Settings precedence is flags > --config file > packaged defaults. Every
command writes a run manifest with the resolved configuration next to its
outputs. Exit status is 1 on any configuration, data, format or I/O error.
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .config import LORENZ_SETTINGS, MODEL_SETTINGS, config_hash, dump_yaml, resolve
from .data import LorenzConfig, LorenzDataset, load_dataset, make_dataset, save_dataset
from .errors import DataError, LangevinFlowError
from .metrics import evaluate, evaluate_rates, write_report
from .model import ModelConfig, LangevinFlow, predict_rates
from .plotting import plot_latent_waves, plot_rates
from .tensor import set_default_dtype
from .train import TrainConfig, fit, load_checkpoint, restore_model

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'run_manifest.yaml'


@dataclass
class RunManifest:
    """Everything needed to replay one command."""
    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    build: str = f"langevin_flow {__version__}"
    started: str = ''
    finished: str = ''

    def write(self, directory: Path) -> Path:
        self.finished = _now()
        path = Path(directory) / MANIFEST_NAME
        path.write_text(dump_yaml(asdict(self)))
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _flags(args: argparse.Namespace, names: List[str]) -> Dict[str, Any]:
    return {name: getattr(args, name, None) for name in names}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    started = _now()
    overrides = {'lorenz': _flags(args, ['n_trials', 'n_neurons', 'n_bins', 'rate_scale', 'seed'])}
    settings = resolve(LORENZ_SETTINGS, args.config, overrides)
    cfg = LorenzConfig.from_dict(settings['lorenz'])
    dataset = make_dataset(cfg)
    out = Path(args.out)
    manifest_path = save_dataset(out, dataset)
    summary = dataset.summary()
    RunManifest('generate', settings, cfg.seed, inputs={'config': str(args.config)},
                outputs={'dataset': str(out), 'manifest': str(manifest_path)}, started=started).write(out)
    print(f"Generated {summary['n_train']} train / {summary['n_val']} val trials "
          f"({summary['n_neurons']} neurons, {summary['n_bins']} bins)")
    print(f"Mean rate {summary['mean_rate']:.4f} spikes/bin, {summary['total_spikes']} spikes in total")
    return 0


def _train_settings(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        'model': _flags(args, ['variant', 'dtype']),
        'train': _flags(args, ['epochs', 'batch_size', 'learning_rate', 'max_steps']),
    }
    if args.seed is not None:
        overrides['model']['seed'] = args.seed
        overrides['train']['seed'] = args.seed
    return resolve(MODEL_SETTINGS, args.config, overrides)


def _require_dataset(path: str) -> LorenzDataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"Dataset directory not found: {path}")
    return load_dataset(path)


def cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    dataset = _require_dataset(args.data)
    settings = _train_settings(args)
    set_default_dtype(settings['model'].get('dtype', 'float64'))
    model_cfg = ModelConfig.from_settings(len(dataset.held_in) + len(dataset.held_out), len(dataset.held_in), settings)
    train_cfg = TrainConfig.from_settings(settings)
    model = LangevinFlow(model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'resolved_config.yaml').write_text(dump_yaml(settings))
    result = fit(model, dataset, train_cfg, out_dir=out, resume_from=args.resume)
    RunManifest('train', settings, train_cfg.seed,
                inputs={'data': str(args.data), 'resume': str(args.resume)},
                outputs={'dir': str(out)}, started=started).write(out)
    print(f"Trained {result.steps} steps; best val co-bps {result.best_co_bps:.4f} at epoch {result.best_epoch}")
    return 0


def _load_model(ckpt: str, settings_path: Optional[str]) -> LangevinFlow:
    checkpoint = load_checkpoint(ckpt)
    set_default_dtype(checkpoint.config['model'].get('dtype', 'float64'))
    if settings_path is not None:
        model_cfg = ModelConfig.from_dict(checkpoint.config['model'])
        expected = ModelConfig.from_settings(model_cfg.n_neurons, model_cfg.n_held_in,
                                             resolve(MODEL_SETTINGS, settings_path))
        load_checkpoint(ckpt, expected_hash=config_hash(expected.to_dict()))
    return restore_model(checkpoint)


def _split(dataset: LorenzDataset, name: str):
    return dataset.val if name == 'val' else dataset.train


def cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    dataset = _require_dataset(args.data)
    trials = _split(dataset, args.split)
    if args.oracle:
        if any(t.true_rates is None for t in trials):
            raise DataError("oracle evaluation needs ground-truth rates in the dataset")
        report = evaluate_rates([t.true_rates for t in trials], trials, args.ridge_alpha)
    else:
        if args.ckpt is None:
            raise FileNotFoundError("--ckpt is required unless --oracle is given")
        model = _load_model(args.ckpt, args.config)
        report = evaluate(model, trials, args.ridge_alpha)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    table = write_report(report_path, report)
    RunManifest('eval', {'split': args.split, 'oracle': args.oracle, 'ridge_alpha': args.ridge_alpha}, None,
                inputs={'data': str(args.data), 'ckpt': str(args.ckpt)},
                outputs={'report': str(report_path), 'per_neuron': str(table)},
                started=started).write(report_path.parent)
    print(f"co-bps {report.co_bps:.6f}")
    return 0


def cmd_export_latents(args: argparse.Namespace) -> int:
    started = _now()
    dataset = _require_dataset(args.data)
    trials = _split(dataset, args.split)
    model = _load_model(args.ckpt, args.config)
    if not model.config.uses_latents:
        raise LangevinFlowError(f"variant '{model.config.variant}' has no latent trajectories")
    _, latents = predict_rates(model, trials, return_latents=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = model.config.latent_dim // model.config.groups
    for trial, latent in zip(trials, latents):
        rows = ['t\tgroup\tindex\tz\tv']
        z, v = latent['z'], latent['v']
        for t in range(z.shape[0]):
            for j in range(z.shape[1]):
                velocity = 'nan' if v is None else f"{v[t, j]:.17g}"
                rows.append(f"{t}\t{j // size}\t{j % size}\t{z[t, j]:.17g}\t{velocity}")
        (out / f"latents_trial_{trial.trial_id:05d}.tsv").write_text('\n'.join(rows) + '\n')
    RunManifest('export-latents', {'split': args.split}, model.config.seed,
                inputs={'data': str(args.data), 'ckpt': str(args.ckpt)}, outputs={'dir': str(out)},
                started=started).write(out)
    print(f"Exported latents of {len(trials)} trials to {out}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    started = _now()
    dataset = _require_dataset(args.data)
    trials = _split(dataset, args.split)
    model = _load_model(args.ckpt, args.config)
    rates, latents = predict_rates(model, trials, return_latents=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {'rates': str(plot_rates(rates, trials, out / 'rates.png'))}
    if model.config.uses_latents:
        index = min(args.trial, len(trials) - 1)
        outputs['latent_waves'] = str(plot_latent_waves(latents[index]['z'], model.config.groups,
                                                        out / 'latent_waves.png'))
    RunManifest('plot', {'split': args.split, 'trial': args.trial}, model.config.seed,
                inputs={'data': str(args.data), 'ckpt': str(args.ckpt)}, outputs=outputs,
                started=started).write(out)
    print(f"Saved figures to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='langevin-flow', description='Langevin latent dynamics for spiking data')
    parser.add_argument('--verbose', action='store_true', help='Enable debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('generate', help='Generate the synthetic Lorenz dataset')
    gen.add_argument('--config', default=None, help='YAML file with a lorenz: section')
    gen.add_argument('--out', required=True, help='Output directory')
    gen.add_argument('--n-trials', dest='n_trials', type=int, default=None)
    gen.add_argument('--n-neurons', dest='n_neurons', type=int, default=None)
    gen.add_argument('--n-bins', dest='n_bins', type=int, default=None)
    gen.add_argument('--rate-scale', dest='rate_scale', type=float, default=None)
    gen.add_argument('--seed', type=int, default=None)
    gen.set_defaults(handler=cmd_generate)

    train = sub.add_parser('train', help='Train a model')
    train.add_argument('--data', required=True, help='Dataset directory')
    train.add_argument('--config', default=None, help='YAML file overriding model_settings.yaml')
    train.add_argument('--out', required=True, help='Run directory')
    train.add_argument('--variant', default=None, help='Model variant (see model_settings.yaml)')
    train.add_argument('--epochs', type=int, default=None)
    train.add_argument('--batch-size', dest='batch_size', type=int, default=None)
    train.add_argument('--learning-rate', dest='learning_rate', type=float, default=None)
    train.add_argument('--max-steps', dest='max_steps', type=int, default=None)
    train.add_argument('--dtype', default=None, choices=['float64', 'float32'])
    train.add_argument('--seed', type=int, default=None)
    train.add_argument('--resume', default=None, help='Checkpoint to resume from')
    train.set_defaults(handler=cmd_train)

    for name, handler, help_text in (('eval', cmd_eval, 'Evaluate a checkpoint'),
                                     ('export-latents', cmd_export_latents, 'Export latent trajectories'),
                                     ('plot', cmd_plot, 'Plot rates and latent waves')):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument('--data', required=True, help='Dataset directory')
        cmd.add_argument('--ckpt', required=(name != 'eval'), default=None, help='Checkpoint file')
        cmd.add_argument('--config', default=None, help='Settings the checkpoint must match')
        cmd.add_argument('--split', default='val', choices=['val', 'train'])
        if name == 'eval':
            cmd.add_argument('--report', required=True, help='Report path (key = value text)')
            cmd.add_argument('--oracle', action='store_true', help='Score the ground-truth rates instead of a model')
            cmd.add_argument('--ridge-alpha', dest='ridge_alpha', type=float, default=1.0)
        else:
            cmd.add_argument('--out', required=True, help='Output directory')
        if name == 'plot':
            cmd.add_argument('--trial', type=int, default=0, help='Trial index for the latent wave figure')
        cmd.set_defaults(handler=handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return args.handler(args)
    except (LangevinFlowError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
