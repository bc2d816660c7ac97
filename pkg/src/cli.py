"""
Command line entry point: train, eval, report, compact, synth and probe.

Exit codes: 0 ok, 1 internal, 2 config, 3 infeasible prune, 4 I/O,
5 refusing to clobber or run locked, 6 incomplete run.
"""
import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager

# Add src to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import DEFAULTS, load_config, render_config
from data_persistence import load_checkpoint, save_checkpoint
from datasets import linear_probe, load_container, save_container, synth_generate
from errors import IncompleteRunError, RunExistsError, RunLockedError, ScaError, StorageError
from models import record_run
from reports import ReportGenerator, registry_path
from sca import compact
from train import TrainConfig, evaluate_model, run_training, training_definition

logger = logging.getLogger(__name__)

LOCK_FILE = '.lock'
RUN_ARTIFACTS = ('config.txt', 'metrics.ndjson', 'checkpoints', 'summary.json', 'reports')


# =============================================================================
# Run directory
# =============================================================================

@contextmanager
def run_lock(run_dir):
    """Exclusive lock file for the duration of one command."""
    path = os.path.join(run_dir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{run_dir} is locked by another command", path=str(run_dir)) from None
    except OSError as e:
        raise StorageError(f"Could not lock {run_dir}: {e}", path=str(run_dir)) from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass


def _existing_artifacts(run_dir):
    return [name for name in RUN_ARTIFACTS if os.path.exists(os.path.join(run_dir, name))]


def remove_run_artifacts(run_dir):
    for name in _existing_artifacts(run_dir):
        target = os.path.join(run_dir, name)
        if os.path.isdir(target):
            shutil.rmtree(target)
        else:
            os.remove(target)


def prepare_run_dir(run_dir, force=False):
    existing = _existing_artifacts(run_dir)
    if existing and not force:
        raise RunExistsError(f"{run_dir} already holds a run; use --force to overwrite",
                             path=str(run_dir), artifacts=existing)
    try:
        os.makedirs(run_dir, exist_ok=True)
        remove_run_artifacts(run_dir)
    except OSError as e:
        raise StorageError(f"Could not prepare {run_dir}: {e}", path=str(run_dir)) from e


class RunWriter:
    """Training sink that persists metrics, checkpoints, the summary and the registry row."""

    def __init__(self, run_dir, config):
        self.run_dir = run_dir
        self.config = config
        self.metrics_path = os.path.join(run_dir, 'metrics.ndjson')

    def record(self, metrics):
        try:
            with open(self.metrics_path, 'a') as f:
                f.write(metrics.to_json() + '\n')
        except OSError as e:
            raise StorageError(f"Could not append metrics: {e}", path=self.metrics_path) from e

    def finish(self, result):
        checkpoints = os.path.join(self.run_dir, 'checkpoints')
        epochs = self.config['epochs']
        save_checkpoint(os.path.join(checkpoints, 'masked'), result.net, result.mask, epochs)
        save_checkpoint(os.path.join(checkpoints, 'compacted'), result.compacted, None, epochs)

        final = result.history[-1]
        summary = {
            'epochs': epochs,
            'sparsity': result.mask.sparsity,
            'masked': result.masked_eval.to_dict(),
            'compacted': result.compacted_eval.to_dict(),
            'per_layer_alive_counts': final.per_layer_alive_counts,
            'mean_score': final.mean_score,
        }
        path = os.path.join(self.run_dir, 'summary.json')
        try:
            with open(path, 'w') as f:
                json.dump(summary, f, indent=2)
        except OSError as e:
            raise StorageError(f"Could not write {path}: {e}", path=path) from e

        record_run(
            registry_path(self.run_dir, self.config),
            path=os.path.abspath(self.run_dir),
            group=self.config['group'],
            architecture=self.config['architecture'],
            mode=self.config['prune_mode'],
            p=self.config['prune_p'],
            q=self.config['prune_q'],
            seed=self.config['seed'],
            epochs=epochs,
            masked_accuracy=result.masked_eval.accuracy,
            compacted_accuracy=result.compacted_eval.accuracy,
            sparsity=result.mask.sparsity,
            alive_params=result.masked_eval.alive_params,
            total_params=result.masked_eval.total_params,
            synops=result.masked_eval.synops_per_sample,
            mean_score=final.mean_score
        )


def load_datasets(config):
    """The configured train/test containers, or the synthetic task when no paths are set."""
    if config['data_train']:
        return load_container(config['data_train']), load_container(config['data_test'])
    common = dict(
        classes=config['synth_classes'],
        hw=config['synth_hw'],
        noise=config['synth_noise'],
        channels=config['synth_channels']
    )
    train = synth_generate(n_per_class=config['synth_train_per_class'], seed=config['synth_seed'],
                           split='train', **common)
    test = synth_generate(n_per_class=config['synth_test_per_class'], seed=config['synth_seed'] + 1,
                          split='test', **common)
    return train, test


def _emit(payload):
    print(json.dumps(payload))


# =============================================================================
# Commands
# =============================================================================

def cmd_train(args):
    config = load_config(args.config)
    cfg = TrainConfig.from_config(config)
    train, test = load_datasets(config)
    training_definition(cfg, train, test)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Could not create {args.out}: {e}", path=str(args.out)) from e
    with run_lock(args.out):
        prepare_run_dir(args.out, force=args.force)
        try:
            with open(os.path.join(args.out, 'config.txt'), 'w') as f:
                f.write(render_config(config))
            result = run_training(cfg, train, test, sink=RunWriter(args.out, config))
        except BaseException:
            remove_run_artifacts(args.out)
            raise
    _emit({
        'success': True,
        'run': args.out,
        'masked_accuracy': result.masked_eval.accuracy,
        'compacted_accuracy': result.compacted_eval.accuracy,
        'sparsity': result.mask.sparsity
    })
    return 0


def cmd_eval(args):
    path = os.path.join(args.run, 'checkpoints', args.which)
    if not os.path.exists(os.path.join(path, 'manifest.txt')):
        raise IncompleteRunError(f"No {args.which} checkpoint in {args.run}", path=str(path))
    with run_lock(args.run):
        net, mask, _ = load_checkpoint(path)
        if args.data:
            data = load_container(args.data)
        else:
            _, data = load_datasets(load_config(os.path.join(args.run, 'config.txt')))
        result = evaluate_model(net, mask, data)
    _emit(result.to_dict())
    return 0


def cmd_report(args):
    with run_lock(args.run):
        outcome = ReportGenerator(args.run).write(force=args.force)
    _emit(outcome)
    return 0


def cmd_compact(args):
    target = os.path.join(args.run, 'checkpoints', 'compacted')
    if os.path.exists(target) and not args.force:
        raise RunExistsError(f"{target} already exists; use --force to overwrite", path=str(target))
    masked = os.path.join(args.run, 'checkpoints', 'masked')
    if not os.path.exists(os.path.join(masked, 'manifest.txt')):
        raise IncompleteRunError(f"No masked checkpoint in {args.run}", path=str(masked))
    with run_lock(args.run):
        net, mask, manifest = load_checkpoint(masked)
        if os.path.exists(target):
            shutil.rmtree(target)
        outcome = save_checkpoint(target, compact(net, mask), None, manifest['epoch'])
    _emit(outcome)
    return 0


def cmd_synth(args):
    if os.path.exists(os.path.join(args.out, 'manifest.txt')) and not args.force:
        raise RunExistsError(f"{args.out} already holds a dataset; use --force to overwrite", path=str(args.out))
    container = synth_generate(
        classes=args.classes,
        n_per_class=args.per_class,
        hw=args.hw,
        noise=args.noise,
        seed=args.seed,
        split=args.split,
        channels=args.channels
    )
    _emit(save_container(container, args.out))
    return 0


def cmd_probe(args):
    accuracy = linear_probe(load_container(args.train), load_container(args.test), seed=args.seed)
    _emit({'success': True, 'probe_accuracy': accuracy})
    return 0


def build_parser():
    psr = argparse.ArgumentParser(prog='sca', description="Spiking channel activity pruning engine.")
    psr.add_argument('--verbose', action='store_true', help="Log at DEBUG level.")
    sub = psr.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', help="Train, prune and compact a network.")
    train.add_argument('--config', required=True, help="Config file (key = value lines).")
    train.add_argument('--out', required=True, help="Run directory to create.")
    train.add_argument('--force', action='store_true', help="Overwrite an existing run.")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser('eval', help="Evaluate a checkpoint.")
    ev.add_argument('--run', required=True, help="Run directory.")
    ev.add_argument('--which', choices=('masked', 'compacted'), default='masked')
    ev.add_argument('--data', default='', help="Dataset directory (default: the run's test split).")
    ev.set_defaults(handler=cmd_eval)

    report = sub.add_parser('report', help="Write CSV reports for a finished run.")
    report.add_argument('--run', required=True)
    report.add_argument('--force', action='store_true')
    report.set_defaults(handler=cmd_report)

    comp = sub.add_parser('compact', help="Re-derive the compacted checkpoint from the masked one.")
    comp.add_argument('--run', required=True)
    comp.add_argument('--force', action='store_true')
    comp.set_defaults(handler=cmd_compact)

    synth = sub.add_parser('synth', help="Write a synthetic dataset directory.")
    synth.add_argument('--out', required=True)
    synth.add_argument('--classes', type=int, default=DEFAULTS['synth_classes'])
    synth.add_argument('--per-class', type=int, default=DEFAULTS['synth_train_per_class'])
    synth.add_argument('--hw', type=int, default=DEFAULTS['synth_hw'])
    synth.add_argument('--channels', type=int, default=DEFAULTS['synth_channels'])
    synth.add_argument('--noise', type=float, default=DEFAULTS['synth_noise'])
    synth.add_argument('--seed', type=int, default=DEFAULTS['synth_seed'])
    synth.add_argument('--split', choices=('train', 'test'), default='train')
    synth.add_argument('--force', action='store_true')
    synth.set_defaults(handler=cmd_synth)

    probe = sub.add_parser('probe', help="Linear-probe accuracy of a train/test pair.")
    probe.add_argument('--train', required=True)
    probe.add_argument('--test', required=True)
    probe.add_argument('--seed', type=int, default=0)
    probe.set_defaults(handler=cmd_probe)
    return psr


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr
    )
    try:
        return args.handler(args)
    except ScaError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        print(json.dumps({'success': False, 'error': 'internal', 'message': str(e)}), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
