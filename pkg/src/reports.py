"""
Report generation: plot-ready CSV tables from a finished run directory.
"""
import json
import logging
import os

import pandas as pd

from config import load_config
from errors import IncompleteRunError, RunExistsError, StorageError
from models import list_runs

logger = logging.getLogger(__name__)

REPORT_FILES = (
    'accuracy_vs_sparsity.csv',
    'channels_per_layer_by_epoch.csv',
    'score_histogram_by_epoch.csv',
)
ABLATION_FILE = 'ablation_summary.csv'


def registry_path(run_dir, config):
    """The configured registry, or runs.db beside the run directory."""
    if config.get('registry'):
        return config['registry']
    parent = os.path.dirname(os.path.abspath(run_dir))
    return os.path.join(parent, 'runs.db')


class ReportGenerator:
    """Generate report tables for one run directory."""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.reports_dir = os.path.join(run_dir, 'reports')

    def load_metrics(self):
        """Metrics as a DataFrame; the run must have finished every epoch."""
        path = os.path.join(self.run_dir, 'metrics.ndjson')
        if not os.path.exists(os.path.join(self.run_dir, 'summary.json')):
            raise IncompleteRunError(f"{self.run_dir} has no summary.json; the run did not finish",
                                     path=str(self.run_dir))
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            raise IncompleteRunError(f"{path} is missing or empty", path=str(path))
        config = load_config(os.path.join(self.run_dir, 'config.txt'))
        try:
            metrics = pd.read_json(path, lines=True, convert_dates=False)
        except ValueError as e:
            raise IncompleteRunError(f"{path} is not valid metrics data: {e}", path=str(path)) from e
        if len(metrics) != config['epochs'] or list(metrics['epoch']) != list(range(1, config['epochs'] + 1)):
            raise IncompleteRunError(
                f"{path} holds {len(metrics)} records for {config['epochs']} epochs",
                path=str(path)
            )
        return metrics, config

    def get_report_data(self):
        """All report tables keyed by file name."""
        metrics, config = self.load_metrics()
        tables = {
            'accuracy_vs_sparsity.csv': self._accuracy_vs_sparsity(metrics),
            'channels_per_layer_by_epoch.csv': self._channels_per_layer(metrics),
            'score_histogram_by_epoch.csv': self._score_histograms(metrics),
        }
        ablation = self._ablation_summary(config)
        if ablation is not None:
            tables[ABLATION_FILE] = ablation
        return tables

    def write(self, force=False):
        if os.path.isdir(self.reports_dir) and os.listdir(self.reports_dir) and not force:
            raise RunExistsError(f"{self.reports_dir} already exists; use --force to overwrite",
                                 path=str(self.reports_dir))
        tables = self.get_report_data()
        try:
            os.makedirs(self.reports_dir, exist_ok=True)
            for name, frame in tables.items():
                frame.to_csv(os.path.join(self.reports_dir, name), index=False)
        except OSError as e:
            raise StorageError(f"Could not write reports to {self.reports_dir}: {e}",
                               path=str(self.reports_dir)) from e
        logger.info("Wrote %d report tables to %s", len(tables), self.reports_dir)
        return {
            'success': True,
            'reports': sorted(tables),
            'path': self.reports_dir
        }

    def _accuracy_vs_sparsity(self, metrics):
        columns = ['epoch', 'sparsity', 'connectivity', 'test_accuracy', 'train_accuracy',
                   'train_loss', 'alive_params', 'total_params', 'synops', 'mean_score']
        return metrics[columns].copy()

    def _channels_per_layer(self, metrics):
        rows = []
        for epoch, counts in zip(metrics['epoch'], metrics['per_layer_alive_counts']):
            for layer, alive in counts.items():
                rows.append({'epoch': int(epoch), 'layer': layer, 'alive_channels': int(alive)})
        return pd.DataFrame(rows, columns=['epoch', 'layer', 'alive_channels'])

    def _score_histograms(self, metrics):
        rows = []
        for epoch, hist in zip(metrics['epoch'], metrics['score_histogram']):
            counts = hist['counts']
            width = (hist['high'] - hist['low']) / len(counts)
            for b, count in enumerate(counts):
                rows.append({
                    'epoch': int(epoch),
                    'bin': b,
                    'bin_low': hist['low'] + b * width,
                    'bin_high': hist['low'] + (b + 1) * width,
                    'count': int(count)
                })
        return pd.DataFrame(rows, columns=['epoch', 'bin', 'bin_low', 'bin_high', 'count'])

    def _ablation_summary(self, config):
        """Per (mode, p) means over the run's group, with the accuracy change against p = 0."""
        if not config['group']:
            return None
        db = registry_path(self.run_dir, config)
        if not os.path.exists(db):
            return None
        runs = pd.DataFrame(list_runs(db, group=config['group']))
        if runs.empty:
            return None
        summary = runs.groupby(['mode', 'p'], as_index=False).agg(
            runs=('path', 'count'),
            mean_accuracy=('masked_accuracy', 'mean'),
            mean_compacted_accuracy=('compacted_accuracy', 'mean'),
            mean_connectivity=('connectivity', 'mean'),
            mean_synops=('synops', 'mean'),
            mean_score=('mean_score', 'mean')
        )
        dense = runs.loc[runs['p'] == 0.0, 'masked_accuracy']
        dense_accuracy = dense.mean() if len(dense) else float('nan')
        summary['dense_accuracy'] = dense_accuracy
        summary['accuracy_delta'] = summary['mean_accuracy'] - dense_accuracy
        return summary.sort_values(['mode', 'p']).reset_index(drop=True)


def read_summary(run_dir):
    path = os.path.join(run_dir, 'summary.json')
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise IncompleteRunError(f"{run_dir} has no summary.json", path=str(run_dir)) from e
