"""
Spiking channel activity pruning: importance scores, global ranking, the
prune-then-regrow structure step, physical compaction and SynOps accounting.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ConfigError, InfeasiblePruneError, TraceError
from network import ChannelMask, build_network, forward_T

logger = logging.getLogger(__name__)

PRUNE_MODES = ('prune_and_regrow', 'only_prune', 'random_prune')

# absorbs float error in p*C so 0.29 * 100 floors to 29, not 28
_FLOOR_EPS = 1e-9


def channel_quota(fraction, total):
    return int(math.floor(fraction * total + _FLOOR_EPS))


@dataclass
class PruneConfig:
    p: float = 0.0
    q: float = 0.0
    interval_epochs: int = 1
    min_channels: int = 1
    mode: str = 'prune_and_regrow'

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError("prune_p must be in [0, 1)", key='prune_p', value=self.p)
        if self.q < 0.0 or self.p + self.q >= 1.0:
            raise ConfigError("prune_q must be in [0, 1 - prune_p)", key='prune_q', value=self.q)
        if self.interval_epochs < 1:
            raise ConfigError("interval_epochs must be at least 1", key='interval_epochs',
                              value=self.interval_epochs)
        if self.min_channels < 1:
            raise ConfigError("min_channels must be at least 1", key='min_channels', value=self.min_channels)
        if self.mode not in PRUNE_MODES:
            raise ConfigError(f"Unknown prune mode '{self.mode}'", key='prune_mode', value=self.mode)

    @property
    def enabled(self):
        return self.p > 0

    def peak_dead(self, total):
        """Dead-channel count at the end of the prune phase."""
        if self.mode == 'only_prune':
            return channel_quota(self.p, total)
        return max(channel_quota(self.p, total), channel_quota(self.p + self.q, total))

    def check_feasible(self, mapping):
        """Fail before training if the min_channels floors make the prune phase unreachable."""
        if not self.enabled:
            return
        total = sum(entry.channels for entry in mapping)
        removable = sum(max(0, entry.channels - self.min_channels) for entry in mapping)
        short = [entry.conv for entry in mapping if entry.channels < self.min_channels]
        peak = self.peak_dead(total)
        if short or peak > removable:
            raise InfeasiblePruneError(
                f"Cannot remove {peak} of {total} channels with min_channels={self.min_channels}",
                required=peak,
                removable=removable,
                layers_below_floor=short
            )


# =============================================================================
# Accumulators
# =============================================================================

class ImportanceAccumulator:
    """
    Per-batch sums of |H| per prunable channel over samples and time steps.

    Batch partials are kept and combined with a correctly rounded sum, so the
    totals do not depend on batch order or on how batches were sharded.
    """

    def __init__(self, mapping, t_steps):
        self.mapping = list(mapping)
        self.t_steps = t_steps
        self.partials = {entry.conv: [] for entry in self.mapping}
        self.n_seen = 0

    @property
    def sums(self):
        totals = {}
        for entry in self.mapping:
            parts = self.partials[entry.conv]
            if not parts:
                totals[entry.conv] = np.zeros(entry.channels, dtype=np.float64)
                continue
            stacked = np.stack(parts)
            totals[entry.conv] = np.array([math.fsum(stacked[:, k]) for k in range(entry.channels)])
        return totals

    def accumulate(self, trace):
        if not trace.complete:
            raise TraceError("Importance needs a complete forward trace")
        if trace.t_steps != self.t_steps:
            raise TraceError(f"Trace has {trace.t_steps} time steps, accumulator expects {self.t_steps}")
        batch = {}
        for entry in self.mapping:
            h = trace.membrane.get(entry.sn)
            if h is None or h.shape[2] != entry.channels:
                raise TraceError(f"Trace does not cover the channels of {entry.conv}", layer=entry.conv)
            batch[entry.conv] = np.abs(h).sum(axis=(0, 1, 3, 4), dtype=np.float64)
        for name, vec in batch.items():
            self.partials[name].append(vec)
        self.n_seen += trace.batch_size

    def merge(self, other):
        if [e.conv for e in self.mapping] != [e.conv for e in other.mapping] or self.t_steps != other.t_steps:
            raise TraceError("Cannot merge accumulators over different channel sets")
        merged = ImportanceAccumulator(self.mapping, self.t_steps)
        for name in merged.partials:
            merged.partials[name] = self.partials[name] + other.partials[name]
        merged.n_seen = self.n_seen + other.n_seen
        return merged

    def reset(self):
        for parts in self.partials.values():
            parts.clear()
        self.n_seen = 0


class GammaGradAccumulator:
    """Running sums of |dL/dgamma| of every governing BN channel, pruned ones included."""

    def __init__(self, mapping):
        self.mapping = list(mapping)
        self.sums = {entry.conv: np.zeros(entry.channels, dtype=np.float64) for entry in self.mapping}

    def accumulate(self, grads):
        for entry in self.mapping:
            g = grads.get(entry.bn + '.gamma')
            if g is None:
                raise TraceError(f"No gamma gradient for {entry.bn}", layer=entry.bn)
            self.sums[entry.conv] += np.abs(g)

    def reset(self):
        for vec in self.sums.values():
            vec[...] = 0.0


def accumulate_importance(acc, trace):
    acc.accumulate(trace)
    return acc


def finalize_scores(acc):
    """r = sum / (N_seen * T) per channel; the accumulator is left untouched."""
    if acc.n_seen == 0:
        raise TraceError("No samples were accumulated since the last structure step")
    denom = acc.n_seen * acc.t_steps
    return {name: vec / denom for name, vec in acc.sums.items()}


def effective_scores(scores, mask):
    """Scores with pruned channels reported as 0 (they emit nothing downstream)."""
    return {name: np.where(mask[name], vec, 0.0) for name, vec in scores.items()}


# =============================================================================
# Ranking and the structure step
# =============================================================================

def global_rank(scores, mask):
    """Alive channels ascending by score; ties go to the lower layer, then the lower channel."""
    entries = []
    for layer_index, name in enumerate(mask.layers):
        vec = scores[name]
        for k in mask.alive(name):
            entries.append((float(vec[k]), layer_index, int(k)))
    entries.sort()
    return [(layer_index, k) for _, layer_index, k in entries]


@dataclass
class StructureAudit:
    intermediate: Optional[ChannelMask] = None
    pruned: list = field(default_factory=list)
    regrown: list = field(default_factory=list)


def _regrow_order(gamma_acc, mask):
    entries = []
    for layer_index, name in enumerate(mask.layers):
        vec = gamma_acc.sums[name]
        for k in np.flatnonzero(~mask[name]):
            entries.append((-float(vec[k]), layer_index, int(k)))
    entries.sort()
    return [(layer_index, k) for _, layer_index, k in entries]


def structure_step(mask, scores, gamma_acc, cfg, rng, audit=None):
    """
    Prune the lowest-ranked alive channels until floor((p+q)C) are dead, then
    revive the dead channels with the largest accumulated gamma gradients
    until floor(pC) remain dead. Returns a new mask; gamma_acc is reset.
    """
    layers = mask.layers
    new = mask.copy()
    total = mask.total
    target = channel_quota(cfg.p, total)
    peak = cfg.peak_dead(total)

    if cfg.mode == 'random_prune':
        candidates = [(l, int(k)) for l, name in enumerate(layers) for k in mask.alive(name)]
        order = rng.permutation(len(candidates))
        candidates = [candidates[i] for i in order]
    else:
        candidates = global_rank(scores, mask)

    alive = {name: mask.alive_count(name) for name in layers}
    dead = mask.dead
    pruned = []
    for layer_index, k in candidates:
        if dead >= peak:
            break
        name = layers[layer_index]
        if alive[name] - 1 < cfg.min_channels:
            continue
        new.bits[name][k] = False
        alive[name] -= 1
        dead += 1
        pruned.append((layer_index, k))
    if dead < peak:
        raise InfeasiblePruneError(
            f"Only {dead} of the required {peak} channels could be pruned",
            required=peak,
            reached=dead,
            min_channels=cfg.min_channels
        )
    intermediate = new.copy()

    regrown = []
    if cfg.mode != 'only_prune':
        for layer_index, k in _regrow_order(gamma_acc, new):
            if dead <= target:
                break
            new.bits[layers[layer_index]][k] = True
            dead -= 1
            regrown.append((layer_index, k))

    if audit is not None:
        audit.intermediate = intermediate
        audit.pruned = pruned
        audit.regrown = regrown
    gamma_acc.reset()
    logger.info(
        "Structure step (%s): pruned %d, regrew %d, %d/%d channels dead",
        cfg.mode, len(pruned), len(regrown), new.dead, total
    )
    return new


# =============================================================================
# Compaction and SynOps
# =============================================================================

def _index(mask, name):
    if name is None or name not in mask:
        return slice(None)
    return mask.alive(name)


def compact(net, mask):
    """Rebuild the network with only the alive channels and copy the surviving slices."""
    if net.compacted:
        raise TraceError("Network is already compacted")
    empty = [name for name in mask.layers if mask.alive_count(name) == 0]
    if empty:
        raise InfeasiblePruneError("Cannot compact layers with no alive channels", layers=empty)

    small = build_network(net.definition, net.seed, plan=mask.copy())
    for big, little in zip(net.iter_layers(), small.iter_layers()):
        if big.name != little.name or big.kind != little.kind:
            raise TraceError(f"Layer mismatch during compaction: {big.name} vs {little.name}")
        if big.kind == 'conv':
            rows = _index(mask, big.name)
            cols = _index(mask, big.in_source)
            little.params.weight[...] = big.params.weight[rows][:, cols]
        elif big.kind == 'bn':
            idx = _index(mask, big.governs)
            for attr in ('gamma', 'beta', 'running_mean', 'running_var'):
                getattr(little.params, attr)[...] = getattr(big.params, attr)[idx]
        elif big.kind == 'linear':
            if big.in_source is not None and big.in_source in mask:
                alive = mask.alive(big.in_source)
                features = (alive[:, None] * big.spatial + np.arange(big.spatial)[None, :]).ravel()
                little.weight[...] = big.weight[:, features]
            else:
                little.weight[...] = big.weight
    logger.info("Compacted network to %d alive channels of %d", mask.total - mask.dead, mask.total)
    return small


def trace_synops(net, mask, trace):
    """Sum over conv/linear layers of non-zero inputs times fan-out, for one trace."""
    total = 0.0
    for layer in net.iter_layers():
        if layer.kind == 'conv':
            p = layer.params
            c_out = p.c_out if mask is None or layer.name not in mask else mask.alive_count(layer.name)
            fan_out = p.k * p.k * c_out / (p.stride * p.stride)
        elif layer.kind == 'linear':
            fan_out = layer.weight.shape[0]
        else:
            continue
        total += trace.active_inputs.get(layer.name, 0) * fan_out
    return total


def synops(net, mask, eval_batches):
    """Per-sample SynOps over the eval batches (each a (T, n, c, h, w) input), rounded half-up."""
    total = 0.0
    samples = 0
    for batch in eval_batches:
        trace = forward_T(net, mask, batch, mode='eval')
        total += trace_synops(net, mask, trace)
        samples += trace.batch_size
    if samples == 0:
        return 0
    return int(math.floor(total / samples + 0.5))
