"""
Training loop: weight learning with surrogate-gradient BPTT under L1
regularization, alternated with structure steps, then compaction.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from architecture import make_definition
from datasets import EncoderConfig, batch_iter, encode_direct
from errors import ConfigError, ShapeError
from network import backward_T, build_network, count_params, forward_T, map_prunable_channels
from neuron import NeuronConfig
from sca import (
    GammaGradAccumulator, ImportanceAccumulator, PruneConfig, accumulate_importance, compact,
    effective_scores, finalize_scores, structure_step, trace_synops
)
from tensor import set_precision

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 50
EVAL_BATCH_SIZE = 256


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    l1_lambda: float = 0.0
    seed: int = 0
    prune: PruneConfig = field(default_factory=PruneConfig)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    t_steps: int = 4
    architecture: str = 'toy_vgg4'
    block_style: str = 'plain'
    lr_schedule: str = 'constant'
    precision: str = 'f64'
    exact_importance_pass: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1", key='epochs', value=self.epochs)
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", key='learning_rate', value=self.learning_rate)
        if self.l1_lambda < 0:
            raise ConfigError("l1_lambda must be non-negative", key='l1_lambda', value=self.l1_lambda)
        if self.lr_schedule not in ('constant', 'cosine'):
            raise ConfigError(f"Unknown lr_schedule '{self.lr_schedule}'", key='lr_schedule')

    @classmethod
    def from_config(cls, config):
        return cls(
            epochs=config['epochs'],
            batch_size=config['batch_size'],
            learning_rate=config['learning_rate'],
            momentum=config['momentum'],
            l1_lambda=config['l1_lambda'],
            seed=config['seed'],
            prune=PruneConfig(
                p=config['prune_p'],
                q=config['prune_q'],
                interval_epochs=config['interval_epochs'],
                min_channels=config['min_channels'],
                mode=config['prune_mode']
            ),
            neuron=NeuronConfig(
                kind=config['neuron_kind'],
                v_th=config['v_th'],
                v_reset=config['v_reset'],
                tau_m=config['tau_m'],
                alpha=config['alpha']
            ),
            t_steps=config['t_steps'],
            architecture=config['architecture'],
            block_style=config['block_style'],
            lr_schedule=config['lr_schedule'],
            precision=config['precision'],
            exact_importance_pass=config['exact_importance_pass']
        )

    def learning_rate_at(self, epoch):
        """Learning rate for a 1-based epoch."""
        if self.lr_schedule == 'cosine':
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))
        return self.learning_rate


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    sparsity: float
    alive_params: int
    synops: int
    per_layer_alive_counts: dict
    score_histogram: dict
    train_accuracy: float = 0.0
    total_params: int = 0
    connectivity: float = 1.0
    mean_score: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self))


@dataclass
class EpochStats:
    loss: float
    accuracy: float
    samples: int
    batches: int


@dataclass
class EvalResult:
    accuracy: float
    synops_per_sample: int
    alive_params: int
    total_params: int

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingResult:
    net: object
    mask: object
    history: list
    compacted: object
    masked_eval: Optional[EvalResult] = None
    compacted_eval: Optional[EvalResult] = None


# =============================================================================
# Loss, regularization, optimizer
# =============================================================================

def loss_forward(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= classes:
        raise ShapeError(
            f"Labels must lie in [0, {classes})",
            min_label=int(labels.min()),
            max_label=int(labels.max())
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    d_logits = np.exp(log_probs)
    d_logits[rows, labels] -= 1.0
    return loss, d_logits / n


def l1_terms(arrays, lam):
    """lam * sum |a| over the arrays, and lam * sign(a) for each (sign(0) = 0)."""
    penalty = lam * sum(float(np.abs(a).sum()) for a in arrays.values())
    grads = {name: lam * np.sign(a) for name, a in arrays.items()}
    return penalty, grads


def l1_penalty(net, lam):
    """L1 over prunable conv weights and the gammas of their governing BN layers."""
    params = net.parameters()
    targets = {}
    for entry in net.mapping:
        targets[entry.conv + '.weight'] = params[entry.conv + '.weight']
        targets[entry.bn + '.gamma'] = params[entry.bn + '.gamma']
    if lam == 0:
        return 0.0, {name: np.zeros_like(a) for name, a in targets.items()}
    return l1_terms(targets, lam)


def sgd_step(params, grads, state, lr, momentum):
    """Classical momentum: m <- momentum * m + g; w <- w - lr * m, in place."""
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {g.shape}, parameter has {w.shape}",
                             parameter=name)
        m = state.get(name)
        if m is None:
            m = np.zeros_like(w)
        m = momentum * m + g
        state[name] = m
        w -= lr * m


# =============================================================================
# Epochs
# =============================================================================

def train_epoch(net, mask, data, cfg, importance_acc=None, gamma_acc=None, epoch=1, state=None, lr=None):
    """One pass over the training split: encode, forward, loss, L1, backward, step."""
    state = {} if state is None else state
    lr = cfg.learning_rate if lr is None else lr
    encoder = EncoderConfig(t_steps=cfg.t_steps)
    params = net.parameters()
    total_loss = 0.0
    correct = samples = batches = 0

    for images, labels in batch_iter(data, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
        trace = forward_T(net, mask, encode_direct(images, encoder), mode='train')
        loss, d_logits = loss_forward(trace.logits, labels)
        grads = backward_T(net, trace, d_logits, gamma_acc=gamma_acc)
        if importance_acc is not None:
            accumulate_importance(importance_acc, trace)
        penalty, l1_grads = l1_penalty(net, cfg.l1_lambda)
        for name, g in l1_grads.items():
            grads[name] = grads[name] + g
        sgd_step(params, grads, state, lr, cfg.momentum)

        n = len(labels)
        total_loss += (loss + penalty) * n
        correct += int((trace.logits.argmax(axis=1) == labels).sum())
        samples += n
        batches += 1
        logger.debug("epoch %d batch %d loss %.6f", epoch, batches, loss)

    return EpochStats(loss=total_loss / samples, accuracy=correct / samples, samples=samples, batches=batches)


def importance_pass(net, mask, data, acc, t_steps, batch_size=EVAL_BATCH_SIZE):
    """Eval-mode pass over a whole split that only feeds the importance accumulator."""
    encoder = EncoderConfig(t_steps=t_steps)
    for images, _ in batch_iter(data, batch_size, shuffle=False):
        accumulate_importance(acc, forward_T(net, mask, encode_direct(images, encoder), mode='eval'))
    return acc


def evaluate_model(net, mask, data, batch_size=EVAL_BATCH_SIZE):
    """Top-1 accuracy and per-sample SynOps in one eval-mode pass, plus parameter counts."""
    if data is None or len(data) == 0:
        raise ConfigError("Cannot evaluate on an empty split")
    encoder = EncoderConfig(t_steps=net.t_steps)
    correct = 0
    synops_total = 0.0
    for images, labels in batch_iter(data, batch_size, shuffle=False):
        trace = forward_T(net, mask, encode_direct(images, encoder), mode='eval')
        correct += int((trace.logits.argmax(axis=1) == labels).sum())
        synops_total += trace_synops(net, mask, trace)
    total, alive = count_params(net, mask)
    return EvalResult(
        accuracy=correct / len(data),
        synops_per_sample=int(math.floor(synops_total / len(data) + 0.5)),
        alive_params=alive,
        total_params=total
    )


def evaluate(net, mask, data, batch_size=EVAL_BATCH_SIZE):
    return evaluate_model(net, mask, data, batch_size).accuracy


def score_histogram(scores, bins=HISTOGRAM_BINS):
    values = np.concatenate([vec for vec in scores.values()]) if scores else np.zeros(0)
    high = float(values.max()) if values.size else 0.0
    if high <= 0.0:
        high = 1.0
    counts, _ = np.histogram(values, bins=bins, range=(0.0, high))
    return {'low': 0.0, 'high': high, 'counts': [int(c) for c in counts]}


# =============================================================================
# Full run
# =============================================================================

def training_definition(cfg, train_data, test_data):
    """
    The network definition for a run, after every check that can fail before
    training starts: architecture, class count, image shapes and prune
    feasibility.
    """
    definition = make_definition(
        cfg.architecture,
        block_style=cfg.block_style,
        t_steps=cfg.t_steps,
        in_shape=train_data.image_shape,
        neuron=cfg.neuron
    )
    classes = definition.layers[-1].out
    if classes != train_data.class_count:
        raise ConfigError(
            f"Classifier has {classes} outputs but the data has {train_data.class_count} classes",
            key='architecture'
        )
    if test_data.image_shape != train_data.image_shape:
        raise ConfigError("Train and test images differ in shape", key='data_test')
    cfg.prune.check_feasible(map_prunable_channels(definition))
    return definition


def run_training(cfg, train_data, test_data, sink=None):
    """
    Initialize, alternate weight learning with a structure step every
    interval_epochs epochs, compact, and evaluate masked and compacted models.
    sink (optional) receives every MetricsRecord via record() and the final
    TrainingResult via finish().
    """
    set_precision(cfg.precision)
    definition = training_definition(cfg, train_data, test_data)
    net = build_network(definition, cfg.seed)
    mask = net.full_mask()
    importance = ImportanceAccumulator(net.mapping, cfg.t_steps)
    gammas = GammaGradAccumulator(net.mapping)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
    state = {}
    history = []

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate_at(epoch)
        stats = train_epoch(net, mask, train_data, cfg, importance, gammas, epoch=epoch, state=state, lr=lr)

        scores = None
        if cfg.prune.enabled and epoch % cfg.prune.interval_epochs == 0:
            if cfg.exact_importance_pass:
                importance.reset()
                importance_pass(net, mask, train_data, importance, cfg.t_steps)
            scores = finalize_scores(importance)
            mask = structure_step(mask, scores, gammas, cfg.prune, rng)
            importance.reset()
        elif importance.n_seen:
            scores = finalize_scores(importance)
            if not cfg.prune.enabled:
                importance.reset()
                gammas.reset()

        result = evaluate_model(net, mask, test_data)
        reported = effective_scores(scores, mask) if scores is not None else {}
        all_scores = np.concatenate(list(reported.values())) if reported else np.zeros(0)
        record = MetricsRecord(
            epoch=epoch,
            train_loss=stats.loss,
            test_accuracy=result.accuracy,
            sparsity=mask.sparsity,
            alive_params=result.alive_params,
            synops=result.synops_per_sample,
            per_layer_alive_counts={name: mask.alive_count(name) for name in mask.layers},
            score_histogram=score_histogram(reported),
            train_accuracy=stats.accuracy,
            total_params=result.total_params,
            connectivity=result.alive_params / result.total_params,
            mean_score=float(all_scores.mean()) if all_scores.size else 0.0
        )
        history.append(record)
        if sink is not None:
            sink.record(record)
        logger.info(
            "Epoch %d/%d: loss %.4f train %.4f test %.4f sparsity %.3f connectivity %.3f lr %.4g",
            epoch, cfg.epochs, stats.loss, stats.accuracy, result.accuracy, mask.sparsity,
            record.connectivity, lr
        )

    compacted = compact(net, mask)
    masked_eval = evaluate_model(net, mask, test_data)
    compacted_eval = evaluate_model(compacted, None, test_data)
    if masked_eval.accuracy != compacted_eval.accuracy:
        logger.warning(
            "Masked accuracy %.6f differs from compacted accuracy %.6f",
            masked_eval.accuracy, compacted_eval.accuracy
        )
    result = TrainingResult(
        net=net,
        mask=mask,
        history=history,
        compacted=compacted,
        masked_eval=masked_eval,
        compacted_eval=compacted_eval
    )
    if sink is not None:
        sink.finish(result)
    return result
