"""
Network graph construction, the T-step unrolled forward pass, BPTT backward
pass, channel-mask gating and the prunable-channel mapping.

Activations flow between layers as (T, n, c, h, w) arrays. Stateless layers
(conv, BN, pooling, linear) process every time step at once on the (T*n, ...)
view; spiking layers loop over t inside neuron.run_neurons.

A pruned channel keeps its weights. Its SN output (and, for pre-activation
stream producers, its conv output) is multiplied by the mask bit in forward;
backward treats the gate as the identity.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from architecture import (
    AvgPool2, BN, Conv, Flatten, Linear, Residual, SN, validate_definition
)
from errors import ArchitectureError, ShapeError, TraceError
from neuron import neuron_backward, run_neurons
from tensor import (
    BNParams, ConvParams, avgpool2, batchnorm_backward, batchnorm_forward,
    conv2d_backward, conv2d_forward, get_dtype, linear
)

logger = logging.getLogger(__name__)


# =============================================================================
# Mask, mapping and trace types
# =============================================================================

@dataclass(frozen=True)
class PrunableChannels:
    """One prunable conv and the BN/SN pair that govern its channels."""

    conv: str
    bn: str
    sn: str
    channels: int
    index: int


class ChannelMask:
    """Per prunable conv, a boolean vector of alive channels (ordered by layer index)."""

    def __init__(self, bits):
        self.bits = {name: np.asarray(vec, dtype=bool).copy() for name, vec in bits.items()}

    @classmethod
    def full(cls, mapping):
        return cls({entry.conv: np.ones(entry.channels, dtype=bool) for entry in mapping})

    def __contains__(self, name):
        return name in self.bits

    def __getitem__(self, name):
        return self.bits[name]

    def __eq__(self, other):
        if not isinstance(other, ChannelMask) or list(self.bits) != list(other.bits):
            return False
        return all(np.array_equal(self.bits[name], other.bits[name]) for name in self.bits)

    @property
    def layers(self):
        return list(self.bits)

    def copy(self):
        return ChannelMask(self.bits)

    def alive(self, name):
        return np.flatnonzero(self.bits[name])

    def alive_count(self, name):
        return int(self.bits[name].sum())

    @property
    def total(self):
        return sum(len(vec) for vec in self.bits.values())

    @property
    def dead(self):
        return sum(int((~vec).sum()) for vec in self.bits.values())

    @property
    def sparsity(self):
        return self.dead / self.total if self.total else 0.0

    def gate(self, name, dtype):
        return self.bits[name].astype(dtype)[None, None, :, None, None]

    def to_dict(self):
        return {name: vec.astype(float).tolist() for name, vec in self.bits.items()}


@dataclass
class ForwardTrace:
    """
    Everything one forward_T call recorded.

    membrane holds the pre-reset potential H (T, n, c, h, w) of every SN layer,
    spikes the SN output after gating. active_inputs counts non-zero inputs
    into every conv/linear layer over all time steps and samples.
    """

    mode: str
    t_steps: int
    batch_size: int
    mask: Optional[ChannelMask] = None
    membrane: dict = field(default_factory=dict)
    spikes: dict = field(default_factory=dict)
    caches: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    active_inputs: dict = field(default_factory=dict)
    outputs: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    complete: bool = False


class _Pass:
    """Per-call context handed to every layer."""

    def __init__(self, trace, mask):
        self.trace = trace
        self.mask = mask
        self.train = trace.mode == 'train'
        self.grads = {}

    def gate(self, name):
        if name is None or self.mask is None or name not in self.mask:
            return None
        return self.mask.gate(name, get_dtype())


def _flat(x):
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


def _unflat(y, t_steps):
    return y.reshape((t_steps, y.shape[0] // t_steps) + y.shape[1:])


# =============================================================================
# Layers
# =============================================================================

class ConvLayer:
    kind = 'conv'

    def __init__(self, name, params, in_source=None, gate=None, out_index=None, out_width=None):
        self.name = name
        self.params = params
        self.in_source = in_source
        self.gate = gate
        self.out_index = out_index
        self.out_width = out_width

    def forward(self, x, run):
        t_steps = x.shape[0]
        flat = _flat(x)
        y = _unflat(conv2d_forward(flat, self.params), t_steps)
        run.trace.active_inputs[self.name] = int(np.count_nonzero(flat))
        if run.train:
            run.trace.caches[self.name] = flat
        if self.out_index is not None:
            full = np.zeros(y.shape[:2] + (self.out_width,) + y.shape[3:], dtype=y.dtype)
            full[:, :, self.out_index] = y
            y = full
        gate = run.gate(self.gate)
        if gate is not None:
            y = y * gate
        return y

    def backward(self, d_y, run):
        if self.out_index is not None:
            d_y = d_y[:, :, self.out_index]
        t_steps = d_y.shape[0]
        d_x, d_w = conv2d_backward(run.trace.caches[self.name], self.params, _flat(d_y))
        run.grads[self.name + '.weight'] = d_w
        return _unflat(d_x, t_steps)


class BNLayer:
    kind = 'bn'

    def __init__(self, name, params, governs=None, in_index=None):
        self.name = name
        self.params = params
        self.governs = governs
        self.in_index = in_index

    def forward(self, x, run):
        run.trace.shapes[self.name] = x.shape
        if self.in_index is not None:
            x = x[:, :, self.in_index]
        mode = 'train' if run.train else 'eval'
        y, cache = batchnorm_forward(x, self.params, mode=mode, time_flatten=True)
        if run.train:
            run.trace.caches[self.name] = cache
        return y

    def backward(self, d_y, run):
        d_x, d_gamma, d_beta = batchnorm_backward(run.trace.caches[self.name], d_y)
        run.grads[self.name + '.gamma'] = d_gamma
        run.grads[self.name + '.beta'] = d_beta
        if self.in_index is not None:
            full = np.zeros(run.trace.shapes[self.name], dtype=d_x.dtype)
            full[:, :, self.in_index] = d_x
            d_x = full
        return d_x


class SNLayer:
    kind = 'sn'

    def __init__(self, name, neuron, gate=None):
        self.name = name
        self.neuron = neuron
        self.gate = gate

    def forward(self, x, run):
        spikes, h_seq, s_seq = run_neurons(x, self.neuron, record=True)
        gate = run.gate(self.gate)
        if gate is not None:
            spikes = spikes * gate
        run.trace.membrane[self.name] = h_seq
        run.trace.spikes[self.name] = spikes
        if run.train:
            run.trace.caches[self.name] = (h_seq, s_seq)
        return spikes

    def backward(self, d_y, run):
        h_seq, s_seq = run.trace.caches[self.name]
        return neuron_backward(h_seq, s_seq, d_y, self.neuron)


class PoolLayer:
    kind = 'pool'

    def __init__(self, name):
        self.name = name

    def forward(self, x, run):
        flat = _flat(x)
        if run.train:
            run.trace.caches[self.name] = flat
        return _unflat(avgpool2(flat), x.shape[0])

    def backward(self, d_y, run):
        flat = run.trace.caches[self.name]
        return _unflat(avgpool2(flat, direction='backward', d_out=_flat(d_y)), d_y.shape[0])


class FlattenLayer:
    kind = 'flatten'

    def __init__(self, name='flatten'):
        self.name = name

    def forward(self, x, run):
        run.trace.shapes[self.name] = x.shape
        return x.reshape(x.shape[:2] + (-1,))

    def backward(self, d_y, run):
        return d_y.reshape(run.trace.shapes[self.name])


class LinearLayer:
    """Bias-free classifier; input features are channel-major (c * spatial + position)."""

    kind = 'linear'

    def __init__(self, name, weight, in_source=None, spatial=1):
        self.name = name
        self.weight = weight
        self.in_source = in_source
        self.spatial = spatial

    def forward(self, x, run):
        flat = _flat(x)
        run.trace.active_inputs[self.name] = int(np.count_nonzero(flat))
        if run.train:
            run.trace.caches[self.name] = flat
        return _unflat(linear(flat, self.weight), x.shape[0])

    def backward(self, d_y, run):
        d_x, d_w = linear(run.trace.caches[self.name], self.weight, direction='backward', d_out=_flat(d_y))
        run.grads[self.name + '.weight'] = d_w
        return _unflat(d_x, d_y.shape[0])


class ResidualBlock:
    """
    post_activation_residual:  SN2(BN2(Conv2(SN1(BN1(Conv1 x)))) + shortcut x)
    pre_activation_residual:   shortcut x + Conv2(SN2(BN2(Conv1(SN1(BN1 x)))))
    """

    kind = 'block'

    def __init__(self, name, style, conv1, bn1, sn1, conv2, bn2, sn2, shortcut_conv=None, shortcut_bn=None):
        self.name = name
        self.style = style
        self.conv1, self.bn1, self.sn1 = conv1, bn1, sn1
        self.conv2, self.bn2, self.sn2 = conv2, bn2, sn2
        self.shortcut_conv = shortcut_conv
        self.shortcut_bn = shortcut_bn

    @property
    def sublayers(self):
        layers = [self.conv1, self.bn1, self.sn1, self.conv2, self.bn2, self.sn2]
        if self.shortcut_conv is not None:
            layers += [self.shortcut_conv, self.shortcut_bn]
        return layers

    def _shortcut(self, x, run):
        if self.shortcut_conv is None:
            return x
        return self.shortcut_bn.forward(self.shortcut_conv.forward(x, run), run)

    def _shortcut_backward(self, d, run):
        if self.shortcut_conv is None:
            return d
        return self.shortcut_conv.backward(self.shortcut_bn.backward(d, run), run)

    def forward(self, x, run):
        if self.style == 'post_activation_residual':
            a = self.sn1.forward(self.bn1.forward(self.conv1.forward(x, run), run), run)
            r = self.bn2.forward(self.conv2.forward(a, run), run)
            return self.sn2.forward(r + self._shortcut(x, run), run)
        a = self.sn1.forward(self.bn1.forward(x, run), run)
        b = self.sn2.forward(self.bn2.forward(self.conv1.forward(a, run), run), run)
        return self._shortcut(x, run) + self.conv2.forward(b, run)

    def backward(self, d_y, run):
        if self.style == 'post_activation_residual':
            d_sum = self.sn2.backward(d_y, run)
            d_a = self.conv2.backward(self.bn2.backward(d_sum, run), run)
            d_main = self.conv1.backward(self.bn1.backward(self.sn1.backward(d_a, run), run), run)
            return d_main + self._shortcut_backward(d_sum, run)
        d_b = self.conv2.backward(d_y, run)
        d_a = self.conv1.backward(self.bn2.backward(self.sn2.backward(d_b, run), run), run)
        d_main = self.bn1.backward(self.sn1.backward(d_a, run), run)
        return d_main + self._shortcut_backward(d_y, run)


# =============================================================================
# Wiring: names and prunable relations, independent of shapes
# =============================================================================

@dataclass
class _ConvWire:
    name: str
    spec: Conv
    in_source: Optional[str] = None
    producer_gate: bool = False


@dataclass
class _BNWire:
    name: str
    governs: Optional[str] = None
    gather: bool = False


@dataclass
class _SNWire:
    name: str
    spec: SN
    gate: Optional[str] = None


@dataclass
class _BlockWire:
    name: str
    conv1: _ConvWire
    bn1: _BNWire
    sn1: _SNWire
    conv2: _ConvWire
    bn2: _BNWire
    sn2: _SNWire
    shortcut_conv: Optional[_ConvWire] = None
    shortcut_bn: Optional[_BNWire] = None


def _feeds_block(layers, start):
    for spec in layers[start:]:
        if isinstance(spec, AvgPool2):
            continue
        return isinstance(spec, Residual)
    return False


def _wire(definition):
    """Walk the layer specs once; returns (wires, mapping entries)."""
    validate_definition(definition)
    style = definition.block_style
    layers = definition.layers
    wires = []
    mapping = []
    channels = definition.in_shape[0]
    source = None
    producer = None
    n_conv = n_pool = n_block = 0

    def prunable(conv, bn, sn, width):
        mapping.append(PrunableChannels(conv.name, bn.name, sn.name, width, len(mapping)))

    i = 0
    while i < len(layers):
        spec = layers[i]
        if isinstance(spec, Conv):
            n_conv += 1
            conv = _ConvWire(f'conv{n_conv}', spec, in_source=source)
            if style == 'pre_activation_residual':
                wires.append(conv)
                producer = conv
                source = None
                channels = spec.c_out
                i += 1
                continue
            is_prunable = style == 'plain' or not _feeds_block(layers, i + 3)
            governs = conv.name if is_prunable else None
            bn = _BNWire(f'bn{n_conv}', governs=governs)
            sn = _SNWire(f'sn{n_conv}', layers[i + 2], gate=governs)
            if is_prunable:
                prunable(conv, bn, sn, spec.c_out)
            wires += [conv, bn, sn]
            source = governs
            channels = spec.c_out
            i += 3
        elif isinstance(spec, AvgPool2):
            n_pool += 1
            wires.append(('pool', f'pool{n_pool}'))
            i += 1
        elif isinstance(spec, Residual):
            n_block += 1
            prefix = f'block{n_block}.'
            width = spec.c_out
            if style == 'post_activation_residual':
                conv1 = _ConvWire(prefix + 'conv1', Conv(width, 3))
                bn1 = _BNWire(prefix + 'bn1', governs=conv1.name)
                sn1 = _SNWire(prefix + 'sn1', SN(), gate=conv1.name)
                prunable(conv1, bn1, sn1, width)
                conv2 = _ConvWire(prefix + 'conv2', Conv(width, 3), in_source=conv1.name)
                bn2 = _BNWire(prefix + 'bn2')
                sn2 = _SNWire(prefix + 'sn2', SN())
            else:
                if producer is None:
                    raise ArchitectureError("Pre-activation block has no stream producer", block=n_block)
                producer.producer_gate = True
                bn1 = _BNWire(prefix + 'bn1', governs=producer.name, gather=True)
                sn1 = _SNWire(prefix + 'sn1', SN(), gate=producer.name)
                prunable(producer, bn1, sn1, producer.spec.c_out)
                conv1 = _ConvWire(prefix + 'conv1', Conv(width, 3), in_source=producer.name)
                bn2 = _BNWire(prefix + 'bn2', governs=conv1.name)
                sn2 = _SNWire(prefix + 'sn2', SN(), gate=conv1.name)
                prunable(conv1, bn2, sn2, width)
                conv2 = _ConvWire(prefix + 'conv2', Conv(width, 3), in_source=conv1.name)
                producer = conv2
            block = _BlockWire(prefix[:-1], conv1, bn1, sn1, conv2, bn2, sn2)
            if channels != width:
                block.shortcut_conv = _ConvWire(prefix + 'shortcut_conv', Conv(width, 1, pad=0))
                block.shortcut_bn = _BNWire(prefix + 'shortcut_bn')
            wires.append(block)
            channels = width
            source = None
            i += 1
        elif isinstance(spec, BN):
            # pre-activation tail; the last producer stays unpruned
            wires += [_BNWire('bn_tail'), _SNWire('sn_tail', layers[i + 1])]
            producer = None
            i += 2
        elif isinstance(spec, Flatten):
            wires.append(('flatten', 'flatten'))
            i += 1
        elif isinstance(spec, Linear):
            wires.append(('linear', 'fc', spec.out, source))
            i += 1
        else:
            raise ArchitectureError(f"Unmappable layer {type(spec).__name__}", position=i)
    return wires, mapping


def map_prunable_channels(definition):
    """Ordered (conv, bn, sn) triples; the position in the list is the layer index."""
    _, mapping = _wire(definition)
    return mapping


# =============================================================================
# Network
# =============================================================================

class Network:
    """Layers plus the definition and the compaction plan they were built from."""

    def __init__(self, definition, layers, mapping, seed, plan=None):
        self.definition = definition
        self.layers = layers
        self.mapping = mapping
        self.seed = seed
        self.plan = plan

    @property
    def t_steps(self):
        return self.definition.t_steps

    @property
    def compacted(self):
        return self.plan is not None

    def iter_layers(self):
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                yield from layer.sublayers
            else:
                yield layer

    def layers_of(self, kind):
        return [layer for layer in self.iter_layers() if layer.kind == kind]

    def layer(self, name):
        for layer in self.iter_layers():
            if layer.name == name:
                return layer
        raise KeyError(name)

    def full_mask(self):
        return ChannelMask.full(self.mapping)

    def parameters(self):
        """Learnable arrays by name; the optimizer updates them in place."""
        params = {}
        for layer in self.iter_layers():
            if layer.kind == 'conv':
                params[layer.name + '.weight'] = layer.params.weight
            elif layer.kind == 'bn':
                params[layer.name + '.gamma'] = layer.params.gamma
                params[layer.name + '.beta'] = layer.params.beta
            elif layer.kind == 'linear':
                params[layer.name + '.weight'] = layer.weight
        return params

    def buffers(self):
        buffers = {}
        for layer in self.layers_of('bn'):
            buffers[layer.name + '.running_mean'] = layer.params.running_mean
            buffers[layer.name + '.running_var'] = layer.params.running_var
        return buffers

    def state_dict(self):
        state = self.parameters()
        state.update(self.buffers())
        return state

    def load_state(self, state):
        """Copy arrays into the existing parameters (shapes must match)."""
        for name, target in self.state_dict().items():
            if name not in state:
                raise ShapeError(f"Missing parameter '{name}'", parameter=name)
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ShapeError(
                    f"Parameter '{name}' has shape {value.shape}, expected {target.shape}",
                    parameter=name
                )
            target[...] = value


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


def _alive(plan, name):
    if plan is None or name is None or name not in plan:
        return None
    return plan.alive(name)


class _Builder:
    def __init__(self, definition, rng, plan):
        self.definition = definition
        self.rng = rng
        self.plan = plan

    def conv(self, wire, shape):
        c, h, w = shape
        spec = wire.spec
        out_alive = _alive(self.plan, wire.name)
        in_alive = _alive(self.plan, wire.in_source)
        c_out = spec.c_out if out_alive is None else len(out_alive)
        c_in = c if in_alive is None else len(in_alive)
        if self.plan is None:
            weight = _uniform(self.rng, np.sqrt(6.0 / (c * spec.k * spec.k)), (c_out, c_in, spec.k, spec.k))
        else:
            weight = np.zeros((c_out, c_in, spec.k, spec.k), dtype=get_dtype())
        params = ConvParams(weight=weight, stride=spec.stride, pad=spec.padding)
        try:
            ho, wo = params.output_size(h, w)
        except ShapeError as e:
            raise ArchitectureError(f"{wire.name}: {e.message}", layer=wire.name) from e

        if wire.producer_gate and self.plan is not None:
            layer = ConvLayer(wire.name, params, in_source=wire.in_source,
                              out_index=out_alive, out_width=spec.c_out)
            return layer, (spec.c_out, ho, wo)
        gate = wire.name if wire.producer_gate else None
        return ConvLayer(wire.name, params, in_source=wire.in_source, gate=gate), (c_out, ho, wo)

    def bn(self, wire, shape):
        alive = _alive(self.plan, wire.governs)
        channels = shape[0] if alive is None else len(alive)
        in_index = alive if wire.gather else None
        return BNLayer(wire.name, BNParams.create(channels), governs=wire.governs, in_index=in_index), \
            (channels,) + tuple(shape[1:])

    def sn(self, wire):
        gate = wire.gate if self.plan is None else None
        return SNLayer(wire.name, self.definition.neuron_for(wire.spec), gate=gate)

    def block(self, wire, shape):
        style = self.definition.block_style
        stream = shape
        if style == 'post_activation_residual':
            conv1, shape = self.conv(wire.conv1, stream)
            bn1, shape = self.bn(wire.bn1, shape)
            sn1 = self.sn(wire.sn1)
            conv2, shape = self.conv(wire.conv2, shape)
            bn2, shape = self.bn(wire.bn2, shape)
            sn2 = self.sn(wire.sn2)
        else:
            bn1, shape = self.bn(wire.bn1, stream)
            sn1 = self.sn(wire.sn1)
            conv1, shape = self.conv(wire.conv1, shape)
            bn2, shape = self.bn(wire.bn2, shape)
            sn2 = self.sn(wire.sn2)
            conv2, shape = self.conv(wire.conv2, shape)
        shortcut_conv = shortcut_bn = None
        if wire.shortcut_conv is not None:
            shortcut_conv, sc_shape = self.conv(wire.shortcut_conv, stream)
            shortcut_bn, _ = self.bn(wire.shortcut_bn, sc_shape)
        block = ResidualBlock(wire.name, style, conv1, bn1, sn1, conv2, bn2, sn2, shortcut_conv, shortcut_bn)
        return block, (wire.conv2.spec.c_out,) + tuple(shape[1:])


def build_network(definition, seed, plan=None):
    """
    Allocate a network for the definition.

    Conv weights are U(-b, b) with b = sqrt(6 / (c_in k^2)), the classifier
    uses the same rule over its input features, gamma = 1 and beta = 0. With a
    plan (a ChannelMask) the network is built compacted: every prunable conv
    keeps only its alive channels and parameters start at zero, to be filled
    by sca.compact.
    """
    wires, mapping = _wire(definition)
    rng = np.random.Generator(np.random.PCG64(seed))
    builder = _Builder(definition, rng, plan)
    shape = tuple(definition.in_shape)
    layers = []
    for wire in wires:
        if isinstance(wire, _ConvWire):
            layer, shape = builder.conv(wire, shape)
        elif isinstance(wire, _BNWire):
            layer, shape = builder.bn(wire, shape)
        elif isinstance(wire, _SNWire):
            layer = builder.sn(wire)
        elif isinstance(wire, _BlockWire):
            layer, shape = builder.block(wire, shape)
        elif wire[0] == 'pool':
            if shape[1] % 2 or shape[2] % 2:
                raise ArchitectureError(
                    f"{wire[1]} needs even spatial dims, got {shape[1]}x{shape[2]}", layer=wire[1]
                )
            layer = PoolLayer(wire[1])
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif wire[0] == 'flatten':
            layer = FlattenLayer(wire[1])
        else:
            _, name, out, source = wire
            spatial = shape[1] * shape[2]
            features = shape[0] * spatial
            weight = np.zeros((out, features), dtype=get_dtype()) if plan is not None else \
                _uniform(rng, np.sqrt(6.0 / features), (out, features))
            layer = LinearLayer(name, weight, in_source=source, spatial=spatial)
        layers.append(layer)

    net = Network(definition, layers, mapping, seed, plan=plan)
    logger.info(
        "Built %s network: %d layers, %d prunable convs, %d parameters%s",
        definition.block_style, len(layers), len(mapping),
        sum(p.size for p in net.parameters().values()),
        ' (compacted)' if plan is not None else ''
    )
    return net


# =============================================================================
# Forward / backward
# =============================================================================

def _stack_batch(net, batch):
    if isinstance(batch, np.ndarray) and batch.ndim == 5:
        x = batch
    else:
        frames = list(batch)
        if not frames:
            raise ShapeError("Empty input sequence")
        first = np.asarray(frames[0]).shape
        for t, frame in enumerate(frames):
            if np.asarray(frame).shape != first:
                raise ShapeError(
                    f"Time step {t} has shape {np.asarray(frame).shape}, expected {first}",
                    time_step=t
                )
        x = np.stack(frames)
    x = np.ascontiguousarray(x, dtype=get_dtype())
    if x.shape[0] != net.t_steps:
        raise ShapeError(
            f"Input sequence has {x.shape[0]} time steps, network expects {net.t_steps}",
            t_steps=net.t_steps
        )
    if x.ndim != 5 or tuple(x.shape[2:]) != tuple(net.definition.in_shape) or x.shape[1] == 0:
        raise ShapeError(
            f"Input frames {x.shape[1:]} do not match network input {tuple(net.definition.in_shape)}",
            input_shape=list(x.shape)
        )
    return x


def forward_T(net, mask, batch, mode='train'):
    """
    Run every layer over all T steps; logits are the mean over T of the
    classifier outputs. batch is a (T, n, c, h, w) array or a sequence of T
    (n, c, h, w) frames. mask may be None for a compacted network.
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"Unknown mode '{mode}'")
    x = _stack_batch(net, batch)
    if mask is not None and net.compacted:
        raise TraceError("A compacted network takes no mask")
    trace = ForwardTrace(mode=mode, t_steps=net.t_steps, batch_size=x.shape[1], mask=mask)
    run = _Pass(trace, mask)
    for layer in net.layers:
        x = layer.forward(x, run)
    trace.outputs = x
    trace.logits = x.mean(axis=0)
    trace.complete = True
    return trace


def backward_T(net, trace, d_logits, gamma_acc=None):
    """
    Full BPTT from dL/dlogits. Returns a dict of gradients keyed like
    Network.parameters(); when gamma_acc is given, the gamma gradients of the
    governing BN layers (pruned channels included) are accumulated into it.
    """
    if trace is None or not trace.complete:
        raise TraceError("backward_T needs a complete forward trace")
    if trace.mode != 'train':
        raise TraceError("backward_T needs a train-mode trace", mode=trace.mode)
    d_logits = np.asarray(d_logits, dtype=get_dtype())
    if d_logits.shape != trace.logits.shape:
        raise ShapeError(
            f"Logit gradient shape {d_logits.shape} does not match logits {trace.logits.shape}"
        )
    run = _Pass(trace, trace.mask)
    d = np.repeat((d_logits / trace.t_steps)[None], trace.t_steps, axis=0)
    for layer in reversed(net.layers):
        d = layer.backward(d, run)
    if gamma_acc is not None:
        gamma_acc.accumulate(run.grads)
    return run.grads


# =============================================================================
# Parameter accounting
# =============================================================================

def _count(mask, name, default):
    if mask is None or name is None or name not in mask:
        return default
    return mask.alive_count(name)


def count_params(net, mask=None):
    """
    (total, alive) over conv weights, BN gamma/beta and the classifier.
    A conv weight survives iff both its out-channel and its in-channel are
    alive; a classifier weight survives iff its input channel is alive.
    """
    total = alive = 0
    for layer in net.iter_layers():
        if layer.kind == 'conv':
            p = layer.params
            k2 = p.k * p.k
            total += p.weight.size
            alive += _count(mask, layer.name, p.c_out) * _count(mask, layer.in_source, p.c_in) * k2
        elif layer.kind == 'bn':
            total += 2 * layer.params.channels
            alive += 2 * _count(mask, layer.governs, layer.params.channels)
        elif layer.kind == 'linear':
            out, features = layer.weight.shape
            channels = features // layer.spatial
            total += layer.weight.size
            alive += out * _count(mask, layer.in_source, channels) * layer.spatial
    return total, alive
