"""
Layer specifications, network definitions and the compact architecture grammar.

Grammar (dash separated):
    {c}C{k}       conv with c output channels, k x k kernel, stride 1, pad k//2
    {c}C{k}S{s}   same with an explicit stride
    {c}R          residual block with c channels (residual styles only)
    AP2           2x2 average pooling
    {n}FC         final classifier with n outputs (flatten implied)

In plain and post-activation styles every conv token expands to Conv, BN, SN.
In the pre-activation style the first conv is a bare stem, blocks carry their
own BN/SN, and a BN + SN pair is inserted before the classifier.
"""
import re
from dataclasses import dataclass, field
from typing import Optional

from errors import ArchitectureError
from neuron import NeuronConfig

BLOCK_STYLES = ('plain', 'post_activation_residual', 'pre_activation_residual')

PRESETS = {
    'dvs5': '64C3-AP2-128C3-AP2-128C3-AP2-256C3-AP2-256C3-AP2-10FC',
    'vgg16': (
        '64C3-64C3-AP2-128C3-128C3-AP2-256C3-256C3-256C3-AP2-'
        '512C3-512C3-512C3-AP2-512C3-512C3-512C3-AP2-10FC'
    ),
    'resnet18': '64C3-64R-64R-AP2-128R-128R-AP2-256R-256R-AP2-512R-512R-AP2-10FC',
    'preresnet18': '64C3-64R-64R-AP2-128R-128R-AP2-256R-256R-AP2-512R-512R-AP2-10FC',
    'toy_vgg4': '16C3-AP2-32C3-32C3-AP2-64C3-AP2-10FC',
    'toy_vgg5': '8C3-16C3-AP2-16C3-32C3-AP2-32C3-AP2-10FC',
}

_CONV_TOKEN = re.compile(r'^(\d+)C(\d+)(?:S(\d+))?$')
_BLOCK_TOKEN = re.compile(r'^(\d+)R$')
_FC_TOKEN = re.compile(r'^(\d+)FC$')


@dataclass(frozen=True)
class Conv:
    c_out: int
    k: int = 3
    stride: int = 1
    pad: Optional[int] = None

    @property
    def padding(self):
        return self.k // 2 if self.pad is None else self.pad


@dataclass(frozen=True)
class BN:
    pass


@dataclass(frozen=True)
class SN:
    neuron: Optional[NeuronConfig] = None


@dataclass(frozen=True)
class AvgPool2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out: int


@dataclass(frozen=True)
class Residual:
    c_out: int


@dataclass
class NetworkDef:
    """A validated-on-build description of a network."""

    layers: list
    block_style: str = 'plain'
    t_steps: int = 4
    in_shape: tuple = (1, 16, 16)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    architecture: Optional[str] = None

    def neuron_for(self, spec):
        return spec.neuron if spec.neuron is not None else self.neuron


def resolve_architecture(text):
    """Expand a preset name; anything else is returned unchanged."""
    return PRESETS.get(text.strip(), text.strip())


def parse_architecture(text, block_style='plain'):
    """Turn an architecture string (or preset name) into a list of layer specs."""
    if block_style not in BLOCK_STYLES:
        raise ArchitectureError(f"Unknown block style '{block_style}'", block_style=block_style)
    tokens = [tok.strip() for tok in resolve_architecture(text).split('-') if tok.strip()]
    if not tokens:
        raise ArchitectureError("Empty architecture string")

    pre = block_style == 'pre_activation_residual'
    layers = []
    seen_fc = False
    for position, token in enumerate(tokens):
        if seen_fc:
            raise ArchitectureError(f"Token '{token}' follows the classifier", token=token)
        conv = _CONV_TOKEN.match(token)
        block = _BLOCK_TOKEN.match(token)
        fc = _FC_TOKEN.match(token)
        if conv:
            c_out, k = int(conv.group(1)), int(conv.group(2))
            stride = int(conv.group(3)) if conv.group(3) else 1
            if pre and position != 0:
                raise ArchitectureError(
                    "Pre-activation networks allow a conv token only as the stem", token=token
                )
            layers.append(Conv(c_out=c_out, k=k, stride=stride))
            if not pre:
                layers.extend([BN(), SN()])
        elif block:
            if block_style == 'plain':
                raise ArchitectureError("Residual blocks need a residual block style", token=token)
            layers.append(Residual(c_out=int(block.group(1))))
        elif token == 'AP2':
            layers.append(AvgPool2())
        elif fc:
            if pre:
                layers.extend([BN(), SN()])
            layers.extend([Flatten(), Linear(out=int(fc.group(1)))])
            seen_fc = True
        else:
            raise ArchitectureError(f"Unrecognized architecture token '{token}'", token=token)
    return layers


def format_architecture(layers, block_style='plain'):
    """Inverse of parse_architecture for specs that the grammar can express."""
    tokens = []
    for spec in layers:
        if isinstance(spec, Conv):
            token = f'{spec.c_out}C{spec.k}'
            if spec.stride != 1:
                token += f'S{spec.stride}'
            tokens.append(token)
        elif isinstance(spec, Residual):
            tokens.append(f'{spec.c_out}R')
        elif isinstance(spec, AvgPool2):
            tokens.append('AP2')
        elif isinstance(spec, Linear):
            tokens.append(f'{spec.out}FC')
    return '-'.join(tokens)


def make_definition(architecture, block_style='plain', t_steps=4, in_shape=(1, 16, 16), neuron=None):
    layers = parse_architecture(architecture, block_style)
    definition = NetworkDef(
        layers=layers,
        block_style=block_style,
        t_steps=t_steps,
        in_shape=tuple(in_shape),
        neuron=neuron or NeuronConfig(),
        architecture=resolve_architecture(architecture)
    )
    validate_definition(definition)
    return definition


def validate_definition(definition):
    """Check the wiring rules for the definition's block style."""
    style = definition.block_style
    layers = definition.layers
    if style not in BLOCK_STYLES:
        raise ArchitectureError(f"Unknown block style '{style}'", block_style=style)
    if definition.t_steps < 1:
        raise ArchitectureError("t_steps must be at least 1", t_steps=definition.t_steps)
    if len(definition.in_shape) != 3 or min(definition.in_shape) < 1:
        raise ArchitectureError(f"Invalid input shape {definition.in_shape}")
    if len(layers) < 2 or not isinstance(layers[-1], Linear) or not isinstance(layers[-2], Flatten):
        raise ArchitectureError("A network must end with Flatten followed by Linear")
    if sum(isinstance(spec, (Linear, Flatten)) for spec in layers) != 2:
        raise ArchitectureError("Exactly one Flatten and one Linear layer are supported")

    if style == 'pre_activation_residual':
        _validate_pre_activation(layers)
        return

    i = 0
    while i < len(layers) - 2:
        spec = layers[i]
        if isinstance(spec, Conv):
            if not (i + 2 < len(layers) and isinstance(layers[i + 1], BN) and isinstance(layers[i + 2], SN)):
                raise ArchitectureError(f"Conv at position {i} is not followed by its BN and SN", position=i)
            i += 3
        elif isinstance(spec, AvgPool2):
            i += 1
        elif isinstance(spec, Residual):
            if style == 'plain':
                raise ArchitectureError("Residual blocks need a residual block style", position=i)
            i += 1
        else:
            raise ArchitectureError(
                f"{type(spec).__name__} at position {i} has no governing conv", position=i
            )


def _validate_pre_activation(layers):
    if not isinstance(layers[0], Conv):
        raise ArchitectureError("Pre-activation networks start with a stem conv")
    body = layers[1:-2]
    if len(body) < 2 or not isinstance(body[-2], BN) and not _tail_pair(body):
        raise ArchitectureError("Pre-activation networks end with BN and SN before the classifier")
    blocks = 0
    seen_tail = False
    i = 0
    while i < len(body):
        spec = body[i]
        if isinstance(spec, Residual) and not seen_tail:
            blocks += 1
            i += 1
        elif isinstance(spec, AvgPool2):
            i += 1
        elif isinstance(spec, BN) and not seen_tail and i + 1 < len(body) and isinstance(body[i + 1], SN):
            seen_tail = True
            i += 2
        else:
            raise ArchitectureError(
                f"{type(spec).__name__} is not allowed here in a pre-activation network", position=i + 1
            )
    if not blocks:
        raise ArchitectureError("Pre-activation networks need at least one residual block")
    if not seen_tail:
        raise ArchitectureError("Pre-activation networks end with BN and SN before the classifier")


def _tail_pair(body):
    for i in range(len(body) - 1):
        if isinstance(body[i], BN) and isinstance(body[i + 1], SN):
            return True
    return False
