"""
Persistence for tensors, datasets and checkpoints.

Tensors are stored in "SCAT" containers:
    magic  b'SCAT'
    u8     version (1)
    u8     dtype (0 = float32, 1 = float64)
    u8     rank
    u32    dims[rank], little endian
    payload, little endian, C order

Manifests are text files with one `key = value` per line.
"""
import hashlib
import logging
import os
import struct

import numpy as np

from architecture import make_definition
from errors import CorruptContainerError, StorageError
from network import ChannelMask, build_network, map_prunable_channels
from neuron import NeuronConfig
from tensor import get_precision, set_precision

logger = logging.getLogger(__name__)

MAGIC = b'SCAT'
VERSION = 1
DTYPE_CODES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

CHECKPOINT_FORMAT = 'sca-checkpoint'


# =============================================================================
# SCAT containers
# =============================================================================

def encode_scat(array):
    arr = np.asarray(array)
    if arr.dtype not in CODE_FOR_DTYPE:
        arr = arr.astype(np.float64)
    code = CODE_FOR_DTYPE[arr.dtype]
    if arr.ndim > 255:
        raise StorageError(f"Rank {arr.ndim} does not fit a SCAT header")
    header = MAGIC + struct.pack('<BBB', VERSION, code, arr.ndim)
    header += struct.pack(f'<{arr.ndim}I', *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_scat(data, source='<bytes>'):
    if len(data) < 7 or data[:4] != MAGIC:
        raise CorruptContainerError(f"{source} is not a SCAT container", path=str(source))
    version, code, rank = struct.unpack_from('<BBB', data, 4)
    if version != VERSION:
        raise CorruptContainerError(f"{source} has unsupported version {version}", path=str(source))
    if code not in DTYPE_CODES:
        raise CorruptContainerError(f"{source} has unknown dtype code {code}", path=str(source))
    offset = 7 + 4 * rank
    if len(data) < offset:
        raise CorruptContainerError(f"{source} has a truncated header", path=str(source))
    shape = struct.unpack_from(f'<{rank}I', data, 7)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = data[offset:]
    if len(payload) != expected:
        raise CorruptContainerError(
            f"{source} payload is {len(payload)} bytes, header promises {expected}",
            path=str(source),
            expected_bytes=expected,
            actual_bytes=len(payload)
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.type)


def _atomic_write(path, data, mode='wb'):
    tmp = f'{path}.tmp'
    try:
        with open(tmp, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}", path=str(path)) from e


def write_scat(path, array):
    _atomic_write(path, encode_scat(array))


def read_scat(path):
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError as e:
        raise StorageError(f"Missing container {path}", path=str(path)) from e
    except OSError as e:
        raise StorageError(f"Could not read {path}: {e}", path=str(path)) from e
    return decode_scat(data, source=path)


# =============================================================================
# Manifests and checksums
# =============================================================================

def write_manifest(path, values):
    lines = [f'{key} = {value}' for key, value in values.items()]
    _atomic_write(path, '\n'.join(lines) + '\n', mode='w')


def read_manifest(path):
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError as e:
        raise StorageError(f"Missing manifest {path}", path=str(path)) from e
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise CorruptContainerError(f"{path}:{number} is not a key = value line", path=str(path))
        key, value = line.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def file_checksum(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def directory_checksums(path):
    """sha256 of every regular file under path, keyed by relative path."""
    sums = {}
    for root, _, files in sorted(os.walk(path)):
        for name in sorted(files):
            full = os.path.join(root, name)
            sums[os.path.relpath(full, path)] = file_checksum(full)
    return sums


# =============================================================================
# Checkpoints
# =============================================================================

def save_checkpoint(path, net, mask, epoch, extra=None):
    """
    Write manifest.txt, params/<name>.scat (running statistics included) and
    mask/<conv>.scat (0/1 floats). For a compacted network the mask written is
    the compaction plan.
    """
    definition = net.definition
    neuron = definition.neuron
    stored_mask = net.plan if net.compacted else mask
    try:
        os.makedirs(os.path.join(path, 'params'), exist_ok=True)
        os.makedirs(os.path.join(path, 'mask'), exist_ok=True)
    except OSError as e:
        raise StorageError(f"Could not create checkpoint directory {path}: {e}", path=str(path)) from e

    for name, array in net.state_dict().items():
        write_scat(os.path.join(path, 'params', f'{name}.scat'), array)
    if stored_mask is not None:
        for name in stored_mask.layers:
            write_scat(os.path.join(path, 'mask', f'{name}.scat'), stored_mask[name].astype(np.float64))

    manifest = {
        'format': CHECKPOINT_FORMAT,
        'version': VERSION,
        'architecture': definition.architecture,
        'block_style': definition.block_style,
        't_steps': definition.t_steps,
        'in_shape': ','.join(str(d) for d in definition.in_shape),
        'seed': net.seed,
        'epoch': epoch,
        'sparsity': repr(stored_mask.sparsity) if stored_mask is not None else '0.0',
        'compacted': int(net.compacted),
        'precision': get_precision(),
        'neuron_kind': neuron.kind,
        'v_th': repr(neuron.v_th),
        'v_reset': repr(neuron.v_reset),
        'tau_m': repr(neuron.tau_m),
        'alpha': repr(neuron.alpha),
    }
    manifest.update(extra or {})
    write_manifest(os.path.join(path, 'manifest.txt'), manifest)
    logger.info("Wrote checkpoint %s (epoch %s)", path, epoch)
    return {
        'success': True,
        'path': path,
        'parameters': len(net.state_dict()),
        'compacted': net.compacted
    }


def load_checkpoint(path):
    """Returns (net, mask, manifest). mask is None for a compacted network."""
    manifest = read_manifest(os.path.join(path, 'manifest.txt'))
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise CorruptContainerError(f"{path} is not a checkpoint", path=str(path))
    try:
        set_precision(manifest['precision'])
        neuron = NeuronConfig(
            kind=manifest['neuron_kind'],
            v_th=float(manifest['v_th']),
            v_reset=float(manifest['v_reset']),
            tau_m=float(manifest['tau_m']),
            alpha=float(manifest['alpha'])
        )
        definition = make_definition(
            manifest['architecture'],
            block_style=manifest['block_style'],
            t_steps=int(manifest['t_steps']),
            in_shape=tuple(int(d) for d in manifest['in_shape'].split(',')),
            neuron=neuron
        )
        seed = int(manifest['seed'])
        compacted = manifest['compacted'] == '1'
    except (KeyError, ValueError) as e:
        raise CorruptContainerError(f"{path} has an invalid manifest: {e}", path=str(path)) from e

    mapping = map_prunable_channels(definition)
    mask = ChannelMask({
        entry.conv: read_scat(os.path.join(path, 'mask', f'{entry.conv}.scat')) > 0.5
        for entry in mapping
    })
    net = build_network(definition, seed, plan=mask if compacted else None)
    state = {
        name: read_scat(os.path.join(path, 'params', f'{name}.scat'))
        for name in net.state_dict()
    }
    net.load_state(state)
    return net, (None if compacted else mask), manifest
