"""
Datasets: SCAT-backed containers, the synthetic template task, direct
temporal encoding and deterministic batching.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from data_persistence import read_manifest, read_scat, write_manifest, write_scat
from errors import ConfigError, CorruptContainerError, StorageError
from tensor import as_tensor4

logger = logging.getLogger(__name__)

SPLITS = ('train', 'test')
TEMPLATE_KINDS = ('horizontal', 'vertical', 'diagonal', 'checker')


@dataclass
class DatasetContainer:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = 'train'

    def __post_init__(self):
        if self.images.ndim != 4:
            raise CorruptContainerError(f"Images must be (n, c, h, w), got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise CorruptContainerError(
                f"{len(self.labels)} labels for {len(self.images)} images",
                images=len(self.images),
                labels=len(self.labels)
            )
        if len(self.images) == 0:
            raise CorruptContainerError("Dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise CorruptContainerError(
                f"Labels must lie in [0, {self.class_count})",
                min_label=int(self.labels.min()),
                max_label=int(self.labels.max())
            )
        if self.split not in SPLITS:
            raise CorruptContainerError(f"Unknown split '{self.split}'")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


@dataclass
class EncoderConfig:
    t_steps: int = 4
    scheme: str = 'direct_repeat'

    def __post_init__(self):
        if self.t_steps < 1:
            raise ConfigError("t_steps must be at least 1", key='t_steps', value=self.t_steps)
        if self.scheme != 'direct_repeat':
            raise ConfigError(f"Unknown encoding scheme '{self.scheme}'", value=self.scheme)


def save_container(container, path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Could not create dataset directory {path}: {e}", path=str(path)) from e
    n, c, h, w = container.images.shape
    write_scat(os.path.join(path, 'images.scat'), container.images)
    write_scat(os.path.join(path, 'labels.scat'), container.labels.astype(np.float64))
    write_manifest(os.path.join(path, 'manifest.txt'), {
        'classes': container.class_count,
        'n': n,
        'c': c,
        'h': h,
        'w': w,
        'split': container.split,
    })
    logger.info("Saved %s split with %d samples to %s", container.split, n, path)
    return {'success': True, 'path': path, 'samples': n}


def load_container(path):
    manifest = read_manifest(os.path.join(path, 'manifest.txt'))
    try:
        classes = int(manifest['classes'])
        shape = tuple(int(manifest[key]) for key in ('n', 'c', 'h', 'w'))
        split = manifest.get('split', 'train')
    except (KeyError, ValueError) as e:
        raise CorruptContainerError(f"{path} has an invalid manifest: {e}", path=str(path)) from e

    images = read_scat(os.path.join(path, 'images.scat'))
    labels = read_scat(os.path.join(path, 'labels.scat'))
    if images.shape != shape:
        raise CorruptContainerError(
            f"images.scat has shape {images.shape}, manifest says {shape}", path=str(path)
        )
    if labels.ndim != 1 or np.any(labels != np.round(labels)):
        raise CorruptContainerError("labels.scat must hold whole-number labels", path=str(path))
    if images.min() < 0.0 or images.max() > 1.0:
        raise CorruptContainerError("Image values must lie in [0, 1]", path=str(path))
    return DatasetContainer(images=images, labels=labels.astype(np.int64), class_count=classes, split=split)


# =============================================================================
# Synthetic task
# =============================================================================

def class_template(label, hw):
    """
    Deterministic pattern for a class: kind = label % 4 (bars in three
    orientations or a checkerboard), period = 2 + label // 4.
    """
    kind = TEMPLATE_KINDS[label % len(TEMPLATE_KINDS)]
    period = 2 + label // len(TEMPLATE_KINDS)
    rows, cols = np.indices((hw, hw))
    if kind == 'horizontal':
        phase = rows
    elif kind == 'vertical':
        phase = cols
    elif kind == 'diagonal':
        phase = rows + cols
    else:
        phase = rows // period + cols // period
        return (phase % 2).astype(np.float64)
    return ((phase // period) % 2).astype(np.float64)


def synth_generate(classes=10, n_per_class=50, hw=16, noise=0.1, seed=0, split='train', channels=1):
    """Templates plus N(0, noise^2) pixel noise from a PCG64 stream, clipped to [0, 1]."""
    if classes < 2:
        raise ConfigError("A synthetic task needs at least two classes", key='synth_classes', value=classes)
    if n_per_class < 1 or hw < 2 or channels < 1:
        raise ConfigError("Synthetic sizes must be positive", n_per_class=n_per_class, hw=hw)
    rng = np.random.Generator(np.random.PCG64(seed))
    templates = np.stack([class_template(label, hw) for label in range(classes)])
    labels = np.repeat(np.arange(classes), n_per_class)
    images = np.repeat(templates[labels][:, None], channels, axis=1)
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return DatasetContainer(
        images=np.ascontiguousarray(images[order]),
        labels=labels[order].astype(np.int64),
        class_count=classes,
        split=split
    )


# =============================================================================
# Encoding and batching
# =============================================================================

def encode_direct(batch, cfg):
    """The image batch repeated at each of T steps as a (T, n, c, h, w) array."""
    if not isinstance(cfg, EncoderConfig):
        cfg = EncoderConfig(t_steps=cfg)
    x = as_tensor4(batch, name='image batch')
    return np.repeat(x[None], cfg.t_steps, axis=0)


def batch_indices(n, batch_size, shuffle=True, seed=0, epoch=0):
    if batch_size < 1:
        raise ConfigError("batch_size must be positive", key='batch_size', value=batch_size)
    if shuffle:
        order = np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)
    else:
        order = np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(container, batch_size, shuffle=True, seed=0, epoch=0):
    """Yields (images, labels); the permutation is fixed by (seed, epoch) and the last partial batch is kept."""
    for idx in batch_indices(len(container), batch_size, shuffle=shuffle, seed=seed, epoch=epoch):
        yield container.images[idx], container.labels[idx]


def linear_probe(train, test, seed=0):
    """Test accuracy of a multinomial logistic regression on raw pixels."""
    model = LogisticRegression(max_iter=1000, random_state=seed)
    model.fit(train.images.reshape(len(train), -1), train.labels)
    accuracy = float(model.score(test.images.reshape(len(test), -1), test.labels))
    logger.info("Linear probe accuracy %.4f", accuracy)
    return accuracy
