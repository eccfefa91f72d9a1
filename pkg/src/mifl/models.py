"""Classifier and critic networks shared by every experiment.

The classifier is the classic small CNN (two conv layers, a shared 2x2
max-pool applied after each, three fully connected layers).  The critic
is separable: a linear head on the classifier's penultimate features and
a learned per-class embedding table, scored by inner product, which
yields the full KxK score matrix the MI losses consume in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .mi_losses import MILossConfig, mi_loss
from .ndmath import ShapeError, Tensor


@dataclass(frozen=True)
class ClassifierConfig:
    in_channels: int = 3
    in_height: int = 32
    in_width: int = 32
    conv1_channels: int = 6
    conv1_kernel: int = 5
    pool_kernel: int = 2
    pool_stride: int = 2
    conv2_channels: int = 16
    conv2_kernel: int = 5
    fc1_width: int = 120
    fc2_width: int = 84
    n_classes: int = 10

    def _pool_out(self, size):
        return (size - self.pool_kernel) // self.pool_stride + 1

    def spatial_sizes(self):
        """(h, w) after conv1, pool, conv2, pool, checked for validity."""
        h, w = self.in_height, self.in_width
        h, w = h - self.conv1_kernel + 1, w - self.conv1_kernel + 1
        if h < self.pool_kernel or w < self.pool_kernel:
            raise ShapeError(f"classifier config: conv1 output {h}x{w} too small to pool")
        h, w = self._pool_out(h), self._pool_out(w)
        h, w = h - self.conv2_kernel + 1, w - self.conv2_kernel + 1
        if h < self.pool_kernel or w < self.pool_kernel:
            raise ShapeError(f"classifier config: conv2 output {h}x{w} too small to pool")
        return self._pool_out(h), self._pool_out(w)

    @property
    def flat_width(self):
        h, w = self.spatial_sizes()
        return self.conv2_channels * h * w

    def param_shapes(self):
        return [
            ("conv1_w", (self.conv1_channels, self.in_channels, self.conv1_kernel, self.conv1_kernel)),
            ("conv1_b", (self.conv1_channels,)),
            ("conv2_w", (self.conv2_channels, self.conv1_channels, self.conv2_kernel, self.conv2_kernel)),
            ("conv2_b", (self.conv2_channels,)),
            ("fc1_w", (self.flat_width, self.fc1_width)),
            ("fc1_b", (self.fc1_width,)),
            ("fc2_w", (self.fc1_width, self.fc2_width)),
            ("fc2_b", (self.fc2_width,)),
            ("fc3_w", (self.fc2_width, self.n_classes)),
            ("fc3_b", (self.n_classes,)),
        ]

    @property
    def param_count(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


@dataclass(frozen=True)
class CriticConfig:
    """Separable critic: feature head and label embedding table.

    Both embedding widths must be equal so the pairwise inner product is
    defined.
    """

    feature_embed_width: int = 32
    label_embed_width: int = 32

    def __post_init__(self):
        if self.feature_embed_width != self.label_embed_width:
            raise ValueError(
                f"critic config: feature width {self.feature_embed_width} must equal "
                f"label width {self.label_embed_width}"
            )

    def param_shapes(self, feature_width, n_classes):
        return [
            ("critic_head_w", (feature_width, self.feature_embed_width)),
            ("critic_head_b", (self.feature_embed_width,)),
            ("critic_embed", (n_classes, self.label_embed_width)),
        ]


CIFAR10_CLASSIFIER = ClassifierConfig()


def blob_classifier(side, n_classes):
    """Reduced CNN for synthetic blob images of shape (1, side, side)."""
    return ClassifierConfig(
        in_channels=1,
        in_height=side,
        in_width=side,
        conv1_channels=6,
        conv1_kernel=3,
        conv2_channels=12,
        conv2_kernel=3,
        fc1_width=24,
        fc2_width=16,
        n_classes=n_classes,
    )


def _init_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_classifier_params(config, rng, dtype=np.float32):
    """Uniform +/- 1/sqrt(fan_in) init for every layer, seeded by rng."""
    out = []
    fan_ins = {
        "conv1": config.in_channels * config.conv1_kernel**2,
        "conv2": config.conv1_channels * config.conv2_kernel**2,
        "fc1": config.flat_width,
        "fc2": config.fc1_width,
        "fc3": config.fc2_width,
    }
    for name, shape in config.param_shapes():
        out.append(_init_uniform(rng, shape, fan_ins[name.split("_")[0]], dtype))
    return out


def init_critic_params(config, feature_width, n_classes, rng, dtype=np.float32):
    out = []
    for name, shape in config.param_shapes(feature_width, n_classes):
        fan_in = feature_width if name.startswith("critic_head") else config.label_embed_width
        out.append(_init_uniform(rng, shape, fan_in, dtype))
    return out


def _check_batch(config, batch):
    expected = (config.in_channels, config.in_height, config.in_width)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(
            f"classifier_forward: batch shape {batch.shape} does not match "
            f"configured input {expected}"
        )


def classifier_penultimate(config, params, batch):
    """Features after the second fully connected layer, shape (B, fc2)."""
    _check_batch(config, batch)
    c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b = params[:8]
    h = nd.maxpool2d(nd.relu(nd.conv2d(batch, c1w, c1b)), config.pool_kernel, config.pool_stride)
    h = nd.maxpool2d(nd.relu(nd.conv2d(h, c2w, c2b)), config.pool_kernel, config.pool_stride)
    h = nd.reshape(h, (batch.shape[0], config.flat_width))
    h = nd.relu(nd.add(nd.matmul(h, f1w), f1b))
    return nd.relu(nd.add(nd.matmul(h, f2w), f2b))


def classifier_forward(config, params, batch):
    """Logits of shape (B, n_classes)."""
    penult = classifier_penultimate(config, params, batch)
    f3w, f3b = params[8], params[9]
    return nd.add(nd.matmul(penult, f3w), f3b)


def critic_feature_embed(critic_params, features):
    head_w, head_b = critic_params[0], critic_params[1]
    return nd.add(nd.matmul(features, head_w), head_b)


def critic_scores(critic_params, features, labels):
    """KxK score matrix: entry (i, j) = embed(feature_i) . embed(label_j).

    The diagonal holds the true (feature, label) pairs.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("critic_scores: need at least one sample")
    g = critic_feature_embed(critic_params, features)
    e = nd.index_select(critic_params[2], 0, labels)
    return nd.matmul(g, nd.transpose(e))


def critic_class_scores(critic_params, features):
    """Score of every class for every sample, shape (B, n_classes)."""
    g = critic_feature_embed(critic_params, features)
    return nd.matmul(g, nd.transpose(critic_params[2]))


def predict(loss_kind, scores):
    """Predicted class per sample: argmax across the class axis.

    Accepts CE logits or per-class MI score rows; ties break toward the
    lowest class index.
    """
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return np.argmax(arr, axis=1)


class ModelBundle:
    """One trainable model: classifier backbone plus, for MI losses, the
    critic head.  Parameters travel as flat vectors between server and
    clients; this class owns the packing order.
    """

    def __init__(self, classifier, loss_config, critic=None):
        self.classifier = classifier
        self.loss_config = loss_config
        self.uses_critic = loss_config.kind != "ce"
        if self.uses_critic:
            self.critic = critic if critic is not None else CriticConfig()
            self.shapes = [
                s for s in classifier.param_shapes() if not s[0].startswith("fc3")
            ] + self.critic.param_shapes(classifier.fc2_width, classifier.n_classes)
        else:
            self.critic = None
            self.shapes = classifier.param_shapes()

    @property
    def param_count(self):
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def init_params(self, rng, dtype=np.float32):
        cls_params = init_classifier_params(self.classifier, rng, dtype)
        if not self.uses_critic:
            return cls_params
        critic = init_critic_params(
            self.critic, self.classifier.fc2_width, self.classifier.n_classes, rng, dtype
        )
        return cls_params[:8] + critic

    def pack(self, params):
        return np.concatenate([p.reshape(-1) for p in params])

    def unpack(self, flat):
        out = []
        offset = 0
        for _, shape in self.shapes:
            n = int(np.prod(shape))
            out.append(flat[offset : offset + n].reshape(shape))
            offset += n
        if offset != flat.size:
            raise ShapeError(
                f"unpack: flat vector has {flat.size} entries, model needs {offset}"
            )
        return out

    def training_loss(self, param_tensors, batch, labels):
        """Scalar training loss for one mini-batch."""
        if self.uses_critic:
            feats = classifier_penultimate(self.classifier, param_tensors[:8], batch)
            scores = critic_scores(param_tensors[8:], feats, labels)
            return mi_loss(self.loss_config, scores, labels)
        logits = classifier_forward(self.classifier, param_tensors, batch)
        return mi_loss(self.loss_config, logits, labels)

    def predict_classes(self, params, batch_data):
        """Class predictions for a raw data batch (no tape required)."""
        batch = Tensor(batch_data)
        tensors = [Tensor(p) for p in params]
        if self.uses_critic:
            feats = classifier_penultimate(self.classifier, tensors[:8], batch)
            rows = critic_class_scores(tensors[8:], feats)
        else:
            rows = classifier_forward(self.classifier, tensors, batch)
        return predict(self.loss_config.kind, rows)


@dataclass(frozen=True)
class PairCriticConfig:
    """Two-sided MLP critic for continuous sample pairs (calibration runs)."""

    in_dims: int = 1
    hidden_width: int = 128
    embed_width: int = 32

    def param_shapes(self):
        shapes = []
        for side in ("x", "y"):
            shapes += [
                (f"{side}_w1", (self.in_dims, self.hidden_width)),
                (f"{side}_b1", (self.hidden_width,)),
                (f"{side}_w2", (self.hidden_width, self.embed_width)),
                (f"{side}_b2", (self.embed_width,)),
            ]
        return shapes


def init_pair_critic_params(config, rng, dtype=np.float32):
    out = []
    for name, shape in config.param_shapes():
        fan_in = config.in_dims if name.endswith("w1") or name.endswith("b1") else config.hidden_width
        out.append(_init_uniform(rng, shape, fan_in, dtype))
    return out


def pair_critic_scores(config, params, x_batch, y_batch):
    """KxK scores for paired continuous samples via separable MLP embeddings."""
    xw1, xb1, xw2, xb2, yw1, yb1, yw2, yb2 = params
    gx = nd.relu(nd.add(nd.matmul(x_batch, xw1), xb1))
    gx = nd.add(nd.matmul(gx, xw2), xb2)
    gy = nd.relu(nd.add(nd.matmul(y_batch, yw1), yb1))
    gy = nd.add(nd.matmul(gy, yw2), yb2)
    return nd.matmul(gx, nd.transpose(gy))
