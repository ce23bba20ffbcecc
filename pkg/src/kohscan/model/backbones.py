"""Network construction: the two published backbones plus a small CI one.

VGG16 and InceptionV3 follow their canonical published structures exactly
(conv/pool tables verified against the reference implementations; stock-top
parameter totals are 138,357,544 and 23,851,784). The classification head
used for fungus/keratin work is flatten-or-GAP -> 64 -> 32 -> softmax.

`tiny` is a three-conv-block backbone (~8.6k parameters with the standard
head) for tests, examples and desk-scale training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (AvgPool2D, BatchNorm, Branch, Conv2D, Dense, Flatten,
                     GlobalAvgPool, MaxPool2D, ReLU, Sequential, Softmax,
                     iter_layers)

BACKBONES = ("vgg16", "inceptionv3", "tiny")

INPUT_SHAPE = (224, 224, 3)


@dataclass(frozen=True)
class ArchitectureSpec:
    """What to build: backbone plus the dense classification head.

    stock_top=True ignores head_widths/n_classes and attaches the backbone's
    canonical original top (VGG16: 4096/4096/1000, InceptionV3: GAP/1000),
    which is what the published parameter totals refer to.
    """

    backbone: str = "tiny"
    head_widths: tuple[int, ...] = (64, 32)
    n_classes: int = 2
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    pretrained_backbone: bool = False
    stock_top: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.stock_top:
            if not self.head_widths or any(w <= 0 for w in self.head_widths):
                raise ValueError("head_widths must be non-empty and positive")
            if self.n_classes < 2:
                raise ValueError("n_classes must be >= 2")
        if self.backbone in ("vgg16", "inceptionv3") and self.input_shape != INPUT_SHAPE:
            raise ValueError(f"{self.backbone} input_shape is fixed at {INPUT_SHAPE}")

    def to_dict(self):
        return {
            "backbone": self.backbone,
            "head_widths": list(self.head_widths),
            "n_classes": self.n_classes,
            "input_shape": list(self.input_shape),
            "pretrained_backbone": self.pretrained_backbone,
            "stock_top": self.stock_top,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            backbone=d["backbone"],
            head_widths=tuple(d["head_widths"]),
            n_classes=d["n_classes"],
            input_shape=tuple(d["input_shape"]),
            pretrained_backbone=d.get("pretrained_backbone", False),
            stock_top=d.get("stock_top", False),
        )


class Network:
    """A built model: backbone + head, with helpers the trainer relies on."""

    def __init__(self, spec: ArchitectureSpec, backbone: Sequential, head: Sequential,
                 dtype=np.float32, init_seed: int = 0):
        self.spec = spec
        self.backbone = backbone
        self.head = head
        self.dtype = np.dtype(dtype)
        self.init_seed = init_seed

    # -- structure ---------------------------------------------------------
    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def head_layers(self):
        return list(iter_layers(self.head))

    def all_layers(self):
        return list(iter_layers(self.backbone)) + self.head_layers()

    # -- computation -------------------------------------------------------
    def forward_probs(self, x, training=False):
        x = self.backbone.forward(x, training=training)
        return self.head.forward(x, training=training)

    def forward_logits(self, x, training=False):
        """Forward stopping just before the final softmax."""
        x = self.backbone.forward(x, training=training)
        for layer in self.head.layers[:-1]:
            x = layer.forward(x, training=training)
        return x

    def backward_from_logits(self, dlogits):
        g = dlogits
        for layer in reversed(self.head.layers[:-1]):
            g = layer.backward(g)
        return self.backbone.backward(g)


def _conv_bn(rng, dtype, name, c_in, c_out, kernel, stride=1, padding="same"):
    return [
        Conv2D(name, c_in, c_out, kernel, stride=stride, padding=padding,
               use_bias=False, rng=rng, dtype=dtype),
        BatchNorm(f"{name}_bn", c_out, scale=False, dtype=dtype),
        ReLU(f"{name}_relu"),
    ]


def _vgg16_backbone(rng, dtype):
    cfg = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
    layers = []
    c_in = 3
    for b, (width, reps) in enumerate(cfg, start=1):
        for r in range(1, reps + 1):
            name = f"backbone.block{b}_conv{r}"
            layers += [Conv2D(name, c_in, width, 3, rng=rng, dtype=dtype), ReLU(f"{name}_relu")]
            c_in = width
        layers.append(MaxPool2D(f"backbone.block{b}_pool", 2, stride=2))
    return Sequential("backbone", layers), 7 * 7 * 512


def _inception_block(rng, dtype, name, c_in, branch_defs):
    paths = []
    for bname, steps in branch_defs:
        layers = []
        c = c_in
        for step in steps:
            if step[0] == "conv":
                _, c_out, kernel, stride, padding = step
                layers += _conv_bn(rng, dtype, f"{name}.{bname}", c, c_out, kernel, stride, padding)
                bname = bname + "x"  # unique sub-names within a branch
                c = c_out
            elif step[0] == "avgpool":
                layers.append(AvgPool2D(f"{name}.{bname}_avgpool", 3, stride=1, padding="same"))
            elif step[0] == "maxpool":
                layers.append(MaxPool2D(f"{name}.{bname}_maxpool", 3, stride=2, padding="valid"))
            elif step[0] == "split":
                _, subdefs, c_each = step
                layers.append(_inception_block(rng, dtype, f"{name}.{bname}", c, subdefs))
                c = c_each
        paths.append(Sequential(f"{name}.{bname}", layers))
    return Branch(name, paths)


def _inceptionv3_backbone(rng, dtype):
    def conv(c_out, kernel, stride=1, padding="same"):
        return ("conv", c_out, kernel, stride, padding)

    layers = []
    layers += _conv_bn(rng, dtype, "backbone.stem_conv1", 3, 32, 3, 2, "valid")
    layers += _conv_bn(rng, dtype, "backbone.stem_conv2", 32, 32, 3, 1, "valid")
    layers += _conv_bn(rng, dtype, "backbone.stem_conv3", 32, 64, 3, 1, "same")
    layers.append(MaxPool2D("backbone.stem_pool1", 3, stride=2, padding="valid"))
    layers += _conv_bn(rng, dtype, "backbone.stem_conv4", 64, 80, 1, 1, "valid")
    layers += _conv_bn(rng, dtype, "backbone.stem_conv5", 80, 192, 3, 1, "valid")
    layers.append(MaxPool2D("backbone.stem_pool2", 3, stride=2, padding="valid"))

    c = 192
    for i, pool_proj in enumerate((32, 64, 64)):  # 35x35 blocks
        layers.append(_inception_block(rng, dtype, f"backbone.mixed{i}", c, [
            ("b1x1", [conv(64, 1)]),
            ("b5x5", [conv(48, 1), conv(64, 5)]),
            ("b3x3dbl", [conv(64, 1), conv(96, 3), conv(96, 3)]),
            ("bpool", [("avgpool",), conv(pool_proj, 1)]),
        ]))
        c = 64 + 64 + 96 + pool_proj

    layers.append(_inception_block(rng, dtype, "backbone.mixed3", c, [  # 35 -> 17
        ("b3x3", [conv(384, 3, 2, "valid")]),
        ("b3x3dbl", [conv(64, 1), conv(96, 3), conv(96, 3, 2, "valid")]),
        ("bpool", [("maxpool",)]),
    ]))
    c = 384 + 96 + c

    for i, w in zip((4, 5, 6, 7), (128, 160, 160, 192)):  # 17x17 blocks
        layers.append(_inception_block(rng, dtype, f"backbone.mixed{i}", c, [
            ("b1x1", [conv(192, 1)]),
            ("b7x7", [conv(w, 1), conv(w, (1, 7)), conv(192, (7, 1))]),
            ("b7x7dbl", [conv(w, 1), conv(w, (7, 1)), conv(w, (1, 7)),
                         conv(w, (7, 1)), conv(192, (1, 7))]),
            ("bpool", [("avgpool",), conv(192, 1)]),
        ]))
        c = 192 * 4

    layers.append(_inception_block(rng, dtype, "backbone.mixed8", c, [  # 17 -> 8
        ("b3x3", [conv(192, 1), conv(320, 3, 2, "valid")]),
        ("b7x7x3", [conv(192, 1), conv(192, (1, 7)), conv(192, (7, 1)),
                    conv(192, 3, 2, "valid")]),
        ("bpool", [("maxpool",)]),
    ]))
    c = 320 + 192 + c

    for i in (9, 10):  # 8x8 blocks with the split 3x3 branches
        layers.append(_inception_block(rng, dtype, f"backbone.mixed{i}", c, [
            ("b1x1", [conv(320, 1)]),
            ("b3x3", [conv(384, 1),
                      ("split", [("a", [conv(384, (1, 3))]),
                                 ("b", [conv(384, (3, 1))])], 768)]),
            ("b3x3dbl", [conv(448, 1), conv(384, 3),
                         ("split", [("a", [conv(384, (1, 3))]),
                                    ("b", [conv(384, (3, 1))])], 768)]),
            ("bpool", [("avgpool",), conv(192, 1)]),
        ]))
        c = 320 + 768 + 768 + 192

    return Sequential("backbone", layers), c


def _tiny_backbone(rng, dtype):
    layers = []
    for i, (c_in, c_out, stride) in enumerate([(3, 8, 2), (8, 16, 1), (16, 24, 1)], start=1):
        name = f"backbone.block{i}_conv"
        layers += [Conv2D(name, c_in, c_out, 3, stride=stride, rng=rng, dtype=dtype),
                   ReLU(f"{name}_relu"),
                   MaxPool2D(f"backbone.block{i}_pool", 2, stride=2)]
    return Sequential("backbone", layers), 24


def _head(rng, dtype, in_features, widths, n_classes, reduce_layer):
    layers = [reduce_layer]
    f = in_features
    for i, w in enumerate(widths, start=1):
        layers += [Dense(f"head.dense{i}", f, w, rng=rng, dtype=dtype), ReLU(f"head.dense{i}_relu")]
        f = w
    layers += [Dense("head.output", f, n_classes, rng=rng, dtype=dtype), Softmax("head.softmax")]
    return Sequential("head", layers)


def _stock_head(rng, dtype, backbone_name, in_features):
    if backbone_name == "vgg16":
        return _head(rng, dtype, in_features, (4096, 4096), 1000, Flatten("head.flatten"))
    return _head(rng, dtype, in_features, (), 1000, GlobalAvgPool("head.gap"))


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Construct a randomly initialized network for the given spec.

    Initialization is Glorot-uniform from a PCG64 stream seeded with `seed`,
    so builds are reproducible bit for bit.
    """
    if spec.pretrained_backbone:
        raise ValueError(
            "pretrained backbone weights are not distributed with this package; "
            "train from scratch or load an existing model bundle")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    if spec.backbone == "vgg16":
        backbone, feats = _vgg16_backbone(rng, dtype)
        reduce = Flatten("head.flatten")
    elif spec.backbone == "inceptionv3":
        backbone, feats = _inceptionv3_backbone(rng, dtype)
        reduce = GlobalAvgPool("head.gap")
    else:
        backbone, feats = _tiny_backbone(rng, dtype)
        reduce = GlobalAvgPool("head.gap")
    if spec.stock_top:
        head = _stock_head(rng, dtype, spec.backbone, feats)
    else:
        head = _head(rng, dtype, feats, spec.head_widths, spec.n_classes, reduce)
    return Network(spec, backbone, head, dtype=dtype, init_seed=seed)


def parameter_count(model: Network, trainable_only: bool = False) -> int:
    """Count of scalars in the model's parameter set.

    The default convention matches the published model summaries: batch-norm
    moving statistics are included (they serialize with the model even
    though they are not trainable).
    """
    params = model.trainable_parameters() if trainable_only else model.parameters()
    return sum(p.size for p in params)


def predict_batch(model: Network, batch) -> np.ndarray:
    """Per-class probabilities for a preprocessed batch, shape (N, n_classes)."""
    batch = np.asarray(batch)
    expected = model.spec.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(expected):
        raise ValueError(
            f"expected batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
            f"got {batch.shape}")
    return model.forward_probs(batch.astype(model.dtype, copy=False), training=False)
