"""The three committee CNN structures (A, B, C) and the growable output head.

A: two convs, 4x4 maxpool, hidden dense, per-class sigmoid head.
B: two convs, 2x2 maxpool, 20% dropout, hidden dense, head.
C: three convs with a 2x2 pool after the second and a 4x4 pool after the
   third, 20% dropout, hidden dense, head.

Conv hyperparameters (3x3 kernels, stride 1, 32/64 filters) and the 250-wide
hidden layer are configurable defaults; the structures themselves are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayerSpec, Network, ParameterError, build_network

ARCHITECTURES = ("A", "B", "C")

DENSE_WIDTH = 250
DROPOUT_RATE = 0.2
CONV_FILTERS = {"A": (32, 64), "B": (32, 64), "C": (32, 64, 64)}
NEW_UNIT_SCALE = 0.05


@dataclass(frozen=True)
class NetworkBlueprint:
    architecture: str
    layer_specs: tuple
    input_shape: tuple
    num_classes: int


def blueprint(arch: str, num_classes: int, input_shape=(64, 64, 3),
              conv_filters=None, dense_width: int = DENSE_WIDTH,
              dropout_rate: float = DROPOUT_RATE, kernel: int = 3,
              output_activation: str = "sigmoid") -> NetworkBlueprint:
    if arch not in ARCHITECTURES:
        raise ParameterError(f"unknown architecture {arch!r}, expected one of "
                             f"{ARCHITECTURES}")
    if num_classes < 1:
        raise ParameterError(f"num_classes must be >= 1, got {num_classes}")
    filters = tuple(conv_filters) if conv_filters else CONV_FILTERS[arch]
    head_kind = "sigmoid-output" if output_activation == "sigmoid" else "softmax-output"

    def conv(i):
        return [LayerSpec("conv2d", kernel=kernel, filters=filters[i], stride=1),
                LayerSpec("relu")]

    if arch == "A":
        specs = conv(0) + conv(1) + [LayerSpec("maxpool", window=4)]
    elif arch == "B":
        specs = conv(0) + conv(1) + [LayerSpec("maxpool", window=2),
                                     LayerSpec("dropout", rate=dropout_rate)]
    else:
        if len(filters) < 3:
            raise ParameterError("architecture C needs three conv filter counts")
        specs = (conv(0) + conv(1) + [LayerSpec("maxpool", window=2)] + conv(2) +
                 [LayerSpec("maxpool", window=4),
                  LayerSpec("dropout", rate=dropout_rate)])
    specs += [LayerSpec("dense", units=dense_width), LayerSpec("relu"),
              LayerSpec(head_kind, units=num_classes)]
    return NetworkBlueprint(arch, tuple(specs), tuple(input_shape), num_classes)


def build_cnn(arch, num_classes: int, seed=None, dtype=np.float32,
              **blueprint_kwargs) -> Network:
    """Construct and seed-initialize a network from an architecture id or blueprint."""
    bp = arch if isinstance(arch, NetworkBlueprint) else \
        blueprint(arch, num_classes, **blueprint_kwargs)
    return build_network(list(bp.layer_specs), bp.input_shape, seed=seed,
                         arch=bp.architecture, dtype=dtype)


def expand_output(network: Network, new_num_classes: int, seed=None,
                  zero_init: bool = False) -> Network:
    """A copy of the network whose head grew to new_num_classes units.

    Existing head rows and every other layer are preserved bit-exactly; the
    new rows start small (uniform +/-NEW_UNIT_SCALE) or at zero when asked.
    """
    old_k = network.num_classes
    if new_num_classes <= old_k:
        raise ParameterError(f"new output width {new_num_classes} must exceed "
                             f"current width {old_k}")
    grown = network.copy()
    head = grown.head
    n_in = head.weights.shape[1]
    rng = np.random.default_rng(seed)
    if zero_init:
        new_w = np.zeros((new_num_classes - old_k, n_in), dtype=head.weights.dtype)
        new_b = np.zeros(new_num_classes - old_k, dtype=head.bias.dtype)
    else:
        new_w = rng.uniform(-NEW_UNIT_SCALE, NEW_UNIT_SCALE,
                            size=(new_num_classes - old_k, n_in)).astype(head.weights.dtype)
        new_b = rng.uniform(-NEW_UNIT_SCALE, NEW_UNIT_SCALE,
                            size=new_num_classes - old_k).astype(head.bias.dtype)
    weights = np.concatenate([head.weights, new_w], axis=0)
    bias = np.concatenate([head.bias, new_b], axis=0)
    grown.layers[-1] = type(head)(weights, bias, activation=head.activation)
    grown.shape_chain = grown.shape_chain[:-1] + [(new_num_classes,)]
    return grown
