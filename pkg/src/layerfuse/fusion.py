"""Convex per-element fusion of two encoder layers through the attention gate."""

from dataclasses import dataclass

from .gate import (
    GateParams,
    VARIANTS,
    check_gate_mode,
    gate_forward,
    gate_global_only,
    gate_local_only,
    init_gate_params,
)
from .tensor import DimensionError, Tensor, broadcast_add, elementwise_mul, scale, shift, sub

_GATE_FUNCTIONS = {
    "full": gate_forward,
    "global": gate_global_only,
    "local": gate_local_only,
}


def check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


@dataclass(frozen=True)
class LayerPair:
    """1-based indices of the lower layer and the (usually top) upper layer."""

    lower: int
    upper: int

    def __post_init__(self):
        if not 1 <= self.lower <= self.upper:
            raise ValueError(
                f"layer pair needs 1 <= lower <= upper, got ({self.lower}, {self.upper})"
            )


def fuse_layers(l1, l2, params, mode="sigmoid", variant="full"):
    """Mix two same-shape layers as l1*g + l2*(1-g).

    The gate g is computed on the arithmetic mean of the layers.  Returns
    (fused, weight) where ``weight`` is the mixing coefficient actually used:
    the sigmoid map in "sigmoid" mode, or the mean scaled by the sigmoid map
    in "literal" mode.
    """
    check_variant(variant)
    if l1.data.shape != l2.data.shape:
        raise DimensionError(
            f"fuse_layers: layer shapes differ, {l1.data.shape} vs {l2.data.shape}"
        )
    mean = scale(broadcast_add(l1, l2), 0.5)
    weight, _ = _GATE_FUNCTIONS[variant](mean, params, mode)
    # Evaluated as mean + (l1 - l2) * (g - 1/2): equal inputs and a gate of
    # exactly one half then reproduce l1 and the arithmetic mean bit-exactly.
    fused = broadcast_add(mean, elementwise_mul(sub(l1, l2), shift(weight, -0.5)))
    return fused, weight


@dataclass
class FusionSystem:
    """A fusion-ready pairing of layer indices, gate parameters, and mode."""

    pair: LayerPair
    params: GateParams
    variant: str = "full"
    mode: str = "sigmoid"

    def config_id(self):
        return f"D_{self.pair.lower}"

    def set_training(self, training):
        self.params.set_training(training)

    def forward(self, l1, l2, training=False):
        self.set_training(training)
        return fuse_layers(l1, l2, self.params, mode=self.mode, variant=self.variant)

    def fused_batch(self, bank, rows, training=False):
        l1 = Tensor(bank.layer(self.pair.lower)[rows])
        l2 = Tensor(bank.layer(self.pair.upper)[rows])
        return self.forward(l1, l2, training)[0]

    def parameters(self):
        return self.params.parameters()


@dataclass
class BaselineSystem:
    """Reference system: the top layer passes through untouched."""

    upper: int

    def config_id(self):
        return "baseline"

    def set_training(self, training):
        pass

    def fused_batch(self, bank, rows, training=False):
        return Tensor(bank.layer(self.upper)[rows])

    def parameters(self):
        return {}


def build_fusion_system(
    pair, channels, variant="full", mode="sigmoid", seed=0, reduction=4, scheme="kaiming"
):
    """Deterministically assemble a FusionSystem for the given seed."""
    check_variant(variant)
    check_gate_mode(mode)
    params = init_gate_params(channels, reduction=reduction, scheme=scheme, seed=seed)
    return FusionSystem(pair=pair, params=params, variant=variant, mode=mode)
