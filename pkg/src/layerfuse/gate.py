"""Two-branch attention gate over token embeddings.

The global branch pools tokens into a sentence summary before a bottleneck
(conv -> norm -> relu -> conv -> norm); the local branch runs the same
bottleneck per token.  Their broadcast sum feeds a sigmoid that yields a
per-element mixing weight in (0, 1).  Two ablation variants rebuild the gate
from two pooled branches or two per-token branches.
"""

import math
from dataclasses import dataclass

from .seeding import STREAM_GATE, rng_stream
from .tensor import (
    BatchNormState,
    Tensor,
    batch_norm,
    broadcast_add,
    conv1x1,
    elementwise_mul,
    mean_pool_tokens,
    parameter,
    relu,
    sigmoid,
)

GATE_MODES = ("sigmoid", "literal")
VARIANTS = ("full", "global", "local")
INIT_SCHEMES = ("kaiming", "zero_gate")


def check_gate_mode(mode):
    if mode not in GATE_MODES:
        raise ValueError(f"gate mode must be one of {GATE_MODES}, got {mode!r}")


def inner_width(channels, reduction):
    """Bottleneck width ceil(channels / reduction); never below 1."""
    return -(-channels // reduction)


@dataclass
class BranchParams:
    """One bottleneck path: conv1 -> bn1 -> relu -> conv2 -> bn2."""

    conv1_kernel: Tensor
    conv1_bias: Tensor
    bn1: BatchNormState
    conv2_kernel: Tensor
    conv2_bias: Tensor
    bn2: BatchNormState

    def set_training(self, training):
        mode = "train" if training else "eval"
        self.bn1.mode = mode
        self.bn2.mode = mode

    def named_tensors(self, prefix):
        yield f"{prefix}.conv1.kernel", self.conv1_kernel
        yield f"{prefix}.conv1.bias", self.conv1_bias
        yield f"{prefix}.bn1.gamma", self.bn1.gamma
        yield f"{prefix}.bn1.beta", self.bn1.beta
        yield f"{prefix}.conv2.kernel", self.conv2_kernel
        yield f"{prefix}.conv2.bias", self.conv2_bias
        yield f"{prefix}.bn2.gamma", self.bn2.gamma
        yield f"{prefix}.bn2.beta", self.bn2.beta


@dataclass
class GateParams:
    """Parameters of both gate branches for one channel width."""

    channels: int
    reduction: int
    global_branch: BranchParams
    local_branch: BranchParams

    def set_training(self, training):
        self.global_branch.set_training(training)
        self.local_branch.set_training(training)

    def parameters(self):
        named = {}
        named.update(self.global_branch.named_tensors("global"))
        named.update(self.local_branch.named_tensors("local"))
        return named

    def validate(self):
        inner = inner_width(self.channels, self.reduction)
        for name, branch in (("global", self.global_branch), ("local", self.local_branch)):
            k1, k2 = branch.conv1_kernel.data, branch.conv2_kernel.data
            if k1.shape != (self.channels, inner) or k2.shape != (inner, self.channels):
                raise ValueError(
                    f"{name} branch kernels {k1.shape}/{k2.shape} do not match "
                    f"channels={self.channels}, reduction={self.reduction}"
                )
            if branch.bn1.channels != inner or branch.bn2.channels != self.channels:
                raise ValueError(f"{name} branch norm widths do not match its kernels")
        return self


def _init_branch(rng, channels, inner, zero_second):
    kernel1 = parameter(rng.normal(0.0, math.sqrt(2.0 / channels), (channels, inner)))
    kernel2_data = rng.normal(0.0, math.sqrt(2.0 / inner), (inner, channels))
    if zero_second:
        kernel2_data = kernel2_data * 0.0
    return BranchParams(
        conv1_kernel=kernel1,
        conv1_bias=parameter([0.0] * inner),
        bn1=BatchNormState(inner),
        conv2_kernel=parameter(kernel2_data),
        conv2_bias=parameter([0.0] * channels),
        bn2=BatchNormState(channels),
    )


def init_gate_params(channels, reduction=4, scheme="kaiming", seed=0):
    """Draw gate parameters for one channel width.

    "kaiming" draws conv kernels from N(0, 2/fan_in) with zero biases;
    "zero_gate" additionally zeroes the second conv of each branch so the
    pre-sigmoid activations are exactly zero and the gate is exactly 0.5.
    """
    if channels < 1 or reduction < 1:
        raise ValueError("channels and reduction must be positive")
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"init scheme must be one of {INIT_SCHEMES}, got {scheme!r}")
    rng = rng_stream(seed, STREAM_GATE)
    inner = inner_width(channels, reduction)
    zero_second = scheme == "zero_gate"
    return GateParams(
        channels=channels,
        reduction=reduction,
        global_branch=_init_branch(rng, channels, inner, zero_second),
        local_branch=_init_branch(rng, channels, inner, zero_second),
    )


def _bottleneck(w, branch, pool):
    h = mean_pool_tokens(w) if pool else w
    h = conv1x1(h, branch.conv1_kernel, branch.conv1_bias)
    h = relu(batch_norm(h, branch.bn1))
    h = conv1x1(h, branch.conv2_kernel, branch.conv2_bias)
    return batch_norm(h, branch.bn2)


def global_branch_forward(w, params):
    """Sentence-level weight map of shape (batch, 1, channels)."""
    return _bottleneck(w, params.global_branch, pool=True)


def local_branch_forward(w, params):
    """Per-token weight map with the same shape as the input."""
    return _bottleneck(w, params.local_branch, pool=False)


def _finish(w, pre, mode):
    check_gate_mode(mode)
    gate = sigmoid(pre)
    if mode == "literal":
        return elementwise_mul(w, gate), gate
    return gate, gate


def gate_forward(w, params, mode="sigmoid"):
    """Gate from the pooled branch plus the per-token branch.

    Returns (output, gate): ``gate`` is the sigmoid map; ``output`` is the
    input scaled by the gate in "literal" mode, or the gate itself in
    "sigmoid" mode.
    """
    pre = broadcast_add(global_branch_forward(w, params), local_branch_forward(w, params))
    return _finish(w, pre, mode)


def gate_global_only(w, params, mode="sigmoid"):
    """Ablation: both branches pool tokens, so the gate is token-constant."""
    pre = broadcast_add(
        _bottleneck(w, params.global_branch, pool=True),
        _bottleneck(w, params.local_branch, pool=True),
    )
    return _finish(w, pre, mode)


def gate_local_only(w, params, mode="sigmoid"):
    """Ablation: both branches keep per-token resolution."""
    pre = broadcast_add(
        _bottleneck(w, params.global_branch, pool=False),
        _bottleneck(w, params.local_branch, pool=False),
    )
    return _finish(w, pre, mode)
