"""Persistence: layer-bank binary files and model-parameter JSON files.

Bank layout: magic ``DLFB``, then version, layer count and (B, T, E) as
little-endian u32, the payload as little-endian float32 in row-major
[layer][sentence][token][channel] order, and finally a UTF-8 JSON manifest
prefixed by its byte length as a little-endian u64.  Tensors are widened to
float64 on load.  Writers go through a temp file plus atomic rename.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DLFB"
BANK_VERSION = 1
PARAMS_FORMAT = "layerfuse-params"
PARAMS_VERSION = 1

_HEADER = struct.Struct("<4sIIIII")


class DataError(ValueError):
    """Inconsistent data: bad labels, splits, alignments, or layer indices."""


class BankFormatError(ValueError):
    """A bank file does not follow the documented layout."""


class BankTruncationError(BankFormatError):
    """Declared sizes point past the end of the file."""


class ParamsFormatError(ValueError):
    """A parameter file does not follow the documented schema."""


@dataclass(eq=False)
class LayerBank:
    """Per-layer token embeddings plus a per-sentence manifest.

    Layer indices are 1-based and contiguous; every layer shares one
    (sentences, tokens, channels) shape.
    """

    layers: list
    labels: np.ndarray
    languages: list = field(default_factory=list)
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise DataError("a bank needs at least one layer")
        self.layers = [np.asarray(layer, dtype=np.float64) for layer in self.layers]
        shape = self.layers[0].shape
        if len(shape) != 3 or min(shape) < 1:
            raise DataError(f"bank layers must be (sentences, tokens, channels), got {shape}")
        for i, layer in enumerate(self.layers):
            if layer.shape != shape:
                raise DataError(
                    f"layer {i + 1} has shape {layer.shape}, expected {shape}"
                )
        self.labels = np.asarray(self.labels, dtype=np.int64)
        sentences = shape[0]
        for name, seq in (("labels", self.labels), ("languages", self.languages), ("splits", self.splits)):
            if len(seq) != sentences:
                raise DataError(
                    f"manifest field {name} has {len(seq)} entries for {sentences} sentences"
                )
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative integers")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def shape(self):
        return self.layers[0].shape

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1

    def layer(self, index):
        if not 1 <= index <= self.n_layers:
            raise DataError(f"bank has layers 1..{self.n_layers}, requested {index}")
        return self.layers[index - 1]

    def split_indices(self, split):
        return np.nonzero(np.asarray(self.splits) == np.asarray(split))[0]

    def language_tag(self):
        return self.languages[0]


def _atomic_write(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bank(bank, path):
    """Serialize a bank; byte-deterministic for a given bank.

    The payload is stored as float32, so values are quantized to float32
    precision on disk.
    """
    n_layers = bank.n_layers
    sentences, tokens, channels = bank.shape
    header = _HEADER.pack(MAGIC, BANK_VERSION, n_layers, sentences, tokens, channels)
    payload = np.stack(bank.layers).astype("<f4").tobytes()
    manifest = json.dumps(
        {
            "labels": [int(x) for x in bank.labels],
            "language": [str(x) for x in bank.languages],
            "split": [str(x) for x in bank.splits],
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    _atomic_write(path, header + payload + struct.pack("<Q", len(manifest)) + manifest)


def read_bank(path):
    """Load and validate a bank file."""
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < _HEADER.size:
        raise BankFormatError(f"{path}: file too short for a bank header")
    magic, version, n_layers, sentences, tokens, channels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BankFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != BANK_VERSION:
        raise BankFormatError(f"{path}: unsupported bank version {version}")
    if min(n_layers, sentences, tokens, channels) < 1:
        raise BankFormatError(
            f"{path}: header declares empty dimensions "
            f"({n_layers} layers, shape {(sentences, tokens, channels)})"
        )
    expected = n_layers * sentences * tokens * channels
    payload_end = _HEADER.size + 4 * expected
    if len(raw) < payload_end + 8:
        held = max(0, len(raw) - _HEADER.size - 8) // 4
        raise BankTruncationError(
            f"{path}: header expects {expected} float32 values "
            f"({n_layers} layers of shape {(sentences, tokens, channels)}) "
            f"but the payload holds at most {held}"
        )
    values = np.frombuffer(raw, dtype="<f4", count=expected, offset=_HEADER.size)
    (manifest_len,) = struct.unpack_from("<Q", raw, payload_end)
    manifest_start = payload_end + 8
    if len(raw) < manifest_start + manifest_len:
        raise BankTruncationError(
            f"{path}: manifest declares {manifest_len} bytes but only "
            f"{len(raw) - manifest_start} remain"
        )
    try:
        manifest = json.loads(raw[manifest_start : manifest_start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise BankFormatError(f"{path}: manifest is not valid JSON ({err})") from err
    for key in ("labels", "language", "split"):
        if key not in manifest:
            raise BankFormatError(f"{path}: manifest missing field {key!r}")
    arr = values.astype(np.float64).reshape(n_layers, sentences, tokens, channels)
    finite = np.isfinite(arr)
    if not finite.all():
        layer, b, t, e = np.argwhere(~finite)[0]
        raise DataError(
            f"{path}: non-finite value at layer {layer + 1}, sentence {b}, "
            f"token {t}, channel {e}"
        )
    try:
        return LayerBank(
            layers=list(arr),
            labels=np.asarray(manifest["labels"], dtype=np.int64),
            languages=[str(x) for x in manifest["language"]],
            splits=[str(x) for x in manifest["split"]],
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, DataError):
            raise
        raise BankFormatError(f"{path}: malformed manifest ({err})") from err


def _branch_doc(branch):
    return {
        "conv1": {"kernel": branch.conv1_kernel.data.tolist(), "bias": branch.conv1_bias.data.tolist()},
        "bn1": _bn_doc(branch.bn1),
        "conv2": {"kernel": branch.conv2_kernel.data.tolist(), "bias": branch.conv2_bias.data.tolist()},
        "bn2": _bn_doc(branch.bn2),
    }


def _bn_doc(state):
    return {
        "gamma": state.gamma.data.tolist(),
        "beta": state.beta.data.tolist(),
        "running_mean": state.running_mean.tolist(),
        "running_var": state.running_var.tolist(),
        "eps": state.eps,
        "momentum": state.momentum,
    }


def save_params(system, head, path):
    """Write a system plus classifier head as deterministic JSON.

    Floats are rendered with full shortest-roundtrip precision, so reloading
    reproduces every value bit-exactly.
    """
    from .fusion import BaselineSystem

    if isinstance(system, BaselineSystem):
        system_doc = {"kind": "baseline", "upper": system.upper}
        gate_doc = None
    else:
        system_doc = {
            "kind": "fusion",
            "lower": system.pair.lower,
            "upper": system.pair.upper,
            "variant": system.variant,
            "gate_mode": system.mode,
            "channels": system.params.channels,
            "reduction": system.params.reduction,
        }
        gate_doc = {
            "global": _branch_doc(system.params.global_branch),
            "local": _branch_doc(system.params.local_branch),
        }
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "system": system_doc,
        "gate": gate_doc,
        "head": {"weight": head.weight.data.tolist(), "bias": head.bias.data.tolist()},
    }
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=1).encode("utf-8"))


def _require(doc, *path):
    node = doc
    walked = []
    for key in path:
        walked.append(key)
        if not isinstance(node, dict) or key not in node or node[key] is None:
            raise ParamsFormatError(f"parameter file missing block {'.'.join(walked)}")
        node = node[key]
    return node


def _load_bn(doc, *path):
    from .tensor import BatchNormState

    block = _require(doc, *path)
    for key in ("gamma", "beta", "running_mean", "running_var", "eps", "momentum"):
        if key not in block:
            raise ParamsFormatError(f"parameter file missing block {'.'.join(path)}.{key}")
    return BatchNormState.from_arrays(
        gamma=block["gamma"],
        beta=block["beta"],
        running_mean=block["running_mean"],
        running_var=block["running_var"],
        eps=block["eps"],
        momentum=block["momentum"],
    )


def _load_branch(doc, name):
    from .gate import BranchParams
    from .tensor import parameter

    return BranchParams(
        conv1_kernel=parameter(_require(doc, "gate", name, "conv1", "kernel")),
        conv1_bias=parameter(_require(doc, "gate", name, "conv1", "bias")),
        bn1=_load_bn(doc, "gate", name, "bn1"),
        conv2_kernel=parameter(_require(doc, "gate", name, "conv2", "kernel")),
        conv2_bias=parameter(_require(doc, "gate", name, "conv2", "bias")),
        bn2=_load_bn(doc, "gate", name, "bn2"),
    )


def load_params(path):
    """Load (system, head) from a parameter file, validating the schema."""
    from .fusion import BaselineSystem, FusionSystem, LayerPair
    from .gate import GateParams
    from .tensor import parameter
    from .training import ClassifierHead

    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as err:
            raise ParamsFormatError(f"{path}: not valid JSON ({err})") from err
    if doc.get("format") != PARAMS_FORMAT:
        raise ParamsFormatError(f"{path}: unknown format {doc.get('format')!r}")
    if doc.get("version") != PARAMS_VERSION:
        raise ParamsFormatError(f"{path}: unsupported schema version {doc.get('version')!r}")
    system_doc = _require(doc, "system")
    head_doc = _require(doc, "head")
    head = ClassifierHead(
        weight=parameter(_require(doc, "head", "weight")),
        bias=parameter(_require(doc, "head", "bias")),
    )
    kind = system_doc.get("kind")
    if kind == "baseline":
        return BaselineSystem(upper=int(system_doc["upper"])), head
    if kind != "fusion":
        raise ParamsFormatError(f"{path}: unknown system kind {kind!r}")
    params = GateParams(
        channels=int(system_doc["channels"]),
        reduction=int(system_doc["reduction"]),
        global_branch=_load_branch(doc, "global"),
        local_branch=_load_branch(doc, "local"),
    )
    try:
        params.validate()
    except ValueError as err:
        raise ParamsFormatError(f"{path}: {err}") from err
    system = FusionSystem(
        pair=LayerPair(int(system_doc["lower"]), int(system_doc["upper"])),
        params=params,
        variant=system_doc.get("variant", "full"),
        mode=system_doc.get("gate_mode", "sigmoid"),
    )
    return system, head
