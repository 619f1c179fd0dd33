"""Encoders, classifier heads, center bank, and checkpoint I/O.

The encoder is an MLP trunk, optionally followed by a dual-branch stage: a
global branch on the whole trunk output and a local branch that splits the
trunk output into two equal halves, each with its own layer. At inference
the branch outputs are concatenated as ``[global | part1 | part2]``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ParseError

ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"layer expects width {self.d_in}, got {x.shape[-1]}")
        h = x @ self.weight + self.bias
        return h.relu() if self.activation == "relu" else h


def he_normal(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))


def make_layer(rng, d_in, d_out, activation="relu") -> Layer:
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    return Layer(Tensor(he_normal(rng, d_in, d_out), requires_grad=True),
                 Tensor(np.zeros(d_out), requires_grad=True), activation)


@dataclass
class EncoderParams:
    layers: list[Layer]
    global_layers: list[Layer] | None = None
    local_layers: list[Layer] | None = None  # exactly two when dual-branch

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("encoder needs at least one trunk layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise DimensionError(f"layer widths do not chain: {prev.d_out} -> {nxt.d_in}")
        if self.is_dual:
            trunk = self.layers[-1].d_out
            if trunk % 2:
                raise ConfigError(f"dual-branch trunk width must be even, got {trunk}")
            if len(self.local_layers) != 2:
                raise ConfigError("local branch needs exactly two parts")
            if self.global_layers[0].d_in != trunk:
                raise DimensionError("global branch does not match trunk width")
            for part in self.local_layers:
                if part.d_in != trunk // 2:
                    raise DimensionError("local part does not match half the trunk width")

    @property
    def is_dual(self) -> bool:
        return self.global_layers is not None

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_feat(self) -> int:
        if self.is_dual:
            return self.global_layers[-1].d_out + sum(p.d_out for p in self.local_layers)
        return self.layers[-1].d_out

    def all_layers(self) -> list[Layer]:
        out = list(self.layers)
        if self.is_dual:
            out += self.global_layers + self.local_layers
        return out

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.all_layers() for t in (layer.weight, layer.bias)]

    def __call__(self, x):
        return encode_dual_branch(self, x) if self.is_dual else encode_mlp(self, x)


@dataclass
class HeadParams:
    weight: Tensor  # [d_feat x K]
    bias: Tensor  # [K]

    def __post_init__(self):
        if self.weight.shape[1] < 2:
            raise ConfigError("a classifier head needs at least two classes")

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class CenterBank:
    centers: np.ndarray  # [n_identities x d_feat]

    @classmethod
    def zeros(cls, n_identities, d_feat):
        return cls(np.zeros((n_identities, d_feat)))

    def copy(self):
        return CenterBank(self.centers.copy())


def build_mlp(rng, widths, activation="relu") -> EncoderParams:
    """``widths = [d_in, h1, ..., d_feat]``; every layer uses ``activation``."""
    if len(widths) < 2:
        raise ConfigError("widths needs at least an input and an output size")
    return EncoderParams([make_layer(rng, a, b, activation) for a, b in zip(widths, widths[1:])])


def build_dual_branch(rng, trunk_widths, d_global, d_local=None, activation="relu") -> EncoderParams:
    """Dual-branch encoder; ``d_local`` is the total local width (default ``d_global``)."""
    d_local = d_global if d_local is None else d_local
    trunk = trunk_widths[-1]
    if trunk % 2:
        raise ConfigError(f"dual-branch trunk width must be even, got {trunk}")
    if d_local % 2:
        raise ConfigError(f"local branch width must be even, got {d_local}")
    enc = build_mlp(rng, trunk_widths, activation)
    enc.global_layers = [make_layer(rng, trunk, d_global, activation)]
    enc.local_layers = [make_layer(rng, trunk // 2, d_local // 2, activation) for _ in range(2)]
    enc.__post_init__()
    return enc


def _global_pool(t: Tensor) -> Tensor:
    # Spatial average pooling has nothing to average over for vector features.
    return t


def _run(layers, h):
    for layer in layers:
        h = layer(h)
    return h


def encode_mlp(params: EncoderParams, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"encoder expects [batch x {params.d_in}], got {x.shape}")
    return _run(params.layers, x)


def encode_dual_branch(params: EncoderParams, x) -> Tensor:
    if not params.is_dual:
        raise ConfigError("encoder has no dual-branch stage")
    trunk = encode_mlp(params, x)
    half = trunk.shape[1] // 2
    g = _global_pool(_run(params.global_layers, trunk))
    p1 = _global_pool(params.local_layers[0](trunk[:, :half]))
    p2 = _global_pool(params.local_layers[1](trunk[:, half:]))
    return ad.concat([g, p1, p2], axis=1)


def make_head(rng, d_feat, n_classes) -> HeadParams:
    return HeadParams(Tensor(he_normal(rng, d_feat, n_classes), requires_grad=True),
                      Tensor(np.zeros(n_classes), requires_grad=True))


def head_logits(head: HeadParams, feat) -> Tensor:
    feat = ad.as_tensor(feat)
    if feat.data.ndim != 2 or feat.shape[1] != head.weight.shape[0]:
        raise DimensionError(f"head expects [batch x {head.weight.shape[0]}], got {feat.shape}")
    return feat @ head.weight + head.bias


def reinit_head(head: HeadParams, seed) -> HeadParams:
    """Fresh He-normal weights and zero bias of the same shape; deterministic in ``seed``."""
    d, k = head.weight.shape
    return make_head(np.random.default_rng(seed), d, k)


@dataclass
class ModelBundle:
    encoder: EncoderParams
    id_head: HeadParams
    nuisance_heads: list[HeadParams]
    centers: CenterBank
    arch: dict = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        groups = [("trunk", self.encoder.layers)]
        if self.encoder.is_dual:
            groups += [("global", self.encoder.global_layers), ("local", self.encoder.local_layers)]
        for gname, layers in groups:
            for i, layer in enumerate(layers):
                out += [(f"encoder.{gname}.{i}.weight", layer.weight.data),
                        (f"encoder.{gname}.{i}.bias", layer.bias.data)]
        out += [("id_head.weight", self.id_head.weight.data), ("id_head.bias", self.id_head.bias.data)]
        for t, h in enumerate(self.nuisance_heads):
            out += [(f"nuisance_head.{t}.weight", h.weight.data), (f"nuisance_head.{t}.bias", h.bias.data)]
        out.append(("centers", self.centers.centers))
        return out

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def clone(self) -> "ModelBundle":
        return _bundle_from_arrays(self.arch, dict(self.named_parameters()))

    def checksum(self, part: str = "all") -> str:
        """SHA-256 over the raw bytes of the selected parameter group."""
        prefix = {"all": "", "encoder": "encoder.", "id_head": "id_head.",
                  "nuisance": "nuisance_head.", "centers": "centers"}[part]
        h = hashlib.sha256()
        for name, arr in self.named_parameters():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def build_bundle(arch: dict, seed) -> ModelBundle:
    """Construct a model from an architecture descriptor.

    Keys: ``d_in``, ``hidden`` (list), ``d_feat``, ``n_identities``,
    ``nuisance_classes`` (list), optional ``dual_branch`` with ``d_local``.
    For dual-branch models ``d_feat`` is the global width and the trunk is
    ``[d_in, *hidden]``.
    """
    arch = dict(arch)
    rng = np.random.default_rng(seed)
    hidden = list(arch.get("hidden", []))
    if arch.get("dual_branch"):
        if not hidden:
            raise ConfigError("dual-branch encoder needs at least one hidden trunk layer")
        enc = build_dual_branch(rng, [arch["d_in"], *hidden], arch["d_feat"], arch.get("d_local"))
    else:
        enc = build_mlp(rng, [arch["d_in"], *hidden, arch["d_feat"]])
    d_feat = enc.d_feat
    id_head = make_head(rng, d_feat, arch["n_identities"])
    nheads = [make_head(rng, d_feat, k) for k in arch["nuisance_classes"]]
    return ModelBundle(enc, id_head, nheads, CenterBank.zeros(arch["n_identities"], d_feat), arch)


def closed_form_param_count(arch: dict) -> int:
    hidden = list(arch.get("hidden", []))
    if arch.get("dual_branch"):
        widths = [arch["d_in"], *hidden]
        d_g = arch["d_feat"]
        d_l = arch.get("d_local") or d_g
        trunk = widths[-1]
        enc = sum(a * b + b for a, b in zip(widths, widths[1:]))
        enc += trunk * d_g + d_g + 2 * ((trunk // 2) * (d_l // 2) + d_l // 2)
        d_feat = d_g + d_l
    else:
        widths = [arch["d_in"], *hidden, arch["d_feat"]]
        enc = sum(a * b + b for a, b in zip(widths, widths[1:]))
        d_feat = arch["d_feat"]
    heads = sum(d_feat * k + k for k in [arch["n_identities"], *arch["nuisance_classes"]])
    return enc + heads + arch["n_identities"] * d_feat


def _bundle_from_arrays(arch: dict, arrays: dict[str, np.ndarray]) -> ModelBundle:
    bundle = build_bundle(arch, 0)
    for name, arr in bundle.named_parameters():
        if name not in arrays:
            raise ParseError(f"checkpoint is missing parameter {name!r}")
        src = np.asarray(arrays[name], dtype=np.float64)
        if src.shape != arr.shape:
            raise DimensionError(f"{name}: checkpoint shape {src.shape} != architecture {arr.shape}")
        arr[...] = src
    return bundle


# checkpoint I/O -------------------------------------------------------------

MAGIC = b"ADINCKPT 1\n"


def save_checkpoint(bundle: ModelBundle, path, fmt: str = "binary"):
    """Write ``bundle``; binary is a magic line, a JSON header line, then raw little-endian f8."""
    path = Path(path)
    params = bundle.named_parameters()
    if fmt == "json":
        doc = {"arch": bundle.arch,
               "params": [{"name": n, "shape": list(a.shape), "values": a.reshape(-1).tolist()}
                          for n, a in params]}
        path.write_text(json.dumps(doc))
        return path
    if fmt != "binary":
        raise ConfigError(f"unknown checkpoint format {fmt!r}")
    header = {"arch": bundle.arch, "params": [{"name": n, "shape": list(a.shape)} for n, a in params]}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in params:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelBundle:
    raw = Path(path).read_bytes()
    if raw.startswith(MAGIC):
        nl = raw.index(b"\n", len(MAGIC))
        try:
            header = json.loads(raw[len(MAGIC):nl])
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad checkpoint header: {exc}", offset=len(MAGIC)) from None
        offset = nl + 1
        arrays = {}
        for entry in header["params"]:
            n = int(np.prod(entry["shape"]))
            end = offset + 8 * n
            if end > len(raw):
                raise ParseError(f"checkpoint truncated inside {entry['name']!r}", offset=offset)
            arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(entry["shape"])
            offset = end
        return _bundle_from_arrays(header["arch"], arrays)
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"not a checkpoint file: {exc}") from None
    arrays = {p["name"]: np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]}
    return _bundle_from_arrays(doc["arch"], arrays)
