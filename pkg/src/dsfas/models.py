"""The seven networks of the dual-stage pipeline and their checkpoints.

Every network is a short chain of stride-2 blocks:

* encoders (``E_L``, ``E_S``): three conv -> instance-norm -> leaky-relu
  blocks, image ``[3,S,S]`` to latent ``[latent,S/8,S/8]``;
* image decoders (``D_L``, ``D_syn``): three transpose-conv blocks back to
  ``[3,S,S]``, final tanh rescaled to [0, 1];
* map decoder (``D_map``): same mirror, one output channel, sigmoid; its
  three block outputs are exposed as taps for the triplet loss.  Its hidden
  blocks use a bias instead of instance norm: the spatial mean of an
  instance-normalized map does not depend on the input, which would make
  both the pooled taps and the mean-map score nearly constant;
* discriminator (``D``) and auxiliary classifier (``C_aux``): three conv
  blocks and a linear head emitting one logit per sample.
"""

from __future__ import annotations

import contextlib
import io
import json
import os
import struct
import tempfile
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ROLES = (
    "live_encoder",
    "live_decoder",
    "spoof_encoder",
    "synth_decoder",
    "discriminator",
    "map_decoder",
    "aux_classifier",
)
NETWORK_NAMES = {
    "live_encoder": "E_L",
    "live_decoder": "D_L",
    "spoof_encoder": "E_S",
    "synth_decoder": "D_syn",
    "discriminator": "D",
    "map_decoder": "D_map",
    "aux_classifier": "C_aux",
}
ROLE_OF = {v: k for k, v in NETWORK_NAMES.items()}

STAGE_NETWORKS = {
    "stage1": ("E_L", "D_L"),
    "stage2": ("E_L", "D_L", "E_S", "D_syn", "D", "D_map", "C_aux"),
}

DEFAULT_WIDTH = 8
LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"DSFL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "conv_t" or "linear"
    in_channels: int
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    norm: bool = False
    activation: str | None = "leaky_relu"  # leaky_relu | tanh01 | sigmoid | None
    bias: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]

    @property
    def name(self) -> str:
        return NETWORK_NAMES[self.role]


@dataclass(eq=False)
class ParamSet:
    """Named parameters of one network; frozen entries never get gradients."""

    name: str
    params: dict[str, Tensor]
    trainable: dict[str, bool]

    def __post_init__(self):
        if set(self.params) != set(self.trainable):
            raise ValueError("every parameter needs a trainable flag")
        for key, t in self.params.items():
            if t.requires_grad != self.trainable[key]:
                self.params[key] = Tensor._wrap(t.data, self.trainable[key])

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (
            self.name == other.name
            and list(self.params) == list(other.params)
            and self.trainable == other.trainable
            and all(
                self.params[k].shape == other.params[k].shape
                and self.params[k].data.tobytes() == other.params[k].data.tobytes()
                for k in self.params
            )
        )

    @property
    def is_frozen(self) -> bool:
        return not any(self.trainable.values())

    def frozen(self) -> "ParamSet":
        """Same values, every tensor excluded from gradients."""
        return ParamSet(
            self.name,
            {k: t.detach() for k, t in self.params.items()},
            {k: False for k in self.params},
        )

    def replace(self, values: dict[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with some tensors swapped for new values."""
        params = {
            k: Tensor(values[k], requires_grad=self.trainable[k]) if k in values else t
            for k, t in self.params.items()
        }
        return ParamSet(self.name, params, dict(self.trainable))

    def to_bytes(self) -> bytes:
        return b"".join(t.data.astype("<f8").tobytes() for t in self.params.values())


# ---------------------------------------------------------------------------
# architecture


def _check_size(image_size: int, latent_channels: int) -> None:
    if image_size < 16 or image_size & (image_size - 1):
        raise ValueError(f"unsupported image size {image_size}: need a power of two >= 16")
    if latent_channels < 1:
        raise ValueError("latent_channels must be >= 1")


def network_spec(
    role: str, image_size: int, latent_channels: int, width: int = DEFAULT_WIDTH
) -> NetworkSpec:
    if role not in ROLES:
        raise ValueError(f"unknown network role {role!r}")
    _check_size(image_size, latent_channels)
    s, lat, w = image_size, latent_channels, width
    latent_shape = (lat, s // 8, s // 8)

    def enc(c_in, last_out):
        return (
            LayerSpec("conv", c_in, w, norm=True),
            LayerSpec("conv", w, 2 * w, norm=True),
            LayerSpec("conv", 2 * w, last_out, norm=True),
        )

    def dec(c_in, c_out, head, norm=True):
        # without norm the hidden blocks carry a bias instead
        return (
            LayerSpec("conv_t", c_in, 2 * w, norm=norm, bias=not norm),
            LayerSpec("conv_t", 2 * w, w, norm=norm, bias=not norm),
            LayerSpec("conv_t", w, c_out, activation=head, bias=True),
        )

    def critic(c_in):
        feat = 4 * w * (s // 8) ** 2
        return (
            LayerSpec("conv", c_in, w),
            LayerSpec("conv", w, 2 * w, norm=True),
            LayerSpec("conv", 2 * w, 4 * w, norm=True),
            LayerSpec("linear", feat, 1, activation=None, bias=True),
        )

    if role in ("live_encoder", "spoof_encoder"):
        return NetworkSpec(role, enc(3, lat), (3, s, s), latent_shape)
    if role == "live_decoder":
        return NetworkSpec(role, dec(lat, 3, "tanh01"), latent_shape, (3, s, s))
    if role == "synth_decoder":
        return NetworkSpec(role, dec(2 * lat, 3, "tanh01"), (2 * lat, s // 8, s // 8), (3, s, s))
    if role == "map_decoder":
        return NetworkSpec(role, dec(lat, 1, "sigmoid", norm=False), latent_shape, (1, s, s))
    if role == "discriminator":
        return NetworkSpec(role, critic(3), (3, s, s), (1,))
    return NetworkSpec(role, critic(4), (4, s, s), (1,))


def _init_layer(rng: np.random.Generator, layer: LayerSpec) -> dict[str, np.ndarray]:
    k = layer.kernel
    if layer.kind == "conv":
        shape = (layer.out_channels, layer.in_channels, k, k)
        fan_in = layer.in_channels * k * k
    elif layer.kind == "conv_t":
        shape = (layer.in_channels, layer.out_channels, k, k)
        fan_in = layer.in_channels * k * k / layer.stride**2
    else:
        shape = (layer.in_channels, layer.out_channels)
        fan_in = layer.in_channels
    gain = 2.0 / (1.0 + LEAKY_SLOPE**2) if layer.activation == "leaky_relu" else 1.0
    out = {"weight": rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)}
    if layer.bias:
        out["bias"] = np.zeros(layer.out_channels)
    return out


def build_network(
    role: str,
    image_size: int,
    latent_channels: int,
    seed: int,
    width: int = DEFAULT_WIDTH,
) -> tuple[NetworkSpec, ParamSet]:
    """Spec plus freshly initialized parameters, deterministic in ``seed``."""
    spec = network_spec(role, image_size, latent_channels, width)
    rng = np.random.default_rng([seed, ROLES.index(role)])
    params: dict[str, Tensor] = {}
    for i, layer in enumerate(spec.layers):
        for pname, value in _init_layer(rng, layer).items():
            params[f"layer{i}.{pname}"] = Tensor(value, requires_grad=True)
    return spec, ParamSet(spec.name, params, {k: True for k in params})


# ---------------------------------------------------------------------------
# forward


_trace = threading.local()


@contextlib.contextmanager
def trace_forwards():
    """Collect the names of networks run by :func:`forward` in this block."""
    calls: list[str] = []
    stack = getattr(_trace, "stack", None)
    if stack is None:
        stack = _trace.stack = []
    stack.append(calls)
    try:
        yield calls
    finally:
        stack.remove(calls)


def forward(spec: NetworkSpec, params: ParamSet, x: Tensor, return_taps: bool = False):
    """Run one network on a batch ``x[N, *spec.input_shape]``.

    With ``return_taps`` the outputs of the last three blocks are returned as
    well, lowest resolution first: ``(out, [tap1, tap2, tap3])``.
    """
    if x.ndim != len(spec.input_shape) + 1 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"{spec.name} expects input [N,{spec.input_shape}], got {x.shape}")
    for calls in getattr(_trace, "stack", ()):
        calls.append(spec.name)

    h = x
    outputs = []
    for i, layer in enumerate(spec.layers):
        w = params[f"layer{i}.weight"]
        b = params[f"layer{i}.bias"] if layer.bias else None
        if layer.kind == "conv":
            h = T.conv2d(h, w, b, stride=layer.stride, padding=layer.padding)
        elif layer.kind == "conv_t":
            h = T.conv2d_transpose(h, w, b, stride=layer.stride, padding=layer.padding)
        else:
            h = T.linear(T.reshape(h, (h.shape[0], -1)), w, b)
        if layer.norm:
            h = T.instance_norm(h)
        if layer.activation == "leaky_relu":
            h = T.leaky_relu(h, LEAKY_SLOPE)
        elif layer.activation == "tanh01":
            h = (T.tanh(h) + 1.0) * 0.5
        elif layer.activation == "sigmoid":
            h = T.sigmoid(h)
        outputs.append(h)
    if return_taps:
        return h, outputs[-3:]
    return h


def fuse_latents(f_live: Tensor, f_spoof: Tensor) -> Tensor:
    """Channel-wise concatenation, live channels first.

    Works on single latents ``[C,h,w]`` and batches ``[N,C,h,w]``.
    """
    if f_live.ndim != f_spoof.ndim or f_live.ndim not in (3, 4):
        raise ShapeError(f"cannot fuse latents of shapes {f_live.shape} and {f_spoof.shape}")
    if f_live.shape[-2:] != f_spoof.shape[-2:] or f_live.shape[:-3] != f_spoof.shape[:-3]:
        raise ShapeError(f"spatial mismatch: {f_live.shape} vs {f_spoof.shape}")
    return T.concat([f_live, f_spoof], axis=f_live.ndim - 3)


def split_latents(fused: Tensor, live_channels: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`fuse_latents`."""
    axis = fused.ndim - 3
    c = fused.shape[axis]
    return (
        T.take(fused, range(live_channels), axis=axis),
        T.take(fused, range(live_channels, c), axis=axis),
    )


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    """Unreadable, truncated or inconsistent checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class StageMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    stage: str
    networks: dict[str, ParamSet]
    arch: dict  # image_size, latent_channels, width
    config: dict = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_NETWORKS:
            raise CheckpointError(f"unknown stage {self.stage!r}")
        expected = set(STAGE_NETWORKS[self.stage])
        if set(self.networks) != expected:
            raise CheckpointError(
                f"{self.stage} checkpoint needs networks {sorted(expected)}, has {sorted(self.networks)}"
            )

    def spec(self, name: str) -> NetworkSpec:
        return network_spec(
            ROLE_OF[name],
            self.arch["image_size"],
            self.arch["latent_channels"],
            self.arch.get("width", DEFAULT_WIDTH),
        )

    def run(self, name: str, x: Tensor, return_taps: bool = False):
        return forward(self.spec(name), self.networks[name], x, return_taps)

    def require_stage(self, stage: str) -> "Checkpoint":
        if self.stage != stage:
            raise StageMismatchError(f"expected a {stage} checkpoint, got {self.stage}")
        return self


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialized form: magic, u32 version, u64 manifest length, JSON
    manifest, little-endian f64 payload, u32 CRC32 of manifest+payload."""
    networks = []
    payload = io.BytesIO()
    for name in STAGE_NETWORKS[ckpt.stage]:
        ps = ckpt.networks[name]
        entries = []
        for pname, t in ps.params.items():
            entries.append({"name": pname, "shape": list(t.shape), "trainable": ps.trainable[pname]})
            payload.write(t.data.astype("<f8").tobytes())
        networks.append({"name": name, "params": entries})
    body = payload.getvalue()
    manifest = json.dumps(
        {
            "stage": ckpt.stage,
            "seed": ckpt.seed,
            "epoch": ckpt.epoch,
            "arch": ckpt.arch,
            "config": ckpt.config,
            "networks": networks,
            "payload_bytes": len(body),
        },
        sort_keys=True,
    ).encode()
    crc = zlib.crc32(manifest + body)
    return b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest)),
            manifest,
            body,
            struct.pack("<I", crc),
        ]
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    _atomic_write(Path(path), checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, expected_stage: str | None = None) -> Checkpoint:
    head = len(CHECKPOINT_MAGIC) + 12
    if len(raw) < head or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    version, mlen = struct.unpack("<IQ", raw[4:head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < head + mlen + 4:
        raise CheckpointError("checkpoint truncated inside manifest")
    manifest_raw = raw[head : head + mlen]
    try:
        manifest = json.loads(manifest_raw)
        n_payload = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    end = head + mlen + n_payload
    if len(raw) != end + 4:
        raise CheckpointError("checkpoint truncated or has trailing bytes")
    body = raw[head + mlen : end]
    (crc,) = struct.unpack("<I", raw[end:])
    if zlib.crc32(manifest_raw + body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")

    networks = {}
    offset = 0
    try:
        for net in manifest["networks"]:
            params, flags = {}, {}
            for entry in net["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
                offset += 8 * count
                params[entry["name"]] = Tensor(arr.astype(np.float64), requires_grad=entry["trainable"])
                flags[entry["name"]] = bool(entry["trainable"])
            networks[net["name"]] = ParamSet(net["name"], params, flags)
        ckpt = Checkpoint(
            stage=manifest["stage"],
            networks=networks,
            arch=manifest["arch"],
            config=manifest["config"],
            seed=manifest["seed"],
            epoch=manifest["epoch"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if offset != len(body):
        raise CheckpointError("payload size does not match manifest")
    if expected_stage is not None:
        ckpt.require_stage(expected_stage)
    return ckpt


def load_checkpoint(path, expected_stage: str | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected_stage)
