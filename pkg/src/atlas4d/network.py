"""Deep fully-connected regression network with exact analytic gradients.

The model maps an encoded coordinate feature vector to one scalar intensity.
Layers 1..n-1 are Linear -> BatchNorm -> ReLU; the final layer is a plain
affine map to a single output. After the activations of the configured skip
layers, the raw input features are concatenated back onto the hidden state,
so the following layer sees hidden_width + input_dim inputs.

Everything is float64. Train-mode forward normalizes with batch statistics
and updates running statistics; eval-mode forward uses running statistics
and is a pure function of (parameters, input).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import FourierEncoder


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable: bad magic, version, checksum, or size."""


@dataclass
class MlpConfig:
    input_dim: int
    hidden_width: int = 256
    n_layers: int = 18
    skip_layers: tuple[int, ...] = (6, 12)
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.skip_layers = tuple(sorted(int(s) for s in self.skip_layers))
        if self.input_dim < 1 or self.hidden_width < 1:
            raise ValueError("input_dim and hidden_width must be >= 1")
        if self.n_layers < 2:
            raise ValueError("need at least one hidden layer plus the output layer")
        for s in self.skip_layers:
            if not 1 <= s < self.n_layers:
                raise ValueError(f"skip layer {s} outside [1, {self.n_layers})")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")
        if self.bn_epsilon <= 0.0:
            raise ValueError("bn_epsilon must be positive")

    def in_width(self, layer: int) -> int:
        """Input width of 1-based layer index, accounting for skips."""
        if layer == 1:
            return self.input_dim
        extra = self.input_dim if (layer - 1) in self.skip_layers else 0
        return self.hidden_width + extra

    def out_width(self, layer: int) -> int:
        return 1 if layer == self.n_layers else self.hidden_width


@dataclass
class ForwardCache:
    """Intermediate state of one train-mode forward pass, for backward()."""

    model_id: int
    version: int
    x: np.ndarray
    inputs: list  # input to each layer, including the concatenated skips
    xhat: list
    inv_std: list
    relu_mask: list


class InrModel:
    """One coordinate-regression network plus its feature encoder."""

    def __init__(self, cfg: MlpConfig, weights, biases, bn_gamma, bn_beta,
                 bn_mean, bn_var, encoder: FourierEncoder | None = None):
        self.cfg = cfg
        self.weights = weights
        self.biases = biases
        self.bn_gamma = bn_gamma
        self.bn_beta = bn_beta
        self.bn_mean = bn_mean
        self.bn_var = bn_var
        self.encoder = encoder
        self.mode = "train"
        self.meta: dict = {}
        self.optimizer_state: dict | None = None
        self._version = 0

    # -- mode handling -----------------------------------------------------

    def train(self) -> "InrModel":
        self.mode = "train"
        return self

    def eval(self) -> "InrModel":
        self.mode = "eval"
        return self

    def mark_updated(self) -> None:
        """Invalidate outstanding forward caches after a parameter update."""
        self._version += 1

    # -- parameter access --------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Live references to trainable parameters, keyed by stable names."""
        out = {}
        for j in range(1, self.cfg.n_layers + 1):
            out[f"w{j}"] = self.weights[j - 1]
            out[f"b{j}"] = self.biases[j - 1]
        for j in range(1, self.cfg.n_layers):
            out[f"bn_g{j}"] = self.bn_gamma[j - 1]
            out[f"bn_b{j}"] = self.bn_beta[j - 1]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus batch-norm running statistics."""
        out = self.params()
        for j in range(1, self.cfg.n_layers):
            out[f"bn_rm{j}"] = self.bn_mean[j - 1]
            out[f"bn_rv{j}"] = self.bn_var[j - 1]
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        state = self.state_dict()
        if set(snap) != set(state):
            raise ValueError("snapshot keys do not match model")
        for k, v in state.items():
            np.copyto(v, snap[k])
        self.mark_updated()

    def num_params(self) -> int:
        return sum(int(p.size) for p in self.params().values())

    # -- forward / backward ------------------------------------------------

    def forward(self, features: np.ndarray):
        """Run the network on a batch of feature rows.

        Returns (intensities, cache); the cache is None in eval mode. Train
        mode needs a batch of at least 2 rows for the batch statistics.
        """
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(
                f"feature width mismatch: got {x.shape}, need (*, {self.cfg.input_dim})"
            )
        train = self.mode == "train"
        if train and x.shape[0] < 2:
            raise ValueError("train-mode forward needs a batch of at least 2")

        cfg = self.cfg
        eps = cfg.bn_epsilon
        mom = cfg.bn_momentum
        batch = x.shape[0]
        a = x
        inputs, xhats, inv_stds, masks = [], [], [], []

        for j in range(1, cfg.n_layers):
            inputs.append(a)
            z = a @ self.weights[j - 1].T
            z += self.biases[j - 1]
            if train:
                mu = z.mean(axis=0)
                xhat = z
                xhat -= mu
                var = np.einsum("ij,ij->j", xhat, xhat) / batch
                inv = 1.0 / np.sqrt(var + eps)
                xhat *= inv
                self.bn_mean[j - 1] *= 1.0 - mom
                self.bn_mean[j - 1] += mom * mu
                self.bn_var[j - 1] *= 1.0 - mom
                self.bn_var[j - 1] += mom * var
            else:
                inv = 1.0 / np.sqrt(self.bn_var[j - 1] + eps)
                xhat = z
                xhat -= self.bn_mean[j - 1]
                xhat *= inv
            h = xhat * self.bn_gamma[j - 1]
            h += self.bn_beta[j - 1]
            mask = h > 0.0
            a = np.maximum(h, 0.0)
            if j in cfg.skip_layers:
                a = np.concatenate([a, x], axis=1)
            if train:
                xhats.append(xhat)
                inv_stds.append(inv)
                masks.append(mask)

        inputs.append(a)
        y = a @ self.weights[-1].T
        y += self.biases[-1]
        y = y.ravel()

        if not train:
            return y, None
        cache = ForwardCache(
            model_id=id(self), version=self._version, x=x,
            inputs=inputs, xhat=xhats, inv_std=inv_stds, relu_mask=masks,
        )
        return y, cache

    def backward(self, cache: ForwardCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dLoss/dOutput for the batch.

        Uses the exact batch-statistics batch-norm backward pass; the cache
        must come from the most recent parameter version of this model.
        """
        if self.mode != "train":
            raise ValueError("backward on an eval-mode model is not defined")
        if cache is None or cache.model_id != id(self):
            raise ValueError("mismatched cache: not from this model")
        if cache.version != self._version:
            raise ValueError("stale cache: parameters changed since forward")

        cfg = self.cfg
        n = cfg.n_layers
        d_out = np.asarray(d_out, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}

        dz = d_out[:, None]
        grads[f"w{n}"] = dz.T @ cache.inputs[-1]
        grads[f"b{n}"] = dz.sum(axis=0)
        da = dz @ self.weights[-1]

        batch = cache.x.shape[0]
        for j in range(n - 1, 0, -1):
            if j in cfg.skip_layers:
                da = da[:, : cfg.hidden_width]  # the raw-input slots end here
            dh = da * cache.relu_mask[j - 1]
            xhat = cache.xhat[j - 1]
            grads[f"bn_g{j}"] = np.einsum("ij,ij->j", dh, xhat)
            grads[f"bn_b{j}"] = dh.sum(axis=0)
            dxhat = dh
            dxhat *= self.bn_gamma[j - 1]
            dz = xhat * (np.einsum("ij,ij->j", dxhat, xhat) / -batch)
            dz -= dxhat.sum(axis=0) / batch
            dz += dxhat
            dz *= cache.inv_std[j - 1]
            grads[f"w{j}"] = dz.T @ cache.inputs[j - 1]
            grads[f"b{j}"] = dz.sum(axis=0)
            da = dz @ self.weights[j - 1]
        return grads

    def predict(self, points: np.ndarray) -> np.ndarray:
        """Eval-mode intensities for normalized (x, y, z, t) points."""
        if self.encoder is None:
            raise ValueError("model has no encoder attached")
        if self.mode != "eval":
            raise ValueError("predict requires eval mode")
        y, _ = self.forward(self.encoder.encode(np.atleast_2d(points)))
        return y


def init_mlp(cfg: MlpConfig, seed: int = 0, encoder: FourierEncoder | None = None) -> InrModel:
    """Fresh model: fan-in-scaled uniform weights, identity batch norm."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for j in range(1, cfg.n_layers + 1):
        fan_in = cfg.in_width(j)
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(cfg.out_width(j), fan_in)))
        biases.append(rng.uniform(-bound, bound, size=cfg.out_width(j)))
    w = cfg.hidden_width
    n_bn = cfg.n_layers - 1
    model = InrModel(
        cfg,
        weights,
        biases,
        bn_gamma=[np.ones(w) for _ in range(n_bn)],
        bn_beta=[np.zeros(w) for _ in range(n_bn)],
        bn_mean=[np.zeros(w) for _ in range(n_bn)],
        bn_var=[np.ones(w) for _ in range(n_bn)],
        encoder=encoder,
    )
    return model


# ---------------------------------------------------------------------------
# Checkpoints: tagged little-endian container, CRC-checked.
#
#   magic "A4DCKPT\0" | u32 version | u32 meta_len | meta json (utf-8)
#   | u32 n_arrays | per array: u16 name_len, name, u8 dtype_code,
#     u8 ndim, i64*ndim shape, u64 nbytes, raw bytes | u32 crc32
#
# The CRC covers everything between the magic and the checksum itself.

_CKPT_MAGIC = b"A4DCKPT\x00"
_CKPT_VERSION = 1
_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<u1"}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _pack_container(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    body += struct.pack("<I", _CKPT_VERSION)
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(meta_blob))
    body += meta_blob
    body += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _DTYPE_TO_CODE.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise ValueError(f"unsupported array dtype {arr.dtype} for {name}")
        nm = name.encode("utf-8")
        body += struct.pack("<H", len(nm))
        body += nm
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b""
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        body += struct.pack("<Q", len(raw))
        body += raw
    crc = zlib.crc32(bytes(body))
    return _CKPT_MAGIC + bytes(body) + struct.pack("<I", crc)


def _unpack_container(blob: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(_CKPT_MAGIC) + 8 or blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"corrupt checkpoint: bad magic ({path})")
    body, crc_stored = blob[len(_CKPT_MAGIC):-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_stored)[0]:
        raise CheckpointError(f"corrupt checkpoint: checksum failure ({path})")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CheckpointError(f"corrupt checkpoint: truncated ({path})")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != _CKPT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: file has {version}, expected {_CKPT_VERSION} ({path})"
        )
    (meta_len,) = take("<I")
    if off + meta_len > len(body):
        raise CheckpointError(f"corrupt checkpoint: truncated ({path})")
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_arrays,) = take("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = take("<H")
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}q") if ndim else ()
        (nbytes,) = take("<Q")
        if off + nbytes > len(body):
            raise CheckpointError(f"corrupt checkpoint: truncated ({path})")
        arr = np.frombuffer(body[off:off + nbytes], dtype=_DTYPE_CODES[code])
        arrays[name] = arr.reshape(shape).copy()
        off += nbytes
    return meta, arrays


def save_checkpoint(model: InrModel, path) -> None:
    """Persist parameters, running stats, encoder matrices, and metadata.

    A round trip through load_checkpoint reproduces forward outputs
    bit-exactly. Optimizer state attached to the model is included so
    training can resume.
    """
    meta = {
        "kind": "inr_model",
        "mode": model.mode,
        "mlp": {
            "input_dim": model.cfg.input_dim,
            "hidden_width": model.cfg.hidden_width,
            "n_layers": model.cfg.n_layers,
            "skip_layers": list(model.cfg.skip_layers),
            "bn_momentum": model.cfg.bn_momentum,
            "bn_epsilon": model.cfg.bn_epsilon,
        },
        "encoder": None,
        "meta": model.meta,
        "has_optimizer": model.optimizer_state is not None,
    }
    arrays = dict(model.state_dict())
    if model.encoder is not None:
        meta["encoder"] = {"seed": model.encoder.seed}
        arrays["enc_b_space"] = model.encoder.b_space
        arrays["enc_b_time"] = model.encoder.b_time
    if model.optimizer_state is not None:
        for k, v in model.optimizer_state.items():
            arrays[f"opt.{k}"] = np.asarray(v)
    Path(path).write_bytes(_pack_container(meta, arrays))


def load_checkpoint(path) -> InrModel:
    """Rebuild a model (and any stored optimizer state) from disk."""
    path = Path(path)
    meta, arrays = _unpack_container(path.read_bytes(), path)
    if meta.get("kind") != "inr_model":
        raise CheckpointError(f"corrupt checkpoint: unexpected kind ({path})")
    m = meta["mlp"]
    cfg = MlpConfig(
        input_dim=m["input_dim"],
        hidden_width=m["hidden_width"],
        n_layers=m["n_layers"],
        skip_layers=tuple(m["skip_layers"]),
        bn_momentum=m["bn_momentum"],
        bn_epsilon=m["bn_epsilon"],
    )
    encoder = None
    if meta["encoder"] is not None:
        encoder = FourierEncoder.from_matrices(
            arrays["enc_b_space"], arrays["enc_b_time"], seed=meta["encoder"]["seed"]
        )
    n = cfg.n_layers
    try:
        model = InrModel(
            cfg,
            weights=[arrays[f"w{j}"] for j in range(1, n + 1)],
            biases=[arrays[f"b{j}"] for j in range(1, n + 1)],
            bn_gamma=[arrays[f"bn_g{j}"] for j in range(1, n)],
            bn_beta=[arrays[f"bn_b{j}"] for j in range(1, n)],
            bn_mean=[arrays[f"bn_rm{j}"] for j in range(1, n)],
            bn_var=[arrays[f"bn_rv{j}"] for j in range(1, n)],
            encoder=encoder,
        )
    except KeyError as exc:
        raise CheckpointError(f"corrupt checkpoint: missing array {exc} ({path})")
    model.mode = meta.get("mode", "train")
    model.meta = meta.get("meta", {})
    if meta.get("has_optimizer"):
        model.optimizer_state = {
            k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")
        }
    return model
