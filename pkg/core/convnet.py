"""
Small from-scratch convolutional Poisson-rate regressor.

    conv3x3(3->c1) relu pool2 | conv3x3(c1->c2) relu pool2 | conv3x3(c2->c3) relu gap
    dense(c3->d) relu  = embedding
    dense(d->1) exp    = rate per 1,000

Activations are NCHW internally; tiles come in as N x H x W x 3.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import DomainError, NumericError

PARAM_NAMES = ["conv1.W", "conv1.b", "conv2.W", "conv2.b", "conv3.W", "conv3.b",
               "dense.W", "dense.b", "head.W", "head.b"]

# layer indices reported by NumericError
LAYERS = ["conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "conv3", "relu3",
          "gap", "dense", "relu4", "head", "exp"]

CHECKPOINT_MAGIC = b"GMCK"
CHECKPOINT_VERSION = 1


# ==========================================
#   LAYER PRIMITIVES
# ==========================================

def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """3x3 'same' cross-correlation via im2col. x: N,C,H,W  W: O,C,3,3."""
    N, C, H, Wd = x.shape
    O = W.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))            # N,C,H,W,3,3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * Wd, C * 9)
    out = cols @ W.reshape(O, C * 9).T + b
    return out.reshape(N, H, Wd, O).transpose(0, 3, 1, 2), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, x_shape, W: np.ndarray, need_dx: bool = True):
    N, C, H, Wd = x_shape
    O = W.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(N * H * Wd, O)
    dW = (d.T @ cols).reshape(W.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d @ W.reshape(O, C * 9)).reshape(N, H, Wd, C, 3, 3)
    dxp = np.zeros((N, C, H + 2, Wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + Wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dW, db


def pool_forward(x: np.ndarray):
    """2x2 max pool, stride 2; odd trailing rows/cols are dropped."""
    N, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    r = x[:, :, :H2 * 2, :W2 * 2].reshape(N, C, H2, 2, W2, 2)
    r = r.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H2, W2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def pool_backward(dout: np.ndarray, idx: np.ndarray, x_shape):
    N, C, H, W = x_shape
    H2, W2 = dout.shape[2], dout.shape[3]
    d4 = np.zeros((N, C, H2, W2, 4), dtype=dout.dtype)
    np.put_along_axis(d4, idx[..., None], dout[..., None], axis=-1)
    d = d4.reshape(N, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H2 * 2, W2 * 2)
    if (H2 * 2, W2 * 2) != (H, W):
        d = np.pad(d, ((0, 0), (0, 0), (0, H - H2 * 2), (0, W - W2 * 2)))
    return d


def _check(a: np.ndarray, layer: int):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite activation at layer {layer} ({LAYERS[layer]})", layer=layer)


# ==========================================
#   MODEL
# ==========================================

@dataclass
class ForwardPass:
    rate: np.ndarray          # (N,) λ > 0
    embedding: np.ndarray     # (N, d_embed) post-ReLU
    logit: np.ndarray         # (N,) ln λ
    cache: List = field(default_factory=list, repr=False)


@dataclass
class ConvRegressor:
    params: Dict[str, np.ndarray]
    channels: Tuple[int, int, int] = (8, 16, 32)
    d_embed: int = 64
    input_size: int = 64

    @classmethod
    def initialize(cls, channels=(8, 16, 32), d_embed: int = 64, input_size: int = 64,
                   seed: int = 0, dtype=np.float32, head_bias: float = 0.0) -> "ConvRegressor":
        """He-normal weights, zero biases; the head bias can start at ln(mean rate)."""
        rng = np.random.Generator(np.random.Philox(seed))
        c1, c2, c3 = channels
        shapes = {
            "conv1.W": (c1, 3, 3, 3), "conv2.W": (c2, c1, 3, 3), "conv3.W": (c3, c2, 3, 3),
            "dense.W": (c3, d_embed), "head.W": (d_embed, 1),
        }
        params = {}
        for name in PARAM_NAMES:
            if name.endswith(".W"):
                shape = shapes[name]
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
            else:
                width = shapes[name[:-2] + ".W"]
                n_out = width[0] if name.startswith("conv") else width[1]
                params[name] = np.zeros(n_out, dtype=dtype)
        params["head.W"] = (params["head.W"] * 0.1).astype(dtype)
        params["head.b"][:] = head_bias
        return cls(params=params, channels=tuple(channels), d_embed=d_embed, input_size=input_size)

    @property
    def dtype(self):
        return self.params["conv1.W"].dtype

    def copy(self) -> "ConvRegressor":
        return ConvRegressor(params={k: v.copy() for k, v in self.params.items()},
                             channels=self.channels, d_embed=self.d_embed, input_size=self.input_size)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # ------------------------------------------
    def forward(self, tiles: np.ndarray, keep_cache: bool = True) -> ForwardPass:
        x = np.asarray(tiles, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[3] != 3:
            raise DomainError(f"forward expects N x H x W x 3 tiles, got {x.shape}")
        p = self.params
        a0 = x.transpose(0, 3, 1, 2)

        z1, cols1 = conv_forward(a0, p["conv1.W"], p["conv1.b"]); _check(z1, 0)
        r1 = np.maximum(z1, 0)
        a1, idx1 = pool_forward(r1); _check(a1, 2)
        z2, cols2 = conv_forward(a1, p["conv2.W"], p["conv2.b"]); _check(z2, 3)
        r2 = np.maximum(z2, 0)
        a2, idx2 = pool_forward(r2); _check(a2, 5)
        z3, cols3 = conv_forward(a2, p["conv3.W"], p["conv3.b"]); _check(z3, 6)
        r3 = np.maximum(z3, 0)
        g = r3.mean(axis=(2, 3)); _check(g, 8)
        h = g @ p["dense.W"] + p["dense.b"]; _check(h, 9)
        emb = np.maximum(h, 0)
        z = (emb @ p["head.W"])[:, 0] + p["head.b"][0]; _check(z, 11)
        with np.errstate(over="ignore", under="ignore"):
            lam = np.maximum(np.exp(z), np.finfo(self.dtype).tiny)
        _check(lam, 12)

        cache = []
        if keep_cache:
            cache = [a0.shape, cols1, z1, idx1, r1.shape, a1.shape, cols2, z2, idx2, r2.shape,
                     a2.shape, cols3, z3, g, h, emb]
        return ForwardPass(rate=lam, embedding=emb, logit=z, cache=cache)

    def backward(self, fp: ForwardPass, y: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of mean(λ − y·ln λ) over the batch; dL/dz = (λ − y)/N under the exp head."""
        if not fp.cache:
            raise DomainError("backward needs a forward pass run with keep_cache=True")
        (x_shape, cols1, z1, idx1, r1_shape, a1_shape, cols2, z2, idx2, r2_shape,
         a2_shape, cols3, z3, g, h, emb) = fp.cache
        p = self.params
        y = np.asarray(y, dtype=self.dtype).reshape(-1)
        n = len(fp.rate)
        if len(y) != n:
            raise DomainError(f"batch has {n} tiles but {len(y)} targets")

        dz = ((fp.rate - y) / n).astype(self.dtype)
        grads = {
            "head.W": emb.T @ dz[:, None],
            "head.b": np.array([dz.sum()], dtype=self.dtype),
        }
        dh = (dz[:, None] @ p["head.W"].T) * (h > 0)
        grads["dense.W"] = g.T @ dh
        grads["dense.b"] = dh.sum(axis=0)
        dg = dh @ p["dense.W"].T

        H3, W3 = z3.shape[2], z3.shape[3]
        dz3 = np.broadcast_to(dg[:, :, None, None] / (H3 * W3), z3.shape) * (z3 > 0)
        da2, grads["conv3.W"], grads["conv3.b"] = conv_backward(dz3, cols3, a2_shape, p["conv3.W"])
        dz2 = pool_backward(da2, idx2, r2_shape) * (z2 > 0)
        da1, grads["conv2.W"], grads["conv2.b"] = conv_backward(dz2, cols2, a1_shape, p["conv2.W"])
        dz1 = pool_backward(da1, idx1, r1_shape) * (z1 > 0)
        _, grads["conv1.W"], grads["conv1.b"] = conv_backward(dz1, cols1, x_shape, p["conv1.W"], need_dx=False)

        return {k: np.asarray(grads[k], dtype=self.dtype).reshape(p[k].shape) for k in PARAM_NAMES}


# ==========================================
#   CHECKPOINT
# ==========================================

def save_checkpoint(model: ConvRegressor, path):
    """magic | u32 version | u32 header length | JSON header | little-endian float32 arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "channels": list(model.channels),
        "d_embed": model.d_embed,
        "input_size": model.input_size,
        "layers": [{"name": k, "shape": list(model.params[k].shape)} for k in PARAM_NAMES],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for k in PARAM_NAMES:
            f.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> ConvRegressor:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DomainError(f"{path} is not a model checkpoint")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise DomainError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        offset = 12 + hlen
        params = {}
        for layer in header["layers"]:
            shape = tuple(layer["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            params[layer["name"]] = arr.reshape(shape).astype(np.float32)
            offset += 4 * count
    except DomainError:
        raise
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise DomainError(f"checkpoint {path} is truncated or corrupt: {e}")
    if offset != len(data):
        raise DomainError(f"{path}: checkpoint has {len(data) - offset} trailing bytes")
    return ConvRegressor(params=params, channels=tuple(header["channels"]),
                         d_embed=header["d_embed"], input_size=header["input_size"])
