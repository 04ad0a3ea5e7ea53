"""Shared encoder/decoder MLPs over local voxel geometry.

The encoder maps a surface sample ``(y, n)`` (local position + unit normal,
6 values) to an L-dimensional feature; features of all samples in a voxel
are mean-pooled into the voxel latent.  The decoder maps ``concat(y,
latent)`` to a Gaussian over signed distance: mean ``mu`` and standard
deviation ``sigma``, both in voxel-size units.  ``sigma`` is produced by a
softplus with a 1e-4 floor so it is strictly positive.

Everything here is plain numpy.  Two numerical contracts are deliberate:

* Row-wise products go through a fixed-block GEMM so a batched forward is
  bitwise equal to single-query forwards (BLAS kernels otherwise pick
  different reduction orders per batch size).
* Mean pooling uses exact summation (``math.fsum``), which makes the voxel
  latent invariant to permuting or duplicating input points, bit for bit.

Hidden activations are ReLU.  All arrays of one parameter set share a dtype
(float64 or float32); operations compute in that dtype.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError

ENCODER_WIDTHS = (6, 32, 64, 256, 29)
DECODER_WIDTHS = (32, 128, 128, 128, 128, 2)
SIGMA_FLOOR = 1e-4

WEIGHTS_MAGIC = b"PLIW"
WEIGHTS_VERSION = 1

_BLOCK = 256


def _linear_rows(x, w, b):
    """x @ w + b computed in fixed 256-row blocks.

    Padding every product to the same GEMM shape keeps the per-row
    reduction order independent of the batch size, so row i of a batched
    call is bitwise identical to a single-row call.
    """
    n = x.shape[0]
    nb = max(1, -(-n // _BLOCK))
    xp = np.zeros((nb * _BLOCK, x.shape[1]), dtype=x.dtype)
    xp[:n] = x
    out = np.empty((nb * _BLOCK, w.shape[1]), dtype=x.dtype)
    for j in range(nb):
        s = slice(j * _BLOCK, (j + 1) * _BLOCK)
        out[s] = xp[s] @ w + b
    return out[:n]


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


@dataclass(frozen=True)
class SdfDistribution:
    """Gaussian over signed distance at one query point (voxel units)."""

    mu: float
    sigma: float


@dataclass
class MlpWeights:
    """Parameter set for the encoder and decoder networks.

    ``encoder`` and ``decoder`` are lists of ``(W, b)`` with W of shape
    (fan_in, fan_out).  The latent length L is the encoder output width and
    must satisfy ``decoder input width == 3 + L``.
    """

    encoder: list
    decoder: list

    def __post_init__(self):
        enc = self.encoder_widths
        dec = self.decoder_widths
        if dec[0] != 3 + enc[-1]:
            raise ValueError(
                f"decoder input width {dec[0]} incompatible with latent length {enc[-1]}"
            )

    @property
    def encoder_widths(self):
        return tuple([self.encoder[0][0].shape[0]] + [w.shape[1] for w, _ in self.encoder])

    @property
    def decoder_widths(self):
        return tuple([self.decoder[0][0].shape[0]] + [w.shape[1] for w, _ in self.decoder])

    @property
    def latent_dim(self) -> int:
        return self.encoder_widths[-1]

    @property
    def dtype(self):
        return self.encoder[0][0].dtype

    def astype(self, dtype) -> "MlpWeights":
        conv = lambda layers: [(w.astype(dtype), b.astype(dtype)) for w, b in layers]
        return MlpWeights(conv(self.encoder), conv(self.decoder))

    def copy(self) -> "MlpWeights":
        return self.astype(self.dtype)

    def arrays(self):
        """Flat list of parameter arrays, encoder first (stable order)."""
        out = []
        for w, b in self.encoder + self.decoder:
            out += [w, b]
        return out


def init_weights(
    seed: int = 0,
    encoder_widths=ENCODER_WIDTHS,
    decoder_widths=DECODER_WIDTHS,
    dtype=np.float64,
) -> MlpWeights:
    """Kaiming fan-in initialization, biases zero, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def make(widths):
        layers = []
        for fin, fout in zip(widths[:-1], widths[1:]):
            w = rng.standard_normal((fin, fout)) * math.sqrt(2.0 / fin)
            layers.append((w.astype(dtype), np.zeros(fout, dtype=dtype)))
        return layers

    return MlpWeights(make(encoder_widths), make(decoder_widths))


def zero_like_grads(layers):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]


def _mlp_forward(x, layers, want_cache=False):
    """Forward pass with ReLU between layers, linear output layer."""
    a = x
    acts = [a]
    masks = []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = _linear_rows(a, w, b)
        if i < last:
            mask = z > 0
            a = z * mask
            masks.append(mask)
        else:
            a = z
        acts.append(a)
    if want_cache:
        return a, (acts, masks)
    return a


def _mlp_backward(cache, layers, d_out, want_param_grads=True):
    """Reverse pass; returns (param_grads or None, d_input)."""
    acts, masks = cache
    grads = [None] * len(layers) if want_param_grads else None
    d = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if want_param_grads:
            grads[i] = (acts[i].T @ d, d.sum(axis=0))
        d = d @ w.T
        if i > 0:
            d = d * masks[i - 1]
    return grads, d


def encoder_features(samples, weights: MlpWeights):
    """Per-sample encoder features, shape (n, L)."""
    x = np.ascontiguousarray(np.asarray(samples), dtype=weights.dtype)
    if x.ndim != 2 or x.shape[1] != weights.encoder_widths[0]:
        raise ValueError(f"encoder input must be (n, {weights.encoder_widths[0]})")
    return _mlp_forward(x, weights.encoder)


def mean_pool(features):
    """Exactly-rounded column mean; order and duplication invariant."""
    f = np.asarray(features)
    pooled = np.array([math.fsum(col) / f.shape[0] for col in f.T], dtype=np.float64)
    return pooled.astype(f.dtype)


def encode_points(samples, weights: MlpWeights):
    """Pool encoder features of one voxel's samples into its latent.

    ``samples`` is (n, 6) rows of ``(y, n)`` or a list of objects with
    ``.y``/``.n`` attributes; n must be >= 1.
    """
    arr = _as_sample_array(samples)
    if arr.shape[0] == 0:
        raise ValueError("cannot encode an empty point set")
    return mean_pool(encoder_features(arr, weights))


def _as_sample_array(samples):
    if isinstance(samples, np.ndarray):
        return samples
    if len(samples) and hasattr(samples[0], "y"):
        return np.array([np.concatenate([p.y, p.n]) for p in samples])
    return np.asarray(samples, dtype=float)


def _decoder_inputs(ys, latents, weights):
    ys = np.atleast_2d(np.asarray(ys))
    latents = np.atleast_2d(np.asarray(latents))
    if latents.shape[0] == 1 and ys.shape[0] != 1:
        latents = np.broadcast_to(latents, (ys.shape[0], latents.shape[1]))
    x = np.concatenate([ys, latents], axis=1).astype(weights.dtype, copy=False)
    x = np.ascontiguousarray(x)
    if x.shape[1] != weights.decoder_widths[0]:
        raise ValueError(f"decoder input width {x.shape[1]} != {weights.decoder_widths[0]}")
    return x


def decode_batch(ys, latents, weights: MlpWeights):
    """Decode n queries; returns (mu, sigma) arrays of shape (n,)."""
    x = _decoder_inputs(ys, latents, weights)
    out = _mlp_forward(x, weights.decoder)
    mu = out[:, 0]
    sigma = softplus(out[:, 1]) + weights.dtype.type(SIGMA_FLOOR)
    return mu, sigma


def decode(y, latent, weights: MlpWeights) -> SdfDistribution:
    """Single-query decode; identical bits to the batched path."""
    mu, sigma = decode_batch(np.asarray(y)[None, :], np.asarray(latent)[None, :], weights)
    return SdfDistribution(float(mu[0]), float(sigma[0]))


def decode_gradients(ys, latents, weights: MlpWeights, outputs=("mu",)):
    """Spatial gradients of decoder outputs with respect to local coords.

    Exact reverse-mode differentiation, latent held fixed.  Returns a dict
    with requested keys among {"mu", "sigma"}; each value is (n, 3) in
    1/voxel-size units.  Also returns (mu, sigma) values.
    """
    x = _decoder_inputs(ys, latents, weights)
    out, cache = _mlp_forward(x, weights.decoder, want_cache=True)
    mu = out[:, 0]
    raw = out[:, 1]
    sigma = softplus(raw) + weights.dtype.type(SIGMA_FLOOR)
    n = x.shape[0]
    result = {}
    for key in outputs:
        d_out = np.zeros((n, 2), dtype=weights.dtype)
        if key == "mu":
            d_out[:, 0] = 1.0
        elif key == "sigma":
            # d softplus(z) / dz = sigmoid(z)
            d_out[:, 1] = 1.0 / (1.0 + np.exp(-raw))
        else:
            raise ValueError(f"unknown output {key!r}")
        _, dx = _mlp_backward(cache, weights.decoder, d_out, want_param_grads=False)
        result[key] = dx[:, :3]
    return result, (mu, sigma)


def decode_spatial_gradient(y, latent, weights: MlpWeights):
    """d(mu)/d(y) at one query, shape (3,)."""
    grads, _ = decode_gradients(np.asarray(y)[None, :], np.asarray(latent)[None, :], weights)
    return grads["mu"][0]


def gaussian_nll(targets, mu, sigma):
    """Elementwise negative log density of N(mu, sigma^2) at targets."""
    t = np.asarray(targets)
    return 0.5 * np.log(2.0 * np.pi * sigma**2) + (t - mu) ** 2 / (2.0 * sigma**2)


def voxel_loss_and_grads(context, ys, targets, weights: MlpWeights, delta: float, nll_scale: float = 1.0):
    """Loss and exact parameter gradients for one voxel's training sample.

    ``context`` is (n_s, 6) encoder input, ``ys``/(n_d, 3) decoder queries
    with signed-distance ``targets``.  The loss is the summed Gaussian
    negative log likelihood over the queries plus ``delta * ||latent||^2``;
    gradients flow through the mean pooling into the encoder.

    When training on a subsample of the queries, ``nll_scale`` restores the
    full-sum magnitude (n_total / n_subsample) so the latent regularizer
    keeps its intended relative weight.

    Returns ``(loss, nll_sum, encoder_grads, decoder_grads)``.
    """
    ctx = np.ascontiguousarray(np.asarray(context), dtype=weights.dtype)
    n_s = ctx.shape[0]
    feats, enc_cache = _mlp_forward(ctx, weights.encoder, want_cache=True)
    latent = feats.sum(axis=0) / n_s

    ys = np.asarray(ys)
    x = _decoder_inputs(ys, latent[None, :], weights)
    out, dec_cache = _mlp_forward(x, weights.decoder, want_cache=True)
    mu = out[:, 0]
    raw = out[:, 1]
    sigma = softplus(raw) + weights.dtype.type(SIGMA_FLOOR)
    t = np.asarray(targets, dtype=weights.dtype)

    nll = gaussian_nll(t, mu, sigma)
    nll_sum = float(nll.sum()) * nll_scale
    reg = delta * float(latent @ latent)
    loss = nll_sum + reg

    # dNLL/dmu = (mu - t)/sigma^2 ; dNLL/dsigma = 1/sigma - (t-mu)^2/sigma^3
    d_mu = nll_scale * (mu - t) / sigma**2
    d_sigma = nll_scale * (1.0 / sigma - (t - mu) ** 2 / sigma**3)
    d_raw = d_sigma / (1.0 + np.exp(-raw))
    d_out = np.stack([d_mu, d_raw], axis=1).astype(weights.dtype)

    dec_grads, dx = _mlp_backward(dec_cache, weights.decoder, d_out)
    d_latent = dx[:, 3:].sum(axis=0) + 2.0 * delta * latent
    d_feats = np.broadcast_to(d_latent / n_s, feats.shape).astype(weights.dtype)
    enc_grads, _ = _mlp_backward(enc_cache, weights.encoder, d_feats)
    return loss, nll_sum, enc_grads, dec_grads


def accumulate_grads(total, part, scale=1.0):
    """total += scale * part for lists of (dW, db) pairs (in place)."""
    for (tw, tb), (pw, pb) in zip(total, part):
        tw += scale * pw
        tb += scale * pb
    return total


def save_weights(weights: MlpWeights, path) -> None:
    """Versioned little-endian binary dump; round-trips bit-exactly."""
    dtype_code = {8: 8, 4: 4}[weights.dtype.itemsize]
    blob = bytearray()
    blob += WEIGHTS_MAGIC
    blob += struct.pack("<I", WEIGHTS_VERSION)
    blob += struct.pack("<B", dtype_code)
    for widths in (weights.encoder_widths, weights.decoder_widths):
        blob += struct.pack("<I", len(widths))
        blob += struct.pack(f"<{len(widths)}I", *widths)
    fmt = "<f8" if dtype_code == 8 else "<f4"
    for w, b in weights.encoder + weights.decoder:
        blob += np.ascontiguousarray(w, dtype=fmt).tobytes()
        blob += np.ascontiguousarray(b, dtype=fmt).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_weights(path) -> MlpWeights:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise FileFormatError("bad magic; not a weights file", kind="version")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != WEIGHTS_VERSION:
        raise FileFormatError(f"unsupported weights version {version}", kind="version")
    (dtype_code,) = struct.unpack_from("<B", data, off)
    off += 1
    if dtype_code not in (4, 8):
        raise FileFormatError(f"unknown dtype code {dtype_code}", kind="format")
    dtype = np.dtype("<f8" if dtype_code == 8 else "<f4")
    widths = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if n < 2 or n > 64:
            raise FileFormatError("implausible layer count", kind="dimension")
        widths.append(struct.unpack_from(f"<{n}I", data, off))
        off += 4 * n
    enc_w, dec_w = widths
    if dec_w[0] != 3 + enc_w[-1]:
        raise FileFormatError(
            f"latent length {enc_w[-1]} does not match decoder input {dec_w[0]}",
            kind="dimension",
        )

    def read_layers(ws):
        nonlocal off
        layers = []
        for fin, fout in zip(ws[:-1], ws[1:]):
            need = (fin * fout + fout) * dtype.itemsize
            if off + need > len(data):
                raise FileFormatError("weights file truncated", kind="truncated")
            w = np.frombuffer(data, dtype=dtype, count=fin * fout, offset=off).reshape(fin, fout)
            off += fin * fout * dtype.itemsize
            b = np.frombuffer(data, dtype=dtype, count=fout, offset=off)
            off += fout * dtype.itemsize
            layers.append((w.copy(), b.copy()))
        return layers

    enc = read_layers(enc_w)
    dec = read_layers(dec_w)
    if off != len(data):
        raise FileFormatError("trailing bytes after weights", kind="truncated")
    return MlpWeights(enc, dec)
