"""Variational autoencoder over binarized user rows (multinomial likelihood).

Encoder: input -> tanh(hidden) -> [mean | log-variance] of the latent code.
Decoder: latent -> tanh(hidden) -> item logits. Gradients are derived by hand and
checked against finite differences in the test-suite; everything is plain numpy.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .scorer import Scorer

_logger = logging.getLogger(__name__)

PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")
CHECKPOINT_MAGIC = b"PDVAE\x00"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 500
    lr: float = 1e-3
    dropout: float = 0.5
    beta_max: float = 0.2
    # None: anneal over every update of the run (desk-scale stand-in for 200k steps)
    anneal_steps: int | None = None
    seed: int = 0
    hidden: int = 600
    latent: int = 200

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.beta_max <= 1.0:
            raise ValueError("beta_max must be in [0, 1]")
        if self.anneal_steps is not None and self.anneal_steps < 1:
            raise ValueError("anneal_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.hidden < 1 or self.latent < 1:
            raise ValueError("hidden and latent must be positive")


@dataclass
class ModelParams:
    n_items: int
    hidden: int
    latent: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.n_items, self.hidden, self.latent)

    def copy(self) -> "ModelParams":
        return ModelParams(self.n_items, self.hidden, self.latent,
                           {k: v.copy() for k, v in self.weights.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights.values())

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes() for k in PARAM_NAMES)


def param_shapes(n_items: int, hidden: int, latent: int) -> dict[str, tuple[int, ...]]:
    return {
        "enc_w1": (n_items, hidden), "enc_b1": (hidden,),
        "enc_w2": (hidden, 2 * latent), "enc_b2": (2 * latent,),
        "dec_w1": (latent, hidden), "dec_b1": (hidden,),
        "dec_w2": (hidden, n_items), "dec_b2": (n_items,),
    }


def init_params(n_items: int, hidden: int, latent: int, seed: int | np.random.Generator = 0) -> ModelParams:
    """Glorot-normal weights, small normal biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(n_items, hidden, latent).items():
        if len(shape) == 2:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            weights[name] = rng.normal(0.0, std, size=shape)
        else:
            weights[name] = rng.normal(0.0, 1e-3, size=shape)
    return ModelParams(n_items, hidden, latent, weights)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.where(norm > 0, norm, 1.0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kl_term(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * (np.exp(logvar) + mu * mu - 1.0 - logvar).sum(axis=1)


def encode(params: ModelParams, x_in: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w = params.weights
    h1 = np.tanh(x_in @ w["enc_w1"] + w["enc_b1"])
    e = h1 @ w["enc_w2"] + w["enc_b2"]
    return h1, e[:, :params.latent], e[:, params.latent:]


def decode(params: ModelParams, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = params.weights
    h2 = np.tanh(z @ w["dec_w1"] + w["dec_b1"])
    return h2, h2 @ w["dec_w2"] + w["dec_b2"]


def elbo_loss(params: ModelParams, x: np.ndarray, beta: float, eps: np.ndarray,
              x_in: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Negative ELBO averaged over the batch, and its gradient for every parameter.

    ``x`` is the binary target batch, ``x_in`` the (dropped-out, L2-normalized)
    encoder input; it defaults to ``l2_normalize(x)``. ``eps`` is the standard
    normal draw of the reparameterized sample ``z = mu + exp(logvar / 2) * eps``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x_in is None:
        x_in = l2_normalize(x)
    w = params.weights
    n = x.shape[0]

    h1, mu, logvar = encode(params, x_in)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    h2, logits = decode(params, z)
    logp = _log_softmax(logits)

    nll = -(logp * x).sum() / n
    kl = kl_term(mu, logvar).sum() / n
    loss = float(nll + beta * kl)

    # reverse pass
    d_logits = (np.exp(logp) * x.sum(axis=1, keepdims=True) - x) / n
    g = {"dec_w2": h2.T @ d_logits, "dec_b2": d_logits.sum(axis=0)}
    d_a2 = (d_logits @ w["dec_w2"].T) * (1.0 - h2 * h2)
    g["dec_w1"] = z.T @ d_a2
    g["dec_b1"] = d_a2.sum(axis=0)
    d_z = d_a2 @ w["dec_w1"].T
    d_mu = d_z + beta * mu / n
    d_logvar = d_z * eps * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    d_e = np.concatenate([d_mu, d_logvar], axis=1)
    g["enc_w2"] = h1.T @ d_e
    g["enc_b2"] = d_e.sum(axis=0)
    d_a1 = (d_e @ w["enc_w2"].T) * (1.0 - h1 * h1)
    g["enc_w1"] = x_in.T @ d_a1
    g["enc_b1"] = d_a1.sum(axis=0)
    return loss, g


class _Adam:
    def __init__(self, params: ModelParams, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.weights.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in PARAM_NAMES:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params.weights[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def anneal_beta(update: int, beta_max: float, anneal_steps: int) -> float:
    """Linear 0 -> beta_max over ``anneal_steps`` updates, flat afterwards."""
    return min(beta_max, beta_max * update / anneal_steps)


def train(matrix, config: TrainConfig, init: ModelParams | None = None,
          log_every: int = 0) -> ModelParams:
    """Fit the VAE on a (sparse or dense) binary user x item matrix."""
    if sp.issparse(matrix):
        matrix = matrix.tocsr()
    else:
        matrix = np.asarray(matrix, dtype=np.float64)
    n_users, n_items = matrix.shape
    if n_users == 0 or n_items == 0 or matrix.sum() == 0:
        raise ValueError("training matrix is empty")

    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(n_items, config.hidden, config.latent, rng)
    if config.epochs == 0:
        return params

    per_epoch = math.ceil(n_users / config.batch_size)
    anneal = config.anneal_steps or config.epochs * per_epoch
    opt = _Adam(params, config.lr)
    update = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_users)
        total = 0.0
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            x = matrix[idx]
            x = x.toarray() if sp.issparse(x) else x
            x = np.asarray(x, dtype=np.float64)
            if config.dropout > 0:
                keep = rng.random(x.shape) >= config.dropout
                x_in = l2_normalize(x * keep)
            else:
                x_in = l2_normalize(x)
            eps = rng.standard_normal((len(idx), config.latent))
            beta = anneal_beta(update, config.beta_max, anneal)
            loss, grads = elbo_loss(params, x, beta, eps, x_in)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(params, grads)
            update += 1
            total += loss * len(idx)
        if log_every and (epoch + 1) % log_every == 0:
            _logger.info("epoch %d loss %.4f beta %.3f", epoch + 1, total / n_users, beta)
    return params


class MultiVAE(Scorer):
    """Deterministic inference wrapper: no dropout and ``z = mu``."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.n_items = params.n_items

    def score_batch(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        _, mu, _ = encode(self.params, l2_normalize(rows))
        return decode(self.params, mu)[1]

    def item_embeddings(self) -> np.ndarray:
        """Decoder output-layer weight row of every item, shape ``(n_items, hidden)``."""
        return self.params.weights["dec_w2"].T.copy()


# -- checkpoints -----------------------------------------------------------
# layout: magic, uint32 header length, UTF-8 JSON header, raw little-endian float64 arrays

def save_checkpoint(params: ModelParams, path, config: TrainConfig | None = None) -> Path:
    path = Path(path)
    shapes = param_shapes(*params.dims)
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": {"n_items": params.n_items, "hidden": params.hidden, "latent": params.latent},
        "config": asdict(config) if config else None,
        "seed": config.seed if config else None,
        "arrays": [{"name": k, "shape": list(shapes[k]), "dtype": "<f8"} for k in PARAM_NAMES],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.to_bytes())
    return path


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig | None]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    weights = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"]))
        weights[spec["name"]] = np.frombuffer(data, dtype=spec["dtype"], count=n, offset=off).reshape(spec["shape"]).copy()
        off += 8 * n
    dims = header["dims"]
    params = ModelParams(dims["n_items"], dims["hidden"], dims["latent"], weights)
    config = TrainConfig(**header["config"]) if header.get("config") else None
    return params, config
