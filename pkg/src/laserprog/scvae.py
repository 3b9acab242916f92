"""Semi-conditional variational autoencoder over power windows.

The encoder sees only the power sequence; the decoder is conditioned on the
latent code and on the operating conditions::

    x (T, 1) -> GRU(40) -> GRU(20) -> last state -> mu, logvar
    z = mu + exp(logvar / 2) * eps
    [z, oc] -> Dense(ReLU) -> initial state of GRU(20) -> GRU(40) -> Dense(1) per step

The decoder GRUs are driven by a learned constant input at every step.
Training minimizes ``sum_t (x_t - xhat_t)^2 + kl_weight * KL(q(z|x) || N(0, I))``
averaged over the mini-batch.

The same network without sampling and without the KL term is the GRU
autoencoder baseline (``variational=False``).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import DataError, NormStats, WindowSet
from .nn_core import (
    DenseParams,
    GruCellParams,
    GRU_FIELDS,
    NonFiniteError,
    ParamSet,
    adam_step,
    check_finite,
    dense_backward,
    dense_forward,
    glorot_uniform,
    gru_sequence_backward,
    gru_sequence_forward,
)

log = logging.getLogger(__name__)

FORMAT_NAME = "laserprog-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Model file is corrupt or does not follow the schema."""


class ModelVersionError(ModelFormatError):
    """Model file was written by an unsupported format version."""


@dataclass
class ScvaeConfig:
    seq_len: int = 6
    input_dim: int = 1
    encoder_sizes: tuple[int, ...] = (40, 20)
    latent_dim: int = 8
    oc_dim: int = 2
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    kl_weight: float = 1.0
    hidden_activation: str = "relu"
    variational: bool = True
    # optional step decay: lr_final is used for the last (1 - lr_decay_at) of the epochs
    lr_final: float | None = None
    lr_decay_at: float = 0.75

    def __post_init__(self) -> None:
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.latent_dim < 1 or self.input_dim < 1:
            raise ValueError("latent_dim and input_dim must be >= 1")
        if self.oc_dim not in (0, 2):
            raise ValueError("oc_dim is 2 (temperature, current) or 0 (unconditioned decoder)")
        if not self.encoder_sizes or any(s < 1 for s in self.encoder_sizes):
            raise ValueError("encoder sizes must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.kl_weight < 0:
            raise ValueError("invalid optimizer settings")
        if self.lr_final is not None and self.lr_final <= 0:
            raise ValueError("lr_final must be positive")
        if not 0.0 <= self.lr_decay_at <= 1.0:
            raise ValueError("lr_decay_at must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        if self.lr_final is None or epoch < self.lr_decay_at * self.epochs:
            return self.lr
        return self.lr_final

    @property
    def decoder_sizes(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_sizes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_sizes"] = list(self.encoder_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScvaeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentDraw:
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray


@dataclass
class TrainTrace:
    total: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)


@dataclass
class ScvaeModel:
    config: ScvaeConfig
    params: ParamSet
    norm: NormStats
    version: int = FORMAT_VERSION

    # -- parameter views ---------------------------------------------------

    def gru(self, prefix: str) -> GruCellParams:
        return GruCellParams(**{f: self.params[f"{prefix}.{f}"] for f in GRU_FIELDS})

    def dense(self, prefix: str, activation: str = "identity") -> DenseParams:
        return DenseParams(self.params[f"{prefix}.W"], self.params[f"{prefix}.b"], activation)

    @property
    def enc_layers(self) -> list[str]:
        return [f"enc{k}" for k in range(len(self.config.encoder_sizes))]

    @property
    def dec_layers(self) -> list[str]:
        return [f"dec{k}" for k in range(len(self.config.decoder_sizes))]


def init_model(config: ScvaeConfig, norm: NormStats, rng: np.random.Generator | None = None) -> ScvaeModel:
    """Glorot-uniform weights, zero biases, drawn from ``rng`` (seeded by config.seed if omitted)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    ps = ParamSet()

    def add_gru(prefix: str, n_in: int, hidden: int) -> None:
        for name, value in GruCellParams.init(rng, n_in, hidden).as_dict().items():
            ps.add(f"{prefix}.{name}", value)

    def add_dense(prefix: str, n_in: int, n_out: int) -> None:
        ps.add(f"{prefix}.W", glorot_uniform(rng, n_out, n_in))
        ps.add(f"{prefix}.b", np.zeros(n_out))

    n_in = config.input_dim
    for k, size in enumerate(config.encoder_sizes):
        add_gru(f"enc{k}", n_in, size)
        n_in = size
    add_dense("mu", n_in, config.latent_dim)
    if config.variational:
        add_dense("logvar", n_in, config.latent_dim)
    dec = config.decoder_sizes
    add_dense("dec_init", config.latent_dim + config.oc_dim, dec[0])
    ps.add("dec_input", rng.uniform(-1.0, 1.0, size=config.input_dim))
    n_in = config.input_dim
    for k, size in enumerate(dec):
        add_gru(f"dec{k}", n_in, size)
        n_in = size
    add_dense("out", n_in, config.input_dim)
    return ScvaeModel(config, ps, norm)


def zero_model(config: ScvaeConfig, norm: NormStats) -> ScvaeModel:
    model = init_model(config, norm, np.random.default_rng(0))
    for p in model.params.params.values():
        p[...] = 0.0
    return model


# ---------------------------------------------------------------------------
# Forward pieces


def _as_batch(x: np.ndarray, cols: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != cols:
        raise ValueError(f"{what} must have {cols} columns, got shape {x.shape}")
    return x2, single


def _encode(model: ScvaeModel, x: np.ndarray):
    xs = x.T[:, :, None]  # (T, B, 1)
    caches = []
    h = xs
    for name in model.enc_layers:
        h, c = gru_sequence_forward(h, model.gru(name))
        caches.append(c)
    last = h[-1]
    mu, mu_cache = dense_forward(last, model.dense("mu"))
    if model.config.variational:
        logvar, lv_cache = dense_forward(last, model.dense("logvar"))
    else:
        logvar, lv_cache = np.zeros_like(mu), None
    return mu, logvar, (caches, h.shape, mu_cache, lv_cache)


def _decode(model: ScvaeModel, z: np.ndarray, oc: np.ndarray):
    cfg = model.config
    inp = np.concatenate([z, oc], axis=1) if cfg.oc_dim else z
    h0, init_cache = dense_forward(inp, model.dense("dec_init", cfg.hidden_activation))
    steps = np.broadcast_to(model.params["dec_input"], (cfg.seq_len, z.shape[0], cfg.input_dim))
    caches = []
    h = steps
    for k, name in enumerate(model.dec_layers):
        h, c = gru_sequence_forward(h, model.gru(name), h0 if k == 0 else None)
        caches.append(c)
    y, out_cache = dense_forward(h, model.dense("out"))
    xhat = y[:, :, 0].T
    return xhat, (init_cache, caches, out_cache)


def encode(model: ScvaeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance for one window (1-D) or a batch (2-D)."""
    x2, single = _as_batch(x, model.config.seq_len, "input sequence")
    mu, logvar, _ = _encode(model, x2)
    return (mu[0], logvar[0]) if single else (mu, logvar)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    mu, logvar, eps = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, eps))
    if not mu.shape == logvar.shape == eps.shape:
        raise ValueError(f"shape mismatch: mu{mu.shape} logvar{logvar.shape} eps{eps.shape}")
    return mu + np.exp(0.5 * logvar) * eps


def decode(model: ScvaeModel, z: np.ndarray, oc: np.ndarray | None = None) -> np.ndarray:
    cfg = model.config
    z2, single = _as_batch(z, cfg.latent_dim, "latent code")
    if cfg.oc_dim:
        if oc is None:
            raise ValueError("this decoder is conditioned on operating conditions")
        oc2, _ = _as_batch(oc, cfg.oc_dim, "operating conditions")
        if oc2.shape[0] != z2.shape[0]:
            raise ValueError("latent and operating-condition batch sizes differ")
    else:
        oc2 = np.zeros((z2.shape[0], 0))
    xhat, _ = _decode(model, z2, oc2)
    return xhat[0] if single else xhat


def reconstruct(
    model: ScvaeModel,
    x: np.ndarray,
    oc: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Encode, sample and decode.

    With ``rng=None`` the posterior mean is decoded (``eps = 0``), which makes
    the result a deterministic function of the input. Passing a generator
    draws one ``eps`` per window instead.
    """
    x2, single = _as_batch(x, model.config.seq_len, "input sequence")
    mu, logvar, _ = _encode(model, x2)
    if rng is None or not model.config.variational:
        z = mu
    else:
        z = reparameterize(mu, logvar, rng.standard_normal(mu.shape))
    oc2 = None
    if model.config.oc_dim:
        if oc is None:
            raise ValueError("this decoder is conditioned on operating conditions")
        oc2 = np.atleast_2d(np.asarray(oc, dtype=np.float64))
    xhat = decode(model, z, oc2)
    return xhat[0] if single else xhat


# ---------------------------------------------------------------------------
# Loss


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis."""
    # written so that the standard-normal posterior gives +0.0
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def loss(
    x: np.ndarray, xhat: np.ndarray, mu: np.ndarray, logvar: np.ndarray, kl_weight: float = 1.0
) -> tuple[float, float, float]:
    """``(recon, kl, total)`` summed over time steps / latent units, averaged over the batch."""
    x, xhat, mu, logvar = (np.asarray(a, dtype=np.float64) for a in (x, xhat, mu, logvar))
    if x.shape != xhat.shape or mu.shape != logvar.shape:
        raise ValueError("shape mismatch in loss inputs")
    recon = float(np.mean(np.sum((x - xhat) ** 2, axis=-1)))
    kl = float(np.mean(kl_divergence(mu, logvar)))
    return recon, kl, recon + kl_weight * kl


def loss_and_grads(
    model: ScvaeModel, x: np.ndarray, oc: np.ndarray, eps: np.ndarray | None
) -> tuple[float, float, float]:
    """Mean batch loss; gradients are accumulated into ``model.params``.

    ``eps`` is the standard-normal draw used for the reparameterization
    (ignored for the deterministic autoencoder).
    """
    cfg = model.config
    ps = model.params
    B = x.shape[0]
    mu, logvar, (enc_caches, enc_shape, mu_cache, lv_cache) = _encode(model, x)
    if cfg.variational:
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
    else:
        z = mu
    oc_in = oc if cfg.oc_dim else np.zeros((B, 0))
    xhat, (init_cache, dec_caches, out_cache) = _decode(model, z, oc_in)
    recon, kl, total = loss(x, xhat, mu, logvar, cfg.kl_weight)
    if not cfg.variational:
        kl, total = 0.0, recon
    if not np.isfinite(total):
        raise NonFiniteError("training loss is not finite")

    # decoder
    dxhat = 2.0 * (xhat - x) / B
    dy = dxhat.T[:, :, None]
    dh, g = dense_backward(out_cache, dy)
    ps.accumulate("out.W", g["W"])
    ps.accumulate("out.b", g["b"])
    dh0 = None
    for k in reversed(range(len(model.dec_layers))):
        name = model.dec_layers[k]
        dh, dh_init, g = gru_sequence_backward(dec_caches[k], dh)
        for f in GRU_FIELDS:
            ps.accumulate(f"{name}.{f}", g[f])
        if k == 0:
            dh0 = dh_init
    ps.accumulate("dec_input", dh.sum(axis=(0, 1)))
    dinp, g = dense_backward(init_cache, dh0)
    ps.accumulate("dec_init.W", g["W"])
    ps.accumulate("dec_init.b", g["b"])
    dz = dinp[:, : cfg.latent_dim]

    # latent
    if cfg.variational:
        dmu = dz + cfg.kl_weight * mu / B
        dlogvar = dz * eps * 0.5 * std + cfg.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / B
    else:
        dmu = dz
    dlast, g = dense_backward(mu_cache, dmu)
    ps.accumulate("mu.W", g["W"])
    ps.accumulate("mu.b", g["b"])
    if cfg.variational:
        d2, g = dense_backward(lv_cache, dlogvar)
        ps.accumulate("logvar.W", g["W"])
        ps.accumulate("logvar.b", g["b"])
        dlast = dlast + d2

    # encoder
    dhs = np.zeros(enc_shape)
    dhs[-1] = dlast
    for k in reversed(range(len(model.enc_layers))):
        name = model.enc_layers[k]
        dhs, _, g = gru_sequence_backward(enc_caches[k], dhs)
        for f in GRU_FIELDS:
            ps.accumulate(f"{name}.{f}", g[f])
    return recon, kl, total


# ---------------------------------------------------------------------------
# Training


def _training_arrays(data: WindowSet, norm: NormStats, config: ScvaeConfig) -> tuple[np.ndarray, np.ndarray]:
    if len(data) == 0:
        raise DataError("training set is empty")
    if np.any(data.is_degraded):
        raise DataError("training set contains degraded windows; train on normal data only")
    if data.seq_len != config.seq_len:
        raise DataError(f"windows have length {data.seq_len}, config expects {config.seq_len}")
    x, oc = data.normalized(norm)
    return x, oc


def fit_arrays(
    x: np.ndarray, oc: np.ndarray, config: ScvaeConfig, norm: NormStats
) -> tuple[ScvaeModel, TrainTrace]:
    """Train on already-normalized arrays ``x (n, seq_len)`` and ``oc (n, 2)``."""
    rng = np.random.default_rng(config.seed)
    model = init_model(config, norm, rng)
    check_finite("training inputs", x, oc)
    n = x.shape[0]
    trace = TrainTrace()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        lr = config.lr_at(epoch)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            eps = rng.standard_normal((idx.size, config.latent_dim)) if config.variational else None
            parts = loss_and_grads(model, x[idx], oc[idx], eps)
            adam_step(model.params, lr)
            sums += np.array(parts) * idx.size
        recon, kl, total = sums / n
        trace.recon.append(recon)
        trace.kl.append(kl)
        trace.total.append(total)
        if epoch % 20 == 0 or epoch == config.epochs - 1:
            log.debug("epoch %d loss %.6f recon %.6f kl %.6f", epoch, total, recon, kl)
    return model, trace


def train(data: WindowSet, config: ScvaeConfig, norm: NormStats) -> tuple[ScvaeModel, TrainTrace]:
    """Fit a model on normal windows only (raises on any degraded window)."""
    x, oc = _training_arrays(data, norm, config)
    return fit_arrays(x, oc, config, norm)


# ---------------------------------------------------------------------------
# Persistence


def to_dict(model: ScvaeModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": model.version,
        "config": model.config.to_dict(),
        "norm_stats": model.norm.to_dict(),
        "params": {name: arr.tolist() for name, arr in model.params.params.items()},
    }


def from_dict(d: dict) -> ScvaeModel:
    if not isinstance(d, dict) or d.get("format") != FORMAT_NAME:
        raise ModelFormatError("not a laserprog model file")
    if d.get("version") != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format version {d.get('version')!r} (expected {FORMAT_VERSION})")
    for key in ("config", "norm_stats", "params"):
        if key not in d:
            raise ModelFormatError(f"model file lacks {key!r}")
    try:
        config = ScvaeConfig.from_dict(d["config"])
        norm = NormStats.from_dict(d["norm_stats"])
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(str(exc)) from exc
    model = init_model(config, norm, np.random.default_rng(0))
    stored = d["params"]
    if set(stored) != set(model.params.names()):
        raise ModelFormatError("parameter names do not match the configured architecture")
    try:
        values = {k: np.array(v, dtype=np.float64) for k, v in stored.items()}
        model.params.set_values(values)
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"bad parameter array: {exc}") from exc
    check_finite("stored parameters", *values.values())
    return model


def save(model: ScvaeModel, path: str | Path, provenance: dict | None = None) -> None:
    """Write the model as JSON; ``provenance`` is stored alongside and ignored on load."""
    d = to_dict(model)
    if provenance is not None:
        d["provenance"] = provenance
    Path(path).write_text(json.dumps(d, indent=1))


def load(path: str | Path) -> ScvaeModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
    return from_dict(d)
