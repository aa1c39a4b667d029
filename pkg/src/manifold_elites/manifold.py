"""Latent parameter representations: autoencoder and PCA fits, reconstruction
thresholds, and the Jacobian-scaled latent mutation covariance."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .errors import (ConfigurationError, DegenerateCovarianceError,
                     ModelHealthError, TrainingError)
from .nets import (AdamState, MlpSpec, ParamVector, adam_step, decoder_jacobian,
                   flatten_params, mlp, mlp_backward_batch, mlp_forward,
                   mlp_forward_batch, read_params, read_spec_descriptor,
                   split_params, write_params, write_spec_descriptor)

KIND_AUTOENCODER = "autoencoder"
KIND_PCA = "pca"


@dataclass(frozen=True)
class AeTrainConfig:
    """Autoencoder training regime. Defaults are the reference regime."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 20_000
    batch_size: int = 64
    test_fraction: float = 0.30
    early_stop_window: int = 100
    early_stop_slope: float = 1e-5
    reset_optimizer_moments_each_loop: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must be in (0, 1)")
        for name in ("epochs", "batch_size", "early_stop_window"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class MutationScale:
    """Per-coordinate parameter-space mutation variance sigma_theta.

    The implied parameter-space covariance is sigma_theta * I. Zero is allowed
    for the degenerate identity mutation; real configs require > 0.
    """

    sigma_theta: float

    def __post_init__(self):
        if self.sigma_theta < 0:
            raise ConfigurationError("sigma_theta must be non-negative")


@dataclass
class LatentCovariance:
    matrix: np.ndarray
    base_point: np.ndarray


@dataclass
class ManifoldModel:
    """Encoder/decoder pair over flat policy parameters.

    PCA models are stored as single-layer linear nets (encoder W = G^T,
    b = -G mu; decoder W = G, b = mu), so decoding, Jacobians and persistence
    are uniform across kinds.
    """

    kind: str
    latent_dim: int
    param_spec: MlpSpec
    enc_spec: MlpSpec
    enc_params: np.ndarray
    dec_spec: MlpSpec
    dec_params: np.ndarray

    @property
    def param_dim(self) -> int:
        return self.enc_spec.input_dim

    @property
    def components(self) -> np.ndarray:
        """PCA component rows (M, P)."""
        if self.kind != KIND_PCA:
            raise ConfigurationError("components are only defined for PCA models")
        (w, _b), = split_params(self.dec_spec, self.dec_params)
        return w

    @property
    def mean(self) -> np.ndarray:
        if self.kind != KIND_PCA:
            raise ConfigurationError("mean is only defined for PCA models")
        (_w, b), = split_params(self.dec_spec, self.dec_params)
        return b

    def copy(self) -> "ManifoldModel":
        return ManifoldModel(self.kind, self.latent_dim, self.param_spec,
                             self.enc_spec, self.enc_params.copy(),
                             self.dec_spec, self.dec_params.copy())


@dataclass
class TrainStats:
    epochs_run: int
    early_stopped: bool
    stop_reason: Optional[str]
    window_slope: float
    train_losses: np.ndarray
    test_losses: np.ndarray
    optimizer_state: Optional[AdamState] = None

    @property
    def final_test_loss(self) -> float:
        return float(self.test_losses[-1]) if len(self.test_losses) else float("nan")


def autoencoder_specs(param_dim: int, hidden_dim: int,
                      latent_dim: int) -> tuple[MlpSpec, MlpSpec]:
    """Symmetric one-hidden-layer AE: ELU hidden, linear bottleneck and output."""
    enc = mlp([param_dim, hidden_dim, latent_dim], hidden="elu", output="linear")
    dec = mlp([latent_dim, hidden_dim, param_dim], hidden="elu", output="linear")
    return enc, dec


def _glorot_init(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    layers = []
    for n_in, n_out in spec.layer_shapes():
        limit = np.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-limit, limit, size=(n_in, n_out)),
                       np.zeros(n_out)))
    return flatten_params(spec, layers)


def init_autoencoder(param_spec: MlpSpec, hidden_dim: int, latent_dim: int,
                     rng: np.random.Generator) -> ManifoldModel:
    enc_spec, dec_spec = autoencoder_specs(param_spec.param_count, hidden_dim,
                                           latent_dim)
    return ManifoldModel(KIND_AUTOENCODER, latent_dim, param_spec,
                         enc_spec, _glorot_init(enc_spec, rng),
                         dec_spec, _glorot_init(dec_spec, rng))


# ---------------------------------------------------------------------------
# encode / decode / reconstruction


def _theta_values(model: ManifoldModel, theta) -> np.ndarray:
    v = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, float)
    if v.shape != (model.param_dim,):
        raise ConfigurationError(
            f"parameter vector has shape {v.shape}, model expects ({model.param_dim},)")
    return v


def encode(model: ManifoldModel, theta) -> np.ndarray:
    return mlp_forward(model.enc_spec, model.enc_params, _theta_values(model, theta))


def decode(model: ManifoldModel, z: np.ndarray) -> ParamVector:
    zv = np.asarray(z, dtype=np.float64)
    if zv.shape != (model.latent_dim,):
        raise ConfigurationError(
            f"latent point has shape {zv.shape}, model expects ({model.latent_dim},)")
    values = mlp_forward(model.dec_spec, model.dec_params, zv)
    return ParamVector(values, model.param_spec)


def encode_batch(model: ManifoldModel, thetas: np.ndarray) -> np.ndarray:
    return mlp_forward_batch(model.enc_spec, model.enc_params, thetas)


def decode_batch(model: ManifoldModel, zs: np.ndarray) -> np.ndarray:
    return mlp_forward_batch(model.dec_spec, model.dec_params, zs)


def reconstruction_error(model: ManifoldModel, theta) -> float:
    """Euclidean norm of theta minus its round-trip reconstruction."""
    v = _theta_values(model, theta)
    theta_hat = decode(model, encode(model, v)).values
    return float(np.linalg.norm(v - theta_hat))


def reconstruction_threshold(model: ManifoldModel, collection: Sequence) -> float:
    """Arithmetic mean of per-point reconstruction errors over the collection.

    Deliberately computed through the same per-point path as
    reconstruction_error so a second pass reproduces it exactly.
    """
    if len(collection) == 0:
        raise ConfigurationError("cannot compute a threshold over an empty collection")
    errors = [reconstruction_error(model, theta) for theta in collection]
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# autoencoder training


def _collection_matrix(collection: Sequence) -> tuple[np.ndarray, MlpSpec]:
    if len(collection) == 0:
        raise ConfigurationError("collection is empty")
    first = collection[0]
    if not isinstance(first, ParamVector):
        raise ConfigurationError("collection must contain ParamVector items")
    spec = first.spec
    rows = []
    for pv in collection:
        if pv.spec.layer_sizes != spec.layer_sizes:
            raise ConfigurationError("collection mixes parameter specs")
        rows.append(pv.values)
    return np.stack(rows), spec


def _ae_loss_and_grads(model: ManifoldModel, batch: np.ndarray):
    """Mean per-sample reconstruction norm and its gradients wrt both nets."""
    n = batch.shape[0]
    z = mlp_forward_batch(model.enc_spec, model.enc_params, batch)
    theta_hat = mlp_forward_batch(model.dec_spec, model.dec_params, z)
    resid = batch - theta_hat
    norms = np.linalg.norm(resid, axis=1)
    loss = float(norms.mean())
    safe = np.where(norms > 0.0, norms, 1.0)
    g_out = -resid / (n * safe[:, None])
    g_out[norms == 0.0] = 0.0
    dec_grad, g_z = mlp_backward_batch(model.dec_spec, model.dec_params, z, g_out)
    enc_grad, _ = mlp_backward_batch(model.enc_spec, model.enc_params, batch, g_z)
    return loss, enc_grad, dec_grad


def ae_loss(model: ManifoldModel, batch: np.ndarray) -> float:
    """Mean reconstruction-norm loss over a batch; the trained objective."""
    z = mlp_forward_batch(model.enc_spec, model.enc_params, batch)
    theta_hat = mlp_forward_batch(model.dec_spec, model.dec_params, z)
    return float(np.linalg.norm(batch - theta_hat, axis=1).mean())


def window_slope(values: Sequence[float]) -> float:
    """Least-squares slope of a loss window; the early-stop statistic."""
    v = np.asarray(values, dtype=np.float64)
    t = np.arange(len(v), dtype=np.float64)
    return float(np.polyfit(t, v, 1)[0])


def fit_autoencoder(collection: Sequence, cfg: AeTrainConfig,
                    warm_start: Optional[ManifoldModel] = None,
                    rng: Optional[np.random.Generator] = None,
                    hidden_dim: int = 100,
                    latent_dim: int = 50,
                    optimizer_state: Optional[AdamState] = None
                    ) -> tuple[ManifoldModel, TrainStats]:
    """Fit (or continue fitting) the AE on the collection.

    Training data is used as-is, never normalised. Each epoch reshuffles the
    collection and holds out test_fraction of it; training stops early when
    the least-squares slope over the last early_stop_window test losses rises
    above +early_stop_slope (overfitting onset), or flattens above
    -early_stop_slope once at least a quarter of the epoch budget is spent.
    Warm starts keep the weights; optimizer moments are reset at entry unless
    reset_optimizer_moments_each_loop is off and a carried optimizer_state is
    supplied (the final state is returned in TrainStats.optimizer_state).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    data, param_spec = _collection_matrix(collection)
    n = data.shape[0]

    if warm_start is not None:
        if warm_start.kind != KIND_AUTOENCODER:
            raise ConfigurationError("warm start must be an autoencoder model")
        if warm_start.param_dim != data.shape[1]:
            raise ConfigurationError("warm start dimensions do not match collection")
        model = warm_start.copy()
    else:
        model = init_autoencoder(param_spec, hidden_dim, latent_dim, rng)

    n_enc = model.enc_params.shape[0]
    flat = np.concatenate([model.enc_params, model.dec_params])
    if (optimizer_state is not None and warm_start is not None
            and not cfg.reset_optimizer_moments_each_loop):
        if optimizer_state.m.shape != flat.shape:
            raise ConfigurationError("carried optimizer state has the wrong size")
        adam = optimizer_state
    else:
        adam = AdamState.fresh(flat.shape[0], lr=cfg.lr, beta1=cfg.beta1,
                               beta2=cfg.beta2, epsilon=cfg.epsilon)

    n_test = min(max(1, round(cfg.test_fraction * n)), n - 1) if n >= 2 else 0
    plateau_after = max(cfg.early_stop_window, int(np.ceil(0.25 * cfg.epochs)))

    train_losses: list[float] = []
    test_losses: list[float] = []
    early_stopped = False
    stop_reason = None
    slope = float("nan")
    epochs_run = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        test_idx = perm[:n_test]
        train_idx = perm[n_test:] if n_test else perm

        epoch_losses = []
        for start in range(0, len(train_idx), cfg.batch_size):
            batch = data[train_idx[start:start + cfg.batch_size]]
            model.enc_params = flat[:n_enc]
            model.dec_params = flat[n_enc:]
            loss, enc_grad, dec_grad = _ae_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite reconstruction loss at epoch {epoch} "
                    f"(batch of {batch.shape[0]}, loss={loss})")
            flat, adam = adam_step(adam, flat, np.concatenate([enc_grad, dec_grad]))
            epoch_losses.append(loss)
        model.enc_params = flat[:n_enc]
        model.dec_params = flat[n_enc:]
        train_losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))

        eval_idx = test_idx if n_test else train_idx
        test_losses.append(ae_loss(model, data[eval_idx]))
        epochs_run = epoch + 1

        if len(test_losses) >= cfg.early_stop_window:
            slope = window_slope(test_losses[-cfg.early_stop_window:])
            if slope > cfg.early_stop_slope:
                early_stopped, stop_reason = True, "rising"
                break
            if slope > -cfg.early_stop_slope and epochs_run >= plateau_after:
                early_stopped, stop_reason = True, "plateau"
                break

    model.enc_params = flat[:n_enc].copy()
    model.dec_params = flat[n_enc:].copy()
    stats = TrainStats(epochs_run=epochs_run, early_stopped=early_stopped,
                       stop_reason=stop_reason, window_slope=slope,
                       train_losses=np.asarray(train_losses),
                       test_losses=np.asarray(test_losses),
                       optimizer_state=adam)
    return model, stats


# ---------------------------------------------------------------------------
# PCA


def fit_pca(collection: Sequence, latent_dim: int) -> ManifoldModel:
    """Mean-centered top-M principal directions as a linear encoder/decoder."""
    data, param_spec = _collection_matrix(collection)
    n, p = data.shape
    if n < 2:
        raise ConfigurationError("PCA needs at least 2 points")
    if latent_dim < 1 or latent_dim > min(p, n):
        raise ConfigurationError(
            f"latent_dim {latent_dim} must be in [1, min(P={p}, N={n})]")
    mu = data.mean(axis=0)
    _u, _s, vt = np.linalg.svd(data - mu, full_matrices=False)
    comps = vt[:latent_dim].copy()
    # deterministic sign: largest-magnitude entry of each component positive
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    enc_spec = mlp([p, latent_dim])
    dec_spec = mlp([latent_dim, p])
    enc_params = flatten_params(enc_spec, [(comps.T, -comps @ mu)])
    dec_params = flatten_params(dec_spec, [(comps, mu)])
    return ManifoldModel(KIND_PCA, latent_dim, param_spec,
                         enc_spec, enc_params, dec_spec, dec_params)


# ---------------------------------------------------------------------------
# latent covariance and sampling


def latent_covariance(model: ManifoldModel, z: np.ndarray,
                      scale: MutationScale) -> LatentCovariance:
    """Sigma_Z = sigma_theta * J^T J at z, symmetrised against rounding drift."""
    jac = decoder_jacobian(model.dec_spec, model.dec_params, np.asarray(z, float))
    if not np.isfinite(jac.entries).all():
        raise ModelHealthError("decoder Jacobian has non-finite entries")
    mat = scale.sigma_theta * (jac.entries.T @ jac.entries)
    mat = 0.5 * (mat + mat.T)
    return LatentCovariance(matrix=mat, base_point=jac.base_point)


def sample_gaussian(mean: np.ndarray, cov: LatentCovariance,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw mean + L u with L L^T = cov (+ escalating diagonal jitter).

    Jitter starts at 1e-12 and multiplies by 10 until the Cholesky
    factorisation succeeds, capped at 1e-6. An all-zero covariance returns the
    mean exactly.
    """
    mu = np.asarray(mean, dtype=np.float64)
    mat = cov.matrix
    if mat.shape != (mu.shape[0], mu.shape[0]):
        raise ConfigurationError(
            f"covariance shape {mat.shape} does not match mean {mu.shape}")
    if not mat.any():
        return mu.copy()
    chol = None
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        jitter = 1e-12
        eye = np.eye(mat.shape[0])
        while chol is None and jitter <= 1e-6:
            try:
                chol = np.linalg.cholesky(mat + jitter * eye)
            except np.linalg.LinAlgError:
                jitter *= 10.0
    if chol is None:
        raise DegenerateCovarianceError(
            "covariance not factorizable at maximum jitter 1e-6")
    return mu + chol @ rng.standard_normal(mu.shape[0])


# ---------------------------------------------------------------------------
# checkpoint io: kind tag, latent dim, fit-time threshold, both nets


_MODEL_MAGIC = b"MEMD1"
_KIND_CODE = {KIND_AUTOENCODER: 0, KIND_PCA: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def save_model(stream: BinaryIO, model: ManifoldModel, epsilon_r: float) -> None:
    stream.write(_MODEL_MAGIC)
    stream.write(struct.pack("<BId", _KIND_CODE[model.kind], model.latent_dim,
                             float(epsilon_r)))
    write_spec_descriptor(stream, model.param_spec)
    write_params(stream, ParamVector(model.enc_params, model.enc_spec))
    write_params(stream, ParamVector(model.dec_params, model.dec_spec))


def load_model(stream: BinaryIO) -> tuple[ManifoldModel, float]:
    magic = stream.read(len(_MODEL_MAGIC))
    if magic != _MODEL_MAGIC:
        raise ConfigurationError("not a model checkpoint file")
    kind_code, latent_dim, epsilon_r = struct.unpack("<BId", stream.read(13))
    param_spec = read_spec_descriptor(stream)
    enc = read_params(stream)
    dec = read_params(stream)
    model = ManifoldModel(_CODE_KIND[kind_code], latent_dim, param_spec,
                          enc.spec, enc.values, dec.spec, dec.values)
    return model, epsilon_r


def save_model_file(path, model: ManifoldModel, epsilon_r: float) -> None:
    with open(path, "wb") as fh:
        save_model(fh, model, epsilon_r)


def load_model_file(path) -> tuple[ManifoldModel, float]:
    with open(path, "rb") as fh:
        return load_model(fh)
