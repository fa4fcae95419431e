"""Internal contrastive learning over tabular samples.

For a D-vector x and a starting index d in {0, ..., D-l}, the consecutive
slice p^d = (x_d, ..., x_{d+l-1}) and its complement q^d (the remaining
D-l coordinates in original order) form a positive pair; slices p^{d'} with
d' != d are the negatives of q^d. Two encoders F (complements) and G
(slices) are trained so that the row-normalized embeddings of matched pairs
align. With similarities m_{d'} = F_n(q^d) . G_n(p^{d'}) and temperature
tau, the per-dimension loss is

    loss(x, d) = -m_d / tau + log sum_{d'} exp(m_{d'} / tau)

where the sum runs over d' != d in "exclude-positive" mode (the default)
or over all d' in "include-positive" mode (standard InfoNCE). The score
embedding of a sample is the vector of these losses over all k = D - l + 1
positions (or their sum in scalar mode); trained on normal data it is the
feature space in which outliers are detected.

At the default tau = 0.01 the exponents span e^{+-100}, so every
log-sum-exp here is max-shifted.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import TabularDataset
from .errors import ConfigError, TrainingDivergenceError, UsageError
from .nn import (
    AdamState,
    DenseNet,
    adam_step,
    build_mlp,
    l2_normalize_rows_with_norms,
    load_net,
    save_net,
    ZERO_NORM_EPS,
)

DENOMINATOR_MODES = ("exclude-positive", "include-positive")
SCORE_MODES = ("vector", "scalar")


@dataclass
class IclConfig:
    l: int = 2
    tau: float = 0.01
    u: int = 200
    embed_dim: int = 64
    lr: float = 0.001
    epochs: int = 200
    batch_size: int = 128
    denominator_mode: str = "exclude-positive"
    score_mode: str = "vector"
    seed: int = 0

    def validate(self, D: int | None = None) -> None:
        if self.l < 1:
            raise ConfigError("sub-vector length l must be >= 1")
        if D is not None and self.l > D - 1:
            raise ConfigError(f"l={self.l} needs D >= l + 1, got D={D}")
        if self.tau <= 0.0:
            raise ConfigError("temperature tau must be positive")
        if self.u % 4 != 0 or self.u < 4:
            raise ConfigError("hidden-unit base u must be a positive multiple of 4")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ConfigError(f"unknown denominator_mode {self.denominator_mode!r}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"unknown score_mode {self.score_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


class IclModel:
    """Twin encoders plus slicing configuration.

    F maps complements (D - l values) through hidden layers of u and 2u
    units (leaky-relu + batchnorm each) to embed_dim; G maps slices
    (l values) through u/4 and u/2 units (leaky-relu each, batchnorm on the
    first hidden layer only).
    """

    def __init__(
        self,
        f_net: DenseNet,
        g_net: DenseNet,
        config: IclConfig,
        D: int,
        final_train_loss: float | None = None,
        loss_history: list[float] | None = None,
    ):
        self.f_net = f_net
        self.g_net = g_net
        self.config = config
        self.D = D
        self.k = D - config.l + 1
        if self.k < 2:
            raise ConfigError(f"need k = D - l + 1 >= 2, got {self.k}")
        if f_net.in_size != D - config.l or g_net.in_size != config.l:
            raise ConfigError("encoder input sizes do not match D and l")
        self.final_train_loss = final_train_loss
        self.loss_history = loss_history or []
        self._p_idx, self._q_idx = slice_index_arrays(D, config.l)


def slice_index_arrays(D: int, l: int):
    """Column index arrays for all k slice positions: (k, l) and (k, D-l)."""
    k = D - l + 1
    p_idx = np.arange(k)[:, None] + np.arange(l)[None, :]
    q_idx = np.empty((k, D - l), dtype=int)
    cols = np.arange(D)
    for d in range(k):
        q_idx[d] = np.concatenate([cols[:d], cols[d + l :]])
    return p_idx, q_idx


def slice_pairs(x: np.ndarray, d: int, l: int = 2):
    """The slice p = x[d : d+l] and its order-preserving complement q."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise UsageError("slice_pairs expects a single vector")
    D = x.shape[0]
    if not 0 <= d <= D - l:
        raise UsageError(f"slice start d={d} out of range [0, {D - l}]")
    p = x[d : d + l].copy()
    q = np.concatenate([x[:d], x[d + l :]])
    return p, q


def build_icl_model(D: int, config: IclConfig) -> IclModel:
    """Untrained encoders with seeded fan-in uniform init."""
    config.validate(D)
    rng = np.random.default_rng(config.seed)
    u, e = config.u, config.embed_dim
    f_net = build_mlp(
        [D - config.l, u, 2 * u, e],
        activations=["leaky-relu", "leaky-relu", "linear"],
        batchnorm=[True, True, False],
        rng=rng,
    )
    g_net = build_mlp(
        [config.l, u // 4, u // 2, e],
        activations=["leaky-relu", "leaky-relu", "linear"],
        batchnorm=[True, False, False],
        rng=rng,
    )
    return IclModel(f_net, g_net, config, D)


def _stacked_subvectors(model: IclModel, X: np.ndarray):
    """All k slices of every row: P (n*k, l) and Q (n*k, D-l)."""
    P = X[:, model._p_idx]  # (n, k, l)
    Q = X[:, model._q_idx]  # (n, k, D-l)
    n = X.shape[0]
    return (
        P.reshape(n * model.k, model.config.l),
        Q.reshape(n * model.k, model.D - model.config.l),
    )


def _losses_from_rows(A: np.ndarray, mode: str):
    """Per-position losses from similarity/temperature rows.

    A has shape (n, k, k) with A[i, d, d'] = m(q^d, p^{d'}) / tau. Returns
    the (n, k) loss matrix, max-shifted for overflow safety.
    """
    n, k, _ = A.shape
    diag = np.arange(k)
    pos = A[:, diag, diag]
    B = A
    if mode == "exclude-positive":
        B = A.copy()
        B[:, diag, diag] = -np.inf
    mx = B.max(axis=2)
    lse = mx + np.log(np.exp(B - mx[..., None]).sum(axis=2))
    return lse - pos


def _loss_grads_wrt_rows(A: np.ndarray, mode: str):
    """Loss matrix and d(total mean loss)/dA, A as in _losses_from_rows."""
    n, k, _ = A.shape
    diag = np.arange(k)
    pos = A[:, diag, diag]
    B = A
    if mode == "exclude-positive":
        B = A.copy()
        B[:, diag, diag] = -np.inf
    mx = B.max(axis=2, keepdims=True)
    E = np.exp(B - mx)
    Z = E.sum(axis=2, keepdims=True)
    losses = (mx[..., 0] + np.log(Z[..., 0])) - pos
    G = E / Z  # softmax rows; zero on the diagonal in exclude mode
    G[:, diag, diag] -= 1.0
    G /= n * k  # objective is the mean over samples and positions
    return losses, G


def _normalize_backward(normed: np.ndarray, norms: np.ndarray, grad: np.ndarray):
    """Backprop through row l2-normalization; zero rows get zero gradient."""
    inner = (grad * normed).sum(axis=1, keepdims=True)
    out = (grad - inner * normed) / np.where(norms < ZERO_NORM_EPS, 1.0, norms)
    return np.where(norms < ZERO_NORM_EPS, 0.0, out)


def _batch_losses(model: IclModel, X: np.ndarray) -> np.ndarray:
    """Infer-mode per-sample per-position losses, (n, k)."""
    n = X.shape[0]
    P, Q = _stacked_subvectors(model, X)
    ef = model.f_net.infer(Q)
    eg = model.g_net.infer(P)
    fn, _ = l2_normalize_rows_with_norms(ef)
    gn, _ = l2_normalize_rows_with_norms(eg)
    e = model.config.embed_dim
    fn3 = fn.reshape(n, model.k, e)
    gn3 = gn.reshape(n, model.k, e)
    M = fn3 @ gn3.transpose(0, 2, 1)
    return _losses_from_rows(M / model.config.tau, model.config.denominator_mode)


def _batch_loss_and_grads(model: IclModel, X: np.ndarray, update_running: bool = True):
    """Train-mode objective (mean loss) and gradients for F then G params."""
    n = X.shape[0]
    cfg = model.config
    P, Q = _stacked_subvectors(model, X)
    ef, cache_f = model.f_net.forward(Q, update_running=update_running)
    eg, cache_g = model.g_net.forward(P, update_running=update_running)
    fn, norms_f = l2_normalize_rows_with_norms(ef)
    gn, norms_g = l2_normalize_rows_with_norms(eg)
    e = cfg.embed_dim
    fn3 = fn.reshape(n, model.k, e)
    gn3 = gn.reshape(n, model.k, e)
    M = fn3 @ gn3.transpose(0, 2, 1)
    losses, G = _loss_grads_wrt_rows(M / cfg.tau, cfg.denominator_mode)
    G = G / cfg.tau  # chain through A = M / tau
    d_fn = (G @ gn3).reshape(n * model.k, e)
    d_gn = (G.transpose(0, 2, 1) @ fn3).reshape(n * model.k, e)
    grad_f = model.f_net.backward(cache_f, _normalize_backward(fn, norms_f, d_fn))
    grad_g = model.g_net.backward(cache_g, _normalize_backward(gn, norms_g, d_gn))
    return float(losses.mean()), grad_f + grad_g


def similarity(model: IclModel, q: np.ndarray, p: np.ndarray) -> float:
    """Dot product of the normalized encoder outputs, in [-1, 1]."""
    ef = model.f_net.infer(np.asarray(q, dtype=float)[None, :])
    eg = model.g_net.infer(np.asarray(p, dtype=float)[None, :])
    fn, _ = l2_normalize_rows_with_norms(ef)
    gn, _ = l2_normalize_rows_with_norms(eg)
    return float(np.clip(fn[0] @ gn[0], -1.0, 1.0))


def internal_loss(model: IclModel, x: np.ndarray, d: int) -> float:
    """Contrastive loss of sample x at slice position d."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.D,):
        raise UsageError(f"sample must have length {model.D}")
    if not 0 <= d < model.k:
        raise UsageError(f"position d={d} out of range [0, {model.k - 1}]")
    return float(_batch_losses(model, x[None, :])[0, d])


def score(model: IclModel, x: np.ndarray):
    """Score embedding: the k per-position losses, or their sum.

    A 1-d input returns a (k,) vector (or a float in scalar mode); a 2-d
    batch returns (n, k) (or (n,)). Pure function of (model, x); scoring is
    independent of batch composition.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.D:
        raise UsageError(f"samples must have {model.D} columns")
    losses = _batch_losses(model, X)
    if model.config.score_mode == "scalar":
        out = losses.sum(axis=1)
        return float(out[0]) if single else out
    return losses[0] if single else losses


def score_matrix(model: IclModel, x: np.ndarray) -> np.ndarray:
    """Score embeddings as a 2-d matrix: (n, k), or (n, 1) in scalar mode."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    losses = _batch_losses(model, X)
    if model.config.score_mode == "scalar":
        return losses.sum(axis=1, keepdims=True)
    return losses


def train_icl(train: TabularDataset, config: IclConfig) -> IclModel:
    """Fit the twin encoders on the training rows by Adam.

    Each batch step embeds all k slice pairs of every sample, forms the
    per-sample k x k similarity matrix, and minimizes the mean loss over
    samples and positions. Deterministic for a fixed seed.
    """
    X = np.asarray(train.values, dtype=float)
    if X.shape[0] < 1:
        raise UsageError("training set is empty")
    config.validate(X.shape[1])
    model = build_icl_model(X.shape[1], config)
    params = model.f_net.parameters() + model.g_net.parameters()
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = X[order[start : start + config.batch_size]]
            loss, grads = _batch_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            adam_step(params, grads, state)
            total += loss * batch.shape[0]
        history.append(total / n)
    model.f_net.mode = "infer"
    model.g_net.mode = "infer"
    model.loss_history = history
    model.final_train_loss = history[-1] if history else None
    return model


def save_icl(model: IclModel, directory) -> None:
    """Persist the model: two net checkpoints plus a JSON header."""
    os.makedirs(directory, exist_ok=True)
    save_net(model.f_net, os.path.join(directory, "f.net"))
    save_net(model.g_net, os.path.join(directory, "g.net"))
    header = {
        "D": model.D,
        "l": model.config.l,
        "tau": model.config.tau,
        "u": model.config.u,
        "embed_dim": model.config.embed_dim,
        "k": model.k,
        "denominator_mode": model.config.denominator_mode,
        "score_mode": model.config.score_mode,
        "seed": model.config.seed,
    }
    with open(os.path.join(directory, "icl.json"), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_icl(directory) -> IclModel:
    with open(os.path.join(directory, "icl.json"), "r", encoding="utf-8") as fh:
        header = json.load(fh)
    f_net, _ = load_net(os.path.join(directory, "f.net"))
    g_net, _ = load_net(os.path.join(directory, "g.net"))
    config = IclConfig(
        l=header["l"],
        tau=header["tau"],
        u=header["u"],
        embed_dim=header["embed_dim"],
        denominator_mode=header["denominator_mode"],
        score_mode=header["score_mode"],
        seed=header["seed"],
    )
    model = IclModel(f_net, g_net, config, header["D"])
    if model.k != header["k"]:
        raise ConfigError("checkpoint header k does not match D and l")
    return model


def weight_fingerprint(model: IclModel) -> str:
    """Stable hash of all encoder parameters (sweep-sharing guarantee)."""
    import hashlib

    h = hashlib.sha256()
    for p in model.f_net.parameters() + model.g_net.parameters():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()
