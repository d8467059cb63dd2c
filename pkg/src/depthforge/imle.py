"""Implicit maximum likelihood estimation over identity codes, and slerp.

A small MLP maps Gaussian noise to identity space. Every epoch draws a fresh
bank of M = 2N noise vectors; for each minibatch of training codes the nearest
transformed bank vector is found by exhaustive search and pulled towards the
code.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .io_store import read_tensor_file, write_tensor_file

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class ImleDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImleConfig:
    noise_dim: int = 64
    hidden: int = 128
    n_hidden: int = 2
    latent_dim: int = 512
    oversample: int = 2
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    match_per_epoch: bool = False

    def __post_init__(self):
        if self.oversample < 1 or self.noise_dim < 1 or self.latent_dim < 1 or self.batch_size < 1:
            raise ValueError("invalid IMLE configuration")

    def to_dict(self) -> dict:
        return asdict(self)


class ImleModel:
    def __init__(self, cfg: ImleConfig, params: dict[str, nc.Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = {}
            rng = np.random.default_rng(cfg.seed)
            dims = [cfg.noise_dim] + [cfg.hidden] * cfg.n_hidden + [cfg.latent_dim]
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                params[f"l{i}.w"] = nc.Tensor(rng.standard_normal((b, a)) / np.sqrt(a), requires_grad=True)
                params[f"l{i}.b"] = nc.Tensor(np.zeros(b), requires_grad=True)
        self.params = params

    @property
    def n_layers(self) -> int:
        return self.cfg.n_hidden + 1

    def forward(self, e: nc.Tensor) -> nc.Tensor:
        h = e
        for i in range(self.n_layers):
            h = nc.linear(h, self.params[f"l{i}.w"], self.params[f"l{i}.b"])
            if i < self.n_layers - 1:
                h = nc.leaky_relu(h)
        return h

    def transform(self, e) -> np.ndarray:
        e = np.asarray(e, dtype=np.float64)
        single = e.ndim == 1
        out = self.forward(nc.Tensor(e.reshape(-1, self.cfg.noise_dim))).data
        return out[0] if single else out

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "depthforge-imle", "config": self.cfg.to_dict(), **(extra or {})}
        write_tensor_file(path, meta, {k: p.data for k, p in self.params.items()})

    @classmethod
    def load(cls, path) -> tuple["ImleModel", dict]:
        meta, tensors = read_tensor_file(path)
        if meta.get("kind") != "depthforge-imle":
            raise ValueError(f"{path}: not an IMLE model")
        cfg = ImleConfig(**meta["config"])
        return cls(cfg, {k: nc.Tensor(v, requires_grad=True) for k, v in tensors.items()}), meta


def nearest_indices(candidates: np.ndarray, targets: np.ndarray, chunk: int = 256) -> np.ndarray:
    """For each target row, index of the candidate row with least squared L2 (lowest index on ties)."""
    candidates = np.asarray(candidates, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if not len(candidates):
        raise ValueError("empty candidate bank")
    out = np.empty(len(targets), dtype=np.int64)
    for s in range(0, len(targets), chunk):
        diff = targets[s : s + chunk, None, :] - candidates[None, :, :]
        out[s : s + chunk] = np.argmin(np.sum(diff * diff, axis=2), axis=1)
    return out


def match(noise_bank: np.ndarray, model: ImleModel, s: np.ndarray) -> int:
    """Index of the bank vector whose transform is nearest to identity ``s``."""
    noise_bank = np.asarray(noise_bank, dtype=np.float64)
    if noise_bank.ndim != 2 or not len(noise_bank):
        raise ValueError("empty noise bank")
    return int(nearest_indices(model.transform(noise_bank), s)[0])


def matched_distances(model: ImleModel, bank: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Euclidean distance from each code to its nearest transformed bank vector."""
    tb = model.transform(bank)
    idx = nearest_indices(tb, codes)
    return np.linalg.norm(codes - tb[idx], axis=1)


@dataclass
class ImleHistory:
    epoch_loss: list[float]
    last_bank: np.ndarray


def imle_fit(identities: np.ndarray, cfg: ImleConfig, history: bool = False):
    """Fit the noise-to-identity transform; returns the model (and history if asked)."""
    codes = np.asarray(identities, dtype=np.float64)
    n = len(codes)
    if n < 2:
        raise ValueError("IMLE needs at least 2 identity codes")
    if codes.shape[1] != cfg.latent_dim:
        raise ValueError(f"codes have width {codes.shape[1]}, config latent_dim is {cfg.latent_dim}")
    k = min(cfg.batch_size, n)
    m = cfg.oversample * n
    model = ImleModel(cfg)
    opt = nc.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed + 1)
    epoch_loss = []
    bank = np.empty((0, cfg.noise_dim))
    for epoch in range(cfg.epochs):
        bank = rng.standard_normal((m, cfg.noise_dim))
        order = rng.permutation(n)
        if cfg.match_per_epoch:
            epoch_match = nearest_indices(model.transform(bank), codes)
        losses = []
        for s in range(0, n, k):
            ids = order[s : s + k]
            target = codes[ids]
            if cfg.match_per_epoch:
                sel = epoch_match[ids]
            else:
                sel = nearest_indices(model.transform(bank), target)
            for p in model.params.values():
                p.grad = None
            pred = model.forward(nc.Tensor(bank[sel]))
            diff = nc.add(pred, -target)
            loss = nc.scale(nc.tsum(nc.square(diff)), 1.0 / len(ids))
            val = loss.item()
            if not np.isfinite(val) or val > DIVERGENCE_LIMIT:
                raise ImleDivergedError(f"IMLE loss {val} at epoch {epoch}")
            loss.backward()
            nc.adam_step(model.params, opt)
            losses.append(val)
        epoch_loss.append(float(np.mean(losses)))
        log.debug("imle epoch %d loss %.6g", epoch, epoch_loss[-1])
    if history:
        return model, ImleHistory(epoch_loss, bank)
    return model


def sample_identity(model: ImleModel, seed: int) -> np.ndarray:
    e = np.random.default_rng(seed).standard_normal(model.cfg.noise_dim)
    return model.transform(e)


def slerp(a, b, t: float) -> np.ndarray:
    """Spherical interpolation from ``a`` (t=0) to ``b`` (t=1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("slerp of a zero vector")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    cos = np.clip(float(a @ b) / (na * nb), -1.0, 1.0)
    omega = float(np.arccos(cos))
    if omega < 1e-6:
        return (1.0 - t) * a + t * b
    so = np.sin(omega)
    if so < 1e-12:
        raise ValueError("slerp between antipodal vectors is undefined")
    return (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / so


def nearest_training_neighbors(code, train_codes, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the ``k`` nearest training codes, ascending (ties by index)."""
    train_codes = np.asarray(train_codes, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(train_codes):
        raise ValueError(f"k={k} exceeds {len(train_codes)} training codes")
    diff = train_codes - np.asarray(code, dtype=np.float64)
    d = np.sqrt(np.sum(diff * diff, axis=1))
    idx = np.argsort(d, kind="stable")[:k]
    return idx, d[idx]
