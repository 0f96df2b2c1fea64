"""Trainable parameters, the Adam update and a central-difference gradient oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .rng import stage_rng

BLOCKS = ("alpha", "b_user", "b_item", "P", "Q", "psi", "kappa")
SCALAR_BLOCKS = ("alpha", "kappa")

SIGMA_INIT = 0.1
KAPPA_INIT = 1.0

CHECKPOINT_FORMAT = "ldalfm-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a parameter, gradient or objective stops being finite."""

    def __init__(self, message: str, block: str | None = None, iteration: int | None = None):
        super().__init__(message)
        self.block = block
        self.iteration = iteration


@dataclass
class ParamSet:
    """All trainable blocks of the rating and topic models.

    ``P`` and ``Q`` carry ``K`` topic-linked columns followed by ``K_star``
    extra columns; ``psi`` is ``K x V``.
    """

    alpha: float
    b_user: np.ndarray
    b_item: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    psi: np.ndarray
    kappa: float
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.P.shape[1] != self.Q.shape[1] or self.P.shape[1] < self.K:
            raise ValueError(f"factor widths P{self.P.shape} Q{self.Q.shape} incompatible with K={self.K}")
        if self.psi.ndim != 2 or self.psi.shape[0] != self.K or self.psi.shape[1] < 1:
            raise ValueError(f"psi must be K x V with V >= 1, got {self.psi.shape}")

    @property
    def K_star(self) -> int:
        return self.P.shape[1] - self.K

    @property
    def V(self) -> int:
        return self.psi.shape[1]

    @property
    def n_users(self) -> int:
        return len(self.b_user)

    @property
    def n_items(self) -> int:
        return len(self.b_item)

    def shape_header(self) -> dict:
        return {"K": self.K, "K_star": self.K_star, "V": self.V, "n_users": self.n_users, "n_items": self.n_items}

    def block(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.float64)

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: self.block(name) for name in BLOCKS}

    @classmethod
    def from_blocks(cls, blocks: dict, K: int) -> "ParamSet":
        kw = {}
        for name in BLOCKS:
            value = np.array(blocks[name], dtype=np.float64)
            kw[name] = float(value) if name in SCALAR_BLOCKS else value
        return cls(K=K, **kw)

    def copy(self) -> "ParamSet":
        return ParamSet.from_blocks(self.blocks(), self.K)

    def zeros_like(self) -> "ParamSet":
        return ParamSet.from_blocks({k: np.zeros_like(v) for k, v in self.blocks().items()}, self.K)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.block(name).ravel() for name in BLOCKS])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        out, pos = {}, 0
        for name in BLOCKS:
            shape = self.block(name).shape
            size = int(np.prod(shape))
            out[name] = vec[pos:pos + size].reshape(shape)
            pos += size
        return ParamSet.from_blocks(out, self.K)

    def check_finite(self, what: str = "parameter") -> None:
        for name, value in self.blocks().items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"non-finite {what} in block {name!r}", block=name)

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError("user id out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError("item id out of range")
        dot = np.einsum("ij,ij->i", self.P[users], self.Q[items])
        return self.alpha + self.b_item[items] + self.b_user[users] + dot


def init_params(
    n_users: int,
    n_items: int,
    train_ratings: np.ndarray,
    K: int,
    K_star: int = 0,
    V: int = 1,
    seed: int = 0,
    sigma: float = SIGMA_INIT,
    kappa0: float = KAPPA_INIT,
) -> ParamSet:
    """alpha = mean train rating, kappa = ``kappa0``, everything else ~ N(0, sigma).

    Draw order is b_user, b_item, P, Q, psi so the rating blocks do not
    depend on the vocabulary size.
    """
    train_ratings = np.asarray(train_ratings, dtype=np.float64)
    if train_ratings.size == 0:
        raise ValueError("cannot initialise from an empty training set")
    if K_star < 0:
        raise ValueError("K_star must be >= 0")
    rng = stage_rng(seed, "init_params")
    width = K + K_star
    b_user = rng.normal(0.0, sigma, n_users)
    b_item = rng.normal(0.0, sigma, n_items)
    P = rng.normal(0.0, sigma, (n_users, width))
    Q = rng.normal(0.0, sigma, (n_items, width))
    psi = rng.normal(0.0, sigma, (K, V))
    return ParamSet(float(train_ratings.mean()), b_user, b_item, P, Q, psi, float(kappa0), K)


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamSet, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(
    params: ParamSet, grads: ParamSet, state: AdamState, frozen: Iterable[str] = ()
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update of every block; inputs are not modified.

    Blocks named in ``frozen`` keep their values and moment estimates.
    """
    frozen = set(frozen)
    g_blocks = grads.blocks()
    for name, g in g_blocks.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in block {name!r}", block=name)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    m_blocks, v_blocks = state.m.blocks(), state.v.blocks()
    for name, theta in params.blocks().items():
        m, v = m_blocks[name], v_blocks[name]
        if name in frozen:
            new_p[name], new_m[name], new_v[name] = theta, m, v
            continue
        g = g_blocks[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p[name] = theta - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v
    K = params.K
    out = ParamSet.from_blocks(new_p, K)
    out.check_finite()
    new_state = AdamState(
        ParamSet.from_blocks(new_m, K), ParamSet.from_blocks(new_v, K), t, state.lr, b1, b2, state.eps
    )
    return out, new_state


def finite_diff_gradient(objective: Callable, params, h: float = 1e-5):
    """Central differences ``(f(x + h e) - f(x - h e)) / 2h`` per coordinate.

    ``params`` may be a ParamSet (the result is a ParamSet of the same
    shape) or a float array.  Meant for small instances only.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(params, ParamSet):
        x0 = params.flatten()
        f = lambda x: objective(params.unflatten(x))  # noqa: E731
    else:
        x0 = np.array(params, dtype=np.float64)
        f = objective
    shape = x0.shape
    x = x0.ravel().copy()
    grad = np.empty_like(x)

    def evaluate(vec):
        val = float(f(vec.reshape(shape)))
        if not np.isfinite(val):
            raise NonFiniteError("objective is not finite during finite differencing")
        return val

    evaluate(x)
    for j in range(x.size):
        orig = x[j]
        x[j] = orig + h
        up = evaluate(x)
        x[j] = orig - h
        down = evaluate(x)
        x[j] = orig
        grad[j] = (up - down) / (2.0 * h)
    if isinstance(params, ParamSet):
        return params.unflatten(grad)
    return grad.reshape(shape)


def checkpoint_dict(params: ParamSet, model: str, seed: int | None, extra: dict | None = None) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model,
        "seed": seed,
        **params.shape_header(),
        "params": {name: params.block(name).tolist() for name in BLOCKS},
    }
    if extra:
        payload.update(extra)
    return payload


def params_from_checkpoint(payload: dict) -> ParamSet:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an ldalfm checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    blocks = dict(payload["params"])
    K = payload["K"]
    width = K + payload["K_star"]
    for name, n_rows in (("P", payload["n_users"]), ("Q", payload["n_items"])):
        blocks[name] = np.array(blocks[name], dtype=np.float64).reshape(n_rows, width)
    blocks["psi"] = np.array(blocks["psi"], dtype=np.float64).reshape(K, payload["V"])
    params = ParamSet.from_blocks(blocks, K)
    if params.shape_header() != {k: payload[k] for k in params.shape_header()}:
        raise ValueError("checkpoint shape header does not match its arrays")
    return params


def save_checkpoint(path: str | Path, params: ParamSet, model: str, seed: int | None = None, extra: dict | None = None):
    Path(path).write_text(json.dumps(checkpoint_dict(params, model, seed, extra)), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return params_from_checkpoint(payload), payload
