"""Run configuration shared by the pipeline and the command line.

Config files are INI with a single ``[ldalfm]`` section whose keys are the
field names of :class:`RunConfig` (case-insensitive); list values are comma separated::

    [ldalfm]
    K = 5
    mu = 100
    lambdas = 0, 0.001, 0.01, 1, 10
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .hybrid import HybridConfig

SECTION = "ldalfm"

DEFAULT_LAMBDAS = (0.0, 0.001, 0.01, 1.0, 10.0)
DEFAULT_MUS = (1.0, 10.0, 100.0, 1000.0, 10000.0)


@dataclass
class RunConfig:
    seed: int = 0
    k_core: int = 5
    vocab_size: int = 5000
    K: int = 5
    K_star: int = 0
    lam: float = 0.01
    mu: float = 100.0
    n_iter: int = 35
    lr: float = 0.01
    kappa0: float = 1.0
    sigma_init: float = 0.1
    gamma: float = 0.1
    nu: float = 0.1
    inner_steps: int = 1
    gibbs_sweeps: int = 200
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    mus: tuple[float, ...] = DEFAULT_MUS
    clip: bool = False

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.mus = tuple(float(x) for x in self.mus)
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.K_star < 0:
            raise ValueError("K_star must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.k_core < 1 or self.vocab_size < 1 or self.n_iter < 1:
            raise ValueError("k_core, vocab_size and n_iter must be >= 1")
        if not self.lambdas or not self.mus or min(self.lambdas + self.mus) < 0:
            raise ValueError("grids must be non-empty and nonnegative")

    def hybrid(self, **overrides) -> HybridConfig:
        kw = dict(
            K=self.K, K_star=self.K_star, lam=self.lam, mu=self.mu, n_iter=self.n_iter, seed=self.seed, lr=self.lr,
            inner_steps=self.inner_steps, gamma=self.gamma, nu=self.nu, gibbs_sweeps=self.gibbs_sweeps,
            kappa0=self.kappa0, sigma_init=self.sigma_init,
        )
        kw.update(overrides)
        return HybridConfig(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["mus"] = list(self.mus)
        return d

    def replace(self, **overrides) -> "RunConfig":
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**d)


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind.startswith("tuple"):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    return float(raw)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Defaults, then the config file, then non-None ``overrides``."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"config file not found: {path}")
        if not parser.has_section(SECTION):
            raise ValueError(f"{path}: missing [{SECTION}] section")
        # configparser lowercases keys, so match field names case-insensitively
        known = {f.name.lower(): f.name for f in fields(RunConfig)}
        for key, raw in parser.items(SECTION):
            if key.lower() not in known:
                raise ValueError(f"{path}: unknown key {key!r}")
            name = known[key.lower()]
            values[name] = _coerce(name, raw)
    return RunConfig().replace(**values).replace(**overrides)
