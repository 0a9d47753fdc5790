"""Adaptive Metropolis-within-Gibbs sampler and chain diagnostics.

A target exposes a dictionary state of numpy arrays and a list of update
steps. Each step is an exact conditional draw (:class:`Gibbs`), an adaptive random-walk
Metropolis update (:class:`RandomWalk`) that moves one component at a time,
or every element at once when the elements are conditionally independent,
or a Metropolis-Hastings move with a target-supplied proposal
(:class:`Metropolis`).
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """The sampler could not start or failed to move."""


@dataclass
class ChainConfig:
    n_chains: int = 2
    warmup: int = 5000
    keep: int = 5000
    thin: int = 5
    seed: int = 0
    # Step-size adaptation (warmup only): batch length, target acceptance,
    # maximum per-batch change of the log step.
    batch: int = 50
    target_accept: float = 0.44
    max_adapt: float = 0.05
    initial_step: float = 0.1
    min_gap: int = 1
    independent_chains: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.n_chains < 1 or self.thin < 1 or self.keep < 1 or self.warmup < 0:
            raise ValueError(f"invalid chain configuration {self}")

    @property
    def n_retained(self) -> int:
        return self.keep // self.thin

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RandomWalk:
    """Random-walk Metropolis update of ``state[key]``.

    ``log_density(state)`` must return every log-density term that depends
    on ``state[key]``: a scalar, or a per-element array when ``elementwise``
    is set (elements then have to be conditionally independent).
    """

    key: str
    log_density: Callable[[dict], float | np.ndarray]
    elementwise: bool = False
    lower: float = -np.inf
    upper: float = np.inf
    initial_step: float | None = None


@dataclass
class Metropolis:
    """Metropolis-Hastings update of ``state[key]`` with a custom proposal.

    ``propose(state, rng)`` returns the proposed value and the log proposal
    ratio ``log q(current | proposed) - log q(proposed | current)``.
    """

    key: str
    log_density: Callable[[dict], float]
    propose: Callable[[dict, np.random.Generator], tuple[np.ndarray, float]]


@dataclass
class Gibbs:
    """Exact draw of ``state[key]`` from its full conditional."""

    key: str
    draw: Callable[[dict, np.random.Generator], np.ndarray]


class Target:
    """Base class for posterior targets.

    Subclasses set ``traced`` (state keys recorded at every retained
    iteration) and implement :meth:`initial_state`, :meth:`updates` and
    :meth:`log_density`.
    """

    traced: tuple[str, ...] = ()

    def initial_state(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def updates(self) -> list[RandomWalk | Metropolis | Gibbs]:
        raise NotImplementedError

    def log_density(self, state: dict[str, np.ndarray]) -> float:
        raise NotImplementedError

    def param_names(self) -> list[str]:
        state = self.initial_state(np.random.default_rng(0))
        names = []
        for key in self.traced:
            size = np.size(state[key])
            names += [key] if size == 1 else [f"{key}[{k}]" for k in range(size)]
        return names


@dataclass
class PosteriorDraws:
    names: list[str]
    values: np.ndarray  # (chain, draw, parameter)
    log_density: np.ndarray  # (chain, draw)
    acceptance: dict[str, list[float]] = field(default_factory=dict)
    final_states: list[dict] = field(default_factory=list, repr=False)

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, :, self.names.index(name)]

    def flat(self) -> np.ndarray:
        """Draws of every chain concatenated in chain order, shape (N, P)."""
        return self.values.reshape(-1, self.values.shape[2])

    def to_frame(self) -> pd.DataFrame:
        C, K, P = self.values.shape
        chain, it, par = np.meshgrid(np.arange(C), np.arange(1, K + 1), np.arange(P), indexing="ij")
        return pd.DataFrame({
            "chain": chain.ravel(),
            "iteration": it.ravel(),
            "parameter": np.asarray(self.names)[par.ravel()],
            "value": self.values.ravel(),
        })

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def chain_seed(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, chain])


def _trace(state: dict, keys) -> np.ndarray:
    return np.concatenate([np.ravel(state[k]).astype(float) for k in keys])


class _Adapter:
    """Per-component log step sizes, tuned batch-wise toward a target rate."""

    def __init__(self, size: int, step: float, config: ChainConfig):
        self.log_step = np.full(size, np.log(step))
        self.accepted = np.zeros(size)
        self.total_accepted = np.zeros(size)
        self.proposed = 0
        self.batches = 0
        self.config = config

    @property
    def step(self) -> np.ndarray:
        return np.exp(self.log_step)

    def record(self, accepted: np.ndarray) -> None:
        self.accepted += accepted
        self.total_accepted += accepted
        self.proposed += 1

    def end_batch(self, adapt: bool) -> None:
        if adapt and self.proposed:
            self.batches += 1
            delta = min(self.config.max_adapt, self.batches ** -0.5)
            rate = self.accepted / self.proposed
            self.log_step += np.where(rate > self.config.target_accept, delta, -delta)
        self.accepted[:] = 0
        self.proposed = 0

    def reset_totals(self) -> None:
        self.total_accepted[:] = 0


def _rw_componentwise(upd: RandomWalk, state, adapter: _Adapter, rng) -> None:
    x = state[upd.key]
    current = float(upd.log_density(state))
    accepted = np.zeros(x.size)
    flat = x.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        prop = old + adapter.step[k] * rng.standard_normal()
        u = rng.random()
        if not (upd.lower < prop < upd.upper):
            continue
        flat[k] = prop
        new = float(upd.log_density(state))
        if np.log(u) < new - current:
            current = new
            accepted[k] = 1
        else:
            flat[k] = old
    adapter.record(accepted)


def _rw_elementwise(upd: RandomWalk, state, adapter: _Adapter, rng) -> None:
    x = state[upd.key]
    current = np.asarray(upd.log_density(state), dtype=float)
    prop = x + adapter.step * rng.standard_normal(x.shape)
    u = rng.random(x.shape)
    inside = (prop > upd.lower) & (prop < upd.upper)
    prop = np.where(inside, prop, x)
    state[upd.key] = prop
    new = np.asarray(upd.log_density(state), dtype=float)
    with np.errstate(invalid="ignore"):
        accept = inside & (np.log(u) < new - current)
    state[upd.key] = np.where(accept, prop, x)
    adapter.record(accept.astype(float))


def _metropolis(upd: Metropolis, state, rng) -> bool:
    x = state[upd.key]
    current = float(upd.log_density(state))
    prop, log_q = upd.propose(state, rng)
    u = rng.random()
    state[upd.key] = np.asarray(prop, dtype=float)
    new = float(upd.log_density(state))
    if np.log(u) < new - current + log_q:
        return True
    state[upd.key] = x
    return False


def _run_one(target: Target, config: ChainConfig, chain: int):
    rng = np.random.default_rng(chain_seed(config.seed, chain))
    state = {k: np.array(v, dtype=float, copy=True) for k, v in target.initial_state(rng).items()}
    lp = target.log_density(state)
    if not np.isfinite(lp):
        raise SamplerError(f"non-finite log density ({lp}) at the initial point")
    updates = target.updates()
    adapters = {}
    mh_accepted = {u.key: 0 for u in updates if isinstance(u, Metropolis)}
    for upd in updates:
        if isinstance(upd, RandomWalk):
            step = upd.initial_step if upd.initial_step is not None else config.initial_step
            adapters[upd.key] = _Adapter(np.size(state[upd.key]), step, config)
    total = config.warmup + config.keep
    kept, lps = [], []
    for t in range(total):
        warm = t < config.warmup
        for upd in updates:
            if isinstance(upd, Gibbs):
                state[upd.key] = np.asarray(upd.draw(state, rng), dtype=float)
            elif isinstance(upd, Metropolis):
                if _metropolis(upd, state, rng) and not warm:
                    mh_accepted[upd.key] += 1
            elif upd.elementwise:
                _rw_elementwise(upd, state, adapters[upd.key], rng)
            else:
                _rw_componentwise(upd, state, adapters[upd.key], rng)
        if (t + 1) % config.batch == 0:
            for a in adapters.values():
                a.end_batch(adapt=warm)
        if t + 1 == config.warmup:
            for key, a in adapters.items():
                if config.warmup >= config.batch and not a.total_accepted.any():
                    raise SamplerError(f"every proposal for {key!r} was rejected during warmup")
                a.reset_totals()
        if not warm and (t + 1 - config.warmup) % config.thin == 0:
            kept.append(_trace(state, target.traced))
            lps.append(target.log_density(state))
    acceptance = {
        key: float(a.total_accepted.mean() / max(config.keep, 1)) for key, a in adapters.items()
    }
    acceptance.update({key: count / config.keep for key, count in mh_accepted.items()})
    return np.array(kept), np.array(lps), acceptance, state


def run_chain(target: Target, config: ChainConfig) -> PosteriorDraws:
    """Run ``config.n_chains`` chains on ``target`` and collect retained draws.

    Chain ``c`` draws from its own stream seeded by ``(config.seed, c)``, so
    results do not depend on how chains are scheduled.
    """
    chains = range(config.n_chains)
    if config.threads > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda c: _run_one(copy.deepcopy(target), config, c), chains))
    else:
        results = [_run_one(target, config, c) for c in chains]
    values = np.stack([r[0] for r in results])
    acceptance = {}
    for r in results:
        for key, rate in r[2].items():
            acceptance.setdefault(key, []).append(rate)
    return PosteriorDraws(
        names=target.param_names(),
        values=values,
        log_density=np.stack([r[1] for r in results]),
        acceptance=acceptance,
        final_states=[r[3] for r in results],
    )


@dataclass
class DiagnosticsReport:
    rhat: dict[str, float]
    ess: dict[str, float]
    acceptance: dict[str, list[float]]
    flagged: list[str]  # parameters whose statistics are undefined

    def max_rhat(self, prefixes: tuple[str, ...] = ()) -> float:
        vals = [v for k, v in self.rhat.items()
                if np.isfinite(v) and (not prefixes or k.startswith(prefixes))]
        return max(vals) if vals else float("nan")

    def summary(self) -> dict:
        finite_ess = [v for v in self.ess.values() if np.isfinite(v)]
        return {
            "max_rhat": self.max_rhat(),
            "min_ess": min(finite_ess) if finite_ess else None,
            "acceptance": self.acceptance,
            "flagged": self.flagged,
        }


def _split(x: np.ndarray) -> np.ndarray:
    """Split each chain of ``x`` (chain, draw) into two halves."""
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, -half:]], axis=0)


def split_rhat(x: np.ndarray) -> float:
    """Split potential scale reduction of draws ``x`` shaped (chain, draw)."""
    s = _split(np.asarray(x, dtype=float))
    n = s.shape[1]
    chain_var = s.var(axis=1, ddof=1)
    W = chain_var.mean()
    B = n * s.mean(axis=1).var(ddof=1)
    if not W > 0:
        return float("nan")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    ac = np.fft.irfft(f * np.conjugate(f), size, axis=-1)[..., :n]
    return ac / n


def effective_sample_size(x: np.ndarray) -> float:
    """Effective sample size of draws ``x`` shaped (chain, draw).

    Multi-chain autocorrelation estimate truncated with Geyer's initial
    monotone positive sequence.
    """
    s = _split(np.asarray(x, dtype=float))
    m, n = s.shape
    acov = _autocov(s)
    W = acov[:, 0].mean() * n / (n - 1)
    if not W > 0:
        return float("nan")
    B = n * s.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    rho = 1 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    pair_sums = []
    prev = np.inf
    for t in range(0, n - 1, 2):
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        p = min(p, prev)
        pair_sums.append(p)
        prev = p
    tau = -1 + 2 * sum(pair_sums)
    tau = max(tau, 1 / np.log10(m * n))
    return float(m * n / tau)


def diagnostics(draws: PosteriorDraws) -> DiagnosticsReport:
    if draws.n_chains < 2 or draws.n_draws < 50:
        raise ValueError(
            f"diagnostics need >= 2 chains and >= 50 draws, got "
            f"{draws.n_chains} x {draws.n_draws}"
        )
    rhat, ess, flagged = {}, {}, []
    for j, name in enumerate(draws.names):
        x = draws.values[:, :, j]
        rhat[name] = split_rhat(x)
        ess[name] = effective_sample_size(x)
        if not (np.isfinite(rhat[name]) and np.isfinite(ess[name])):
            flagged.append(name)
    return DiagnosticsReport(rhat, ess, dict(draws.acceptance), flagged)


def spaced_indices(n_total: int, m: int, min_gap: int = 1) -> np.ndarray:
    """Zero-based indices of ``m`` maximally spaced draws out of ``n_total``.

    Spacing is ``n_total // m`` and the last pick is the final draw's block
    end, e.g. 100 draws and m=4 give draws 25, 50, 75, 100 (one-based).
    """
    if m < 1:
        raise ValueError("m must be positive")
    gap = n_total // m
    if gap < max(min_gap, 1):
        raise ValueError(f"cannot select {m} draws spaced by >= {min_gap} from {n_total}")
    return gap * np.arange(1, m + 1) - 1


def select_parameter_sets(draws: PosteriorDraws, m: int, min_gap: int = 1) -> list[dict[str, float]]:
    flat = draws.flat()
    idx = spaced_indices(flat.shape[0], m, min_gap)
    return [dict(zip(draws.names, flat[i].tolist())) for i in idx]


def last_draws(draws: PosteriorDraws) -> list[dict[str, float]]:
    """Final retained draw of every chain (independent-chains mode)."""
    return [dict(zip(draws.names, draws.values[c, -1].tolist())) for c in range(draws.n_chains)]
