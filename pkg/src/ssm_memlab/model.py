"""Toy selective state-space model.

Each layer RMS-normalizes the residual stream (no learned scale) and runs a
diagonal selective recurrence on the result ``x_t``::

    delta_t = softplus(x_t @ w_delta_down @ w_delta_up + b_delta)     (D,)
    a_bar_t = exp(delta_t[:, None] * A),  A = -exp(a_log)             (D, N)
    b_bar_t = delta_t[:, None] * (x_t @ w_B)[None, :]                 (D, N)
    c_t     = x_t @ w_C                                               (N,)
    h_t     = a_bar_t * h_{t-1} + b_bar_t * x_t[:, None]
    y_t     = h_t @ c_t + d_skip * x_t
    resid  <- resid + y_t

Embedding in, linear unembedding out. No convolution, no output gate: the
recurrence is the whole block. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractViolation, NumericalInputError, VocabularyError, ConfigError

LAYER_FIELDS = (
    "a_log",
    "w_B",
    "w_C",
    "w_delta_down",
    "w_delta_up",
    "b_delta",
    "d_skip",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_state: int = 16
    n_layers: int = 2
    delta_rank: int = 8
    seed: int = 0
    # "zero" or "mamba" (log-uniform step sizes in [dt_min, dt_max])
    delta_bias_init: str = "mamba"
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_state", "n_layers", "delta_rank"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.delta_rank > self.d_model:
            raise ConfigError("delta_rank must not exceed d_model")
        if self.delta_bias_init not in ("zero", "mamba"):
            raise ConfigError(f"unknown delta_bias_init {self.delta_bias_init!r}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ConfigError("need 0 < dt_min <= dt_max")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LayerParams:
    a_log: np.ndarray  # (D, N)
    w_B: np.ndarray  # (D, N)
    w_C: np.ndarray  # (D, N)
    w_delta_down: np.ndarray  # (D, R)
    w_delta_up: np.ndarray  # (R, D)
    b_delta: np.ndarray  # (D,)
    d_skip: np.ndarray  # (D,)

    @property
    def A(self):
        return -np.exp(self.a_log)


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray  # (V, D)
    layers: list[LayerParams]
    unembedding: np.ndarray  # (D, V)

    def named(self):
        """Yield ``(name, array)`` in the canonical (checkpoint) order."""
        yield "embedding", self.embedding
        for li, lp in enumerate(self.layers):
            for f in LAYER_FIELDS:
                yield f"layers.{li}.{f}", getattr(lp, f)
        yield "unembedding", self.unembedding

    def shapes(self):
        return {name: arr.shape for name, arr in self.named()}

    @classmethod
    def from_named(cls, config, arrays):
        """Build from ``{name: array}`` (copied); shapes must match ``config``."""
        for name, shape in expected_shapes(config).items():
            if name not in arrays:
                raise ConfigError(f"missing array {name}")
            if np.shape(arrays[name]) != shape:
                raise ConfigError(f"{name} has shape {np.shape(arrays[name])}, config expects {shape}")
        layers = [
            LayerParams(**{f: np.array(arrays[f"layers.{li}.{f}"], dtype=np.float64) for f in LAYER_FIELDS})
            for li in range(config.n_layers)
        ]
        return cls(
            config,
            np.array(arrays["embedding"], dtype=np.float64),
            layers,
            np.array(arrays["unembedding"], dtype=np.float64),
        )

    def copy(self):
        return ModelParams.from_named(self.config, {k: v.copy() for k, v in self.named()})

    def zeros_like(self):
        return ModelParams.from_named(self.config, {k: np.zeros_like(v) for k, v in self.named()})


def expected_shapes(config):
    d, n, r, v = config.d_model, config.n_state, config.delta_rank, config.vocab_size
    per_layer = {
        "a_log": (d, n),
        "w_B": (d, n),
        "w_C": (d, n),
        "w_delta_down": (d, r),
        "w_delta_up": (r, d),
        "b_delta": (d,),
        "d_skip": (d,),
    }
    shapes = {"embedding": (v, d)}
    for li in range(config.n_layers):
        for f in LAYER_FIELDS:
            shapes[f"layers.{li}.{f}"] = per_layer[f]
    shapes["unembedding"] = (d, v)
    return shapes


def inverse_softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return x + np.log(-np.expm1(-x))


def init_params(config: ModelConfig) -> ModelParams:
    """Draw initial parameters; fully determined by ``config``."""
    rng = np.random.default_rng(config.seed)
    d, n, r, v = config.d_model, config.n_state, config.delta_rank, config.vocab_size
    layers = []
    for _ in range(config.n_layers):
        # -exp(a_log) = -1, -2, ..., -N on every channel
        a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1))
        if config.delta_bias_init == "mamba":
            dt = np.exp(rng.uniform(np.log(config.dt_min), np.log(config.dt_max), size=d))
            b_delta = inverse_softplus(dt)
        else:
            b_delta = np.zeros(d)
        layers.append(
            LayerParams(
                a_log=a_log,
                w_B=rng.normal(0.0, d**-0.5, (d, n)),
                w_C=rng.normal(0.0, d**-0.5, (d, n)),
                w_delta_down=rng.normal(0.0, d**-0.5, (d, r)),
                w_delta_up=rng.normal(0.0, 0.5 * r**-0.5, (r, d)),
                b_delta=b_delta,
                d_skip=np.ones(d),
            )
        )
    return ModelParams(
        config,
        embedding=rng.normal(0.0, 1.0, (v, d)),
        layers=layers,
        unembedding=rng.normal(0.0, 1.0 / d, (d, v)),
    )


def softplus(z):
    """Overflow-safe ``log(1 + exp(z))``."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# --------------------------------------------------------------------------
# single-step API


@dataclass
class StepGates:
    delta: np.ndarray  # (D,)
    a_bar: np.ndarray  # (D, N)
    b_bar: np.ndarray  # (D, N)
    c: np.ndarray  # (N,)


def _layer(params, layer):
    if not 0 <= layer < len(params.layers):
        raise ContractViolation(f"layer {layer} out of range for {len(params.layers)} layers")
    return params.layers[layer]


def compute_gates(params: ModelParams, layer: int, x_t) -> StepGates:
    """Input-dependent gates for one token at one layer."""
    lp = _layer(params, layer)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (params.config.d_model,):
        raise ContractViolation(f"x_t has shape {x_t.shape}, expected ({params.config.d_model},)")
    if not np.all(np.isfinite(x_t)):
        raise NumericalInputError("x_t contains non-finite values")
    delta = softplus(x_t @ lp.w_delta_down @ lp.w_delta_up + lp.b_delta)
    a_bar = np.exp(delta[:, None] * lp.A)
    b_bar = delta[:, None] * (x_t @ lp.w_B)[None, :]
    c = x_t @ lp.w_C
    return StepGates(delta, a_bar, b_bar, c)


def scan_step(h_prev, gates: StepGates, x_t, d_skip):
    """One recurrence step; returns ``(h_t, y_t)``."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    d_skip = np.asarray(d_skip, dtype=np.float64)
    d, n = gates.a_bar.shape
    if (
        h_prev.shape != (d, n)
        or gates.b_bar.shape != (d, n)
        or gates.c.shape != (n,)
        or x_t.shape != (d,)
        or d_skip.shape != (d,)
    ):
        raise ContractViolation("scan_step shapes are inconsistent")
    h_t = gates.a_bar * h_prev + gates.b_bar * x_t[:, None]
    y_t = h_t @ gates.c + d_skip * x_t
    return h_t, y_t


# --------------------------------------------------------------------------
# sequence API


@dataclass(frozen=True)
class HiddenInit:
    """Initial recurrent state: all zeros, or U[0, 1) at a single layer."""

    mode: str = "zero"
    layer: int | None = None
    seed: int | None = None

    @classmethod
    def zero(cls):
        return cls()

    @classmethod
    def uniform(cls, layer, seed):
        return cls("uniform", int(layer), int(seed))

    def state(self, layer, d, n):
        if self.mode == "zero" or layer != self.layer:
            return np.zeros((d, n))
        if self.mode != "uniform":
            raise ConfigError(f"unknown init mode {self.mode!r}")
        return np.random.default_rng(self.seed).random((d, n))

    def label(self):
        return "zero" if self.mode == "zero" else f"uniform@L{self.layer}"


@dataclass
class LayerTrace:
    """Everything recorded for one layer over one sequence."""

    x: np.ndarray  # (T, D) layer input
    delta: np.ndarray  # (T, D)
    a_bar: np.ndarray  # (T, D, N)
    b_bar: np.ndarray  # (T, D, N)
    c: np.ndarray  # (T, N)
    h: np.ndarray  # (T, D, N)
    h0: np.ndarray  # (D, N)
    y: np.ndarray  # (T, D) including the skip term
    d_skip: np.ndarray  # (D,)

    def gates(self, t):
        return StepGates(self.delta[t], self.a_bar[t], self.b_bar[t], self.c[t])


@dataclass
class GateTrace:
    tokens: np.ndarray
    layers: list[LayerTrace] = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)

    def replay(self, layer):
        """Re-run the recurrence from the recorded gates; returns (h, y)."""
        lt = self.layers[layer]
        h = lt.h0
        hs, ys = [], []
        for t in range(len(self)):
            h, y = scan_step(h, lt.gates(t), lt.x[t], lt.d_skip)
            hs.append(h)
            ys.append(y)
        return np.stack(hs), np.stack(ys)


@dataclass
class LayerCache:
    rms: np.ndarray  # (B, T, 1) norm of the residual input
    u: np.ndarray
    r: np.ndarray
    z: np.ndarray
    delta: np.ndarray
    a_bar: np.ndarray
    bp: np.ndarray
    cp: np.ndarray
    h: np.ndarray
    h0: np.ndarray  # (B, D, N)
    y: np.ndarray

    @property
    def b_bar(self):
        return self.delta[..., None] * self.bp[:, :, None, :]


@dataclass
class ForwardCache:
    tokens: np.ndarray
    layers: list[LayerCache]
    final: np.ndarray  # (B, T, D) residual stream after the last layer


def check_tokens(params, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractViolation("tokens must be a (batch, time) array")
    if tokens.shape[1] == 0:
        raise ContractViolation("empty token sequence")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise VocabularyError("token ids must be integers")
    v = params.config.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= v):
        bad = tokens[(tokens < 0) | (tokens >= v)].ravel()[0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {v}")
    return tokens.astype(np.int64)


RMS_EPS = 1e-6


def rms_norm(x):
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    return x / rms, rms


def layer_forward(lp: LayerParams, resid, h0, ablate=None):
    """Batched forward of one layer on the residual stream ``resid`` (B, T, D).

    ``ablate`` is a boolean mask broadcastable to (B, T, D) marking where
    a_bar is zeroed."""
    u, rms = rms_norm(resid)
    r = u @ lp.w_delta_down
    z = r @ lp.w_delta_up + lp.b_delta
    delta = softplus(z)
    a_bar = np.exp(delta[..., None] * lp.A)
    if ablate is not None:
        a_bar[np.broadcast_to(ablate, delta.shape)] = 0.0
    bp = u @ lp.w_B
    cp = u @ lp.w_C
    h0 = np.broadcast_to(h0, (u.shape[0],) + h0.shape)
    h, y_state = kernels.layer_forward(a_bar, delta, bp, cp, u, h0)
    y = y_state + lp.d_skip * u
    return LayerCache(rms, u, r, z, delta, a_bar, bp, cp, h, np.ascontiguousarray(h0), y)


def forward_batch(params: ModelParams, tokens, init: HiddenInit | None = None, ablate=None):
    """Batched forward; returns ``(logits (B, T, V), ForwardCache)``.

    ``ablate`` maps layer index to a boolean mask broadcastable to (B, T, D).
    """
    tokens = check_tokens(params, tokens)
    init = init or HiddenInit.zero()
    cfg = params.config
    x = params.embedding[tokens]
    caches = []
    for li, lp in enumerate(params.layers):
        mask = None if ablate is None else ablate.get(li)
        cache = layer_forward(lp, x, init.state(li, cfg.d_model, cfg.n_state), mask)
        caches.append(cache)
        x = x + cache.y
    logits = x @ params.unembedding
    return logits, ForwardCache(tokens, caches, x)


def traces_from_cache(params, cache: ForwardCache):
    out = []
    for b in range(cache.tokens.shape[0]):
        tr = GateTrace(cache.tokens[b].copy())
        for lp, lc in zip(params.layers, cache.layers):
            tr.layers.append(
                LayerTrace(
                    x=lc.u[b],
                    delta=lc.delta[b],
                    a_bar=lc.a_bar[b],
                    b_bar=lc.b_bar[b],
                    c=lc.cp[b],
                    h=lc.h[b],
                    h0=lc.h0[b],
                    y=lc.y[b],
                    d_skip=lp.d_skip,
                )
            )
        out.append(tr)
    return out


def forward(params: ModelParams, tokens, init: HiddenInit | None = None, capture=False, ablate=None):
    """Single-sequence forward. Returns ``(logits (T, V), GateTrace | None)``."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ContractViolation("forward expects a 1-D token sequence")
    if ablate is not None:
        ablate = {k: np.asarray(v)[None] if np.ndim(v) == 2 else v for k, v in ablate.items()}
    logits, cache = forward_batch(params, tokens[None], init, ablate)
    trace = traces_from_cache(params, cache)[0] if capture else None
    return logits[0], trace


# --------------------------------------------------------------------------
# kernel (unrolled) view


@dataclass
class KernelTerms:
    """Per-position decomposition of one channel's readout at time ``t``.

    ``weights[j]`` is ``c_t . (prod_{k=j+1..t} a_bar_k) * b_bar_j``;
    ``contributions[j] = weights[j] * x_j``. ``initial`` is the part carried
    by a non-zero initial state, ``skip`` the ``d_skip * x_t`` term.
    """

    weights: np.ndarray
    contributions: np.ndarray
    initial: float
    skip: float

    @property
    def magnitudes(self):
        return np.abs(self.contributions)

    def reconstruct(self):
        return float(self.contributions.sum() + self.initial + self.skip)


def suffix_products(a_bar, t):
    """``P[j] = prod_{k=j+1..t} a_bar[k]`` for j = 0..t (empty product = 1).

    ``a_bar`` has time on axis 0; the result has shape ``(t + 1,) + a_bar.shape[1:]``.
    """
    tail = a_bar[1 : t + 1][::-1]
    ones = np.ones((1,) + a_bar.shape[1:])
    return np.concatenate([ones, np.cumprod(tail, axis=0)])[::-1]


def unroll_kernel(trace: GateTrace | None, layer: int, channel: int, t: int) -> KernelTerms:
    if trace is None or not trace.layers:
        raise ContractViolation("unroll_kernel needs a captured trace")
    if not 0 <= layer < len(trace.layers):
        raise ContractViolation(f"layer {layer} not in trace")
    lt = trace.layers[layer]
    if not 0 <= t < len(trace):
        raise ContractViolation(f"timestep {t} outside trace of length {len(trace)}")
    if not 0 <= channel < lt.a_bar.shape[1]:
        raise ContractViolation(f"channel {channel} out of range")
    a = lt.a_bar[:, channel, :]  # (T, N)
    prods = suffix_products(a, t)  # (t+1, N)
    weights = (prods * lt.b_bar[: t + 1, channel, :]) @ lt.c[t]
    contributions = weights * lt.x[: t + 1, channel]
    full = np.prod(a[: t + 1], axis=0)
    initial = float(lt.c[t] @ (full * lt.h0[channel]))
    skip = float(lt.d_skip[channel] * lt.x[t, channel])
    return KernelTerms(weights, contributions, initial, skip)

