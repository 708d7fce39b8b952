"""Memory analyses on captured gate traces.

Long-term-memory channel identification from products of the forget gate,
causal ablation of those gates, positional recall curves, distractor and
hidden-state-init sweeps, and the delta / kernel response to periodic input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import GateTrace, HiddenInit, ModelParams, forward_batch, suffix_products, traces_from_cache
from .taskgen import PERIODS, RecallInstance, Vocab, gen_periodic, with_distractors

TARGETED = "zero_a"
RANDOM_BASELINE = "random_baseline"


# --------------------------------------------------------------------------
# memory coefficients and LTM identification


@dataclass
class MemoryCoefficients:
    """``values[layer, channel, n] = prod_{t=2..T} a_bar_t[channel, n]`` (1-based t)."""

    values: np.ndarray  # (layers, D, N)
    T: int

    def channel(self, layer, channel):
        return self.values[layer, channel]


def memory_coefficients(trace: GateTrace, T: int) -> MemoryCoefficients:
    if not 1 <= T <= len(trace):
        raise ContractViolation(f"T={T} outside trace of length {len(trace)}")
    # empty product for T = 1 gives ones
    return MemoryCoefficients(np.stack([np.prod(lt.a_bar[1:T], axis=0) for lt in trace.layers]), T)


def ltm_probability(values, tau):
    """Fraction of state entries whose coefficient exceeds ``tau`` (strictly)."""
    return (np.asarray(values) > tau).mean(axis=-1)


@dataclass
class LtmReport:
    tau: float
    p: float
    T: int | list
    aggregation: str
    n_probes: int
    n_channels: int
    channels: dict[int, list[tuple[int, float]]]  # layer -> [(channel, P)], P descending

    @property
    def density(self):
        return [len(self.channels[li]) for li in sorted(self.channels)]

    def selected(self):
        return {(li, ch) for li, chans in self.channels.items() for ch, _ in chans}

    def top_layers(self, n=3):
        """Up to ``n`` layers with the most qualifying channels (ties: lower index)."""
        ranked = sorted((li for li, c in self.channels.items() if c), key=lambda li: (-len(self.channels[li]), li))
        return ranked[:n]

    def targets(self, layers=None):
        layers = self.top_layers(len(self.channels)) if layers is None else layers
        return tuple((li, frozenset(ch for ch, _ in self.channels[li])) for li in layers if self.channels[li])

    def rows(self):
        for li in sorted(self.channels):
            for ch, prob in self.channels[li]:
                yield {"layer": li, "channel": ch, "ltm_probability": prob}


def identify_ltm(traces, tau, p, T=None, aggregate="mean") -> LtmReport:
    """Select channels whose LTM probability exceeds ``p``.

    ``T`` is the context length per trace (an int, a list, or ``None`` for the
    full trace). With ``aggregate="mean"`` the memory coefficients are averaged
    over all traces before thresholding; ``"single"`` uses only the first.
    """
    traces = list(traces)
    if not traces:
        raise ContractViolation("identify_ltm needs at least one trace")
    if not (0 <= tau <= 1 and 0 <= p <= 1):
        raise ConfigError("tau and p must lie in [0, 1]")
    if aggregate not in ("mean", "single"):
        raise ConfigError(f"unknown aggregation {aggregate!r}")
    if aggregate == "single":
        traces = traces[:1]
    if T is None:
        Ts = [len(tr) for tr in traces]
    elif isinstance(T, int):
        Ts = [T] * len(traces)
    else:
        Ts = list(T)[: len(traces)]
    M = np.mean([memory_coefficients(tr, t).values for tr, t in zip(traces, Ts)], axis=0)
    prob = ltm_probability(M, tau)  # (layers, D)
    channels = {}
    for li in range(prob.shape[0]):
        picked = [(int(ch), float(prob[li, ch])) for ch in np.flatnonzero(prob[li] > p)]
        channels[li] = sorted(picked, key=lambda c: (-c[1], c[0]))
    t_report = Ts[0] if len(set(Ts)) == 1 else Ts
    return LtmReport(float(tau), float(p), t_report, aggregate, len(traces), prob.shape[1], channels)


def ltm_grid(traces, taus=(0.5, 0.7, 0.9), ps=(0.5, 0.7, 0.9), T=None, aggregate="mean"):
    """``{(tau, p): LtmReport}`` over the grid."""
    return {(tau, p): identify_ltm(traces, tau, p, T, aggregate) for tau in taus for p in ps}


def grid_is_nested(grid):
    """Selections shrink as either tau or p grows."""
    taus = sorted({k[0] for k in grid})
    ps = sorted({k[1] for k in grid})
    for tau in taus:
        for lo, hi in zip(ps, ps[1:]):
            if not grid[(tau, hi)].selected() <= grid[(tau, lo)].selected():
                return False
    for p in ps:
        for lo, hi in zip(taus, taus[1:]):
            if not grid[(hi, p)].selected() <= grid[(lo, p)].selected():
                return False
    return True


# --------------------------------------------------------------------------
# interventions


@dataclass(frozen=True)
class InterventionSpec:
    """Zero ``a_bar`` for the listed (layer, channels) at ``timesteps``.

    ``timesteps=None`` means the token span of the first triple.
    """

    targets: tuple = ()
    timesteps: tuple | None = None
    mode: str = TARGETED
    seed: int | None = None

    @property
    def count(self):
        return sum(len(ch) for _, ch in self.targets)

    def label(self):
        if not self.targets:
            return "control"
        return "targeted" if self.mode == TARGETED else "random"

    @classmethod
    def from_report(cls, report: LtmReport, n_layers=3, timesteps=None):
        return cls(report.targets(report.top_layers(n_layers)), timesteps)

    def validate(self, config, seq_len, context_len):
        for li, chans in self.targets:
            if not 0 <= li < config.n_layers:
                raise ContractViolation(f"intervention layer {li} does not exist")
            for ch in chans:
                if not 0 <= ch < config.d_model:
                    raise ContractViolation(f"intervention channel {ch} does not exist")
        if self.timesteps is not None:
            for t in self.timesteps:
                if not 0 <= t < min(seq_len, context_len):
                    raise ContractViolation(f"intervention timestep {t} outside the context")


def random_baseline(spec: InterventionSpec, d_model: int, seed: int) -> InterventionSpec:
    """Same layers and per-layer channel counts as ``spec``, channels drawn at
    random from those not targeted (falling back to any channel if needed)."""
    rng = np.random.default_rng(seed)
    targets = []
    for li, chans in spec.targets:
        pool = np.array([c for c in range(d_model) if c not in chans])
        if len(pool) < len(chans):
            pool = np.arange(d_model)
        drawn = rng.choice(pool, size=len(chans), replace=False) if len(chans) else []
        targets.append((li, frozenset(int(c) for c in drawn)))
    return InterventionSpec(tuple(targets), spec.timesteps, RANDOM_BASELINE, seed)


def ablation_masks(spec: InterventionSpec, instances, config):
    """``{layer: (B, T, D) bool}`` for a batch of equal-length instances."""
    if not spec.targets:
        return None
    seq_len = len(instances[0])
    masks = {}
    for b, inst in enumerate(instances):
        ctx_len = len(inst.context_tokens) if isinstance(inst, RecallInstance) else seq_len
        spec.validate(config, seq_len, ctx_len)
        steps = spec.timesteps if spec.timesteps is not None else inst.triple_span(1)
        for li, chans in spec.targets:
            m = masks.setdefault(li, np.zeros((len(instances), seq_len, config.d_model), dtype=bool))
            for t in steps:
                m[b, t, list(chans)] = True
    return masks


def intervene_forward(params: ModelParams, instance: RecallInstance, spec: InterventionSpec, init=None):
    """Logits (T, V) with ``a_bar`` zeroed at the intervention targets."""
    logits, _ = forward_batch(params, instance.tokens[None], init, ablation_masks(spec, [instance], params.config))
    return logits[0]


# --------------------------------------------------------------------------
# positional accuracy


def wilson_interval(correct, total, z=1.959963984540054):
    if total == 0:
        return (0.0, 1.0)
    phat = correct / total
    denom = 1 + z * z / total
    centre = (phat + z * z / (2 * total)) / denom
    half = z * math.sqrt(phat * (1 - phat) / total + z * z / (4 * total * total)) / denom
    lo = 0.0 if correct == 0 else max(0.0, centre - half)
    hi = 1.0 if correct == total else min(1.0, centre + half)
    return (lo, hi)


@dataclass
class PositionalAccuracy:
    L: int
    counts: dict[int, tuple[int, int]]  # k -> (correct, total)
    condition: dict = field(default_factory=dict)

    def accuracy(self, k):
        c, t = self.counts[k]
        return c / t

    def interval(self, k):
        return wilson_interval(*self.counts[k])

    @property
    def accuracies(self):
        return {k: self.accuracy(k) for k in sorted(self.counts)}

    def mean(self):
        c = sum(v[0] for v in self.counts.values())
        t = sum(v[1] for v in self.counts.values())
        return c / t if t else float("nan")

    def rows(self):
        for k in sorted(self.counts):
            c, t = self.counts[k]
            lo, hi = self.interval(k)
            yield {**self.condition, "L": self.L, "position": k, "correct": c, "total": t,
                   "accuracy": c / t, "ci_low": lo, "ci_high": hi}


def _by_length(instances):
    groups = {}
    for inst in instances:
        groups.setdefault(len(inst), []).append(inst)
    return [groups[k] for k in sorted(groups)]


def eval_recall_curve(params, dataset, spec: InterventionSpec | None = None, init: HiddenInit | None = None,
                      batch_size=256, condition=None) -> PositionalAccuracy:
    """Greedy top-1 accuracy of the answer token, per target position.

    ``params`` may also be a callable mapping a (B, T) token array to logits,
    in which case ``spec`` and ``init`` must be left unset.
    """
    dataset = list(dataset)
    depths = {inst.L for inst in dataset}
    if len(depths) != 1:
        raise ContractViolation(f"dataset mixes depths {sorted(depths)}")
    if callable(params) and (spec is not None or init is not None):
        raise ConfigError("a callable model cannot take interventions or a hidden init")
    spec = spec or InterventionSpec()
    counts = {}
    for group in _by_length(dataset):
        for s in range(0, len(group), batch_size):
            chunk = group[s : s + batch_size]
            tokens = np.stack([i.tokens for i in chunk])
            if callable(params):
                logits = params(tokens)
            else:
                logits, _ = forward_batch(params, tokens, init, ablation_masks(spec, chunk, params.config))
            pred = logits[:, -1].argmax(axis=-1)
            for inst, guess in zip(chunk, pred):
                c, t = counts.get(inst.k, (0, 0))
                counts[inst.k] = (c + int(guess == inst.gold_object), t + 1)
    first = dataset[0]
    cond = {
        "relation_mode": first.relation_mode,
        "n_distractors": first.n_distractors,
        "intervention": spec.label(),
        "init": (init or HiddenInit.zero()).label(),
    }
    cond.update(condition or {})
    return PositionalAccuracy(first.L, dict(sorted(counts.items())), cond)


def distractor_sweep(params, dataset, vocab: Vocab, n_values=(0, 4, 16), init=None):
    """One curve per distractor count; the triples stay fixed across counts."""
    out = {}
    for n in n_values:
        if n < 0:
            raise ConfigError("distractor counts must be >= 0")
        variant = [with_distractors(inst, vocab, n) for inst in dataset]
        out[n] = eval_recall_curve(params, variant, init=init)
    return out


def init_sweep(params, dataset, seed=0):
    """Zero init plus U[0, 1) init at each layer in turn."""
    curves = {"zero": eval_recall_curve(params, dataset)}
    for li in range(params.config.n_layers):
        init = HiddenInit.uniform(li, seed)
        curves[init.label()] = eval_recall_curve(params, dataset, init=init)
    return curves


# --------------------------------------------------------------------------
# traces


def collect_traces(params, instances_or_tokens, init=None, ablate=None):
    """Gate traces for equal-length sequences (instances or token arrays)."""
    seqs = [i.tokens if isinstance(i, RecallInstance) else np.asarray(i) for i in instances_or_tokens]
    _, cache = forward_batch(params, np.stack(seqs), init, ablate)
    return traces_from_cache(params, cache)


def context_length(instance: RecallInstance):
    """Tokens before the query: the ``T`` of the memory coefficient."""
    return instance.query_start


# --------------------------------------------------------------------------
# delta dynamics and kernels


def trace_kernel_profile(trace: GateTrace, t=None):
    """Mean over layers and channels of ``|c_t . (prod a_bar) b_bar_j|`` for j = 0..t."""
    t = len(trace) - 1 if t is None else t
    per_layer = []
    for lt in trace.layers:
        prods = suffix_products(lt.a_bar, t)  # (t+1, D, N)
        w = np.einsum("jdn,jdn,n->jd", prods, lt.b_bar[: t + 1], lt.c[t])
        per_layer.append(np.abs(w).mean(axis=1))
    return np.mean(per_layer, axis=0)


def kernel_profile(params, sequences):
    """Average kernel magnitude per input position toward the final token."""
    traces = collect_traces(params, [s.tokens if hasattr(s, "tokens") else s for s in sequences])
    return np.mean([trace_kernel_profile(tr) for tr in traces], axis=0)


def autocorrelation(series, lag):
    x = np.asarray(series, dtype=np.float64)
    if lag <= 0 or lag >= len(x):
        return float("nan")
    x = x - x.mean()
    denom = float((x * x).sum())
    if denom == 0:
        return float("nan")
    return float((x[:-lag] * x[lag:]).sum() / denom)


@dataclass
class DeltaStats:
    periods: list[int]
    per_position: dict[int, np.ndarray]  # period -> (layers, T) mean delta over channels and seeds
    global_mean: dict[int, float]
    kernel_profiles: dict[int, np.ndarray]  # period -> (T,)
    n_seeds: int

    def autocorr(self, period, layer, lag):
        return autocorrelation(self.per_position[period][layer], lag)

    def rows(self):
        for k in self.periods:
            pp = self.per_position[k]
            for li in range(pp.shape[0]):
                for t in range(pp.shape[1]):
                    yield {"period": k, "layer": li, "position": t, "mean_delta": pp[li, t]}


def delta_period_scan(params, vocab: Vocab, periods=PERIODS, seeds=range(8), length=64):
    """Streaming delta and kernel statistics over periodic inputs.

    Traces are discarded after each sequence; only running sums are kept.
    """
    seeds = list(seeds)
    n_layers = params.config.n_layers
    per_position, global_mean, kernels = {}, {}, {}
    for k in periods:
        sum_pos = np.zeros((n_layers, length))
        sum_kernel = np.zeros(length)
        for seed in seeds:
            seq = gen_periodic(vocab, k, seed, length)
            (tr,) = collect_traces(params, [np.array(seq.tokens)])
            for li, lt in enumerate(tr.layers):
                sum_pos[li] += lt.delta.mean(axis=1)
            sum_kernel += trace_kernel_profile(tr)
        per_position[k] = sum_pos / len(seeds)
        global_mean[k] = float(per_position[k].mean())
        kernels[k] = sum_kernel / len(seeds)
    return DeltaStats(list(periods), per_position, global_mean, kernels, len(seeds))


def delta_stats_from_traces(traces_by_period):
    """Two-pass recomputation of ``DeltaStats`` from stored traces."""
    per_position, global_mean, kernels = {}, {}, {}
    n = 0
    for k, traces in traces_by_period.items():
        stacked = np.stack([[lt.delta for lt in tr.layers] for tr in traces])  # (S, layers, T, D)
        per_position[k] = stacked.mean(axis=(0, 3))
        global_mean[k] = float(stacked.mean())
        kernels[k] = np.mean([trace_kernel_profile(tr) for tr in traces], axis=0)
        n = len(traces)
    return DeltaStats(list(traces_by_period), per_position, global_mean, kernels, n)


def periodic_traces(params, vocab, periods=PERIODS, seeds=range(8), length=64):
    return {
        k: collect_traces(params, [np.array(gen_periodic(vocab, k, s, length).tokens) for s in seeds])
        for k in periods
    }


def monotone_fraction(values):
    """Fraction of consecutive pairs that do not decrease."""
    v = list(values)
    if len(v) < 2:
        return float("nan")
    return sum(b >= a for a, b in zip(v, v[1:])) / (len(v) - 1)
