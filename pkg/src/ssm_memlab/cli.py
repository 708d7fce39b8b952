"""Command-line entry point.

    ssm-memlab gen ...
    ssm-memlab train ...
    ssm-memlab analyze {curve,ltm,intervene,distract,delta,kernel,init-sweep,grid} ...
    ssm-memlab gradcheck
    ssm-memlab selftest

Every run resolves its parameters (flag > ``--config`` file > default),
writes the resolved snapshot next to its outputs, and names outputs
``<stem>_<confighash>_s<seed>.<ext>``. Rerunning with ``--config`` pointing
at a snapshot reproduces the outputs byte for byte.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import memlab, report
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractViolation, NumericalFailure, VocabularyError
from .model import ModelConfig, init_params
from .taskgen import PERIODS, Vocab, default_vocab, gen_dataset, save_dataset
from .train import LOG_COLUMNS, TrainConfig, train_loop

log = logging.getLogger("ssm_memlab")

OUT_ENV = "SSM_MEMLAB_OUT"
ANALYSES = ("curve", "ltm", "intervene", "distract", "delta", "kernel", "init-sweep", "grid")

DATA_DEFAULTS = {
    "vocab": None,
    "vocab_size": 64,
    "depth": [8],
    "mode": "repeated",
    "samples": 50,
    "distractors": 0,
    "data_seed": 0,
}

DEFAULTS = {
    "gen": {**DATA_DEFAULTS, "seed": 0},
    "train": {
        **DATA_DEFAULTS,
        "dataset": None,
        "samples": 50,
        "d_model": 64,
        "n_state": 16,
        "layers": 2,
        "delta_rank": 8,
        "delta_bias_init": "mamba",
        "steps": 2000,
        "lr": 3e-3,
        "optimizer": "adam",
        "batch_size": 32,
        "clip": 1.0,
        "loss_positions": "answer",
        "eval_interval": 250,
        "target_accuracy": None,
        "seed": 0,
    },
    "analyze": {
        **DATA_DEFAULTS,
        "checkpoint": None,
        "data_seed": 12345,
        "tau": 0.7,
        "p": 0.7,
        "probes": 16,
        "aggregate": "mean",
        "top_layers": 3,
        "targets": "ltm",
        "n": [0, 4, 16],
        "periods": list(PERIODS),
        "n_seeds": 8,
        "init_seed": 0,
        "seed": 0,
    },
    "gradcheck": {"configs": 10, "h": 1e-5, "tol": 1e-4, "seed": 0},
    "selftest": {"seed": 0},
}

# keys that locate files rather than define results; left out of the hash
NON_SEMANTIC = {"checkpoint", "dataset", "vocab"}


def _ints(s):
    return [int(x) for x in str(s).split(",") if x.strip()]


def build_parser():
    ap = argparse.ArgumentParser(prog="ssm-memlab", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config or resolved snapshot")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int)

    def data(p):
        p.add_argument("--vocab", help="vocabulary JSON (default: built-in layout)")
        p.add_argument("--vocab-size", type=int)
        p.add_argument("--depth", type=_ints, help="comma-separated depths L")
        p.add_argument("--mode", choices=("repeated", "random", "both"))
        p.add_argument("--samples", type=int, help="instances per position")
        p.add_argument("--distractors", type=int)
        p.add_argument("--data-seed", type=int)

    p = sub.add_parser("gen", help="generate a recall dataset")
    common(p)
    data(p)

    p = sub.add_parser("train", help="train a toy model")
    common(p)
    data(p)
    p.add_argument("--dataset", help="JSONL dataset (default: generate from the data flags)")
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-state", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--delta-rank", type=int)
    p.add_argument("--delta-bias-init", choices=("zero", "mamba"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--loss-positions", choices=("answer", "all"))
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--target-accuracy", type=float)

    p = sub.add_parser("analyze", help="run one analysis on a checkpoint")
    p.add_argument("analysis", choices=ANALYSES)
    common(p)
    data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--tau", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--probes", type=int)
    p.add_argument("--aggregate", choices=("mean", "single"))
    p.add_argument("--top-layers", type=int)
    p.add_argument("--targets", choices=("ltm", "none"))
    p.add_argument("--n", type=_ints, help="comma-separated distractor counts")
    p.add_argument("--periods", type=_ints)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--init-seed", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on random tiny models")
    common(p)
    p.add_argument("--configs", type=int)
    p.add_argument("--h", type=float)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("selftest", help="fast oracle checks of the core numerics")
    common(p)
    return ap


# --------------------------------------------------------------------------
# config resolution


class Run:
    """Resolved parameters plus output naming for one invocation."""

    def __init__(self, command, params, out_dir, analysis=None):
        self.command = command
        self.analysis = analysis
        self.params = params
        self.out = Path(out_dir)
        semantic = {k: v for k, v in params.items() if k not in NON_SEMANTIC}
        # input files enter the hash by content, not by path
        for key in sorted(NON_SEMANTIC):
            if params.get(key) and Path(params[key]).is_file():
                semantic[f"{key}_sha256"] = hashlib.sha256(Path(params[key]).read_bytes()).hexdigest()
        self.hash = report.config_hash({"command": command, "analysis": analysis, **semantic})
        self.seed = params["seed"]

    def __getitem__(self, key):
        return self.params[key]

    def path(self, stem, ext):
        return self.out / f"{stem}_{self.hash}_s{self.seed}.{ext}"

    @property
    def stem(self):
        return self.analysis.replace("-", "_") if self.analysis else self.command

    @property
    def footer(self):
        return f"config {self.hash} | seed {self.seed}"

    def snapshot(self):
        self.out.mkdir(parents=True, exist_ok=True)
        snap = {"command": self.command, "analysis": self.analysis, "params": self.params}
        path = self.path(self.stem, "config.json")
        path.write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n")
        return path


def resolve(args):
    command = args.command
    analysis = getattr(args, "analysis", None)
    params = dict(DEFAULTS[command])
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ConfigError(f"config file {cfg_path} not found")
        loaded = json.loads(cfg_path.read_text())
        loaded = loaded.get("params", loaded)
        unknown = set(loaded) - set(params)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        params.update(loaded)
    for key in params:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    out = args.out or os.environ.get(OUT_ENV) or "runs"
    return Run(command, params, out, analysis)


def load_vocab(run, fallback_size=None):
    if run["vocab"]:
        path = Path(run["vocab"])
        if not path.exists():
            raise ConfigError(f"vocabulary file {path} not found")
        return Vocab.load(path)
    return default_vocab(fallback_size or run["vocab_size"])


def make_data(run, vocab, modes=None, seed=None):
    modes = modes or (("repeated", "random") if run["mode"] == "both" else (run["mode"],))
    seed = run["data_seed"] if seed is None else seed
    out = []
    for mode in modes:
        out += gen_dataset(vocab, run["depth"], run["samples"], mode, seed, run["distractors"])
    return out


# --------------------------------------------------------------------------
# commands


def cmd_gen(run):
    vocab = load_vocab(run)  # fails before anything is written
    data = make_data(run, vocab)
    run.snapshot()
    path = run.path("dataset", "jsonl")
    save_dataset(path, data, vocab)
    print(f"wrote {len(data)} instances to {path}")
    return path


def cmd_train(run):
    vocab = load_vocab(run)
    if run["dataset"]:
        from .taskgen import load_dataset

        data = load_dataset(run["dataset"])
    else:
        data = make_data(run, vocab)
    modes = sorted({i.relation_mode for i in data})
    # with both modes present each is tracked (and must reach the target) on its own
    per_mode = {m: [i for i in data if i.relation_mode == m] for m in modes} if len(modes) > 1 else {}
    mcfg = ModelConfig(
        vocab_size=vocab.size,
        d_model=run["d_model"],
        n_state=run["n_state"],
        n_layers=run["layers"],
        delta_rank=run["delta_rank"],
        seed=run["seed"],
        delta_bias_init=run["delta_bias_init"],
    )
    tcfg = TrainConfig(
        lr=run["lr"],
        optimizer=run["optimizer"],
        batch_size=run["batch_size"],
        steps=run["steps"],
        clip=run["clip"],
        loss_positions=run["loss_positions"],
        eval_interval=run["eval_interval"],
        seed=run["seed"],
        target_accuracy=run["target_accuracy"],
    )
    run.snapshot()
    log_path = run.path("train_log", "csv")
    if log_path.exists():
        log_path.unlink()  # a rerun replaces, never appends to, its own log
    result = train_loop(init_params(mcfg), tcfg, data, per_mode, log_path, stop_sets=list(per_mode) or None)
    paths = []
    for ck in result.history:
        accuracy = {name: {str(k): v for k, v in acc.items()} for name, acc in ck.eval_accuracy.items()}
        meta = {"train_loss": ck.train_loss, "accuracy": accuracy, "vocab": vocab.to_dict()}
        path = run.path(f"checkpoint_step{ck.step:06d}", "ckpt")
        save_checkpoint(path, ck.params, ck.step, meta, ck.optimizer_state)
        paths.append(path)
    final = result.last
    accs = " ".join(f"{name} {np.mean(list(a.values())):.3f}" for name, a in final.eval_accuracy.items())
    print(f"step {final.step}: loss {final.train_loss:.4f}, accuracy {accs}")
    print(f"checkpoint: {paths[-1]}")
    print(f"log: {log_path}")
    if result.diverged:
        raise NumericalFailure(f"training diverged: {result.message}")
    return paths[-1]


def _load_model(run):
    if not run["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    path = Path(run["checkpoint"])
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    ck = load_checkpoint(path)
    if run["vocab"]:
        vocab = load_vocab(run)
    elif "vocab" in ck.meta:
        vocab = Vocab.from_dict(ck.meta["vocab"])
    else:
        vocab = default_vocab(ck.params.config.vocab_size)
    if vocab.size != ck.params.config.vocab_size:
        raise ConfigError("vocabulary size does not match the checkpoint")
    return ck.params, vocab


def _modes(run):
    return ("repeated", "random") if run["mode"] == "both" else (run["mode"],)


def _eval_sets(run, vocab):
    """``{(mode, L): instances}`` for the evaluation data."""
    sets = {}
    for mode in _modes(run):
        for L in run["depth"]:
            sets[(mode, L)] = gen_dataset(vocab, [L], run["samples"], mode, run["data_seed"], run["distractors"])
    return sets


def _curve_rows(curves):
    rows = []
    for c in curves:
        rows += list(c.rows())
    return rows


CURVE_COLUMNS = ["relation_mode", "n_distractors", "intervention", "init", "L", "position", "correct", "total",
                 "accuracy", "ci_low", "ci_high"]


def _curve_svg(run, curves, name_fn, title):
    series, bands = {}, {}
    for c in curves:
        name = name_fn(c)
        ks = sorted(c.counts)
        series[name] = (ks, [c.accuracy(k) for k in ks])
        bands[name] = ([c.interval(k)[0] for k in ks], [c.interval(k)[1] for k in ks])
    return report.line_chart(run.path(run.stem, "svg"), series, title, "target position k", "recall accuracy",
                             run.footer, ylim=(0.0, 1.0), bands=bands)


def _probe_traces(run, params, vocab, mode, L):
    probes = gen_dataset(vocab, [L], 1, mode, run["data_seed"] + 1)[: run["probes"]]
    traces = memlab.collect_traces(params, probes)
    return traces, [memlab.context_length(p) for p in probes]


def analyze_curve(run, params, vocab):
    curves = [memlab.eval_recall_curve(params, ds) for ds in _eval_sets(run, vocab).values()]
    report.write_csv(run.path(run.stem, "csv"), _curve_rows(curves), CURVE_COLUMNS)
    _curve_svg(run, curves, lambda c: f"{c.condition['relation_mode']} L={c.L}", "Recall accuracy by position")
    return curves


def analyze_ltm(run, params, vocab):
    rows, reports = [], {}
    for mode in _modes(run):
        for L in run["depth"]:
            traces, Ts = _probe_traces(run, params, vocab, mode, L)
            rep = memlab.identify_ltm(traces, run["tau"], run["p"], Ts, run["aggregate"])
            reports[(mode, L)] = rep
            for li, count in enumerate(rep.density):
                rows.append({"relation_mode": mode, "L": L, "tau": rep.tau, "p": rep.p, "layer": li,
                             "channel": "", "ltm_probability": "", "layer_count": count})
            for r in rep.rows():
                rows.append({"relation_mode": mode, "L": L, "tau": rep.tau, "p": rep.p, **r, "layer_count": ""})
    report.write_csv(run.path(run.stem, "csv"), rows,
                     ["relation_mode", "L", "tau", "p", "layer", "channel", "ltm_probability", "layer_count"])
    first = next(iter(reports.values()))
    report.bar_chart(run.path(run.stem, "svg"), [f"L{li}" for li in range(len(first.density))], first.density,
                     f"Long-term-memory channels per layer (tau={first.tau}, p={first.p})", "layer",
                     "channels selected", run.footer)
    return reports


def analyze_intervene(run, params, vocab):
    curves = []
    for (mode, L), ds in _eval_sets(run, vocab).items():
        control = memlab.eval_recall_curve(params, ds)
        curves.append(control)
        if run["targets"] == "none":
            continue
        traces, Ts = _probe_traces(run, params, vocab, mode, L)
        rep = memlab.identify_ltm(traces, run["tau"], run["p"], Ts, run["aggregate"])
        spec = memlab.InterventionSpec.from_report(rep, run["top_layers"])
        base = memlab.random_baseline(spec, params.config.d_model, run["seed"])
        n_ch = {"n_channels": spec.count, "layers": "+".join(str(li) for li, _ in spec.targets)}
        curves.append(memlab.eval_recall_curve(params, ds, spec, condition=n_ch if spec.targets else None))
        curves.append(memlab.eval_recall_curve(params, ds, base, condition=n_ch if spec.targets else None))
        if not spec.targets:
            # nothing selected: both ablations equal the control; label them for the record
            curves[-2].condition["intervention"] = "targeted"
            curves[-1].condition["intervention"] = "random"
    cols = list(CURVE_COLUMNS)
    if run["targets"] != "none":
        cols += ["n_channels", "layers"]
    report.write_csv(run.path(run.stem, "csv"), _curve_rows(curves), cols)
    _curve_svg(run, curves, lambda c: f"{c.condition['relation_mode']} {c.condition['intervention']}",
               "Recall under forget-gate ablation of the first triple")
    return curves


def analyze_distract(run, params, vocab):
    curves = []
    for ds in _eval_sets(run, vocab).values():
        curves += list(memlab.distractor_sweep(params, ds, vocab, run["n"]).values())
    report.write_csv(run.path(run.stem, "csv"), _curve_rows(curves), CURVE_COLUMNS)
    _curve_svg(run, curves, lambda c: f"{c.condition['relation_mode']} n={c.condition['n_distractors']}",
               "Recall with distractors before the query")
    return curves


def _delta_stats(run, params, vocab):
    return memlab.delta_period_scan(params, vocab, run["periods"], range(run["n_seeds"]))


def analyze_delta(run, params, vocab):
    stats = _delta_stats(run, params, vocab)
    rows = list(stats.rows())
    for k in stats.periods:
        for li in range(params.config.n_layers):
            rows.append({"period": k, "layer": li, "position": "", "mean_delta": "",
                         "global_mean": stats.global_mean[k],
                         "autocorr_lag_period": stats.autocorr(k, li, k),
                         "autocorr_lag_period_plus1": stats.autocorr(k, li, k + 1)})
    report.write_csv(run.path(run.stem, "csv"), rows,
                     ["period", "layer", "position", "mean_delta", "global_mean", "autocorr_lag_period",
                      "autocorr_lag_period_plus1"])
    matrix, labels = [], []
    for k in stats.periods:
        for li in range(params.config.n_layers):
            matrix.append(stats.per_position[k][li])
            labels.append(f"k{k} L{li}")
    report.heatmap(run.path(run.stem, "svg"), matrix, labels, "Mean delta per layer and position", "position",
                   "period / layer", run.footer)
    report.line_chart(run.path(run.stem + "_global", "svg"),
                      {"mean delta": (list(stats.periods), [stats.global_mean[k] for k in stats.periods])},
                      "Mean delta by repetition period", "period k", "mean delta", run.footer)
    return stats


def analyze_kernel(run, params, vocab):
    stats = _delta_stats(run, params, vocab)
    rows = [{"period": k, "position": j, "kernel_magnitude": v}
            for k in stats.periods for j, v in enumerate(stats.kernel_profiles[k])]
    report.write_csv(run.path(run.stem, "csv"), rows, ["period", "position", "kernel_magnitude"])
    series = {f"k={k}": (list(range(len(stats.kernel_profiles[k]))), list(stats.kernel_profiles[k]))
              for k in stats.periods}
    report.line_chart(run.path(run.stem, "svg"), series, "Kernel magnitude toward the final token",
                      "input position", "mean |kernel|", run.footer)
    return stats


def analyze_init_sweep(run, params, vocab):
    curves = []
    for ds in _eval_sets(run, vocab).values():
        curves += list(memlab.init_sweep(params, ds, run["init_seed"]).values())
    report.write_csv(run.path(run.stem, "csv"), _curve_rows(curves), CURVE_COLUMNS)
    _curve_svg(run, curves, lambda c: f"{c.condition['relation_mode']} {c.condition['init']}",
               "Recall with uniform initial state, one layer at a time")
    return curves


def analyze_grid(run, params, vocab):
    rows = []
    nested = True
    for (mode, L), ds in _eval_sets(run, vocab).items():
        traces, Ts = _probe_traces(run, params, vocab, mode, L)
        grid = memlab.ltm_grid(traces, T=Ts, aggregate=run["aggregate"])
        nested &= memlab.grid_is_nested(grid)
        first = [i for i in ds if i.k == 1]
        control = memlab.eval_recall_curve(params, first).accuracy(1)
        for (tau, p), rep in grid.items():
            spec = memlab.InterventionSpec.from_report(rep, 1)
            acc = memlab.eval_recall_curve(params, first, spec).accuracy(1) if spec.targets else control
            rows.append({"relation_mode": mode, "L": L, "tau": tau, "p": p, "n_selected": len(rep.selected()),
                         "top_layer": rep.top_layers(1)[0] if rep.top_layers(1) else "",
                         "first_position_control": control, "first_position_ablated": acc,
                         "channels": " ".join(f"{li}:{ch}" for li, ch in sorted(rep.selected()))})
    rows.append({"relation_mode": "all", "L": "", "tau": "", "p": "", "n_selected": "", "top_layer": "",
                 "first_position_control": "", "first_position_ablated": "", "channels": f"nested={int(nested)}"})
    report.write_csv(run.path(run.stem, "csv"), rows,
                     ["relation_mode", "L", "tau", "p", "n_selected", "top_layer", "first_position_control",
                      "first_position_ablated", "channels"])
    first_mode = rows[0]["relation_mode"]
    cells = [r for r in rows if r["relation_mode"] == first_mode]
    taus = sorted({r["tau"] for r in cells})
    matrix = [[next(r["first_position_ablated"] for r in cells if r["tau"] == t and r["p"] == p)
               for p in sorted({r["p"] for r in cells})] for t in taus]
    report.heatmap(run.path(run.stem, "svg"), matrix, [f"tau={t}" for t in taus],
                   "First-position accuracy after top-1-layer ablation", "p = 0.5, 0.7, 0.9", "tau", run.footer)
    if not nested:
        raise NumericalFailure("grid selections are not nested")
    return rows


ANALYZERS = {
    "curve": analyze_curve,
    "ltm": analyze_ltm,
    "intervene": analyze_intervene,
    "distract": analyze_distract,
    "delta": analyze_delta,
    "kernel": analyze_kernel,
    "init-sweep": analyze_init_sweep,
    "grid": analyze_grid,
}


def cmd_analyze(run):
    params, vocab = _load_model(run)
    run.snapshot()
    result = ANALYZERS[run.analysis](run, params, vocab)
    print(f"wrote {run.path(run.stem, 'csv')}")
    return result


def cmd_gradcheck(run):
    from .checks import gradcheck_random

    worst = gradcheck_random(run["configs"], run["seed"], run["h"])
    run.out.mkdir(parents=True, exist_ok=True)
    rows = [{"group": g, "max_rel_error": e} for g, e in sorted(worst.items())]
    report.write_csv(run.path("gradcheck", "csv"), rows, ["group", "max_rel_error"])
    for r in rows:
        print(f"{r['group']:<14} {r['max_rel_error']:.3e}")
    bad = [g for g, e in worst.items() if not e < run["tol"]]
    if bad:
        raise NumericalFailure(f"gradient check failed for {bad}")
    print("gradcheck ok")


def cmd_selftest(run):
    from .checks import selftest

    failed = 0
    for name, ok, detail in selftest(run["seed"]):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    if failed:
        raise NumericalFailure(f"{failed} self-test check(s) failed")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        run = resolve(args)
        COMMANDS[args.command](run)
    except (ConfigError, VocabularyError, ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    log.info("done in %.1fs", time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
