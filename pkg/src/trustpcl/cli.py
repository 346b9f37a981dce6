"""Command-line entry points.

Exit codes: 0 success, 1 assertion/verification failure, 2 config error,
3 runtime numeric error.

Config files are flat ``key = value`` text (one key per line, ``#``
comments); keys are TrainConfig field names.  TRUST_PCL_THREADS caps the
number of parallel seed workers (default: one worker per seed).
"""

import argparse
import concurrent.futures
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import oracle
from .consistency import ConsistencyConfig, batch_loss_and_grads
from .models import CategoricalPolicy, GaussianPolicy, ValueFunction, save_params
from .nn import finite_diff_check
from .replay import EpisodeLog, Segment, Transition
from .trainer import (TrainConfig, Trainer, off_policy_preset, on_policy_preset,
                      run_training, write_metrics, METRICS_COLUMNS)
from .trust import LambdaSolver, estimate_kl, solve_lambda

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


class CliConfigError(ValueError):
    pass


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def coerce_config(values):
    kwargs = {}
    for key, val in values.items():
        if key not in _FIELD_TYPES:
            raise CliConfigError(f"unknown config key {key!r}")
        ftype = _FIELD_TYPES[key]
        try:
            if ftype is int:
                kwargs[key] = int(val)
            elif ftype is float:
                kwargs[key] = float(val)
            elif ftype is bool:
                if str(val).lower() in ("1", "true", "yes"):
                    kwargs[key] = True
                elif str(val).lower() in ("0", "false", "no"):
                    kwargs[key] = False
                else:
                    raise ValueError(val)
            else:
                kwargs[key] = str(val)
        except ValueError as exc:
            raise CliConfigError(f"bad value for {key!r}: {val!r}") from exc
    cfg = TrainConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    return cfg


def load_config(path, overrides=()):
    values = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise CliConfigError(f"override must be key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    return coerce_config(values)


def config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, cfg, seeds):
    manifest = {"config": asdict(cfg), "seeds": list(seeds),
                "config_hash": config_hash(cfg)}
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _run_one_seed(args):
    cfg_dict, seed, out_dir = args
    cfg = replace(TrainConfig(**cfg_dict), seed=seed)
    trainer, rows = run_training(cfg)
    metrics_path = Path(out_dir) / f"metrics_seed{seed}.csv"
    write_metrics(metrics_path, rows)
    kind = "gaussian" if isinstance(trainer.policy, GaussianPolicy) else "categorical"
    save_params(Path(out_dir) / f"policy_seed{seed}.json", trainer.policy, kind)
    save_params(Path(out_dir) / f"value_seed{seed}.json", trainer.value, "value")
    return str(metrics_path)


def run_seeds(cfg, seeds, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(asdict(cfg), seed, str(out_dir)) for seed in seeds]
    workers = int(os.environ.get("TRUST_PCL_THREADS", len(seeds)) or 1)
    if workers > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one_seed, jobs))
    return [_run_one_seed(job) for job in jobs]


def cmd_train(args):
    try:
        cfg = load_config(args.config, args.override)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, cfg, args.seed)
    try:
        paths = run_seeds(cfg, args.seed, out_dir)
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_oracle_check(corpus_seeds=None, d_max=5, threshold=1e-8,
                     corrupt=0.0, quiet=False):
    """Runs the multi-step identity check over the corpus.  ``corrupt``
    is a test hook that perturbs one solved value entry."""
    seeds = corpus_seeds if corpus_seeds is not None else oracle.CORPUS_SEEDS
    overall = 0.0
    ok = True
    for seed in seeds:
        mdp = oracle.random_mdp(seed, stochastic=False)
        ref = oracle.random_reference(seed + 500_000, mdp.n_states, mdp.n_actions)
        worst = 0.0
        for tau, lam in oracle.CORPUS_SETTINGS:
            sol = oracle.softmax_value_iteration(mdp, ref, tau, lam)
            if sol.residual > 1e-10:
                ok = False
            if corrupt:
                sol.values[0] += corrupt
            for d in range(1, d_max + 1):
                worst = max(worst, oracle.verify_consistency(mdp, sol, ref,
                                                             tau, lam, d))
        overall = max(overall, worst)
        if not quiet:
            print(f"mdp seed={seed}: max violation {worst:.3e}")
        if worst > threshold:
            ok = False
    if not quiet:
        print(f"overall max violation {overall:.3e}")
    return EXIT_OK if ok else EXIT_FAIL


def _grad_check_cases(break_gradient=False):
    """(name, loss_and_grad_fn, params) triples covering every model plus
    the full batch loss.  ``break_gradient`` is a test hook."""
    rng = np.random.default_rng(42)
    cases = []

    gp = GaussianPolicy(3, 2, rng=np.random.default_rng(1))
    obs = rng.standard_normal((4, 3))
    acts = rng.standard_normal((4, 2))
    w = rng.standard_normal(4)

    def gauss_loss(p, gp=gp, obs=obs, acts=acts, w=w):
        gp.set_flat(p)
        logp, grad = gp.log_density_weighted_grad(obs, acts, w)
        return float(np.sum(w * logp)), grad
    cases.append(("gaussian-log-density", gauss_loss, gp.get_flat()))

    cp = CategoricalPolicy(3, 4, rng=np.random.default_rng(2))
    cobs = rng.standard_normal((5, 3))
    cacts = rng.integers(0, 4, size=5)
    cw = rng.standard_normal(5)

    def cat_loss(p, cp=cp, obs=cobs, acts=cacts, w=cw):
        cp.set_flat(p)
        logp, grad = cp.log_density_weighted_grad(obs, acts, w)
        return float(np.sum(w * logp)), grad
    cases.append(("categorical-log-density", cat_loss, cp.get_flat()))

    vf = ValueFunction(3, rng=np.random.default_rng(3))
    vobs = rng.standard_normal((4, 3))
    vw = rng.standard_normal(4)

    def val_loss(p, vf=vf, obs=vobs, w=vw):
        vf.set_flat(p)
        vals, grad = vf.value_weighted_grad(obs, w)
        return float(np.sum(w * vals)), grad
    cases.append(("value", val_loss, vf.get_flat()))

    # full consistency batch loss on a tiny random segment batch
    bp = GaussianPolicy(2, 1, rng=np.random.default_rng(4))
    bv = ValueFunction(2, rng=np.random.default_rng(5))
    lag_p = bp.clone()
    lag_v = bv.clone()
    lag_p.set_flat(lag_p.get_flat() + 0.05 * rng.standard_normal(lag_p.n_params))
    lag_v.set_flat(lag_v.get_flat() + 0.05 * rng.standard_normal(lag_v.n_params))
    segs = []
    for k in range(2):
        trs = [Transition(obs=rng.standard_normal(2),
                          action=rng.standard_normal(1),
                          reward=float(rng.standard_normal()),
                          log_density=0.0,
                          terminal=(k == 1 and i == 3))
               for i in range(4)]
        segs.append(Segment(episode_id=k, start_index=0, transitions=trs,
                            final_obs=rng.standard_normal(2)))
    ccfg = ConsistencyConfig(d=3, gamma=0.9, tau=0.2, lam=0.5, huber_delta=1.0)
    n_bp = bp.n_params

    def batch_loss(p, bp=bp, bv=bv, segs=segs, ccfg=ccfg, n_bp=n_bp):
        bp.set_flat(p[:n_bp])
        bv.set_flat(p[n_bp:])
        loss, g_t, g_p = batch_loss_and_grads(segs, bp, bv, lag_p, lag_v, ccfg)
        grad = np.concatenate([g_t, g_p])
        if break_gradient:
            grad = grad + 0.5
        return loss, grad
    cases.append(("batch-consistency-loss", batch_loss,
                  np.concatenate([bp.get_flat(), bv.get_flat()])))
    return cases


def cmd_grad_check(break_gradient=False, quiet=False, threshold=1e-4):
    worst_name, worst = "", 0.0
    for name, fn, params in _grad_check_cases(break_gradient=break_gradient):
        err = finite_diff_check(fn, params, h=1e-5)
        if not quiet:
            print(f"{name}: max relative error {err:.3e}")
        if err > worst:
            worst_name, worst = name, err
    if not quiet:
        print(f"worst: {worst_name} at {worst:.3e}")
    return EXIT_OK if worst < threshold else EXIT_FAIL


def _parse_synthetic(spec):
    # e.g. "normal:0,1,100,7" -> 100 N(0,1) returns from seed 7
    try:
        kind, rest = spec.split(":", 1)
        parts = [float(x) for x in rest.split(",")]
        if kind == "normal":
            mean, std, n, seed = parts
            rng = np.random.default_rng(int(seed))
            return mean + std * rng.standard_normal(int(n))
        if kind == "uniform":
            lo, hi, n, seed = parts
            rng = np.random.default_rng(int(seed))
            return rng.uniform(lo, hi, size=int(n))
    except (ValueError, IndexError):
        pass
    raise CliConfigError(f"bad synthetic spec {spec!r}")


def cmd_lambda_trace(returns, epsilons, out_dir=None, lengths=None, quiet=False):
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size < 2:
        print("need at least 2 returns", file=sys.stderr)
        return EXIT_CONFIG
    grid = np.logspace(-3, 3, 61)
    kls = np.array([estimate_kl(returns, lam).kl for lam in grid])
    degenerate = np.allclose(returns, returns[0])
    # allow float64 roundoff: at tiny lambda the summands are ~|R|/lambda
    slack = 1e-8 * np.maximum(1.0, np.abs(kls[:-1]))
    if not degenerate and np.any(np.diff(kls) > slack):
        print("monotonicity violation in the KL estimator", file=sys.stderr)
        return EXIT_FAIL
    log = EpisodeLog()
    if lengths is None:
        lengths = [100] * returns.size
    for r, t in zip(returns, lengths):
        log.log_episode(r, t)
    solved = []
    solver = LambdaSolver()
    for eps in epsilons:
        solved.append((eps, solve_lambda(log, eps, solver)))
    for (e1, l1), (e2, l2) in zip(solved, solved[1:]):
        if e1 < e2 and l1 < l2 - 1e-9:
            print("lambda(epsilon) monotonicity violation", file=sys.stderr)
            return EXIT_FAIL
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "kl_vs_lambda.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lambda", "kl"])
            for lam, kl in zip(grid, kls):
                w.writerow([repr(float(lam)), repr(float(kl))])
        with open(out_dir / "lambda_vs_epsilon.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epsilon", "lambda"])
            for eps, lam in solved:
                w.writerow([repr(float(eps)), repr(float(lam))])
    if not quiet:
        for eps, lam in solved:
            print(f"epsilon={eps:g} -> lambda={lam:g}")
    return EXIT_OK


EPSILON_ARMS = [0.001, 0.002, 0.005, 0.01]


def ablation_configs(study, env_id, n_iterations):
    """Named (arm, config) grid for the preset ablation studies."""
    arms = []
    if study == "epsilon":
        for eps in EPSILON_ARMS:
            arms.append((f"eps{eps:g}", off_policy_preset(
                env_id, epsilon=eps, tau=0.1, n_iterations=n_iterations)))
        arms.append(("inf", off_policy_preset(
            env_id, fixed_lambda=0.0, tau=0.1, n_iterations=n_iterations)))
    elif study == "onoff":
        arms.append(("off-policy", off_policy_preset(
            env_id, n_iterations=n_iterations)))
        on_iters = max(1, n_iterations // 100)  # match env-step budget
        arms.append(("on-policy", on_policy_preset(
            env_id, n_iterations=on_iters)))
    else:
        raise CliConfigError(f"unknown study {study!r}")
    return arms


def cmd_ablate(study, env_id, n_seeds, out_dir, n_iterations=2000):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        arms = ablation_configs(study, env_id, n_iterations)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    records = []
    for arm, cfg in arms:
        for seed in range(n_seeds):
            trainer, rows = run_training(replace(cfg, seed=seed))
            for r in rows:
                records.append((arm, seed, r))
    records.sort(key=lambda rec: (rec[0], rec[1], rec[2].iteration))
    merged = out_dir / f"{study}_study.csv"
    with open(merged, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "seed"] + METRICS_COLUMNS)
        for arm, seed, r in records:
            w.writerow([arm, seed, r.iteration, r.env_steps,
                        repr(r.eval_return), repr(r.lam), repr(r.kl_estimate),
                        repr(r.kl_target), repr(r.loss), repr(r.tau),
                        repr(r.seconds)])
    print(merged)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="trust-pcl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more seeds")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, nargs="+", default=[0])
    p.add_argument("--out", required=True)
    p.add_argument("--override", nargs="*", default=[])

    p = sub.add_parser("oracle-check", help="verify the multi-step identity")
    p.add_argument("--corpus", default=None,
                   help="file with one MDP seed per line (default: committed corpus)")
    p.add_argument("--d-max", type=int, default=5)

    sub.add_parser("grad-check", help="finite-difference gradient audit")

    p = sub.add_parser("lambda-trace", help="KL-vs-lambda and lambda-vs-epsilon curves")
    p.add_argument("--returns", default=None, help="file with one return per line")
    p.add_argument("--synthetic", default=None,
                   help="e.g. normal:0,1,100,7 or uniform:-1,1,50,3")
    p.add_argument("--epsilon", type=float, nargs="+", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate", help="run a preset ablation study")
    p.add_argument("--study", choices=["epsilon", "onoff"], required=True)
    p.add_argument("--env", default="point-mass")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "oracle-check":
        seeds = None
        if args.corpus:
            seeds = [int(line) for line in Path(args.corpus).read_text().split()]
        return cmd_oracle_check(corpus_seeds=seeds, d_max=args.d_max)
    if args.command == "grad-check":
        return cmd_grad_check()
    if args.command == "lambda-trace":
        if (args.returns is None) == (args.synthetic is None):
            print("provide exactly one of --returns / --synthetic", file=sys.stderr)
            return EXIT_CONFIG
        try:
            if args.returns:
                returns = np.array([float(x) for x in
                                    Path(args.returns).read_text().split()])
            else:
                returns = _parse_synthetic(args.synthetic)
        except (ValueError, CliConfigError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_lambda_trace(returns, args.epsilon, out_dir=args.out)
    if args.command == "ablate":
        return cmd_ablate(args.study, args.env, args.seeds, args.out,
                          n_iterations=args.iterations)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
