"""``rl-lab`` command line: train, sweep, report, verify.

This is the only module that touches the filesystem.  Every artifact carries
the digest of the config that produced it, and ``verify`` recomputes it.

Exit codes: 0 ok, 2 config error, 3 training aborted, 4 checkpoint does not
match the environment, 5 run lacks instrumentation columns, 6 digest mismatch.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import hashlib
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import ppo as ppo_mod
from . import robust
from . import shac as shac_mod
from .nets import PolicyNet, dumps_checkpoint, loads_checkpoint

log = logging.getLogger("rl_lab")

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED, EXIT_MISMATCH, EXIT_INSTRUMENTATION, EXIT_DIGEST = 0, 2, 3, 4, 5, 6

CURVE_COLUMNS = ["episode", "env_steps", "eval_reward_mean", "eval_reward_std", "policy_loss",
                 "critic_loss", "grad_evals", "update_wall_ms"]
NOISE_COLUMNS = ["algo", "policy_seed", "lambda_mix", "mean_reward", "std_reward", "rollouts", "failures"]
PARAM_COLUMNS = ["algo", "policy_seed", "k_e", "k_d", "mu", "mean_reward", "std_reward", "rollouts", "failures"]
REPORT_COLUMNS = ["algo", "runs", "train_s_mean", "train_s_std", "update_ms_mean", "update_ms_std",
                  "grad_evals_per_update", "wall_ratio_vs_shac", "grad_eval_ratio_vs_shac"]
DIGEST_PREFIX = "# config_digest: "


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


# -- formatting ------------------------------------------------------------

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(columns, rows, digest):
    buf = io.StringIO()
    buf.write(f"{DIGEST_PREFIX}{digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def read_csv(path):
    """Return ``(digest, rows)`` from a CSV written by :func:`csv_text`."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        digest = first[len(DIGEST_PREFIX):].strip() if first.startswith(DIGEST_PREFIX) else None
        if digest is None:
            fh.seek(0)
        return digest, list(csv.DictReader(fh))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _workers(jobs: int) -> int:
    raw = os.environ.get("RL_LAB_THREADS", "0").strip() or "0"
    try:
        cap = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"RL_LAB_THREADS must be an integer, got {raw!r}") from None
    if cap < 0:
        raise CliError(EXIT_CONFIG, "RL_LAB_THREADS must be >= 0")
    cap = cap or (os.cpu_count() or 1)
    return max(1, min(cap, jobs))


def _load_config(path):
    try:
        return config_mod.load(path)
    except config_mod.ConfigError as err:
        raise CliError(EXIT_CONFIG, f"config error in {err}") from None
    except OSError as err:
        raise CliError(EXIT_CONFIG, f"cannot read config: {err}") from None


# -- train -----------------------------------------------------------------

def _train_one(cfg: config_mod.RunConfig, seed: int):
    """Train one seed; returns ``(checkpoint_text, curve_csv_text)``."""
    env = cfg.make_env()
    algo_cfg = cfg.algo_config()
    if cfg.algorithm == "ppo":
        result = ppo_mod.train(env, algo_cfg, seed)
        vectors = {"policy": result.policy.params, "critic": result.critic.params}
    else:
        result = shac_mod.train(env, algo_cfg, seed)
        vectors = {"policy": result.policy.params, "critic": result.critic.params,
                   "target_critic": result.target_critic.params}
    header = {
        "algorithm": cfg.algorithm,
        "architecture": result.policy.architecture,
        "config_digest": cfg.digest,
        "env": cfg.env,
        "env_steps": result.env_steps,
        "seed": seed,
    }
    return dumps_checkpoint(header, vectors), csv_text(CURVE_COLUMNS, result.records, cfg.digest)


def cmd_train(args):
    cfg = _load_config(args.config)
    seeds = cfg.seeds if args.seeds is None else _parse_seeds(args.seeds)
    out = Path(args.out or cfg.output_dir)
    workers = _workers(len(seeds))
    try:
        if workers == 1:
            outputs = [_train_one(cfg, s) for s in seeds]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(_train_one, [cfg] * len(seeds), seeds))
    except shac_mod.TrainingAborted as err:
        raise CliError(EXIT_ABORTED, f"training aborted: {err}") from None
    # single writer: all files are written here, after every job has finished
    for seed, (ckpt, curve) in zip(seeds, outputs):
        run_dir = out / cfg.algorithm / str(seed)
        _write(run_dir / "checkpoint.txt", ckpt)
        _write(run_dir / "curve.csv", curve)
        print(f"{cfg.algorithm} seed {seed}: {run_dir}")
    return EXIT_OK


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise CliError(EXIT_CONFIG, "--seeds needs at least one non-negative integer")
    return seeds


# -- sweep -----------------------------------------------------------------

def load_policies(paths, cfg):
    """Read checkpoints into ``{algo: [(seed, PolicyNet)]}``, checking they fit ``cfg``'s env."""
    env = cfg.make_env()
    policies = {}
    for path in paths:
        try:
            header, vectors = loads_checkpoint(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as err:
            raise CliError(EXIT_MISMATCH, f"{path}: unreadable checkpoint ({err})") from None
        if header.get("env") != cfg.env:
            raise CliError(EXIT_MISMATCH, f"{path}: trained on {header.get('env')!r}, config is {cfg.env!r}")
        if "policy" not in vectors:
            raise CliError(EXIT_MISMATCH, f"{path}: no policy parameters")
        try:
            net = PolicyNet(env.obs_dim, env.act_dim, _hidden_of(header), params=vectors["policy"])
        except ValueError as err:
            raise CliError(EXIT_MISMATCH, f"{path}: architecture {header.get('architecture')!r} "
                                          f"does not fit {cfg.env} ({err})") from None
        if net.architecture != header.get("architecture"):
            raise CliError(EXIT_MISMATCH, f"{path}: architecture {header.get('architecture')!r} "
                                          f"does not fit {cfg.env} (expected {net.architecture!r})")
        policies.setdefault(str(header.get("algorithm", "unknown")), []).append((int(header.get("seed", 0)), net))
    for entries in policies.values():
        entries.sort(key=lambda e: e[0])
    return dict(sorted(policies.items()))


def _hidden_of(header):
    # "policy mlp 2-64-64-1 tanh" -> (64, 64)
    try:
        sizes = [int(x) for x in str(header["architecture"]).split()[2].split("-")]
    except (KeyError, IndexError, ValueError):
        raise ValueError("malformed architecture field") from None
    return tuple(sizes[1:-1])


def _expand(patterns):
    paths = []
    for pattern in patterns:
        found = sorted(glob.glob(pattern, recursive=True))
        if not found:
            raise CliError(EXIT_MISMATCH, f"no checkpoints match {pattern!r}")
        paths.extend(found)
    return sorted(dict.fromkeys(paths))


def noise_rows(table):
    return [{"algo": r.algo, "policy_seed": r.policy_seed, "lambda_mix": r.setting["lambda_mix"],
             "mean_reward": r.mean_reward, "std_reward": r.std_reward, "rollouts": r.rollouts,
             "failures": r.failures} for r in table]


def param_rows(table):
    return [{"algo": r.algo, "policy_seed": r.policy_seed, "k_e": r.setting["k_e"], "k_d": r.setting["k_d"],
             "mu": r.setting["mu"], "mean_reward": r.mean_reward, "std_reward": r.std_reward,
             "rollouts": r.rollouts, "failures": r.failures} for r in table]


def cmd_sweep(args):
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    env = cfg.make_env()
    digest = cfg.digest
    if args.kind == "rho":
        return _sweep_rho(cfg, env, out)
    if not args.checkpoints:
        raise CliError(EXIT_CONFIG, f"--checkpoints is required for --kind {args.kind}")
    policies = load_policies(_expand(args.checkpoints), cfg)
    s = cfg.sweep
    if args.kind == "noise":
        table = robust.noise_sweep(policies, env, s.lambdas, s.rollouts, s.seed)
        _write(out / "noise_sweep.csv", csv_text(NOISE_COLUMNS, noise_rows(table), digest))
        print(f"{len(table)} rows -> {out / 'noise_sweep.csv'}")
        return EXIT_OK

    grid = cfg.sweep_grid()
    table, matrices = robust.param_sweep(policies, env, grid, s.rollouts, s.seed)
    _write(out / "param_sweep.csv", csv_text(PARAM_COLUMNS, param_rows(table), digest))
    print(f"{len(table)} rows -> {out / 'param_sweep.csv'}")
    if len(grid.names) == 2:
        # one colour scale for the whole table so heatmaps compare across algorithms
        vmin = min(float(m.min()) for m in matrices.values())
        vmax = max(float(m.max()) for m in matrices.values())
        rows_name, cols_name = grid.names
        for algo, matrix in matrices.items():
            svg = robust.heatmap_svg(matrix, grid.axes[rows_name], grid.axes[cols_name], rows_name, cols_name,
                                     f"{algo} on {cfg.env}: mean episode reward", vmin, vmax, digest)
            _write(out / f"heatmap_{algo}.svg", svg)
    return EXIT_OK


def _sweep_rho(cfg, env, out):
    s = cfg.sweep
    # rho_study switches the mode on; a configured asam block only lends its weight decay
    base = dataclasses.replace(cfg.shac, mode="plain", asam=cfg.asam)
    try:
        study = robust.rho_study(env, s.rhos, base, list(cfg.seeds), s.lambdas, s.rollouts, s.seed)
    except shac_mod.TrainingAborted as err:
        raise CliError(EXIT_ABORTED, f"training aborted: {err}") from None
    summary = []
    for rho, entry in study.items():
        rho_dir = out / "rho" / repr(rho)
        for seed, run in zip(cfg.seeds, entry["runs"]):
            _write(rho_dir / str(seed) / "curve.csv", csv_text(CURVE_COLUMNS, run.records, cfg.digest))
        rows = noise_rows(entry["table"])
        for row in rows:
            row["rho"], row["env_steps"] = rho, entry["env_steps"]
        cols = ["rho", "env_steps"] + NOISE_COLUMNS
        _write(rho_dir / "noise_sweep.csv", csv_text(cols, rows, cfg.digest))
        summary.extend(rows)
    _write(out / "rho" / "rho_study.csv", csv_text(["rho", "env_steps"] + NOISE_COLUMNS, summary, cfg.digest))
    print(f"{len(study)} rho values -> {out / 'rho'}")
    return EXIT_OK


# -- report ----------------------------------------------------------------

def _find_runs(run_dirs):
    runs = []
    for d in run_dirs:
        d = Path(d)
        if not d.exists():
            raise CliError(EXIT_INSTRUMENTATION, f"{d}: no such run directory")
        curves = sorted(d.rglob("curve.csv")) if d.is_dir() else [d]
        if not curves:
            raise CliError(EXIT_INSTRUMENTATION, f"{d}: no curve.csv found")
        runs.extend(curves)
    return sorted(dict.fromkeys(runs))


def _algo_of(curve: Path):
    ckpt = curve.parent / "checkpoint.txt"
    if ckpt.exists():
        header, _ = loads_checkpoint(ckpt.read_text(encoding="utf-8"))
        return str(header.get("algorithm")), header.get("config_digest")
    return curve.parent.parent.name, None


def combined_digest(entries):
    """Digest over ``(run path, config digest)`` pairs of the runs a report was built from."""
    text = "\n".join(f"{name}={digest}" for name, digest in sorted(entries))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def cmd_report(args):
    curves = _find_runs(args.run_dirs)
    runs, sources = [], []
    for curve in curves:
        digest, rows = read_csv(curve)
        if not rows:
            raise CliError(EXIT_INSTRUMENTATION, f"{curve}: empty learning curve")
        missing = [c for c in ("update_wall_ms", "grad_evals") if c not in rows[0]]
        if missing or any(r.get(c, "") == "" for r in rows for c in ("update_wall_ms", "grad_evals")):
            raise CliError(EXIT_INSTRUMENTATION, f"{curve}: missing instrumentation columns {missing or '(blank)'}")
        algo, _ = _algo_of(curve)
        runs.append((algo, rows))
        sources.append((f"{algo}/{curve.parent.name}", digest or ""))
    table = robust.overhead_report(runs)
    digest = combined_digest(sources)
    out = Path(args.out or Path(args.run_dirs[0]))
    _write(out / "overhead.csv", csv_text(REPORT_COLUMNS, table, digest))
    text = render_report(table, sources, digest)
    _write(out / "overhead.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def render_report(table, sources, digest):
    lines = [f"config_digest: {digest}", ""]
    lines.append(f"{'algorithm':<12} {'runs':>4} {'train s':>20} {'update ms':>20} {'evals/upd':>9} "
                 f"{'wall x':>7} {'evals x':>7}")
    for r in table:
        lines.append(
            f"{r['algo']:<12} {r['runs']:>4} "
            f"{r['train_s_mean']:>10.3f} ± {r['train_s_std']:<7.3f} "
            f"{r['update_ms_mean']:>10.3f} ± {r['update_ms_std']:<7.3f} "
            f"{r['grad_evals_per_update']:>9.3f} {r['wall_ratio_vs_shac']:>7.3f} {r['grad_eval_ratio_vs_shac']:>7.3f}")
    lines.append("")
    lines.append("reference wall-time ratios: " + ", ".join(
        f"{k} {v:.2f}" for k, v in sorted(robust.REFERENCE_TIME_RATIOS.items())))
    lines.append("sources:")
    lines.extend(f"  {name} {d}" for name, d in sorted(sources))
    return "\n".join(lines) + "\n"


# -- verify ----------------------------------------------------------------

def embedded_digest(path: Path):
    text = path.read_text(encoding="utf-8")
    if text.startswith("rl-lab-checkpoint "):
        return loads_checkpoint(text)[0].get("config_digest")
    if text.startswith(DIGEST_PREFIX):
        return text.splitlines()[0][len(DIGEST_PREFIX):].strip()
    if text.startswith("config_digest: "):
        return text.splitlines()[0].split(":", 1)[1].strip()
    marker = "<metadata>config_digest="
    if marker in text:
        return text.split(marker, 1)[1].split("<", 1)[0]
    return None


def cmd_verify(args):
    cfg = _load_config(args.config)
    expected = cfg.digest
    bad = 0
    for name in args.files:
        path = Path(name)
        if path.name in ("overhead.csv", "overhead.txt"):
            ok, found = _verify_report(path)
        else:
            found = embedded_digest(path)
            ok = found == expected
        print(f"{'ok  ' if ok else 'FAIL'} {path} {found}")
        bad += not ok
    if bad:
        raise CliError(EXIT_DIGEST, f"{bad} file(s) do not carry digest {expected}")
    return EXIT_OK


def _verify_report(path: Path):
    """Recompute a report's digest from the learning curves listed next to it."""
    found = embedded_digest(path)
    text = (path.parent / "overhead.txt").read_text(encoding="utf-8")
    listed = text.split("sources:\n", 1)[1].split()
    sources = list(zip(listed[0::2], listed[1::2]))
    return combined_digest(sources) == found, found


# -- entry point -----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="rl-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma-separated seeds; defaults to the config's list")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="noise, parameter or rho robustness sweep")
    p.add_argument("--kind", choices=("noise", "params", "rho"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", nargs="*", default=[], help="glob(s) of checkpoint.txt files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="training-overhead table from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="check that artifacts embed the config's digest")
    p.add_argument("--config", required=True)
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        print(f"rl-lab: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
