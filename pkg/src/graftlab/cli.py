"""Command-line entry point: ``graftlab <subcommand> --config run.yaml``.

Every run writes its artifacts as ``<out>/<hash12>-<name>``, where the hash
addresses the resolved config and the bytes of its inputs. A run whose
manifest already exists is refused. Passing a manifest as ``--config``
replays the run it records. Exit status is 0 on success, 2 when the
config fails validation and 1 on a runtime failure (the failing module is
named on stderr).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import io as gio
from .config import (TASKS, ConfigError, ExperimentConfig, dump_config, git_blob_hash, manifest_hash,
                     parse_config)
from .diagnostics import conditional_variance_curve, rollout_histogram_test, score_energy
from .diffusion import NoiseSchedule, sample_trajectory, train_score_model
from .flow import fwd_euler, n_steps, train_flow
from .inverse_noise import base_sample, corrected_sample, distribution_distance, flops_estimate, train_corrector
from .numerics import FieldModel, rng_stream
from .plotting import plot_curve, plot_samples
from .pipelines import TrainConfig, collect_accepted, pgraft_sample, reward_summary, run_graft, run_pgraft_train
from .rejection import rule_from_dict
from .tasks import make_reward, make_target

log = logging.getLogger("graftlab")


class StageError(RuntimeError):
    def __init__(self, module: str, err: BaseException):
        super().__init__(f"{type(err).__name__}: {err}")
        self.module = module


@contextmanager
def stage(module: str):
    try:
        yield
    except StageError:
        raise
    except Exception as err:  # noqa: BLE001 - re-raised with the module attached
        raise StageError(module, err) from err


# --------------------------------------------------------------------------
# Output handling
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


class Run:
    def __init__(self, cfg: ExperimentConfig, inputs=()):
        self.cfg = cfg
        self.inputs = [str(p) for p in inputs]
        self.hash = manifest_hash(cfg, self.inputs)
        self.out = Path(cfg.out)
        self.artifacts: list[str] = []

    @property
    def prefix(self) -> str:
        return self.hash[:12]

    def path(self, name: str) -> Path:
        p = self.out / f"{self.prefix}-{name}"
        self.artifacts.append(p.name)
        return p

    @property
    def manifest_path(self) -> Path:
        return self.out / f"{self.prefix}-manifest.yaml"

    def stream(self, name: str):
        return rng_stream(self.cfg.seed, name)

    def write_table(self, rows: list[dict], name: str):
        cols: list[str] = []
        for r in rows:
            cols += [k for k in r if k not in cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
        self.path(f"{name}.csv").write_text(buf.getvalue())
        self.path(f"{name}.json").write_text(
            json.dumps(_jsonable(rows), sort_keys=True, indent=2) + "\n")

    def write_json(self, obj, name: str):
        self.path(f"{name}.json").write_text(
            json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")

    def write_manifest(self):
        files = []
        for p in self.inputs:
            files.append({"path": p, "sha1": git_blob_hash(Path(p).read_bytes())})
        doc = {"hash": self.hash, "seed": self.cfg.seed, "inputs": files,
               "artifacts": sorted(set(self.artifacts)),
               "config": yaml.safe_load(dump_config(self.cfg))}
        self.manifest_path.write_text(yaml.safe_dump(doc, sort_keys=True))


# --------------------------------------------------------------------------
# Shared steps
# --------------------------------------------------------------------------

def _schedule(cfg):
    s = cfg.schedule
    return NoiseSchedule.linear(s.N, s.beta_start, s.beta_end)


def _train_cfg(sec) -> TrainConfig:
    return TrainConfig(steps=sec.steps, batch_size=sec.batch_size, lr=sec.lr, epochs=sec.epochs,
                       final_lr=sec.final_lr)


def _new_model(cfg, dim, run, name):
    return FieldModel(dim, cfg.model.hidden, cfg.model.time_dim, rng=run.stream(f"init/{name}"))


def _train_reference(cfg, run):
    target = make_target(cfg.target)
    with stage("diffusion_engine"):
        data = target.sample(cfg.base_train.n_data, run.stream("data"))
        model = _new_model(cfg, target.dim, run, "reference")
        sec = cfg.base_train
        steps = _train_cfg(sec).n_steps(len(data))
        losses = train_score_model(model, data, _schedule(cfg), steps, run.stream("base"),
                                   batch_size=sec.batch_size, lr=sec.lr,
                                   final_lr=sec.final_lr)
    return model, losses


def _reference(cfg, run):
    if cfg.reference_checkpoint:
        with stage("numerics_core"):
            return gio.load_checkpoint(cfg.reference_checkpoint), None
    model, losses = _train_reference(cfg, run)
    with stage("cli_runner"):
        gio.save_checkpoint(model, run.path("reference.tdm"))
    return model, losses


def _summary_row(name, rewards, **extra):
    row = {"sampler": name}
    row.update(reward_summary(rewards))
    row.update(extra)
    return row


# --------------------------------------------------------------------------
# Tasks
# --------------------------------------------------------------------------

def task_train_base(cfg, run):
    target = make_target(cfg.target)
    model, losses = _train_reference(cfg, run)
    with stage("diffusion_engine"):
        x = sample_trajectory(model, _schedule(cfg), run.stream("eval"),
                              n_samples=cfg.eval.n_samples).final
        truth = target.sample(cfg.eval.n_samples, run.stream("eval/target"))
    with stage("cli_runner"):
        gio.save_checkpoint(model, run.path("reference.tdm"))
        tail = losses[-100:] if losses else [float("nan")]
        reward = make_reward(cfg.reward)(x)
        run.write_table([_summary_row("reference", reward, loss_tail=float(np.mean(tail)),
                                      sliced_w2=distribution_distance(x, truth))], "metrics")
        plot_samples({"target": truth, "reference": x}, run.path("samples.png"))


def _finetune(cfg, run, partial: bool):
    schedule = _schedule(cfg)
    reward_fn = make_reward(cfg.reward)
    rule = rule_from_dict(cfg.rule)
    reference, _ = _reference(cfg, run)
    before = [p.copy() for p in reference.params]
    with stage("finetune_pipelines"):
        snaps = (cfg.n_i,) if partial else ()
        collected = collect_accepted(reference, reward_fn, rule, cfg.rounds,
                                     cfg.samples_per_round, run.stream("sampling"),
                                     schedule, snapshots=snaps)
        tc = _train_cfg(cfg.finetune)
        if partial:
            res = run_pgraft_train(reference, reward_fn, rule, cfg.n_i, rng=run.stream("finetune"),
                                   schedule=schedule, train=tc, collected=collected)
        else:
            res = run_graft(reference, reward_fn, rule, rng=run.stream("finetune"),
                            schedule=schedule, train=tc, collected=collected)
        if any(not np.array_equal(a, b) for a, b in zip(before, reference.params)):
            raise RuntimeError("reference parameters changed during fine-tuning")
        n = cfg.eval.n_samples
        ref_x = sample_trajectory(reference, schedule, run.stream("eval"), n_samples=n).final
        if partial:
            ft_x = pgraft_sample(res.model, reference, cfg.n_i, schedule, run.stream("eval"), n)
        else:
            ft_x = sample_trajectory(res.model, schedule, run.stream("eval"), n_samples=n).final
    with stage("cli_runner"):
        r_ref, r_ft = reward_fn(ref_x), reward_fn(ft_x)
        ref_row = _summary_row("reference", r_ref)
        ft_row = _summary_row("finetuned", r_ft)
        ft_row["reward_delta"] = ft_row["mean"] - ref_row["mean"]
        ft_row["delta_se"] = float(np.hypot(ft_row["se"], ref_row["se"]))
        ref_row["reward_delta"] = 0.0
        ref_row["delta_se"] = 0.0
        run.write_table([ref_row, ft_row], "metrics")
        run.write_table(res.round_log, "rounds")
        gio.save_checkpoint(res.model, run.path("finetuned.tdm"))
        data = collected
        if partial:
            gio.save_records(run.path("dataset.tdr"), data.finals, data.rewards,
                             latents=data.latents[cfg.n_i], n_steps=schedule.N, n_i=cfg.n_i)
        else:
            gio.save_records(run.path("dataset.tdr"), data.finals, data.rewards,
                             n_steps=schedule.N)
        plot_samples({"reference": ref_x, "fine-tuned": ft_x}, run.path("samples.png"))


def task_graft(cfg, run):
    _finetune(cfg, run, partial=False)


def task_pgraft(cfg, run):
    _finetune(cfg, run, partial=True)


def task_invnoise(cfg, run):
    target = make_target(cfg.target)
    fl = cfg.flow
    with stage("flow_engine"):
        data = target.sample(cfg.base_train.n_data, run.stream("data"))
        base = _new_model(cfg, target.dim, run, "base")
        sec = cfg.base_train
        train_flow(base, data, _train_cfg(sec).n_steps(len(data)), run.stream("base"),
                   batch_size=sec.batch_size, lr=sec.lr, final_lr=sec.final_lr)
    with stage("inverse_noise"):
        hidden = fl.corrector_hidden
        corrector, inv, _ = train_corrector(
            base, fl.eta, data, fl.corrector_steps, run.stream("corrector"),
            hidden=None if hidden is None else tuple(hidden), n_b=fl.n_b,
            batch_size=cfg.finetune.batch_size, lr=cfg.finetune.lr,
            final_lr=cfg.finetune.final_lr,
            gate=not fl.lipschitz_override, probes=fl.lipschitz_probes)
        n = cfg.eval.n_samples
        truth = target.sample(n, run.stream("eval/target"))
        xb = base_sample(base, fl.eta, run.stream("eval"), n, target.dim)
        xc = corrected_sample(corrector, base, fl.eta, run.stream("eval"), n, target.dim,
                              eta_corrector=fl.corrector_eta)
        sb, sc = n_steps(fl.eta), n_steps(fl.corrector_eta)
        # the base alone, given the corrected pipeline's total step budget
        xm = base_sample(base, 1.0 / (sb + sc), run.stream("eval"), n, target.dim)
        d_base = distribution_distance(xb, truth, fl.metric)
        d_corr = distribution_distance(xc, truth, fl.metric)
        d_matched = distribution_distance(xm, truth, fl.metric)
        report = {"base_distance": d_base, "corrected_distance": d_corr,
                  "base_matched_distance": d_matched, "metric": fl.metric,
                  "steps": {"base": sb, "corrector": sc, "corrected_total": sb + sc},
                  "flops_estimate": {"base": flops_estimate([(base, sb)]),
                                     "corrected": flops_estimate([(base, sb), (corrector, sc)])}}
    with stage("cli_runner"):
        run.write_json(report, "report")
        run.write_table([{"sampler": "base", "distance": d_base, "steps": sb},
                         {"sampler": "base_matched", "distance": d_matched, "steps": sb + sc},
                         {"sampler": "corrected", "distance": d_corr, "steps": sb + sc}],
                        "metrics")
        gio.save_checkpoint(base, run.path("base.tdm"))
        gio.save_checkpoint(corrector, run.path("corrector.tdm"))
        gio.save_records(run.path("inverse-noise.tdr"), inv, n_steps=sb)
        plot_samples({"target": truth, "base": xb, "corrected": xc}, run.path("samples.png"))


def task_diagnose(cfg, run):
    target = make_target(cfg.target)
    schedule = _schedule(cfg)
    reward_fn = make_reward(cfg.reward)
    dg = cfg.diagnose
    rows, hist_rows = [], []
    field = target.score_field()
    with stage("diagnostics"):
        if dg.timesteps:
            curve = conditional_variance_curve(field, schedule, reward_fn, dg.timesteps,
                                               dg.n_states, dg.n_rollouts, run.stream("variance"),
                                               dim=target.dim)
            for r in curve:
                rows.append({"diagnostic": "conditional_variance", "n": r["n"], "t": r["t"],
                             "estimate": r["estimate"], "se": r["se"]})
        for n in dg.histogram_steps:
            emp, null, tv = rollout_histogram_test(field, schedule, reward_fn, n,
                                                   run.stream(f"histogram/{n}"),
                                                   dg.n_states, dg.n_rollouts, dim=target.dim)
            rows.append({"diagnostic": "binomial_tv", "n": n, "t": float(schedule.ou_times[n]),
                         "estimate": tv, "se": None})
            grid = np.arange(dg.n_rollouts + 1) / dg.n_rollouts
            hist_rows += [{"n": n, "value": g, "empirical": e, "binomial": b}
                          for g, e, b in zip(grid, emp, null)]
        T = dg.energy_horizon
        for t in dg.energy_times:
            tail, tail_se = score_energy(target, t, T, dg.energy_mc_samples, seed=cfg.seed)
            head, head_se = score_energy(target, 0.0, t, dg.energy_mc_samples, seed=cfg.seed)
            w = np.exp(-2 * t) / -np.expm1(-2 * t)
            rows.append({"diagnostic": "score_energy_tail", "n": None, "t": t,
                         "estimate": tail, "se": tail_se})
            rows.append({"diagnostic": "score_energy_bound", "n": None, "t": t,
                         "estimate": w * head, "se": w * head_se})
    with stage("cli_runner"):
        run.write_table(rows, "metrics")
        if hist_rows:
            run.write_table(hist_rows, "histogram")
        cv = [r for r in rows if r["diagnostic"] == "conditional_variance"]
        if cv:
            plot_curve([r["t"] for r in cv], [r["estimate"] for r in cv], [r["se"] for r in cv],
                       run.path("variance.png"), ylabel="E[Var(r | x_t)]")
        tails = [r for r in rows if r["diagnostic"] == "score_energy_tail"]
        if tails:
            plot_curve([r["t"] for r in tails], [r["estimate"] for r in tails],
                       [r["se"] for r in tails], run.path("energy.png"), ylabel="H(t, T)")


def task_eval(cfg, run):
    target = make_target(cfg.target)
    with stage("numerics_core"):
        model = gio.load_checkpoint(cfg.eval.checkpoint)
    n = cfg.eval.n_samples
    with stage("flow_engine" if cfg.eval.kind == "flow" else "diffusion_engine"):
        g = run.stream("eval")
        if cfg.eval.kind == "flow":
            x = fwd_euler(model, cfg.flow.eta, g.standard_normal((n, model.dim)))
        else:
            x = sample_trajectory(model, _schedule(cfg), g, n_samples=n).final
    with stage("cli_runner"):
        truth = target.sample(n, run.stream("eval/target"))
        run.write_table([_summary_row("model", make_reward(cfg.reward)(x),
                                      sliced_w2=distribution_distance(x, truth))], "metrics")


TASK_FUNCS = {"train-base": task_train_base, "graft": task_graft, "pgraft": task_pgraft,
              "invnoise": task_invnoise, "diagnose": task_diagnose, "eval": task_eval}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graftlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in TASKS + ("run",):
        p = sub.add_parser(name, help="run the task named in the config" if name == "run"
                           else f"{name} experiment")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS thread limit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(args.config).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read config: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if set(data) >= {"hash", "config"}:
        # a manifest from an earlier run: replay its resolved config
        data = data["config"]
        if not isinstance(data, dict):
            raise ConfigError("manifest config must be a mapping")
    if args.command != "run":
        data.setdefault("task", args.command)
        if data["task"] != args.command:
            raise ConfigError(f"config task {data['task']!r} does not match {args.command!r}")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be positive")
    return parse_config(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        inputs = [p for p in (cfg.reference_checkpoint, cfg.eval.checkpoint) if p]
        for p in inputs:
            if not Path(p).is_file():
                raise ConfigError(f"input file not found: {p}")
    except ConfigError as err:
        print(f"graftlab: invalid config: {err}", file=sys.stderr)
        return 2
    try:
        with stage("cli_runner"):
            run = Run(cfg, inputs)
            if run.manifest_path.exists():
                raise FileExistsError(f"run {run.prefix} already exists in {run.out}")
            run.out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            TASK_FUNCS[cfg.task](cfg, run)
        with stage("cli_runner"):
            run.write_manifest()
    except StageError as err:
        print(f"graftlab: runtime failure in {err.module}: {err}", file=sys.stderr)
        return 1
    print(run.manifest_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
