"""Task pipelines behind the CLI. Every artifact is a function of (config, seed)."""

from __future__ import annotations

import json
import math
import traceback
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import ddpm, mdp, prm, so3flow, vard
from ..errors import ContractError, DivergenceError, NonFiniteError, VardLabError
from ..rewards import make_reward
from .metrics import MetricsWriter, sliced_wasserstein

EXIT_OK, EXIT_DIVERGED, EXIT_INVALID = 0, 1, 2


def _json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                          encoding="utf-8")


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------- checkpoints

def save_denoiser(path, model, cfg):
    return ad.save_checkpoint(path, model.parameters(), {
        "kind": "denoiser", "config": model.config(), "schedule": cfg.sections["schedule"],
        "dataset": cfg.sections["dataset"], "seed": cfg.seed})


def load_denoiser(path):
    meta = ad.read_manifest(path)
    if meta.get("kind") != "denoiser":
        raise ContractError(f"{path} is not a denoiser checkpoint")
    model = ddpm.Denoiser(**meta["config"])
    ad.load_checkpoint(path, model.parameters())
    return model, ddpm.make_schedule(**meta["schedule"])


def save_value(path, vnet, cfg):
    return ad.save_checkpoint(path, vnet.parameters(), {
        "kind": "value", "config": vnet.config(), "reward": cfg.reward_spec().to_dict(),
        "seed": cfg.seed})


def load_value(path):
    meta = ad.read_manifest(path)
    if meta.get("kind") != "value":
        raise ContractError(f"{path} is not a value checkpoint")
    vnet = prm.ValueNet(**meta["config"])
    ad.load_checkpoint(path, vnet.parameters())
    return vnet


def _require_checkpoint(cfg, name, producer):
    path = cfg.sections["checkpoints"].get(name)
    if not path or not Path(path).with_suffix(".json").exists():
        raise ContractError(f"{cfg.task} needs a {name} checkpoint (checkpoints.{name}); "
                            f"run {producer} first")
    return path


# ---------------------------------------------------------------- tasks

def task_ddpm_pretrain(cfg, out, dump):
    sched, data = cfg.schedule_obj(), cfg.dataset_obj()
    p = cfg.sections["pretrain"]
    model = ddpm.Denoiser(dim=data.dim, n_contexts=data.n_contexts, seed=cfg.seed,
                          **cfg.sections["model"])
    rng = np.random.default_rng(cfg.seed)
    writer = MetricsWriter(["step", "loss"])
    ddpm.pretrain(model, data, sched, int(p["steps"]), rng, batch_size=int(p["batch_size"]),
                  lr=p["lr"], p_uncond=p["p_uncond"], seed=cfg.seed,
                  callback=lambda s, l: writer.add(step=s, loss=l))
    eval_rng = np.random.default_rng([cfg.seed, 1])
    n = int(p["eval_samples"])
    real, c = ddpm.sample_data(data, n, eval_rng)
    gen = ddpm.sample(model, n, sched, eval_rng, contexts=c)
    sw = sliced_wasserstein(gen, real, int(p["n_projections"]), eval_rng)
    ckpt = save_denoiser(out / "checkpoints" / "ddpm", model, cfg)
    if dump:
        states = ddpm.sample_chain(model, c[:64], sched, eval_rng)
        mdp.dump_trajectories(out / "trajectories.jsonl", ddpm.chain_to_trajectories(states, c[:64]))
    return writer, {"final_loss": writer.rows[-1]["loss"] if writer.rows else None,
                    "sliced_wasserstein": sw, "checkpoint": str(ckpt)}


def task_value_pretrain(cfg, out, dump):
    model, sched = load_denoiser(_require_checkpoint(cfg, "ddpm", "ddpm-pretrain"))
    v = {k: x for k, x in cfg.sections["value"].items() if k != "train"}
    vnet = prm.ValueNet(dim=model.dim, n_contexts=model.n_contexts, T=sched.T, seed=cfg.seed, **v)
    reward = make_reward(cfg.reward_spec())
    writer = MetricsWriter(["step", "train_loss", "holdout_loss"])
    prm.pretrain_value(vnet, model, reward, cfg.value_train_obj(), np.random.default_rng(cfg.seed),
                       sched, log=lambda s, a, b: writer.add(step=s, train_loss=a, holdout_loss=b))
    ckpt = save_value(out / "checkpoints" / "value", vnet, cfg)
    if dump:
        mdp.dump_trajectories(out / "trajectories.jsonl", vnet.holdout.trajectories())
    last = writer.rows[-1]
    return writer, {"train_loss": last["train_loss"], "holdout_loss": last["holdout_loss"],
                    "scored_rollouts": vnet.rollouts, "steps": len(writer.rows),
                    "checkpoint": str(ckpt)}


def _finetune_summary(pair, m):
    last = m.rows[-1] if m.rows else {}
    ev = m.evals[-1] if m.evals else None
    return {"pretrained_reward": _finite(m.pretrained_reward),
            "final_eval_reward": None if ev is None else ev[2],
            "final_prior_drift": None if ev is None else ev[3],
            "param_drift": pair.param_drift(), "reference_intact": pair.reference_intact(),
            "scored_rollouts": last.get("scored_rollouts", 0),
            "evals": [list(e) for e in m.evals]}


def _dump_finetuned(pair, out, seed):
    rng = np.random.default_rng([seed, 2])
    c = rng.integers(0, pair.theta.n_contexts, 64)
    states = ddpm.sample_chain(pair.theta, c, pair.sched, rng)
    mdp.dump_trajectories(out / "trajectories.jsonl", ddpm.chain_to_trajectories(states, c))


def task_vard_finetune(cfg, out, dump):
    model, sched = load_denoiser(_require_checkpoint(cfg, "ddpm", "ddpm-pretrain"))
    vnet = load_value(_require_checkpoint(cfg, "value", "value-pretrain"))
    pair = vard.PolicyPair.from_pretrained(model, sched)
    reward = make_reward(cfg.reward_spec())
    _, m = vard.finetune(pair, vnet, reward, cfg.vard_obj(), np.random.default_rng(cfg.seed),
                         seed=cfg.seed)
    save_denoiser(out / "checkpoints" / "finetuned", pair.theta, cfg)
    save_value(out / "checkpoints" / "value-refreshed", vnet, cfg)
    if dump:
        _dump_finetuned(pair, out, cfg.seed)
    return m.writer(), _finetune_summary(pair, m)


def task_baseline_finetune(cfg, out, dump):
    model, sched = load_denoiser(_require_checkpoint(cfg, "ddpm", "ddpm-pretrain"))
    pair = vard.PolicyPair.from_pretrained(model, sched)
    reward = make_reward(cfg.reward_spec())
    b, rng = cfg.sections["baseline"], np.random.default_rng(cfg.seed)
    if b["kind"] == "final-step":
        _, m = vard.baseline_final_step(pair, reward, cfg.vard_obj(), rng, seed=cfg.seed)
    else:
        _, m = vard.baseline_random_last_k(pair, reward, int(b["k"]), cfg.vard_obj(), rng,
                                           seed=cfg.seed, variant=b["variant"])
    save_denoiser(out / "checkpoints" / "finetuned", pair.theta, cfg)
    if dump:
        _dump_finetuned(pair, out, cfg.seed)
    return m.writer(), {**_finetune_summary(pair, m), "baseline": b}


def task_so3_train(cfg, out, dump):
    s = cfg.sections["so3"]
    vnet = so3flow.VectorFieldNet(hidden=s["hidden"], time_dim=s["time_dim"], seed=cfg.seed)
    target = so3flow.exp_map(s["target"])
    writer = MetricsWriter(["step", "loss"])
    so3flow.train_cfm(vnet, so3flow.sample_uniform_so3, so3flow.point_mass(target), int(s["steps"]),
                      np.random.default_rng(cfg.seed), int(s["batch_size"]), s["lr"],
                      s["convention"], log=lambda k, l: writer.add(step=k, loss=l))
    eval_rng = np.random.default_rng([cfg.seed, 1])
    r0 = so3flow.sample_uniform_so3(eval_rng, int(s["eval_samples"]))
    r1 = so3flow.integrate_flow(vnet, r0, int(s["integrate_steps"]), s["convention"])
    d = so3flow.geodesic_distance(r1, target)
    ad.save_checkpoint(out / "checkpoints" / "so3", vnet.parameters(),
                       {"kind": "so3-field", "config": vnet.config(), "seed": cfg.seed})
    so3flow.dump_rotations(out / "samples.jsonl", r1)
    return writer, {"fraction_within_tolerance": float(np.mean(d < s["tolerance"])),
                    "median_distance": float(np.median(d)), "tolerance": s["tolerance"],
                    "convention": s["convention"],
                    "convention_report": so3flow.convention_report(eval_rng)}


def task_verify_lemma1(cfg, out, dump):
    p = cfg.sections["lemma1"]
    rng = np.random.default_rng(cfg.seed)
    writer = MetricsWriter(["step", "d", "sigma", "ratio", "expected_ratio", "rel_error"])
    for i in range(int(p["families"])):
        f = vard.random_gaussian_family(rng)
        rep = vard.check_lemma1(f["d"], f["sigma"], f["family"], f["psi0"], f["mu0"],
                                int(p["n_samples"]), rng, p["shared_noise"])
        writer.add(step=i, d=f["d"], sigma=f["sigma"], ratio=rep["ratio"],
                   expected_ratio=rep["expected_ratio"], rel_error=rep["rel_error"])
    worst = max(r["rel_error"] for r in writer.rows)
    return writer, {"max_rel_error": worst, "within_5_percent": worst < 0.05,
                    "so3_convention_report": so3flow.convention_report(rng)}


def task_eval(cfg, out, dump):
    model, sched = load_denoiser(_require_checkpoint(cfg, "ddpm", "ddpm-pretrain"))
    tuned_path = cfg.sections["checkpoints"].get("finetuned")
    tuned = load_denoiser(tuned_path)[0] if tuned_path else model
    e = cfg.sections["eval"]
    reward = make_reward(cfg.reward_spec())
    rng = np.random.default_rng(cfg.seed)
    n = int(e["samples"])
    c = rng.integers(0, model.n_contexts, n)
    seed = int(rng.integers(2 ** 63))
    base = ddpm.sample(model, n, sched, np.random.default_rng(seed), contexts=c)
    new = ddpm.sample(tuned, n, sched, np.random.default_rng(seed), contexts=c)
    real, _ = ddpm.sample_data(cfg.dataset_obj(), n, rng)
    dirs_rng = np.random.default_rng([cfg.seed, 3])
    r_base, r_new = reward(base, c), reward(new, c)
    row = dict(step=0, mean_reward=float(np.mean(r_new)), pretrained_reward=float(np.mean(r_base)),
               prior_drift=sliced_wasserstein(new, base, int(e["n_projections"]), dirs_rng),
               data_distance=sliced_wasserstein(new, real, int(e["n_projections"]), dirs_rng))
    writer = MetricsWriter(list(row))
    writer.add(**row)
    if dump:
        mdp.dump_trajectories(out / "trajectories.jsonl", ddpm.chain_to_trajectories(
            ddpm.sample_chain(tuned, c[:64], sched, np.random.default_rng(seed)), c[:64]))
    return writer, dict(row)


TASKS = {
    "ddpm-pretrain": task_ddpm_pretrain,
    "value-pretrain": task_value_pretrain,
    "vard-finetune": task_vard_finetune,
    "baseline-finetune": task_baseline_finetune,
    "so3-train": task_so3_train,
    "verify-lemma1": task_verify_lemma1,
    "eval": task_eval,
}


def run(cfg, out_dir=None, dump_trajectories=False, log=print):
    """Execute ``cfg.task``; returns an exit status and writes artifacts to the run directory.

    Outputs: config.json (echo), metrics.csv, summary.json, checkpoints/ and,
    on divergence, diagnostics.json.
    """
    out = Path(out_dir or cfg.output_dir or f"runs/{cfg.task}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    try:
        writer, summary = TASKS[cfg.task](cfg, out, dump_trajectories)
    except (DivergenceError, NonFiniteError) as exc:
        _json(out / "diagnostics.json", {
            "task": cfg.task, "seed": cfg.seed, "error": type(exc).__name__, "message": str(exc),
            "step": getattr(exc, "step", None),
            "traceback": traceback.format_exception_only(type(exc), exc)})
        log(f"error: {exc} (diagnostics in {out / 'diagnostics.json'})")
        return EXIT_DIVERGED
    except VardLabError as exc:
        log(f"error: {exc}")
        return EXIT_INVALID
    writer.write(out / "metrics.csv")
    _json(out / "summary.json", {"task": cfg.task, "seed": cfg.seed, **summary})
    log(f"{cfg.task}: wrote {out}")
    return EXIT_OK
