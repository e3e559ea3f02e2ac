"""Stage orchestration with digest manifests.

Each stage writes its artifacts under the output directory and a manifest
``stages/<stage>.json`` holding the config digest, the digests of upstream
outputs it consumed and a sha256 per output file. Wall times go to a
separate ``stages/<stage>.timing.json`` that is never digested, so reruns
with the same config and seed reproduce every digested byte.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoints as ck
from .datasets import build_family, read_dataset, simulate_regime, write_dataset
from .families import FamilySpec, load_preset
from .merge import (CoordinateLine, compose_at, dare_merge, decompose, output_ensemble, task_arithmetic,
                    ties_merge)
from .metrics import (bootstrap_ci, coordinate_correlation, full_index, make_report, per_frame_l2,
                      physics_ns2d, physics_rdb, read_csv, relative_gain, rows_to_csv, split_protocol,
                      win_loss_regret)
from .operator import FNO, Normalizer, OperatorConfig, finetune_endpoint, train_anchor
from .select import (OBJECTIVES, AlphaBank, SelectorConfig, argmin_tie, calibrate_gamma, prefix_objective,
                     select_coord, select_prefix, select_scale, selection_csv, wrong_sign)
from .svg import chart
from .theory import (BOUND_HEADER, audit_curves, finite_difference_orders, phase_shifted_sine,
                     sup_abs_sin, verify_lemma_synthetic)

STAGES = ("gen-data", "train-anchor", "finetune-endpoints", "merge-sweep", "calibrate", "select",
          "evaluate", "theory-audit", "report")
DEPS = {
    "gen-data": (),
    "train-anchor": ("gen-data",),
    "finetune-endpoints": ("train-anchor",),
    "merge-sweep": ("finetune-endpoints",),
    "calibrate": ("merge-sweep",),
    "select": ("calibrate",),
    "evaluate": ("select",),
    "theory-audit": ("finetune-endpoints",),
    "report": ("evaluate", "theory-audit"),
}


class PipelineError(RuntimeError):
    pass


class MissingArtifact(PipelineError):
    pass


class StaleArtifact(PipelineError):
    pass


def closure(stage: str) -> list[str]:
    seen = []

    def visit(s):
        for d in DEPS[s]:
            visit(d)
            if d not in seen:
                seen.append(d)
    visit(stage)
    return seen


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_of(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()


def _write_text(path, text: str):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _afmt(a: float) -> str:
    return f"{a:+.4f}"


# --------------------------------------------------------------------------
# configuration


@dataclass
class Experiment:
    config: dict
    out: str
    jobs: int = 1
    spec: FamilySpec = field(init=False)
    op: OperatorConfig = field(init=False)
    sel: SelectorConfig = field(init=False)
    bank: AlphaBank = field(init=False)

    def __post_init__(self):
        c = self.config
        self.spec = FamilySpec.from_dict(c["family"])
        channels = {"diffreact": 2, "ns2d": 1, "rdb": 1}[self.spec.family]
        self.op = OperatorConfig(**{**c["operator"], "channels": channels, "grid": self.spec.grid,
                                    "seed": int(c.get("seed", 0))})
        s = c.get("selector", {})
        self.sel = SelectorConfig(mode="prefix", K=s.get("K", 4), objective=s.get("objective", "full-prefix"),
                                  aggregate=s.get("aggregate", "per-sample"))
        if self.sel.K >= self.spec.T:
            raise PipelineError(f"prefix length K={self.sel.K} must be below T={self.spec.T}")
        self.bank = AlphaBank(tuple(s.get("bank", AlphaBank.default().values)))

    @property
    def digest(self) -> str:
        return digest_of(self.config)

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    @property
    def tasks(self):
        return self.spec.tasks()

    def task(self, role, group="train"):
        return next(t for t in self.tasks if t.role == role and t.group == group)

    def eval_tasks(self, group="eval"):
        return [t for t in self.tasks if t.group == group]


def load_config(ref: str, seed: int | None = None) -> dict:
    """Preset name or JSON path; ``seed`` overrides the configured seed."""
    if os.path.exists(ref):
        with open(ref) as f:
            cfg = json.load(f)
    else:
        cfg = load_preset(ref)
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


# --------------------------------------------------------------------------
# manifests


def _stage_manifest_path(exp, stage):
    return exp.path("stages", f"{stage}.json")


def check_upstream(exp: Experiment, stage: str) -> dict:
    """Verify upstream manifests exist, match this config and still match disk."""
    inputs = {}
    for up in closure(stage):
        p = _stage_manifest_path(exp, up)
        if not os.path.exists(p):
            raise MissingArtifact(f"stage {stage!r} needs {up!r}; run it first (no {p})")
        m = _read_json(p)
        if m["config_digest"] != exp.digest:
            raise StaleArtifact(f"{up!r} artifacts were produced with a different config")
        for rel, h in m["outputs"].items():
            fp = exp.path(rel)
            if not os.path.exists(fp):
                raise MissingArtifact(f"{up!r} output {rel} is missing")
            if sha256_file(fp) != h:
                raise StaleArtifact(f"{up!r} output {rel} changed since it was written (digest mismatch)")
        inputs[up] = m["outputs_digest"]
    return inputs


def write_manifest(exp: Experiment, stage: str, inputs: dict, files: list, extra=None, wall=0.0, sidecars=()):
    outputs = {os.path.relpath(f, exp.out): sha256_file(f) for f in sorted(files)}
    m = {"stage": stage, "config_digest": exp.digest, "inputs": inputs, "inputs_digest": digest_of(inputs),
         "outputs": outputs, "outputs_digest": digest_of(outputs)}
    if extra:
        m["result"] = extra
    _write_json(_stage_manifest_path(exp, stage), m)
    _write_json(exp.path("stages", f"{stage}.timing.json"),
                {"wall_seconds": round(wall, 3), "sidecars": sorted(os.path.relpath(s, exp.out) for s in sidecars)})
    top = exp.path("manifest.json")
    tm = _read_json(top) if os.path.exists(top) else {"stages": {}}
    tm["config_digest"] = exp.digest
    tm["config"] = exp.config
    tm["stages"][stage] = {"outputs_digest": m["outputs_digest"], "inputs_digest": m["inputs_digest"]}
    _write_json(top, tm)
    return m


def verify(out: str) -> list[str]:
    """Re-check every recorded stage digest against the files on disk; returns problems."""
    problems = []
    top = os.path.join(out, "manifest.json")
    if not os.path.exists(top):
        return [f"no manifest at {top}"]
    tm = _read_json(top)
    for stage, rec in sorted(tm["stages"].items()):
        m = _read_json(os.path.join(out, "stages", f"{stage}.json"))
        if m["outputs_digest"] != rec["outputs_digest"] or digest_of(m["outputs"]) != m["outputs_digest"]:
            problems.append(f"{stage}: manifest digest inconsistent")
        for rel, h in m["outputs"].items():
            fp = os.path.join(out, rel)
            if not os.path.exists(fp):
                problems.append(f"{stage}: missing {rel}")
            elif sha256_file(fp) != h:
                problems.append(f"{stage}: digest mismatch for {rel}")
    return problems


# --------------------------------------------------------------------------
# helpers shared by stages


def _data(exp, task):
    return read_dataset(exp.path("data", task.name))


def _model(anchor: ck.Checkpoint, exp: Experiment) -> FNO:
    return FNO(exp.op, Normalizer.from_buffers(anchor.buffers))


def _load_line(exp) -> tuple[CoordinateLine, ck.Checkpoint]:
    anchor = ck.load(exp.path("checkpoints", "anchor.ckpt"))
    low = ck.load(exp.path("checkpoints", "expert_low.ckpt"))
    high = ck.load(exp.path("checkpoints", "expert_high.ckpt"))
    lo, hi = exp.bank.bounds
    return CoordinateLine(decompose(anchor, low, high), lo, hi), anchor


def _rollout(model, theta, u0, T):
    pred = model.rollout(theta, u0, T).frames
    return np.concatenate([u0[:, None], pred], axis=1)


class _LineCache:
    """Rollouts of theta(alpha) per (regime, alpha); one composed checkpoint per alpha."""

    def __init__(self, exp, line, model):
        self.exp, self.line, self.model = exp, line, model
        self.weights, self.roll = {}, {}

    def theta(self, alpha):
        if alpha not in self.weights:
            self.weights[alpha] = compose_at(self.line, alpha).weights
        return self.weights[alpha]

    def __call__(self, key, alpha, u0):
        k = (key, float(alpha))
        if k not in self.roll:
            self.roll[k] = _rollout(self.model, self.theta(alpha), u0, self.exp.spec.T)
        return self.roll[k]


def _sample_metrics(pred, truth, cal, fut):
    e = per_frame_l2(pred[1:], truth[1:])  # frames 1..T
    T = len(e)
    full = float(np.mean(e))
    c = float(np.mean(e[np.asarray(list(cal)) - 1]))
    f = float(np.mean(e[np.asarray(list(fut)) - 1]))
    assert T == len(cal) + len(fut)
    return full, c, f


# --------------------------------------------------------------------------
# stages


def stage_gen_data(exp: Experiment):
    datasets = build_family(exp.spec, jobs=exp.jobs)
    files = []
    for name, ds in datasets.items():
        d = exp.path("data", name)
        write_dataset(ds, d, exp.spec)
        files += [os.path.join(d, f) for f in sorted(os.listdir(d))]
    rows = [(t.name, t.group, t.role, t.lam, t.s, " ".join(map(str, t.seeds))) for t in exp.tasks]
    p = exp.path("data", "regimes.csv")
    _write_text(p, rows_to_csv(("regime", "group", "role", "lam", "s", "seeds"), rows))
    return files + [p], {"regimes": len(datasets), "trajectories": sum(len(d.seeds) for d in datasets.values())}, ()


def _save_log(exp, log, stem):
    p, q = exp.path("logs", f"{stem}.csv"), exp.path("logs", f"{stem}.timing.csv")
    os.makedirs(exp.path("logs"), exist_ok=True)
    log.to_csv(p)
    log.timing_csv(q)
    return p, q


def stage_train_anchor(exp: Experiment):
    sup = [t for t in exp.tasks if t.role == "support"]
    trajs = [tr for t in sup for tr in _data(exp, t).trajectories]
    theta, norm, log = train_anchor(exp.op, trajs)
    anchor = ck.Checkpoint(theta, norm.as_buffers(), {"operator": exp.op.to_dict(), "config_digest": exp.digest},
                           {"role": "anchor", "regimes": [t.name for t in sup], "best_step": log.best_step})
    p = exp.path("checkpoints", "anchor.ckpt")
    h = ck.save(anchor, p)
    lp, tp = _save_log(exp, log, "anchor_train")
    return [p, lp], {"content_hash": h, "best_step": log.best_step, "best_loss": log.best_loss,
                     "parameters": theta.size}, [tp]


def stage_finetune(exp: Experiment):
    anchor = ck.load(exp.path("checkpoints", "anchor.ckpt"))
    norm = Normalizer.from_buffers(anchor.buffers)
    files, side, res = [], [], {}
    for role, stem in (("endpoint-low", "expert_low"), ("endpoint-high", "expert_high")):
        task = exp.task(role)
        theta, log = finetune_endpoint(anchor.weights, exp.op, norm, _data(exp, task).trajectories)
        ckpt = ck.Checkpoint(theta, anchor.buffers, anchor.config,
                             {"role": role, "parent": anchor.content_hash, "anchor": anchor.content_hash,
                              "regime": task.name, "lam": task.lam, "best_step": log.best_step})
        p = exp.path("checkpoints", f"{stem}.ckpt")
        res[stem] = ck.save(ckpt, p)
        lp, tp = _save_log(exp, log, f"{stem}_finetune")
        files += [p, lp]
        side.append(tp)
    return files, res, side


SWEEP_HEADER = ("regime", "group", "role", "lam", "s", "sample", "alpha", "full_l2", "cal_l2", "future_l2",
                *[f"prefix_{o}" for o in OBJECTIVES])


def stage_merge_sweep(exp: Experiment):
    line, anchor = _load_line(exp)
    model = _model(anchor, exp)
    files = []
    for a in exp.bank:
        p = exp.path("checkpoints", "merged", f"alpha{_afmt(a)}.ckpt")
        ck.save(compose_at(line, a), p)
        files.append(p)
    d = line.decomposition
    bl = exp.config.get("baselines", {})
    ta = bl.get("task_arithmetic", [1.0, 1.0])
    baselines = {
        "task-arithmetic": task_arithmetic(anchor, [(d.delta_low, ta[0]), (d.delta_high, ta[1])]),
        "ties": ties_merge(anchor, [d.delta_low, d.delta_high], trim=bl.get("ties_trim", 0.2)),
        "dare": dare_merge(anchor, [d.delta_low, d.delta_high], p=bl.get("dare_p", 0.9), seed=bl.get("dare_seed", 0)),
    }
    for name, c in baselines.items():
        p = exp.path("checkpoints", "baselines", f"{name}.ckpt")
        ck.save(c, p)
        files.append(p)
    cal, fut = split_protocol(exp.spec.T, exp.sel.K)
    K = exp.sel.K
    cache = _LineCache(exp, line, model)
    rows = []
    for t in exp.eval_tasks("eval") + exp.eval_tasks("validation"):
        traj = _data(exp, t).stacked()
        for a in exp.bank:
            pred = cache(t.name, a, traj[:, 0])
            for i, seed in enumerate(t.seeds):
                full, c, f = _sample_metrics(pred[i], traj[i], cal, fut)
                pre = [float(prefix_objective(pred[i, 1:K + 1], traj[i, 1:K + 1], o)) for o in OBJECTIVES]
                rows.append((t.name, t.group, t.role, t.lam, t.s, seed, a, full, c, f, *pre))
    p = exp.path("sweep.csv")
    _write_text(p, rows_to_csv(SWEEP_HEADER, rows))
    return files + [p], {"rows": len(rows)}, ()


def _sweep_table(exp):
    with open(exp.path("sweep.csv")) as f:
        return read_csv(f.read())


def _mean_loss(rows, regime, alpha, col="future_l2"):
    v = [float(r[col]) for r in rows if r["regime"] == regime and float(r["alpha"]) == alpha]
    return float(np.mean(v))


def stage_calibrate(exp: Experiment):
    line, anchor = _load_line(exp)
    model = _model(anchor, exp)
    cache = _LineCache(exp, line, model)
    val = exp.eval_tasks("validation")
    cal, fut = split_protocol(exp.spec.T, exp.sel.K)
    grid = exp.config.get("selector", {}).get("gamma_grid", [1.0])
    data = {t.name: _data(exp, t).stacked() for t in val}

    def loss_fn(i, alpha):
        t = val[i]
        traj = data[t.name]
        pred = cache(t.name, alpha, traj[:, 0])
        return float(np.mean([_sample_metrics(pred[j], traj[j], cal, fut)[2] for j in range(len(traj))]))

    if val:
        gamma, means = calibrate_gamma(loss_fn, [t.s for t in val], grid, exp.bank.bounds)
    else:
        gamma, means = 1.0, []
    p = exp.path("calibration.csv")
    _write_text(p, rows_to_csv(("gamma", "mean_validation_future_l2"), list(zip(sorted(grid), means))))
    q = exp.path("calibration.json")
    _write_json(q, {"gamma": gamma, "validation_regimes": [t.name for t in val],
                    "note": "" if val else "no validation regimes; gamma fixed at 1"})
    return [p, q], {"gamma": gamma}, ()


def stage_select(exp: Experiment):
    line, anchor = _load_line(exp)
    model = _model(anchor, exp)
    cache = _LineCache(exp, line, model)
    gamma = _read_json(exp.path("calibration.json"))["gamma"]
    sweep = _sweep_table(exp)
    bounds, K = exp.bank.bounds, exp.sel.K
    fam = exp.spec.family
    rows = []

    def prefix_rollout(alpha, u0, k):
        return _rollout(model, cache.theta(alpha), u0, k)

    for t in exp.eval_tasks("eval"):
        prefix = _data(exp, t).stacked()[:, :K + 1]  # only u_0..u_K leave this line
        base = {"family": fam, "lam": t.lam, "s": t.s, "K": K, "objective": ""}
        for mode, a in (("coord", select_coord(t.s, bounds)), ("scale", select_scale(t.s, gamma, bounds)),
                        ("wrong-sign", wrong_sign(t.s, bounds))):
            rows.append({**base, "mode": mode, "sample": "all", "alpha_hat": a})
        res = select_prefix(prefix_rollout, exp.bank, prefix, exp.sel.objective, exp.sel.aggregate, T=exp.spec.T)
        if len(res) == 1:
            res = res * len(t.seeds)
        for seed, r in zip(t.seeds, res):
            rows.append({**base, "mode": "prefix", "objective": exp.sel.objective, "sample": seed,
                         "alpha_hat": r.alpha, "losses": r.losses})
        losses = [_mean_loss(sweep, t.name, a) for a in exp.bank]
        i = argmin_tie(list(exp.bank), losses)
        rows.append({**base, "mode": "oracle", "objective": "future_l2", "sample": "all",
                     "alpha_hat": exp.bank.values[i], "losses": losses})
    p = exp.path("selections.csv")
    _write_text(p, selection_csv(rows, exp.bank))
    return [p], {"gamma": gamma, "rows": len(rows)}, ()


PER_SAMPLE_HEADER = ("regime", "group", "role", "lam", "s", "method", "sample", "alpha", "full_l2", "cal_l2",
                     "future_l2")


def _selections(exp):
    with open(exp.path("selections.csv")) as f:
        return read_csv(f.read())


def stage_evaluate(exp: Experiment):
    line, anchor = _load_line(exp)
    model = _model(anchor, exp)
    cache = _LineCache(exp, line, model)
    sel = _selections(exp)
    sweep = _sweep_table(exp)
    T = exp.spec.T
    cal, fut = split_protocol(T, exp.sel.K)
    lo_ck = line.decomposition.expert_low
    hi_ck = line.decomposition.expert_high
    fixed = {"base": anchor.weights, "expert-low": lo_ck.weights, "expert-high": hi_ck.weights}
    for name in ("task-arithmetic", "ties", "dare"):
        fixed[name] = ck.load(exp.path("checkpoints", "baselines", f"{name}.ckpt")).weights
    rows, phys_rows, checks = [], [], {}
    exact_endpoints = True
    for t in exp.eval_tasks("eval"):
        traj = _data(exp, t).stacked()
        u0 = traj[:, 0]
        mine = [r for r in sel if float(r["lam"]) == t.lam]
        pick = {m: float(next(r["alpha_hat"] for r in mine if r["mode"] == m))
                for m in ("coord", "scale", "wrong-sign", "oracle")}
        prefix_alpha = {int(r["sample"]): float(r["alpha_hat"]) for r in mine if r["mode"] == "prefix"}
        preds = {}
        for name, th in fixed.items():
            preds[name] = (_rollout(model, th, u0, T), [None] * len(t.seeds))
        for method, a in (("average", 0.0), ("ccm-coord", pick["coord"]), ("ccm-scale", pick["scale"]),
                          ("oracle", pick["oracle"]), ("wrong-sign", pick["wrong-sign"])):
            preds[method] = (cache(t.name, a, u0), [a] * len(t.seeds))
        pp = np.stack([cache(t.name, prefix_alpha[s], u0)[i] for i, s in enumerate(t.seeds)])
        preds["ccm-prefix"] = (pp, [prefix_alpha[s] for s in t.seeds])
        a = pick["coord"]
        wl, wh = (1 - a) / 2, (1 + a) / 2
        ens = output_ensemble([lambda u: model.step(lo_ck.weights, u), lambda u: model.step(hi_ck.weights, u)],
                              [wl, wh], u0, T)
        preds["output-ensemble"] = (np.moveaxis(ens, 0, 1), [a] * len(t.seeds))
        # composing at the endpoints must reproduce the experts bitwise
        for e, name in ((-1.0, "expert-low"), (1.0, "expert-high")):
            if not np.array_equal(cache(t.name, e, u0), preds[name][0]):
                exact_endpoints = False
        for method, (pred, alphas) in preds.items():
            for i, seed in enumerate(t.seeds):
                full, c, f = _sample_metrics(pred[i], traj[i], cal, fut)
                rows.append((t.name, t.group, t.role, t.lam, t.s, method, seed,
                             "" if alphas[i] is None else alphas[i], full, c, f))
                if exp.spec.family in ("rdb", "ns2d"):
                    fn = physics_rdb if exp.spec.family == "rdb" else physics_ns2d
                    for k, v in fn(pred[i], traj[i], list(fut)).values.items():
                        phys_rows.append((t.name, method, seed, k, v))
    p = exp.path("per_sample.csv")
    _write_text(p, rows_to_csv(PER_SAMPLE_HEADER, rows))
    files = [p]
    if phys_rows:
        q = exp.path("physics.csv")
        _write_text(q, rows_to_csv(("regime", "method", "sample", "metric", "value"), phys_rows))
        files.append(q)
    # aggregated results, one row per (family, regime, method, metric)
    res = []
    regimes = [t.name for t in exp.eval_tasks("eval")]
    methods = list(dict.fromkeys(r[5] for r in rows))
    for reg in regimes:
        for m in methods:
            sub = [r for r in rows if r[0] == reg and r[5] == m]
            for j, metric in ((8, "full_l2"), (9, "cal_l2"), (10, "future_l2")):
                res.append((exp.spec.family, reg, m, metric, float(np.mean([r[j] for r in sub]))))
    q = exp.path("results.csv")
    _write_text(q, rows_to_csv(("family", "regime", "method", "metric", "value"), res))
    files.append(q)

    # invariant suite
    ood = [t.name for t in exp.eval_tasks("eval") if t.role.startswith("ood")]
    dom = True
    for t in exp.eval_tasks("eval"):
        bank_means = [_mean_loss(sweep, t.name, a) for a in exp.bank]
        orc = [r for r in rows if r[0] == t.name and r[5] == "oracle"]
        om = float(np.mean([r[10] for r in orc]))
        dom &= all(om <= b for b in bank_means)
    ood_fixed = [float(np.mean([_mean_loss(sweep, n, a) for n in ood])) for a in exp.bank] if ood else []
    oracle_alpha = {float(r["lam"]): float(r["alpha_hat"]) for r in sel if r["mode"] == "oracle"}
    ood_oracle = float(np.mean([_mean_loss(sweep, t.name, oracle_alpha[t.lam])
                                for t in exp.eval_tasks("eval") if t.name in ood])) if ood else math.nan
    decomp_ok = True
    for r in rows:
        full, c, f = r[8], r[9], r[10]
        if abs(full - (len(cal) * c + len(fut) * f) / T) > 1e-12 * max(1.0, full):
            decomp_ok = False
    checks = {
        "oracle_argmin_dominance_per_regime": bool(dom),
        "oracle_ood_mean_le_every_fixed_alpha": bool(all(ood_oracle <= x for x in ood_fixed)) if ood else True,
        "endpoint_composition_bitwise": bool(exact_endpoints),
        "split_protocol_mean_decomposition": bool(decomp_ok),
        "split_protocol_partition": sorted(set(cal) | set(fut)) == list(full_index(T)) and not set(cal) & set(fut),
    }
    q = exp.path("invariants_evaluate.json")
    _write_json(q, {"checks": checks, "ood_oracle_mean": ood_oracle, "ood_fixed_alpha_means": ood_fixed})
    files.append(q)
    return files, {"checks": checks, "ok": all(checks.values())}, ()


def _probe_curve(exp, line, model, alphas, jobs):
    seeds = exp.config.get("theory", {}).get("probe_seeds", {"start": 5000, "count": 8})
    if isinstance(seeds, dict):
        seeds = list(range(seeds["start"], seeds["start"] + seeds["count"]))
    work = [(exp.spec, exp.spec.lam_at(a), s) for a in alphas for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sims = list(pool.map(_sim_job, work))
    else:
        sims = [_sim_job(w) for w in work]
    n = len(seeds)
    S, F = [], []
    for i, a in enumerate(alphas):
        truth = np.stack(sims[i * n:(i + 1) * n])
        theta = compose_at(line, a).weights
        pred = _rollout(model, theta, truth[:, 0], exp.spec.T)
        S.append(truth[:, 1:])
        F.append(pred[:, 1:])
    return F, S, seeds


def _sim_job(args):
    spec, lam, seed = args
    return simulate_regime(spec, lam, seed)


def _valid_alphas(exp):
    """Bank points whose physical parameter stays inside the family's valid range."""
    floor = 1.0 if exp.spec.family == "rdb" else 0.0
    # lam is increasing in alpha, so the valid points form one run ending at the top of the bank
    return [a for a in exp.bank if exp.spec.lam_at(a) > floor]


def stage_theory_audit(exp: Experiment):
    line, anchor = _load_line(exp)
    model = _model(anchor, exp)
    alphas = _valid_alphas(exp)
    F, S, seeds = _probe_curve(exp, line, model, alphas, exp.jobs)
    rep = audit_curves(alphas, F, S)
    p = exp.path("bound_audit.csv")
    _write_text(p, rows_to_csv(BOUND_HEADER, list(rep.rows())))
    q = exp.path("bound_mismatch.csv")
    _write_text(q, rows_to_csv(("alpha", "s", "measured", "bound_plus_penalty"), rep.mismatch))
    grid = np.linspace(-1.5, 1.5, 25)
    quad = verify_lemma_synthetic(lambda t: np.array([t * t]), lambda lo, hi: 2.0, grid)
    sine = verify_lemma_synthetic(lambda t: np.array([math.sin(t)]), sup_abs_sin, grid)
    U, dU = phase_shifted_sine()
    orders = finite_difference_orders(U, dU, [0.4, 0.2, 0.1, 0.05])
    interior = [i for i, a in enumerate(rep.alphas) if a not in (-1.0, 1.0)]
    checks = {
        "bound_holds_interior_within_tolerance": bool(not np.any(rep.flagged[interior])),
        "bound_exact_at_endpoints": bool(all(abs(rep.bound[i] - rep.measured[i]) <= 1e-12 * max(1, rep.measured[i])
                                             for i, a in enumerate(rep.alphas) if a in (-1.0, 1.0))),
        "mismatch_penalty_holds": bool(all(m[2] <= m[3] * (1 + 1e-12) for m in rep.mismatch)),
        "lemma_quadratic_saturates": bool(np.max(np.abs(quad.slack)) <= 1e-12),
        "lemma_sine_holds": bool(sine.holds),
        "shared_order_2": bool(1.8 <= orders.shared_slope <= 2.2),
        "directional_order_3": bool(2.8 <= orders.directional_slope <= 3.2),
    }
    r = exp.path("theory.json")
    _write_json(r, {"checks": checks, "probe_seeds": seeds, "alphas": [float(a) for a in rep.alphas],
                    "L_S": rep.L_S, "eps_minus": rep.eps_minus, "eps_plus": rep.eps_plus,
                    "min_slack": float(np.min(rep.slack)),
                    "fd_slopes": [orders.shared_slope, orders.directional_slope]})
    return [p, q, r], {"checks": checks, "ok": all(checks.values())}, ()


# --------------------------------------------------------------------------
# report


def _read(exp, name):
    with open(exp.path(name)) as f:
        return read_csv(f.read())


def stage_report(exp: Experiment):
    ps = _read(exp, "per_sample.csv")
    sweep = _sweep_table(exp)
    sel = _selections(exp)
    tasks = exp.eval_tasks("eval")
    ood = [t.name for t in tasks if t.role.startswith("ood")]
    ind = [t.name for t in tasks if not t.role.startswith("ood")]
    methods = list(dict.fromkeys(r["method"] for r in ps))
    per = {}
    for r in ps:
        per.setdefault(r["method"], {}).setdefault(r["regime"], []).append(float(r["future_l2"]))
    reports = {m: make_report(per[m], ood) for m in methods}
    files = []
    os.makedirs(exp.path("report"), exist_ok=True)

    # main comparison (future-only window)
    main = []
    base_ood = reports["base"].ood_mean if ood else math.nan
    for m in methods:
        rp = reports[m]
        idm = float(np.mean([rp.per_regime[n] for n in ind])) if ind else math.nan
        om = rp.ood_mean if ood else math.nan
        ow = rp.ood_worst if ood else math.nan
        main.append((m, om, ow, idm, relative_gain(base_ood, om) if ood else math.nan))
    files.append(_emit(exp, "table_main.csv", ("method", "ood_mean", "ood_worst", "id_mean", "gain_vs_base"), main))

    # wrong-sign control per OOD regime
    ws = []
    for n in ood:
        c, w = reports["ccm-coord"].per_regime[n], reports["wrong-sign"].per_regime[n]
        ws.append((n, c, w, w / c))
    if ood:
        c, w = reports["ccm-coord"].ood_mean, reports["wrong-sign"].ood_mean
        ws.append(("ood-mean", c, w, w / c))
    files.append(_emit(exp, "table_wrong_sign.csv", ("regime", "ccm_coord", "wrong_sign", "ratio"), ws))

    # win / loss / negative regret against the base, over evaluation tasks
    wl = []
    names = [t.name for t in tasks]
    for m in methods:
        if m == "base":
            continue
        b = [reports["base"].per_regime[n] for n in names]
        x = [reports[m].per_regime[n] for n in names]
        wl.append((m, *win_loss_regret(b, x)))
    files.append(_emit(exp, "table_win_loss.csv", ("method", "wins", "losses", "neg_regret"), wl))

    # paired per-sample improvements on OOD with bootstrap intervals
    bs = []
    if ood:
        base_s = [v for n in ood for v in reports["base"].per_sample[n]]
        for m in methods:
            if m == "base":
                continue
            imp = np.array(base_s) - np.array([v for n in ood for v in reports[m].per_sample[n]])
            bs.append((m, *bootstrap_ci(imp, 10000, 0.95, seed=exp.config.get("seed", 0))))
    files.append(_emit(exp, "table_bootstrap.csv", ("method", "mean_improvement", "ci_lo", "ci_hi"), bs))

    # merge baselines
    mb = [row for row in main if row[0] in ("average", "task-arithmetic", "ties", "dare", "output-ensemble",
                                            "ccm-coord", "ccm-prefix")]
    files.append(_emit(exp, "table_baselines.csv", ("method", "ood_mean", "ood_worst", "id_mean", "gain_vs_base"), mb))

    # prefix objectives: per-sample argmin of each objective, scored on the future window
    po = []
    for o in OBJECTIVES:
        vals = []
        for n in names:
            sub = [r for r in sweep if r["regime"] == n]
            for s in dict.fromkeys(r["sample"] for r in sub):
                cand = [r for r in sub if r["sample"] == s]
                i = argmin_tie([float(r["alpha"]) for r in cand], [float(r[f"prefix_{o}"]) for r in cand])
                vals.append((n in ood, float(cand[i]["future_l2"])))
        po.append((o, float(np.mean([v for f, v in vals if f])) if ood else math.nan,
                   float(np.mean([v for _, v in vals]))))
    files.append(_emit(exp, "table_prefix_objectives.csv", ("objective", "ood_mean", "all_mean"), po))

    # coordinate law
    cl = []
    for t in tasks:
        orc = float(next(r["alpha_hat"] for r in sel if r["mode"] == "oracle" and float(r["lam"]) == t.lam))
        crd = float(next(r["alpha_hat"] for r in sel if r["mode"] == "coord" and float(r["lam"]) == t.lam))
        cl.append((t.name, t.lam, t.s, orc, crd))
    files.append(_emit(exp, "coordinate_law.csv", ("regime", "lam", "s", "oracle_alpha", "coord_alpha"), cl))
    try:
        r_coord = coordinate_correlation([(x[2], x[3]) for x in cl])
    except ValueError:
        r_coord = math.nan

    if os.path.exists(exp.path("physics.csv")):
        ph = _read(exp, "physics.csv")
        agg = {}
        for r in ph:
            if r["regime"] in ood:
                agg.setdefault((r["method"], r["metric"]), []).append(float(r["value"]))
        files.append(_emit(exp, "table_physics.csv", ("method", "metric", "ood_mean"),
                           [(m, k, float(np.mean(v))) for (m, k), v in agg.items()]))

    # plots
    files.append(_text(exp, "coordinate_law.svg", chart(
        [("oracle alpha", [(x[2], x[3]) for x in cl]), ("clip(s)", [(x[2], x[4]) for x in cl])],
        "coordinate law", "normalized coordinate s", "alpha", mode="scatter")))
    series = []
    for t in tasks:
        series.append((f"s={t.s:g}", [(a, _mean_loss(sweep, t.name, a)) for a in exp.bank]))
    files.append(_text(exp, "alpha_sweep.svg", chart(series, "future rollout L2 along the line", "alpha",
                                                     "future L2")))
    comp = [(m, [(t.s, reports[m].per_regime[t.name]) for t in tasks])
            for m in ("base", "average", "ccm-coord", "ccm-prefix", "oracle", "wrong-sign") if m in reports]
    files.append(_text(exp, "ood_comparison.svg", chart(comp, "future rollout L2 by regime", "s", "future L2")))

    th = _read_json(exp.path("theory.json"))
    ev = _read_json(exp.path("invariants_evaluate.json"))
    lines = [f"experiment: {exp.config.get('name', '')}  family: {exp.spec.family}  config: {exp.digest[:16]}",
             "metric: per-frame relative L2, frame mean per sample then sample mean; "
             f"reported window = future frames {exp.sel.K + 1}..{exp.spec.T}",
             "", f"{'method':18s} {'ood_mean':>10s} {'ood_worst':>10s} {'id_mean':>10s} {'gain':>8s}"]
    for m, om, ow, idm, g in main:
        lines.append(f"{m:18s} {om:10.4g} {ow:10.4g} {idm:10.4g} {100 * g:7.1f}%")
    lines += ["", f"coordinate law: Pearson r(s, oracle alpha) = {r_coord:.4f}",
              f"evaluate invariants: {ev['checks']}", f"theory checks: {th['checks']}",
              f"bound audit min slack: {th['min_slack']:.4g}"]
    files.append(_text(exp, "summary.txt", "\n".join(lines) + "\n"))
    return files, {"correlation": r_coord}, ()


def _emit(exp, name, header, rows):
    p = exp.path("report", name)
    _write_text(p, rows_to_csv(header, rows))
    return p


def _text(exp, name, text):
    p = exp.path("report", name)
    _write_text(p, text)
    return p


RUNNERS = {
    "gen-data": stage_gen_data,
    "train-anchor": stage_train_anchor,
    "finetune-endpoints": stage_finetune,
    "merge-sweep": stage_merge_sweep,
    "calibrate": stage_calibrate,
    "select": stage_select,
    "evaluate": stage_evaluate,
    "theory-audit": stage_theory_audit,
    "report": stage_report,
}


def run_stage(exp: Experiment, stage: str) -> dict:
    if stage not in RUNNERS:
        raise PipelineError(f"unknown stage {stage!r}")
    inputs = check_upstream(exp, stage)
    t0 = time.perf_counter()
    files, result, sidecars = RUNNERS[stage](exp)
    return write_manifest(exp, stage, inputs, files, result, time.perf_counter() - t0, sidecars)


def run_all(exp: Experiment, stages=STAGES) -> dict:
    return {s: run_stage(exp, s) for s in stages}
