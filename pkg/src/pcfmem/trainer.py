"""PPO training loops: reward plumbing, inner loop, closed-loop evolution.

The inner loop trains the controller against a frozen skill bank; the outer
loop alternates training with designer proposals that are kept only when
validation return does not drop (acceptance with rollback).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import accel, designer, evalsuite, policy, rollout, skills
from .datagen import Query, Trace
from .physics import CallCounter

ABLATIONS = ("full", "wo_designer", "wo_redistribution", "wo_new_action_bias", "wo_controller")
VAL_SUBSET_SIZE = 32


@dataclass
class PPOConfig:
    gamma_d: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs_per_update: int = 4
    minibatch: int = 32
    grad_clip: float = 0.5
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    gamma_r: float = 0.9
    beta: float = 0.5
    inner_epochs: int = 50
    outer_epochs: int = 10
    batch: int = 32
    k_retrieve: int = 5
    top_k: int = 2
    designer_cadence: int = 1
    max_skills: int = 12
    bias_b0: float = 1.0


def redistribute(r_final: float, t_len: int, gamma_r: float, beta: float) -> np.ndarray:
    """Exponential-decay spread of the terminal reward, conserving the sum."""
    if t_len < 1:
        raise ValueError("episode length must be >= 1")
    exps = np.array([gamma_r ** (t_len - t) for t in range(1, t_len + 1)])
    out = (1.0 - beta) * r_final * exps / exps.sum()
    out[-1] += beta * r_final
    return out


def compose_step_rewards(r_proc: list[float], r_tilde: np.ndarray) -> np.ndarray:
    if len(r_proc) != len(r_tilde):
        raise ValueError("process and redistributed rewards must align")
    return np.asarray(r_proc, dtype=float) + r_tilde


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, gamma_d: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Raw (unnormalized) advantages and returns; terminal value is 0."""
    if len(rewards) == 0:
        raise ValueError("empty episode")
    adv, ret = accel.gae_scan(
        np.asarray(rewards, dtype=np.float64),
        np.asarray(values, dtype=np.float64),
        gamma_d,
        lam,
    )
    return adv, ret


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return np.zeros_like(adv)
    std = adv.std()
    if std < 1e-12:
        return np.zeros_like(adv)
    return (adv - adv.mean()) / std


class AdamW:
    """Decoupled weight decay Adam over the policy parameter dict."""

    def __init__(self, lr: float, weight_decay: float, b1: float = 0.9, b2: float = 0.999):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = b1, b2
        self.eps = 1e-8
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k in policy.PARAM_KEYS:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            params[k] = params[k] - self.lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.wd * params[k]
            )


def ppo_update(
    params: dict,
    transitions: list[rollout.Transition],
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PPOConfig,
    opt: AdamW,
    rng: np.random.Generator,
) -> dict:
    """Four clipped-surrogate epochs over shuffled minibatches."""
    n = len(transitions)
    x = np.stack([tr.x for tr in transitions])
    stats_acc: dict = {"updates": 0, "skipped": 0}
    last_stats: dict = {}
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = order[s : s + cfg.minibatch]
            batch = policy.PPOBatch(
                x=x[idx],
                u_mats=[transitions[i].u_mat for i in idx],
                biases=[transitions[i].bias for i in idx],
                actions=[transitions[i].action for i in idx],
                logprob_old=np.array([transitions[i].logprob for i in idx]),
                advantages=advantages[idx],
                returns=returns[idx],
            )
            loss, grads, stats = policy.ppo_loss_and_grads(
                params, batch, cfg.clip, cfg.value_coef, cfg.entropy_coef
            )
            if grads is None:
                stats_acc["skipped"] += 1
                stats_acc["non_finite"] = True
                continue
            policy.clip_grads_(grads, cfg.grad_clip)
            opt.step(params, grads)
            stats_acc["updates"] += 1
            last_stats = stats
    stats_acc.update({f"last_{k}": v for k, v in last_stats.items()})
    return stats_acc


@dataclass
class InnerLog:
    epochs: list[dict] = field(default_factory=list)
    query_records: list[dict] = field(default_factory=list)

    def mean_return(self) -> float:
        if not self.epochs:
            return 0.0
        return float(np.mean([e["mean_return"] for e in self.epochs]))


def _episode_rng(master_seed: int, outer: int, inner: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(10, outer, inner, slot))
    )


def run_inner_loop(
    bank: skills.SkillBank,
    train_traces: list[Trace],
    queries_by_trace: dict[str, list[Query]],
    params: Optional[dict],
    cfg: PPOConfig,
    master_seed: int,
    outer_epoch: int,
    opt: Optional[AdamW],
    cache: rollout.FeatureCache,
    counter: CallCounter,
    mode: str = "sample",
    use_bias: bool = True,
) -> InnerLog:
    """Train (or just roll, in random mode) against a frozen bank.

    Episode = one trace span-by-span; terminal reward is the fraction of the
    trace's queries answered correctly from the episode's memory bank.
    """
    log = InnerLog()
    n_traces = len(train_traces)
    for inner in range(cfg.inner_epochs):
        if use_bias and mode != "random":
            bias = cfg.bias_b0 * designer.new_action_bias(bank, outer_epoch, inner)
        else:
            bias = np.zeros(len(bank.skills))
        pick_rng = np.random.default_rng(
            np.random.SeedSequence(master_seed, spawn_key=(10, outer_epoch, inner))
        )
        picks = pick_rng.integers(0, n_traces, cfg.batch)

        transitions: list[rollout.Transition] = []
        adv_parts: list[np.ndarray] = []
        ret_parts: list[np.ndarray] = []
        returns_log: list[float] = []
        success_log: list[float] = []
        queries_answered = 0
        calls_before = counter.total_calls

        for slot, t_i in enumerate(picks):
            trace = train_traces[int(t_i)]
            rng = _episode_rng(master_seed, outer_epoch, inner, slot)
            ep = rollout.run_episode(
                trace, bank, params, cache, cfg.k_retrieve, cfg.top_k, mode, rng, bias
            )
            qs = queries_by_trace.get(trace.id, [])
            r_final, rows = evalsuite.episode_queries(ep.mem_bank, qs, counter)
            queries_answered += len(rows)
            for row in rows:
                if row["qtype"] == "parameter_adjustment":
                    rec = dict(row)
                    rec["trace_id"] = trace.id
                    log.query_records.append(rec)
            success_log.append(r_final)

            t_len = len(ep.transitions)
            if t_len == 0:
                continue
            beta = cfg.beta
            r_tilde = redistribute(r_final, t_len, cfg.gamma_r, beta)
            step_rewards = compose_step_rewards(ep.r_proc, r_tilde)
            returns_log.append(float(step_rewards.sum()))
            if mode == "random":
                continue
            values = np.array([tr.value for tr in ep.transitions])
            adv, ret = compute_gae(step_rewards, values, cfg.gamma_d, cfg.gae_lambda)
            transitions.extend(ep.transitions)
            adv_parts.append(adv)
            ret_parts.append(ret)

        entry = {
            "outer": outer_epoch,
            "inner": inner,
            "mean_return": float(np.mean(returns_log)) if returns_log else 0.0,
            "success_rate": float(np.mean(success_log)) if success_log else 0.0,
            "calls_per_query": (
                (counter.total_calls - calls_before) / queries_answered
                if queries_answered
                else 0.0
            ),
        }
        if mode != "random" and transitions:
            advantages = normalize_advantages(np.concatenate(adv_parts))
            returns = np.concatenate(ret_parts)
            upd_rng = np.random.default_rng(
                np.random.SeedSequence(master_seed, spawn_key=(11, outer_epoch, inner))
            )
            stats = ppo_update(params, transitions, advantages, returns, cfg, opt, upd_rng)
            entry["ppo"] = {
                k: stats[k]
                for k in ("updates", "skipped", "last_approx_kl", "last_entropy")
                if k in stats
            }
        log.epochs.append(entry)
    return log


def j_val(
    bank: skills.SkillBank,
    params: Optional[dict],
    val_traces: list[Trace],
    queries_by_trace: dict[str, list[Query]],
    cfg: PPOConfig,
    counter: CallCounter,
    cache: rollout.FeatureCache,
    mode: str = "greedy",
    master_seed: int = 0,
) -> float:
    """Mean episode R_final over the fixed validation subset (greedy policy)."""
    if not val_traces:
        return 0.0
    total = 0.0
    for i, trace in enumerate(val_traces):
        rng = np.random.default_rng(
            np.random.SeedSequence(master_seed, spawn_key=(13, i))
        )
        ep = rollout.run_episode(
            trace, bank, params, cache, cfg.k_retrieve, cfg.top_k, mode, rng
        )
        total += evalsuite.trace_return(
            trace, ep.mem_bank, queries_by_trace.get(trace.id, []), counter
        )
    return total / len(val_traces)


def run_closed_loop(
    traces_by_id: dict[str, Trace],
    queries: list[Query],
    splits: dict,
    cfg: PPOConfig,
    master_seed: int,
    ablation: str = "full",
) -> dict:
    """Alternate inner-loop PPO with designer proposals under rollback.

    Returns a run report: per-epoch logs, bank version history, final params
    and bank (callers persist them).
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    cfg = PPOConfig(**{**asdict(cfg)})
    if ablation == "wo_redistribution":
        cfg.beta = 1.0
    use_bias = ablation != "wo_new_action_bias"
    mode = "random" if ablation == "wo_controller" else "sample"

    queries_by_trace: dict[str, list[Query]] = {}
    for q in queries:
        queries_by_trace.setdefault(q.trace_ids[0], []).append(q)

    train_traces = [traces_by_id[i] for i in splits["train"]]
    val_ids = list(splits["val"])
    sub_rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(12,)))
    if len(val_ids) > VAL_SUBSET_SIZE:
        keep = sub_rng.choice(len(val_ids), VAL_SUBSET_SIZE, replace=False)
        val_ids = [val_ids[i] for i in sorted(keep)]
    val_traces = [traces_by_id[i] for i in val_ids]

    if mode == "random":
        params, opt = None, None
    else:
        params = policy.init_params(
            np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(9,)))
        )
        opt = AdamW(cfg.learning_rate, cfg.weight_decay)
    bank = skills.initial_bank()
    cache = rollout.FeatureCache()
    train_counter = CallCounter()
    designer_counter = CallCounter()
    val_counter = CallCounter()

    epochs_report = []
    version_history = [bank.bank_version]
    # outer_epochs=0 degenerates to a single inner loop with no evolution
    evolve = cfg.outer_epochs > 0
    for outer in range(cfg.outer_epochs if evolve else 1):
        log = run_inner_loop(
            bank,
            train_traces,
            queries_by_trace,
            params,
            cfg,
            master_seed,
            outer,
            opt,
            cache,
            train_counter,
            mode=mode,
            use_bias=use_bias,
        )
        entry = {
            "outer": outer,
            "bank_version": bank.bank_version,
            "n_skills": len(bank.skills),
            "mean_return": log.mean_return(),
            "success_rate": (
                float(np.mean([e["success_rate"] for e in log.epochs]))
                if log.epochs
                else 0.0
            ),
            "inner": log.epochs,
        }

        run_designer = (
            evolve
            and ablation != "wo_designer"
            and (outer + 1) % cfg.designer_cadence == 0
        )
        if run_designer:
            buf = designer.collect_failures(log.query_records, designer_counter)
            clusters = designer.cluster_failures(buf)
            changes = designer.propose_changes(
                bank, clusters, epoch=outer + 1, max_skills=cfg.max_skills
            )
            candidate = skills.mutate(bank, changes)
            j_before = j_val(
                bank, params, val_traces, queries_by_trace, cfg,
                val_counter, cache, mode="random" if mode == "random" else "greedy",
                master_seed=master_seed,
            )
            j_after = j_val(
                candidate, params, val_traces, queries_by_trace, cfg,
                val_counter, cache, mode="random" if mode == "random" else "greedy",
                master_seed=master_seed,
            )
            accepted = j_after - j_before >= 0.0
            if accepted:
                bank = candidate
            entry["designer"] = {
                "buffer_size": len(buf),
                "clusters": [
                    {"type": c.failure_type, "regime": c.regime, "size": c.size}
                    for c in clusters
                ],
                "proposed_changes": [
                    {"op": ch.op, "skill": ch.skill.id if ch.skill else None,
                     "target": ch.target_id}
                    for ch in changes
                ],
                "j_before": j_before,
                "j_after": j_after,
                "accepted": accepted,
            }
            version_history.append(bank.bank_version)
        epochs_report.append(entry)

    return {
        "ablation": ablation,
        "seed": master_seed,
        "config": asdict(cfg),
        "epochs": epochs_report,
        "bank_version_history": version_history,
        "train_calls": train_counter.total_calls,
        "designer_calls": designer_counter.total_calls,
        "val_calls": val_counter.total_calls,
        "final_bank": bank.as_dict(),
        "_params": params,
        "_bank": bank,
    }
