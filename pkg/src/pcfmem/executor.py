"""Rule-based skill executor: spans + retrieved memory + skills -> edits.

Each selected skill dispatches on its template id to a deterministic rule
evaluated against the span's evidence (the one edited parameter and the
resulting metric changes). The executor never touches the physics env; all
numbers come from the span itself. Edits are emitted in skill order and the
memory bank resolves conflicts at apply time, so process rewards follow the
per-edit outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import memory, physics
from .datagen import Span
from .memory import EditOutcome, MemoryEdit, MemoryEntry, MemoryKey
from .physics import TargetSpec
from .skills import Skill, SkillConfigError

TOLS = {
    "dispersion": physics.TOL_DISPERSION,
    "loss": physics.TOL_LOSS,
    "n_eff": physics.TOL_NEFF,
}

REWARD_MAP = {
    "accepted": 0.05,
    "duplicate": -0.05,
    "rejected": -0.05,
    "correct_skip": 0.02,
    "incorrect_skip": -0.02,
}
REWARD_CLAMP = 0.2


@dataclass
class SpanContext:
    span: Span
    retrieved: list[MemoryEntry]
    selected: list[Skill]
    target: TargetSpec


@dataclass
class ProcessEvent:
    edit_index: int
    category: str
    reward_delta: float


@dataclass
class SpanEvidence:
    """Digested numeric view of one span."""

    param: str
    delta_param: float
    deltas: dict
    slopes: dict
    norm_deltas: dict
    signs: dict
    bucket: str
    regime: str
    geom_after: dict
    observed: dict
    miss_after: float
    d_err: float  # |D_after - D_target| / tol_D
    a_err: float  # |alpha_after - alpha_target| / tol_alpha
    step: int
    at_bound: bool


def span_evidence(span: Span, target: TargetSpec) -> SpanEvidence:
    dp = span.new_value - span.old_value
    deltas, slopes, norm_deltas, signs = {}, {}, {}, {}
    for m in physics.METRICS:
        dm = span.sim_after.metric(m) - span.sim_before.metric(m)
        deltas[m] = dm
        slopes[m] = dm / dp if dp != 0.0 else 0.0
        norm_deltas[m] = abs(dm) / TOLS[m]
        signs[m] = 0 if dm == 0.0 or dp == 0.0 else (1 if (dm / dp) > 0 else -1)
    geom = span.geom_after
    at_bound = (
        geom.dratio > physics.DRATIO_MAX - 0.005
        or geom.pitch_um < physics.PITCH_MIN_UM + 0.005
        or geom.pitch_um > physics.PITCH_MAX_UM - 0.005
        or geom.n_rings in (physics.N_RINGS_MIN, physics.N_RINGS_MAX)
    )
    d_err = (
        abs(span.sim_after.dispersion_ps_nm_km - target.dispersion_ps_nm_km)
        / target.tol_dispersion
    )
    a_err = abs(span.sim_after.loss_db_km - target.loss_db_km) / target.tol_loss
    miss_after = max(d_err, a_err)
    observed = {
        "dispersion": span.sim_after.dispersion_ps_nm_km,
        "loss": span.sim_after.loss_db_km,
        "n_eff": span.sim_after.n_eff,
        "miss": miss_after,
    }
    return SpanEvidence(
        param=span.param,
        delta_param=dp,
        deltas=deltas,
        slopes=slopes,
        norm_deltas=norm_deltas,
        signs=signs,
        bucket=memory.lambda_bucket(span.sim_after.lambda_um),
        regime=memory.dratio_regime(geom.dratio),
        geom_after=geom.as_dict(),
        observed=observed,
        miss_after=miss_after,
        d_err=d_err,
        a_err=a_err,
        step=span.index,
        at_bound=at_bound,
    )


def _entry_statement(
    param: str, metric: str, sign: int, slope: float, regime: str, bucket: str, scoped: bool
) -> str:
    word = "rises" if sign > 0 else "falls"
    base = (
        f"{metric} {word} as {param} increases, slope {slope:.4g} per unit, "
        f"{regime} fill regime"
    )
    if scoped:
        base += f", {bucket}"
    return base


def _rule_insert_param_map(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    theta = float(skill.params["theta_sig"])
    scoped = bool(skill.params.get("lambda_scoped", 0))
    edits = []
    for m in physics.METRICS:
        if theta == 0.0:
            fire = ev.deltas[m] != 0.0
        else:
            fire = ev.norm_deltas[m] >= theta
        if not fire or ev.signs[m] == 0:
            continue
        key = MemoryKey(ev.param, m, ev.bucket, ev.regime)
        edits.append(
            MemoryEdit(
                op="INSERT",
                key=key,
                kind="param_map",
                statement=_entry_statement(
                    ev.param, m, ev.signs[m], ev.slopes[m], ev.regime, ev.bucket, scoped
                ),
                direction=ev.signs[m],
                slope=ev.slopes[m],
                support_count=1,
                confidence=0.5,
                geom=ev.geom_after,
                observed=dict(ev.observed),
                created_step=ev.step,
                rationale=f"observed {ev.param} move changed {m}",
            )
        )
    return edits


def _rule_update_trend(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    regime_aware = bool(skill.params.get("regime_aware", 0))
    calibrated = bool(skill.params.get("conf_calibrated", 0))
    edits = []
    for e in retrieved:
        if e.kind not in ("param_map", "trend"):
            continue
        if e.key.param != ev.param or e.key.lambda_bucket != ev.bucket:
            continue
        m = e.key.metric
        if ev.signs.get(m, 0) == 0:
            continue
        same_regime = e.key.regime == ev.regime
        if not regime_aware and not same_regime:
            continue
        if e.direction == ev.signs[m]:
            support = e.support_count + 1
            slope = (e.slope * e.support_count + ev.slopes[m]) / support
            if calibrated:
                spread = abs(ev.slopes[m] - e.slope) / (
                    abs(ev.slopes[m]) + abs(e.slope) + 1e-12
                )
                conf = (support / (support + 1.0)) * (1.0 - 0.5 * spread)
            else:
                conf = min(1.0, support / 5.0)
            refresh = ev.miss_after < (e.observed or {}).get("miss", float("inf"))
            edits.append(
                MemoryEdit(
                    op="UPDATE",
                    target_id=e.id,
                    slope=slope,
                    support_count=support,
                    confidence=conf,
                    geom=ev.geom_after if refresh else None,
                    observed=dict(ev.observed) if refresh else None,
                    rationale=f"agreeing evidence for {ev.param}->{m}",
                )
            )
        else:
            if regime_aware and not same_regime:
                key = MemoryKey(ev.param, m, ev.bucket, ev.regime)
                edits.append(
                    MemoryEdit(
                        op="INSERT",
                        key=key,
                        kind="trend",
                        statement=_entry_statement(
                            ev.param, m, ev.signs[m], ev.slopes[m], ev.regime, ev.bucket, False
                        ),
                        direction=ev.signs[m],
                        slope=ev.slopes[m],
                        support_count=1,
                        confidence=0.5,
                        geom=ev.geom_after,
                        observed=dict(ev.observed),
                        created_step=ev.step,
                        rationale="regime split on cross-regime disagreement",
                    )
                )
            else:
                edits.append(
                    MemoryEdit(
                        op="UPDATE",
                        target_id=e.id,
                        confidence=e.confidence / 2.0,
                        rationale=f"disagreeing evidence for {ev.param}->{m}",
                    )
                )
    return edits


def _rule_delete_invalid(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    theta_del = int(skill.params["theta_del"])
    rollback_safe = bool(skill.params.get("rollback_safe", 0))
    edits = []
    for e in retrieved:
        if e.kind not in ("param_map", "trend", "hotspot"):
            continue
        if e.key.param != ev.param or e.key.lambda_bucket != ev.bucket:
            continue
        if e.key.regime != ev.regime:
            continue
        m = e.key.metric
        sign = ev.signs.get(m, 0)
        if sign == 0 or e.direction == 0 or e.direction == sign:
            continue
        count = e.contradictions + 1
        if count >= theta_del:
            reason = (
                f"direction {e.direction:+d} for {e.key.param}->{m} contradicted "
                f"{count} time(s) by observed sign {sign:+d}"
            )
            if rollback_safe:
                reason += "; restorable from audit record"
            edits.append(MemoryEdit(op="DELETE", target_id=e.id, rationale=reason))
        else:
            edits.append(
                MemoryEdit(
                    op="UPDATE",
                    target_id=e.id,
                    contradictions=count,
                    rationale=f"contradiction {count}/{theta_del} recorded",
                )
            )
    return edits


def _rule_skip(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    theta = float(skill.params.get("theta_noise", 1.0))
    change = max(ev.norm_deltas["dispersion"], ev.norm_deltas["loss"])
    return [
        MemoryEdit(
            op="NOOP",
            rationale=f"normalized change {change:.3g} vs noise threshold {theta:.3g}",
            skip_correct=change < theta,
        )
    ]


def _rule_insert_boundary(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    if ev.miss_after < 1.0 and not ev.at_bound:
        return []
    # the worse-missed metric names the violated interval
    metric = "dispersion" if ev.d_err >= ev.a_err else "loss"
    if ev.at_bound and ev.miss_after < 1.0:
        detail = "geometry bound reached"
    else:
        detail = f"target band missed by {ev.miss_after:.3g} tolerance units"
    return [
        MemoryEdit(
            op="INSERT",
            key=MemoryKey(ev.param, metric, ev.bucket, ev.regime),
            kind="boundary",
            statement=(
                f"failure boundary on {metric}: {detail} after moving "
                f"{ev.param} in the {ev.regime} fill regime"
            ),
            direction=1,
            slope=ev.miss_after,
            support_count=1,
            confidence=0.5,
            geom=ev.geom_after,
            observed=dict(ev.observed),
            created_step=ev.step,
            rationale="tolerance band or geometry bound violated",
        )
    ]


def _rule_insert_hotspot(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    theta_hot = float(skill.params["theta_hot"])
    edits = []
    for m in physics.METRICS:
        slope_norm = abs(ev.slopes[m]) / TOLS[m]
        if slope_norm < theta_hot or ev.signs[m] == 0:
            continue
        edits.append(
            MemoryEdit(
                op="INSERT",
                key=MemoryKey(ev.param, m, ev.bucket, ev.regime),
                kind="hotspot",
                statement=(
                    f"sensitivity hotspot: {m} swings {slope_norm:.3g} tolerance "
                    f"units per unit {ev.param}, take smaller moves in the "
                    f"{ev.regime} fill regime"
                ),
                direction=ev.signs[m],
                slope=ev.slopes[m],
                support_count=1,
                confidence=0.5,
                geom=ev.geom_after,
                observed=dict(ev.observed),
                created_step=ev.step,
                rationale=f"normalized slope {slope_norm:.3g} >= {theta_hot:.3g}",
            )
        )
    return edits


def _rule_update_frontier(skill: Skill, ev: SpanEvidence, retrieved) -> list[MemoryEdit]:
    d_err, a_err = ev.d_err, ev.a_err
    key = MemoryKey(ev.param, "dispersion", ev.bucket, ev.regime)
    existing = None
    for e in retrieved:
        if e.kind == "frontier_point" and e.key == key:
            existing = e
            break
    insert = MemoryEdit(
        op="INSERT",
        key=key,
        kind="frontier_point",
        statement=(
            f"frontier point: dispersion error {d_err:.3g} and loss error "
            f"{a_err:.3g} tolerance units after moving {ev.param} in the "
            f"{ev.regime} fill regime"
        ),
        direction=ev.signs.get("dispersion", 0) or 1,
        slope=ev.slopes.get("dispersion", 0.0),
        support_count=1,
        confidence=0.5,
        geom=ev.geom_after,
        observed={**ev.observed, "d_err": d_err, "a_err": a_err},
        created_step=ev.step,
        rationale="non-dominated trade-off point",
    )
    if existing is None:
        return [insert]
    old = existing.observed or {}
    old_d, old_a = old.get("d_err", float("inf")), old.get("a_err", float("inf"))
    dominates = d_err <= old_d and a_err <= old_a and (d_err < old_d or a_err < old_a)
    dominated = old_d <= d_err and old_a <= a_err and (old_d < d_err or old_a < a_err)
    if dominated:
        return []
    if dominates or (d_err + a_err) < (old_d + old_a):
        delete = MemoryEdit(
            op="DELETE",
            target_id=existing.id,
            rationale=(
                f"frontier point dominated: errors ({old_d:.3g}, {old_a:.3g}) "
                f"superseded by ({d_err:.3g}, {a_err:.3g})"
            ),
        )
        return [delete, insert]
    return []


_RULES = {
    "insert_param_map": _rule_insert_param_map,
    "update_trend": _rule_update_trend,
    "delete_invalid": _rule_delete_invalid,
    "skip_span": _rule_skip,
    "insert_boundary": _rule_insert_boundary,
    "insert_hotspot": _rule_insert_hotspot,
    "update_frontier": _rule_update_frontier,
}


def execute(ctx: SpanContext) -> tuple[list[MemoryEdit], list[ProcessEvent]]:
    """Emit ordered edits plus the statically-known NOOP events.

    Events for INSERT/UPDATE/DELETE edits depend on apply outcomes; callers
    apply the edits and then complete the event list with
    events_from_outcomes().
    """
    ev = span_evidence(ctx.span, ctx.target)
    edits: list[MemoryEdit] = []
    for skill in ctx.selected:
        rule = _RULES.get(skill.template_id)
        if rule is None:
            raise SkillConfigError(f"unknown template {skill.template_id!r}")
        edits.extend(rule(skill, ev, ctx.retrieved))
    events = [
        ProcessEvent(i, _skip_category(e), REWARD_MAP[_skip_category(e)])
        for i, e in enumerate(edits)
        if e.op == "NOOP"
    ]
    return edits, events


def _skip_category(edit: MemoryEdit) -> str:
    return "correct_skip" if edit.skip_correct else "incorrect_skip"


def events_from_outcomes(
    edits: list[MemoryEdit], outcomes: list[EditOutcome]
) -> list[ProcessEvent]:
    """Events for all non-NOOP edits, from their apply outcomes."""
    events = []
    for edit, out in zip(edits, outcomes):
        if edit.op == "NOOP":
            continue
        if out.status == "applied":
            cat = "accepted"
        elif out.status == "duplicate":
            cat = "duplicate"
        else:
            cat = "rejected"
        events.append(ProcessEvent(out.edit_index, cat, REWARD_MAP[cat]))
    return events


def process_reward(events: list[ProcessEvent]) -> float:
    total = sum(e.reward_delta for e in events)
    return max(-REWARD_CLAMP, min(REWARD_CLAMP, total))
