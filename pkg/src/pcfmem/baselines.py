"""Classical baselines with exact simulation budgets.

random_search: 100 uniform draws, best kept by the env quality score.
nelder_mead: hand-rolled simplex on (pitch, d ratio, relaxed ring count)
  minimizing 1 - quality, hard cap of 135 charged evaluations.
surrogate: 4-hidden-layer MLP with batch norm trained on 2000 env samples,
  ranks 100 candidates, verifies the top-1 with a single env call.

The simplex loop is owned code rather than scipy because the call cap is an
exact budget: every objective evaluation must pass through the CallCounter
and stop mid-iteration when the cap is reached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import evalsuite, physics
from .datagen import Query, Trace
from .physics import CallCounter, Geometry, SimResult, TargetSpec

RANDOM_BUDGET = 100
NM_BUDGET = 135
NM_DIAMETER_TOL = 1e-4
SURROGATE_TRAIN_SAMPLES = 2000
SURROGATE_CANDIDATES = 100

DRATIO_MIN = 0.05
# stay strictly inside the overlap bound: pitch*r/pitch can round 1 ulp up
DRATIO_CAP = physics.DRATIO_MAX - 1e-9
BASELINE_KINDS = ("random_search", "nelder_mead", "surrogate")


def _sample_geometry(rng: np.random.Generator) -> Geometry:
    pitch = float(rng.uniform(physics.PITCH_MIN_UM, physics.PITCH_MAX_UM))
    r = float(rng.uniform(DRATIO_MIN, DRATIO_CAP))
    n = int(rng.integers(physics.N_RINGS_MIN, physics.N_RINGS_MAX + 1))
    return Geometry(pitch, pitch * r, n)


def random_search_query(
    target: TargetSpec, counter: CallCounter, rng: np.random.Generator
) -> tuple[Geometry, SimResult]:
    best = None
    for _ in range(RANDOM_BUDGET):
        geom = _sample_geometry(rng)
        res = physics.simulate(geom, target.lambda_um, counter)
        q = physics.quality(res, target)
        if best is None or q > best[0]:
            best = (q, geom, res)
    return best[1], best[2]


def _clip_x(x: np.ndarray) -> tuple[Geometry, np.ndarray]:
    pitch = float(np.clip(x[0], physics.PITCH_MIN_UM, physics.PITCH_MAX_UM))
    r = float(np.clip(x[1], DRATIO_MIN, DRATIO_CAP))
    n = int(round(float(np.clip(x[2], physics.N_RINGS_MIN, physics.N_RINGS_MAX))))
    return Geometry(pitch, pitch * r, n), np.array([pitch, r, float(n)])


def nelder_mead_query(
    target: TargetSpec, counter: CallCounter, rng: np.random.Generator
) -> tuple[Geometry, SimResult, bool]:
    """Reflection 1, expansion 2, contraction 0.5, shrink 0.5; cap 135 calls."""
    budget = [NM_BUDGET]
    best = [None]  # (f, geometry, result)

    def f(x: np.ndarray) -> float:
        if budget[0] <= 0:
            return np.inf
        budget[0] -= 1
        geom, _ = _clip_x(x)
        res = physics.simulate(geom, target.lambda_um, counter)
        val = 1.0 - physics.quality(res, target)
        if best[0] is None or val < best[0][0]:
            best[0] = (val, geom, res)
        return val

    x0 = np.array(
        [
            rng.uniform(physics.PITCH_MIN_UM, physics.PITCH_MAX_UM),
            rng.uniform(DRATIO_MIN, DRATIO_CAP),
            rng.uniform(physics.N_RINGS_MIN, physics.N_RINGS_MAX),
        ]
    )
    steps = np.array([0.4, 0.1, 1.5])
    simplex = [x0.copy()]
    for i in range(3):
        xi = x0.copy()
        xi[i] += steps[i]
        simplex.append(xi)
    fvals = [f(x) for x in simplex]

    while budget[0] > 0:
        order = np.argsort(fvals, kind="stable")
        simplex = [simplex[i] for i in order]
        fvals = [fvals[i] for i in order]
        diameter = max(np.max(np.abs(x - simplex[0])) for x in simplex[1:])
        if diameter < NM_DIAMETER_TOL:
            break
        centroid = np.mean(simplex[:-1], axis=0)
        xr = centroid + (centroid - simplex[-1])
        fr = f(xr)
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - simplex[-1])
            fe = f(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
        else:
            if fr < fvals[-1]:
                xc = centroid + 0.5 * (xr - centroid)
            else:
                xc = centroid + 0.5 * (simplex[-1] - centroid)
            fc = f(xc)
            if fc < min(fr, fvals[-1]):
                simplex[-1], fvals[-1] = xc, fc
            else:
                for i in range(1, len(simplex)):
                    simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
                    fvals[i] = f(simplex[i])

    exhausted = budget[0] <= 0
    _, geom, res = best[0]
    return geom, res, exhausted


# --- surrogate -----------------------------------------------------------


def _features(pitch: float, r: float, n: float, lam: float) -> np.ndarray:
    return np.array(
        [
            pitch / physics.PITCH_MAX_UM,
            r,
            (n - physics.N_RINGS_MIN) / (physics.N_RINGS_MAX - physics.N_RINGS_MIN),
            (lam - physics.LAMBDA_MIN_UM)
            / (physics.LAMBDA_MAX_UM - physics.LAMBDA_MIN_UM),
        ]
    )


@dataclass
class _BNLayer:
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray


class SurrogateModel:
    """4 hidden layers (linear + batch norm + relu) and a linear head.

    Predicts (n_eff, log10 loss, standardized dispersion). Trained with
    plain minibatch SGD with momentum on mean squared error.
    """

    HIDDEN = 64
    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, rng: np.random.Generator):
        sizes = [4] + [self.HIDDEN] * 4
        self.weights = []
        self.biases = []
        self.bn = []
        for i in range(4):
            fan_in = sizes[i]
            self.weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, sizes[i + 1])))
            self.biases.append(np.zeros(sizes[i + 1]))
            self.bn.append(
                _BNLayer(
                    gamma=np.ones(sizes[i + 1]),
                    beta=np.zeros(sizes[i + 1]),
                    run_mean=np.zeros(sizes[i + 1]),
                    run_var=np.ones(sizes[i + 1]),
                )
            )
        self.w_out = rng.normal(0.0, 1.0 / np.sqrt(self.HIDDEN), (self.HIDDEN, 3))
        self.b_out = np.zeros(3)
        self.y_mean = np.zeros(3)
        self.y_std = np.ones(3)

    def _forward(self, x: np.ndarray, train: bool):
        caches = []
        h = x
        for i in range(4):
            z = h @ self.weights[i] + self.biases[i]
            bn = self.bn[i]
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                bn.run_mean = (1 - self.MOMENTUM) * bn.run_mean + self.MOMENTUM * mu
                bn.run_var = (1 - self.MOMENTUM) * bn.run_var + self.MOMENTUM * var
            else:
                mu, var = bn.run_mean, bn.run_var
            inv = 1.0 / np.sqrt(var + self.EPS)
            zhat = (z - mu) * inv
            y = bn.gamma * zhat + bn.beta
            a = np.maximum(y, 0.0)
            caches.append((h, z, zhat, inv, a))
            h = a
        out = h @ self.w_out + self.b_out
        return out, caches

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Physical-scale predictions (n_eff, log10 loss, dispersion)."""
        out, _ = self._forward(np.atleast_2d(x), train=False)
        return out * self.y_std + self.y_mean

    def train(
        self,
        x: np.ndarray,
        y: np.ndarray,
        rng: np.random.Generator,
        epochs: int = 200,
        batch: int = 128,
        lr: float = 0.01,
    ) -> float:
        n = x.shape[0]
        mom_w = [np.zeros_like(w) for w in self.weights]
        mom_b = [np.zeros_like(b) for b in self.biases]
        mom_g = [np.zeros_like(l.gamma) for l in self.bn]
        mom_be = [np.zeros_like(l.beta) for l in self.bn]
        mom_wo = np.zeros_like(self.w_out)
        mom_bo = np.zeros_like(self.b_out)
        last = np.inf
        for _ in range(epochs):
            perm = rng.permutation(n)
            for s in range(0, n, batch):
                idx = perm[s : s + batch]
                if len(idx) < 2:
                    continue
                xb, yb = x[idx], y[idx]
                out, caches = self._forward(xb, train=True)
                diff = out - yb
                last = float(np.mean(diff**2))
                m = len(idx)
                d_out = 2.0 * diff / (m * 3)
                g_wo = caches[-1][4].T @ d_out
                g_bo = d_out.sum(axis=0)
                d_h = d_out @ self.w_out.T
                grads = []
                for i in range(3, -1, -1):
                    h_in, z, zhat, inv, a = caches[i]
                    d_y = d_h * (a > 0)
                    g_gamma = (d_y * zhat).sum(axis=0)
                    g_beta = d_y.sum(axis=0)
                    d_zhat = d_y * self.bn[i].gamma
                    d_z = (
                        inv
                        / m
                        * (
                            m * d_zhat
                            - d_zhat.sum(axis=0)
                            - zhat * (d_zhat * zhat).sum(axis=0)
                        )
                    )
                    g_w = h_in.T @ d_z
                    g_b = d_z.sum(axis=0)
                    d_h = d_z @ self.weights[i].T
                    grads.append((g_w, g_b, g_gamma, g_beta))
                grads.reverse()
                for i in range(4):
                    g_w, g_b, g_gamma, g_beta = grads[i]
                    mom_w[i] = 0.9 * mom_w[i] - lr * g_w
                    mom_b[i] = 0.9 * mom_b[i] - lr * g_b
                    mom_g[i] = 0.9 * mom_g[i] - lr * g_gamma
                    mom_be[i] = 0.9 * mom_be[i] - lr * g_beta
                    self.weights[i] += mom_w[i]
                    self.biases[i] += mom_b[i]
                    self.bn[i].gamma += mom_g[i]
                    self.bn[i].beta += mom_be[i]
                mom_wo = 0.9 * mom_wo - lr * g_wo
                mom_bo = 0.9 * mom_bo - lr * g_bo
                self.w_out += mom_wo
                self.b_out += mom_bo
        return last


def train_surrogate(
    train_traces: list[Trace], master_seed: int, counter: CallCounter
) -> SurrogateModel:
    """Fit on up to 2000 samples drawn from training spans (uniform top-up)."""
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(6,)))
    points = []
    for t in train_traces:
        for s in t.spans:
            points.append((s.geom_after, t.target.lambda_um))
    if len(points) > SURROGATE_TRAIN_SAMPLES:
        keep = rng.choice(len(points), SURROGATE_TRAIN_SAMPLES, replace=False)
        points = [points[i] for i in sorted(keep)]
    while len(points) < SURROGATE_TRAIN_SAMPLES:
        lam = float(rng.uniform(physics.LAMBDA_MIN_UM, physics.LAMBDA_MAX_UM))
        points.append((_sample_geometry(rng), lam))

    x = np.zeros((len(points), 4))
    y = np.zeros((len(points), 3))
    for i, (geom, lam) in enumerate(points):
        res = physics.simulate(geom, lam, counter)
        x[i] = _features(geom.pitch_um, geom.dratio, geom.n_rings, lam)
        y[i] = [res.n_eff, np.log10(res.loss_db_km), res.dispersion_ps_nm_km]

    model = SurrogateModel(rng)
    model.y_mean = y.mean(axis=0)
    model.y_std = np.where(y.std(axis=0) > 0, y.std(axis=0), 1.0)
    model.train(x, (y - model.y_mean) / model.y_std, rng)
    return model


def surrogate_query(
    model: SurrogateModel,
    target: TargetSpec,
    counter: CallCounter,
    rng: np.random.Generator,
) -> tuple[Geometry, SimResult]:
    cands = [_sample_geometry(rng) for _ in range(SURROGATE_CANDIDATES)]
    x = np.stack(
        [_features(g.pitch_um, g.dratio, g.n_rings, target.lambda_um) for g in cands]
    )
    pred = model.predict(x)
    d_pred = pred[:, 2]
    a_pred = np.power(10.0, pred[:, 1])
    score = np.maximum(
        np.abs(d_pred - target.dispersion_ps_nm_km) / physics.TOL_DISPERSION,
        np.abs(a_pred - target.loss_db_km) / physics.TOL_LOSS,
    )
    top = cands[int(np.argmin(score))]
    res = physics.simulate(top, target.lambda_um, counter)
    return top, res


def _baseline_row(
    query: Query, geom: Geometry, res: SimResult, calls: int
) -> dict:
    target = physics.target_from_dict(query.ground_truth["target"])
    ok, qual = evalsuite.success_quality(res, target)
    text = (
        f"parameters pitch {geom.pitch_um:.5g} um hole_d {geom.hole_d_um:.5g} um "
        f"n_rings {geom.n_rings} yield dispersion {res.dispersion_ps_nm_km:.5g} "
        f"ps per nm km and loss {res.loss_db_km:.4g} db per km at wavelength "
        f"{target.lambda_um:.3g} um"
    )
    return {
        "query_id": query.id,
        "trace_id": query.trace_ids[0],
        "qtype": query.qtype,
        "f1": evalsuite.token_f1(text, query.answer_text),
        "design": None,
        "param": evalsuite.param_accuracy(
            geom.as_dict(), query.ground_truth["reference_geometry"]
        ),
        "trend": None,
        "succ": 1.0 if ok else 0.0,
        "qual": qual,
        "phys": 1.0 if ok else 0.0,
        "passed": ok,
        "calls": calls,
        "answer_text": text,
    }


def run_baseline(
    kind: str,
    queries: list[Query],
    master_seed: int,
    train_traces: list[Trace] | None = None,
) -> dict:
    """Run one baseline over the parameter_adjustment queries.

    Returns rows plus eval calls; the surrogate also reports its training
    call cost separately so eval calls/query stays a clean budget figure.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline: {kind}")
    param_queries = sorted(
        (q for q in queries if q.qtype == "parameter_adjustment"), key=lambda q: q.id
    )
    counter = CallCounter()
    training_calls = 0
    model = None
    if kind == "surrogate":
        if not train_traces:
            raise ValueError("surrogate baseline needs training traces")
        train_counter = CallCounter()
        model = train_surrogate(train_traces, master_seed, train_counter)
        training_calls = train_counter.total_calls

    rows = []
    for i, q in enumerate(param_queries):
        rng = np.random.default_rng(
            np.random.SeedSequence(master_seed, spawn_key=(5, i))
        )
        target = physics.target_from_dict(q.ground_truth["target"])
        counter.begin_query()
        if kind == "random_search":
            geom, res = random_search_query(target, counter, rng)
        elif kind == "nelder_mead":
            geom, res, _ = nelder_mead_query(target, counter, rng)
        else:
            geom, res = surrogate_query(model, target, counter, rng)
        rows.append(_baseline_row(q, geom, res, counter.per_query_calls))
    return {
        "rows": rows,
        "total_calls": counter.total_calls,
        "training_calls": training_calls,
    }
