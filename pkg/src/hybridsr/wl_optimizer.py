"""Per-layer activation wordlength search.

All optimizers draw quality evaluations from one :class:`QualityHarness`,
which charges every calibration-set pass against a :class:`SearchBudget`.
The quality drop of a plan is ``PSNR(reference) - PSNR(plan)`` averaged
over the calibration set; the reference is the FP32 model, or the
weight-only quantized model when weight quantization alone already costs
at least ``epsilon``.
"""

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cost_model import conv_cost, get_bops, layer_costs
from .errors import BudgetExhausted
from .metrics import image_to_tensor, psnr, tensor_to_image
from .model_graph import forward, prepare_weights
from .quantization import make_plan, quantize_weights

PSNR_CAP = 100.0
DEFAULT_EPSILON = 0.1
DEFAULT_WORDLENGTHS = (8, 16)


@dataclass
class SearchBudget:
    max_evaluations: int = None
    wall_clock: float = None
    used: int = 0
    _started: float = field(default=None, repr=False)

    @property
    def exhausted(self):
        if self.max_evaluations is not None and self.used >= self.max_evaluations:
            return True
        if self.wall_clock is not None and self._started is not None:
            return time.monotonic() - self._started >= self.wall_clock
        return False

    def charge(self):
        if self._started is None:
            self._started = time.monotonic()
        if self.exhausted:
            raise BudgetExhausted(f"evaluation budget of {self.max_evaluations} used up")
        self.used += 1


def _capped(v):
    return min(float(v), PSNR_CAP)


class QualityHarness:
    """Calibration-set quality evaluator shared by every optimizer.

    ``samples`` are :class:`~hybridsr.datasets.Sample` pairs. Reference
    PSNRs (FP32 and weight-only) are computed once at construction and
    are not charged to the budget.
    """

    def __init__(self, model, samples, stats, epsilon=DEFAULT_EPSILON,
                 convention="y_channel", shave=None, threads=1, budget=None):
        samples = list(samples)
        if not samples:
            raise ValueError("calibration set is empty")
        self.model = model
        self.samples = samples
        self.stats = stats
        self.epsilon = float(epsilon)
        self.convention = convention
        self.shave = model.upscale_factor if shave is None else shave
        self.threads = max(1, int(threads))
        self.budget = budget if budget is not None else SearchBudget()
        self.n_layers = len(model.quantizable_layers)
        self.input_hw = (samples[0].lr.height, samples[0].lr.width)
        self._inputs = [image_to_tensor(s.lr) for s in samples]
        self.weight_params = quantize_weights(model)
        self._qweights = prepare_weights(model, make_plan(model, None, [32] * self.n_layers,
                                                          weights=self.weight_params))
        self.log = []

        self.fp_psnr = self.mean_psnr(None)
        self.w8_psnr = self.mean_psnr(make_plan(model, None, [32] * self.n_layers,
                                                weights=self.weight_params))
        self.weight_only_drop = self.fp_psnr - self.w8_psnr
        if self.weight_only_drop >= self.epsilon:
            self.reference_name, self.reference_psnr = "FP32W8", self.w8_psnr
        else:
            self.reference_name, self.reference_psnr = "FP32", self.fp_psnr

    @property
    def evaluations(self):
        return self.budget.used

    def image_psnrs(self, plan):
        weights = None
        if plan is not None and plan.weights == self.weight_params:
            weights = self._qweights

        def one(i):
            out = forward(self.model, self._inputs[i], plan=plan, weights=weights)
            return _capped(psnr(tensor_to_image(out), self.samples[i].hr,
                                self.convention, self.shave))

        idx = range(len(self.samples))
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(one, idx))
        return [one(i) for i in idx]

    def mean_psnr(self, plan):
        vals = self.image_psnrs(plan)
        total = 0.0
        for v in vals:  # fixed summation order
            total += v
        return total / len(vals)

    def plan(self, bits, dynamic=None):
        return make_plan(self.model, self.stats, bits, dynamic, weights=self.weight_params,
                         epsilon=self.epsilon)

    def evaluate(self, bits, dynamic=None):
        """Mean calibration PSNR of a weight-quantized plan; charged to the budget."""
        self.budget.charge()
        value = self.mean_psnr(self.plan(bits, dynamic))
        self.log.append({"bits": [int(b) for b in bits], "psnr": value})
        return value

    def drop(self, bits, dynamic=None):
        return self.reference_psnr - self.evaluate(bits, dynamic)

    def feasible(self, drop):
        return drop <= self.epsilon

    def conv_cost(self, bits):
        return conv_cost(self.model, bits, self.input_hw)


def quality_drop(model, plan, samples, epsilon=DEFAULT_EPSILON, convention="y_channel",
                 shave=None):
    """Calibration PSNR drop of ``plan`` against the reference model.

    Plans without weight quantization are compared with FP32; weight
    quantized ones with FP32, or FP32W8 when weight quantization alone
    already drops at least ``epsilon``.
    """
    h = QualityHarness(model, samples, None, epsilon, convention, shave)
    value = h.mean_psnr(plan)
    ref = h.reference_psnr if plan is not None and plan.weights is not None else h.fp_psnr
    return ref - value


# --------------------------------------------------------------------------
# results


@dataclass
class OptimizerResult:
    optimizer: str
    bits: list
    drop: float
    feasible: bool
    evaluations: int
    bops: int
    conv_cost: int
    conv_reduction: float
    reference: str
    epsilon: float
    seed: int = None
    log: list = field(default_factory=list)

    def to_dict(self):
        return {
            "optimizer": self.optimizer,
            "bits": list(self.bits),
            "drop": self.drop,
            "feasible": self.feasible,
            "evaluations": self.evaluations,
            "bops": self.bops,
            "conv_cost": self.conv_cost,
            "conv_reduction": self.conv_reduction,
            "reference": self.reference,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "log": self.log,
        }


def _result(harness, name, bits, drop, feasible, log, seed=None):
    bits = [int(b) for b in bits]
    report = get_bops(harness.model, bits, harness.input_hw)
    return OptimizerResult(name, bits, float(drop), bool(feasible), harness.evaluations,
                           report.total, report.conv_total, report.conv_reduction,
                           harness.reference_name, harness.epsilon, seed, log)


def visit_order(model, input_hw, top_bits=16):
    """Quantizable-layer positions by descending BOPs, ties by ascending index."""
    costs = [c for c in layer_costs(model, [top_bits] * len(model.quantizable_layers), input_hw)
             if c.kind == "conv"]
    quant = set(model.quantizable_layers)
    per_pos = [c.cost for c in costs if c.index in quant]
    return sorted(range(len(per_pos)), key=lambda j: (-per_pos[j], j))


# --------------------------------------------------------------------------
# single-shot greedy


def quantsr_wlopt(harness, wordlengths=DEFAULT_WORDLENGTHS):
    """Cost-prioritized single-pass wordlength assignment.

    Weights are 8-bit throughout. Every layer starts at max(W); layers are
    visited once in descending BOPs order and each is lowered to the next
    smaller wordlength while the quality constraint holds, reverting on the
    first violation. With W = {8, 16} this is exactly one evaluation per
    layer plus the baseline. If the all-max(W) plan already violates the
    constraint no cheaper plan is tried and the result is infeasible.
    """
    ws = sorted({int(w) for w in wordlengths}, reverse=True)
    n = harness.n_layers
    bits = [ws[0]] * n
    log = []
    base_drop = harness.drop(bits)
    log.append({"step": "baseline", "bits": list(bits), "drop": base_drop,
                "counted": True})
    if not harness.feasible(base_drop):
        return _result(harness, "wlopt", bits, base_drop, False, log)
    order = visit_order(harness.model, harness.input_hw, ws[0])
    current_drop = base_drop
    for j in order:
        for w in ws[1:]:
            trial = list(bits)
            trial[j] = w
            d = harness.drop(trial)
            kept = harness.feasible(d)
            log.append({"step": "visit", "layer": j,
                        "graph_index": harness.model.quantizable_layers[j],
                        "bits": w, "drop": d, "kept": kept})
            if not kept:
                break
            bits, current_drop = trial, d
    return _result(harness, "wlopt", bits, current_drop, True, log)


# --------------------------------------------------------------------------
# heuristic baselines


def _energy(harness, bits, top_cost):
    """Normalized cost; infeasible plans sit above every feasible one."""
    d = harness.drop(bits)
    e = harness.conv_cost(bits) / top_cost
    if not harness.feasible(d):
        e += 1.0 + (d - harness.epsilon)
    return e, d


class _Tracker:
    def __init__(self, harness):
        self.h = harness
        self.best = None  # (cost, bits, drop)
        self.fallback = None  # (energy, bits, drop)

    def see(self, bits, e, d):
        if self.h.feasible(d):
            c = self.h.conv_cost(bits)
            if self.best is None or c < self.best[0]:
                self.best = (c, list(bits), d)
        elif self.fallback is None or e < self.fallback[0]:
            self.fallback = (e, list(bits), d)

    def result(self, name, log, seed):
        if self.best is not None:
            return _result(self.h, name, self.best[1], self.best[2], True, log, seed)
        return _result(self.h, name, self.fallback[1], self.fallback[2], False, log, seed)


def _check_budget(harness, budget):
    if budget is None:
        budget = harness.n_layers + 1
    if budget < harness.n_layers + 1:
        raise ValueError(f"budget {budget} below |L|+1 = {harness.n_layers + 1}")
    harness.budget = SearchBudget(budget, harness.budget.wall_clock)
    return budget


def _flip(rng, w, ws):
    others = [v for v in ws if v != w]
    return others[int(rng.integers(len(others)))]


def baseline_sa(harness, budget=None, seed=0, wordlengths=DEFAULT_WORDLENGTHS, t0=1.0,
                cooling=0.05):
    """Simulated annealing from all-max(W) with t_i = t0 * exp(-cooling * i).

    The neighbour of a plan flips one uniformly chosen layer to a different
    wordlength; worse moves are accepted with probability exp(-delta / t_i).
    """
    _check_budget(harness, budget)
    ws = sorted({int(w) for w in wordlengths}, reverse=True)
    rng = np.random.default_rng(seed)
    n = harness.n_layers
    top_cost = harness.conv_cost([ws[0]] * n)
    track = _Tracker(harness)
    cur = [ws[0]] * n
    cur_e, d = _energy(harness, cur, top_cost)
    track.see(cur, cur_e, d)
    log = [{"iter": 0, "bits": list(cur), "energy": cur_e, "accepted": True}]
    i = 0
    while not harness.budget.exhausted:
        cand = list(cur)
        j = int(rng.integers(n))
        cand[j] = _flip(rng, cand[j], ws)
        e, d = _energy(harness, cand, top_cost)
        track.see(cand, e, d)
        t = t0 * math.exp(-cooling * i)
        delta = e - cur_e
        if delta <= 0:
            accept = True
        elif t > 0:
            accept = bool(rng.random() < math.exp(-delta / t))
        else:
            accept = False
        if accept:
            cur, cur_e = cand, e
        i += 1
        log.append({"iter": i, "bits": list(cand), "energy": e, "temperature": t,
                    "accepted": accept})
    return track.result("sa", log, seed)


def baseline_ga(harness, budget=None, seed=0, wordlengths=DEFAULT_WORDLENGTHS,
                population=None):
    """Genetic search: population ceil(0.25*|L|), binary tournaments,
    uniform crossover, per-gene mutation 1/|L|, one elite.
    """
    _check_budget(harness, budget)
    ws = sorted({int(w) for w in wordlengths}, reverse=True)
    rng = np.random.default_rng(seed)
    n = harness.n_layers
    size = population or math.ceil(0.25 * n)
    top_cost = harness.conv_cost([ws[0]] * n)
    track = _Tracker(harness)
    log = []

    def evaluate(bits, gen):
        e, d = _energy(harness, bits, top_cost)
        track.see(bits, e, d)
        log.append({"generation": gen, "bits": list(bits), "energy": e})
        return (e, bits)

    pop = []
    for k in range(size):
        if harness.budget.exhausted:
            break
        bits = [ws[0]] * n if k == 0 else [ws[int(i)] for i in rng.integers(len(ws), size=n)]
        pop.append(evaluate(bits, 0))

    def tournament():
        a, b = rng.integers(len(pop), size=2)
        return pop[min(a, b)] if pop[a][0] == pop[b][0] else min(pop[a], pop[b],
                                                                  key=lambda p: p[0])

    gen = 0
    while not harness.budget.exhausted:
        gen += 1
        elite = min(pop, key=lambda p: p[0])
        children = []
        for _ in range(max(1, size - 1)):
            if harness.budget.exhausted:
                break
            p1, p2 = tournament()[1], tournament()[1]
            mask = rng.random(n) < 0.5
            child = [a if m else b for a, m, b in zip(p1, mask, p2)]
            for j in range(n):
                if rng.random() < 1.0 / n:
                    child[j] = _flip(rng, child[j], ws)
            children.append(evaluate(child, gen))
        pop = sorted([elite] + children, key=lambda p: p[0])[:size]
    return track.result("ga", log, seed)


def baseline_rs(harness, budget=None, seed=0, wordlengths=DEFAULT_WORDLENGTHS):
    """Uniform random wordlength vectors until the budget runs out."""
    _check_budget(harness, budget)
    ws = sorted({int(w) for w in wordlengths}, reverse=True)
    rng = np.random.default_rng(seed)
    n = harness.n_layers
    top_cost = harness.conv_cost([ws[0]] * n)
    track = _Tracker(harness)
    log = []
    while not harness.budget.exhausted:
        bits = [ws[int(i)] for i in rng.integers(len(ws), size=n)]
        e, d = _energy(harness, bits, top_cost)
        track.see(bits, e, d)
        log.append({"bits": bits, "energy": e})
    return track.result("rs", log, seed)


OPTIMIZERS = {"wlopt": None, "sa": baseline_sa, "ga": baseline_ga, "rs": baseline_rs}


def run_optimizer(name, harness, wordlengths=DEFAULT_WORDLENGTHS, budget=None, seed=0):
    if name == "wlopt":
        return quantsr_wlopt(harness, wordlengths)
    try:
        fn = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    return fn(harness, budget=budget, seed=seed, wordlengths=wordlengths)


# --------------------------------------------------------------------------
# exhaustive enumeration (tiny models only)


def exhaustive_search(harness, wordlengths=DEFAULT_WORDLENGTHS):
    """Evaluate all |W|^|L| plans; flags feasibility and the (cost, drop) Pareto set."""
    ws = sorted({int(w) for w in wordlengths})
    entries = []
    for combo in itertools.product(ws, repeat=harness.n_layers):
        bits = list(combo)
        d = harness.drop(bits)
        entries.append({"bits": bits, "drop": d, "conv_cost": harness.conv_cost(bits),
                        "feasible": harness.feasible(d)})
    for e in entries:
        e["pareto"] = not any(
            o["conv_cost"] <= e["conv_cost"] and o["drop"] <= e["drop"]
            and (o["conv_cost"] < e["conv_cost"] or o["drop"] < e["drop"])
            for o in entries)
    return entries
