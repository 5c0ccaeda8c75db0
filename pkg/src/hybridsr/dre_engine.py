"""Layerwise resilience analysis and dynamic-range-estimation layer selection."""

from dataclasses import dataclass, field

from .errors import PlanError


@dataclass
class LraReport:
    """Per-layer 8-bit PSNR drops (dB, floored at 0) and their ranking.

    ``drops[j]`` belongs to quantizable layer j; ``order`` lists layer
    positions by descending drop with ties broken by ascending position.
    """

    drops: list
    order: list
    baseline_psnr: float
    weight_only_drop: float
    evaluations: int = 0
    raw_drops: list = field(default_factory=list)

    def __post_init__(self):
        if any(d < 0 for d in self.drops):
            raise ValueError("LRA drops must be non-negative")

    @property
    def sorted_drops(self):
        return [self.drops[j] for j in self.order]

    def to_dict(self):
        return {
            "format": "hybridsr-lra",
            "version": 1,
            "drops": self.drops,
            "raw_drops": self.raw_drops,
            "order": self.order,
            "baseline_psnr": self.baseline_psnr,
            "weight_only_drop": self.weight_only_drop,
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, d):
        return cls([float(v) for v in d["drops"]], [int(v) for v in d["order"]],
                   float(d["baseline_psnr"]), float(d["weight_only_drop"]),
                   int(d.get("evaluations", 0)), [float(v) for v in d.get("raw_drops", [])])


def rank_drops(drops):
    return sorted(range(len(drops)), key=lambda j: (-drops[j], j))


def lra(harness, high=16, low=8):
    """Isolate each layer's contribution to the activation-quantization drop.

    The baseline is the weight-quantized model with every activation at
    ``high`` bits; each layer is then lowered to ``low`` bits on its own
    and its drop against the baseline recorded. Costs |L| + 1 evaluations.
    """
    n = harness.n_layers
    start = harness.evaluations
    base = harness.evaluate([high] * n)
    raw = []
    for j in range(n):
        bits = [high] * n
        bits[j] = low
        raw.append(base - harness.evaluate(bits))
    drops = [max(0.0, d) for d in raw]
    return LraReport(drops, rank_drops(drops), base, harness.weight_only_drop,
                     harness.evaluations - start, raw)


def select_dre_layers(report, k):
    """Shortest prefix of the ranking whose squared-drop energy share reaches ``k``.

    Energy of a layer is its drop squared. Returns the selected layer
    positions in ranking order. Zero total energy or ``k == 0`` select
    nothing; ``k == 1`` selects every layer with a positive drop.
    """
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"K must lie in [0, 1], got {k}")
    if not report.order:
        raise ValueError("empty LRA report")
    energies = [report.drops[j] ** 2 for j in report.order]
    total = sum(energies)
    if total == 0.0 or k == 0.0:
        return []
    if k == 1.0:
        return [j for j in report.order if report.drops[j] > 0]
    selected = []
    acc = 0.0
    for j, e in zip(report.order, energies):
        acc += e
        selected.append(j)
        if acc / total >= k:
            break
    return selected


def apply_dre(plan, selected, k=None):
    """Set the DRE flag on ``selected`` layers; wordlengths stay as they are."""
    n = len(plan)
    for j in selected:
        if not 0 <= j < n:
            raise PlanError(f"DRE layer {j} out of range for a {n}-layer plan")
    chosen = set(selected)
    out = plan.with_dynamic([p.dynamic or j in chosen for j, p in enumerate(plan.activations)])
    out.provenance["dre"] = {"k": k, "layers": sorted(chosen)}
    return out
