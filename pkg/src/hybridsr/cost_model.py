"""Precision-weighted operation count (BOPs variant) used as search objective.

Each operation is weighted by the byte width of the activations it runs
on: 32-bit costs 4, 16-bit costs 2, 8-bit costs 1. Conv layers count
c_out*c_in*k*k MACs per output sample; relu, residual add and pixel
shuffle count one op per element and inherit the wordlength of the
closest preceding conv (32 for a conv that carries no wordlength).
"""

from dataclasses import dataclass, field

BYTE_WEIGHT = {32: 4, 16: 2, 8: 1}
CONVENTION = {
    "conv_ops": "c_out*c_in*k*k*h_out*w_out MACs",
    "elementwise_ops": "1 op per input element, inherited wordlength",
    "weights": "8-bit weights folded into the activation byte weight",
}


def byte_weight(bits):
    try:
        return BYTE_WEIGHT[int(bits)]
    except KeyError:
        raise ValueError(f"unsupported wordlength {bits}; expected one of 8, 16, 32") from None


@dataclass
class LayerCost:
    index: int
    kind: str
    ops: int
    bits: int
    cost: int


@dataclass
class CostReport:
    layers: list
    total: int
    conv_total: int
    reference: str = None
    reduction: float = None
    conv_reduction: float = None
    convention: dict = field(default_factory=lambda: dict(CONVENTION))

    def to_dict(self):
        return {
            "total": self.total,
            "conv_total": self.conv_total,
            "reference": self.reference,
            "reduction": self.reduction,
            "conv_reduction": self.conv_reduction,
            "convention": self.convention,
            "layers": [vars(l) for l in self.layers],
        }

    def table(self):
        lines = [f"{'layer':>5} {'kind':<13} {'ops':>12} {'bits':>4} {'cost':>12}"]
        for l in self.layers:
            lines.append(f"{l.index:>5} {l.kind:<13} {l.ops:>12} {l.bits:>4} {l.cost:>12}")
        lines.append(f"total {self.total}  (conv {self.conv_total})")
        if self.reduction is not None:
            lines.append(f"reduction vs {self.reference}: {self.reduction:.3f}x "
                         f"(conv {self.conv_reduction:.3f}x)")
        return "\n".join(lines)


def layer_costs(model, bits, input_hw):
    quant = model.quantizable_layers
    if len(bits) != len(quant):
        raise ValueError(f"wordlength vector has {len(bits)} entries, "
                         f"model has {len(quant)} quantizable layers")
    per_layer = dict(zip(quant, (int(b) for b in bits)))
    shapes = model.input_shapes(*input_hw)
    out = []
    current = 32
    for layer, (c, h, w) in zip(model.layers, shapes):
        if layer.kind == "conv":
            current = per_layer.get(layer.index, 32)
        ops = layer.mac_count(h, w, c)
        out.append(LayerCost(layer.index, layer.kind, ops, current, ops * byte_weight(current)))
    return out


def get_bops(model, bits, input_hw, reference_bits=None, reference_name="A16W8"):
    """Weighted cost of running ``model`` with wordlengths ``bits``.

    The reduction ratios compare against ``reference_bits`` (all-16 by
    default) as reference_cost / cost.
    """
    layers = layer_costs(model, bits, input_hw)
    total = sum(l.cost for l in layers)
    conv_total = sum(l.cost for l in layers if l.kind == "conv")
    report = CostReport(layers, total, conv_total)
    if reference_bits is None:
        reference_bits = [16] * len(bits)
    if reference_bits is not False:
        ref = layer_costs(model, reference_bits, input_hw)
        ref_total = sum(l.cost for l in ref)
        ref_conv = sum(l.cost for l in ref if l.kind == "conv")
        report.reference = reference_name
        report.reduction = ref_total / total if total else 1.0
        report.conv_reduction = ref_conv / conv_total if conv_total else 1.0
    return report


def conv_cost(model, bits, input_hw):
    return sum(l.cost for l in layer_costs(model, bits, input_hw) if l.kind == "conv")
