"""Affine fake-quantization of activations and weights.

A value ``x`` maps to the unsigned b-bit code ``q = clamp(round(x*s - z))``
with ``s = (2**b - 1) / (x_max - x_min)`` and ``z = round(s * x_min)``;
the reconstruction is ``(q + z) / s``. Rounding is half away from zero.
Wordlength 32 is a pass-through.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError

PASS_THROUGH_BITS = 32
WEIGHT_BITS = 8
PLAN_FORMAT = "hybridsr-plan"
STATS_FORMAT = "hybridsr-calibration"
SCHEMA_VERSION = 1


def round_half_away(v):
    """Round half away from zero; works on scalars and arrays."""
    if np.isscalar(v):
        return math.copysign(math.floor(abs(v) + 0.5), v)
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def derive_params(bits, x_min, x_max):
    """Scale and zero point for a b-bit unsigned code over [x_min, x_max].

    A degenerate range (x_min == x_max) yields s=1, z=round(x_min).
    """
    x_min = float(x_min)
    x_max = float(x_max)
    if x_max < x_min:
        raise ValueError(f"x_min {x_min} > x_max {x_max}")
    if x_max == x_min:
        return 1.0, int(round_half_away(x_min))
    scale = (2 ** bits - 1) / (x_max - x_min)
    return scale, int(round_half_away(scale * x_min))


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float = 1.0
    zero_point: int = 0
    dynamic: bool = False

    @property
    def passthrough(self):
        return self.bits >= PASS_THROUGH_BITS

    @property
    def half_step(self):
        return 0.5 / self.scale

    def to_dict(self):
        return {"bits": self.bits, "scale": self.scale,
                "zero_point": self.zero_point, "dynamic": self.dynamic}


def _codes(x, scale, zero_point, bits):
    raw = x * scale - zero_point
    qmax = 2 ** bits - 1
    q = np.clip(round_half_away(raw), 0, qmax)
    tol = 1e-9 * qmax
    clipped = int(np.count_nonzero((raw < -0.5 - tol) | (raw > qmax + 0.5 + tol)))
    return q, clipped


def quantize_with_clips(x, p):
    """Fake-quantize ``x`` and report how many samples saturated.

    A sample counts as clipped when saturation moved it by more than half
    a quantization step, i.e. it lay outside the representable range.
    """
    x = np.asarray(x, dtype=np.float64)
    if p.passthrough:
        return x, 0
    q, clipped = _codes(x, p.scale, p.zero_point, p.bits)
    out = (q + p.zero_point) / p.scale
    out.setflags(write=False)
    return out, clipped


def fake_quantize(x, p):
    return quantize_with_clips(x, p)[0]


def quantize_codes(x, p):
    """Integer codes in [0, 2**b - 1] as the narrowest unsigned dtype."""
    q, _ = _codes(np.asarray(x, dtype=np.float64), p.scale, p.zero_point, p.bits)
    return q.astype(np.uint8 if p.bits <= 8 else np.uint16)


def dequantize_codes(q, p):
    return (np.asarray(q, dtype=np.float64) + p.zero_point) / p.scale


def dre_params(x, bits, dynamic=True):
    """Runtime range estimation: parameters from the tensor's own min/max."""
    x = np.asarray(x)
    s, z = derive_params(bits, float(x.min()), float(x.max()))
    return QuantParams(bits, s, z, dynamic)


def quantize_weights(model):
    """Per-tensor 8-bit params over each quantizable conv's exact weight range.

    Biases stay in full precision.
    """
    params = []
    for idx in model.quantizable_layers:
        w, _ = model.conv_weights(idx)
        s, z = derive_params(WEIGHT_BITS, float(w.min()), float(w.max()))
        params.append(QuantParams(WEIGHT_BITS, s, z))
    return params


@dataclass
class QuantCounters:
    """Runtime instrumentation, keyed by quantizable-layer position."""

    clips: dict = field(default_factory=dict)
    dre_calls: dict = field(default_factory=dict)
    scan_elements: int = 0

    @property
    def total_clips(self):
        return sum(self.clips.values())

    def merge(self, other):
        for k, v in other.clips.items():
            self.clips[k] = self.clips.get(k, 0) + v
        for k, v in other.dre_calls.items():
            self.dre_calls[k] = self.dre_calls.get(k, 0) + v
        self.scan_elements += other.scan_elements
        return self


# --------------------------------------------------------------------------
# calibration


@dataclass
class LayerRange:
    x_min: float
    x_max: float
    count: int


@dataclass
class CalibrationStats:
    ranges: list
    content_hash: str
    selected: list = field(default_factory=list)
    sample_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for r in self.ranges:
            if r.x_min > r.x_max or r.count <= 0:
                raise ValueError(f"invalid calibration range {r}")

    def to_dict(self):
        return {
            "format": STATS_FORMAT,
            "version": SCHEMA_VERSION,
            "content_hash": self.content_hash,
            "sample_fraction": self.sample_fraction,
            "seed": self.seed,
            "selected": list(self.selected),
            "layers": [{"x_min": r.x_min, "x_max": r.x_max, "count": r.count}
                       for r in self.ranges],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != STATS_FORMAT:
            raise PlanError("not a calibration stats document")
        return cls(
            ranges=[LayerRange(float(r["x_min"]), float(r["x_max"]), int(r["count"]))
                    for r in d["layers"]],
            content_hash=d["content_hash"],
            selected=list(d.get("selected", [])),
            sample_fraction=float(d.get("sample_fraction", 1.0)),
            seed=int(d.get("seed", 0)),
        )


def selection_count(n, fraction):
    return max(1, int(round_half_away(fraction * n)))


def select_calibration(n, fraction, seed):
    """Sorted indices of a uniform sample without replacement."""
    if n <= 0:
        raise ValueError("calibration image set is empty")
    if not 0 < fraction <= 1:
        raise ValueError(f"sample_fraction must be in (0, 1], got {fraction}")
    k = selection_count(n, fraction)
    if k == n:
        return list(range(n))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def hash_arrays(arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def calibrate(model, images, sample_fraction=0.1, seed=0, names=None):
    """Record min/max of every quantizable layer's input over a sampled subset.

    ``images`` is a sequence of input tensors (1, c, h, w) already in model
    range. ``names`` (same length) are recorded for the selected entries so
    the same subset can be rebuilt later.
    """
    from .model_graph import forward

    images = list(images)
    picked = select_calibration(len(images), sample_fraction, seed)
    quant = model.quantizable_layers
    pos = {layer: j for j, layer in enumerate(quant)}
    lo = [math.inf] * len(quant)
    hi = [-math.inf] * len(quant)
    counts = [0] * len(quant)

    def probe(layer, x):
        j = pos.get(layer)
        if j is None:
            return
        lo[j] = min(lo[j], float(x.min()))
        hi[j] = max(hi[j], float(x.max()))
        counts[j] += x.size

    for i in picked:
        forward(model, images[i], probe=probe)
    ranges = [LayerRange(lo[j], hi[j], counts[j]) for j in range(len(quant))]
    chosen = [names[i] for i in picked] if names is not None else [str(i) for i in picked]
    return CalibrationStats(
        ranges=ranges,
        content_hash=hash_arrays(images[i] for i in picked),
        selected=chosen,
        sample_fraction=float(sample_fraction),
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# plans


@dataclass
class QuantPlan:
    """Per-quantizable-layer activation params plus the shared 8-bit weights.

    ``activations[j]`` belongs to the j-th quantizable conv of the model.
    ``ranges`` keeps the calibration range of each layer so a plan can be
    re-derived for different wordlengths. ``weights`` is None when weights
    stay in full precision.
    """

    activations: list
    weights: list = None
    ranges: list = None
    epsilon: float = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weights is not None and len(self.weights) != len(self.activations):
            raise PlanError("weight and activation params differ in length")
        if self.ranges is not None and len(self.ranges) != len(self.activations):
            raise PlanError("ranges and activation params differ in length")

    def __len__(self):
        return len(self.activations)

    @property
    def bits(self):
        return [p.bits for p in self.activations]

    @property
    def dynamic(self):
        return [p.dynamic for p in self.activations]

    def with_dynamic(self, flags):
        acts = [QuantParams(p.bits, p.scale, p.zero_point, bool(f))
                for p, f in zip(self.activations, flags)]
        return QuantPlan(acts, self.weights, self.ranges, self.epsilon, dict(self.provenance))

    def to_dict(self):
        acts = []
        for j, p in enumerate(self.activations):
            entry = p.to_dict()
            if self.ranges is not None:
                entry["range"] = list(self.ranges[j])
            acts.append(entry)
        return {
            "format": PLAN_FORMAT,
            "version": SCHEMA_VERSION,
            "epsilon": self.epsilon,
            "activations": acts,
            "weights": None if self.weights is None else [
                {"bits": p.bits, "scale": p.scale, "zero_point": p.zero_point}
                for p in self.weights],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != PLAN_FORMAT:
            raise PlanError("not a plan document")
        if d.get("version") != SCHEMA_VERSION:
            raise PlanError(f"unsupported plan version {d.get('version')}")
        acts = [QuantParams(int(a["bits"]), float(a["scale"]), int(a["zero_point"]),
                            bool(a["dynamic"])) for a in d["activations"]]
        ranges = None
        if acts and all("range" in a for a in d["activations"]):
            ranges = [tuple(float(v) for v in a["range"]) for a in d["activations"]]
        weights = None
        if d.get("weights") is not None:
            weights = [QuantParams(int(w["bits"]), float(w["scale"]), int(w["zero_point"]))
                       for w in d["weights"]]
        eps = d.get("epsilon")
        return cls(acts, weights, ranges, None if eps is None else float(eps),
                   dict(d.get("provenance") or {}))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def make_plan(model, stats, bits, dynamic=None, weights=True, epsilon=None):
    """Build a plan for wordlength vector ``bits`` from calibration ranges.

    ``weights`` may be True (quantize from the model), None/False (keep
    FP weights) or an explicit list of weight params.
    """
    n = len(model.quantizable_layers)
    bits = [int(b) for b in bits]
    if len(bits) != n:
        raise PlanError(f"model has {n} quantizable layers, got {len(bits)} wordlengths")
    if dynamic is None:
        dynamic = [False] * n
    if len(dynamic) != n:
        raise PlanError(f"model has {n} quantizable layers, got {len(dynamic)} DRE flags")
    if stats is not None and len(stats.ranges) != n:
        raise PlanError("calibration stats do not match the model")
    acts = []
    ranges = None if stats is None else [(r.x_min, r.x_max) for r in stats.ranges]
    for j, (b, d) in enumerate(zip(bits, dynamic)):
        if b >= PASS_THROUGH_BITS:
            acts.append(QuantParams(PASS_THROUGH_BITS, 1.0, 0, bool(d)))
            continue
        if b not in (8, 16):
            raise PlanError(f"unsupported wordlength {b}")
        if stats is None:
            if not d:
                raise PlanError("static quantization needs calibration stats")
            acts.append(QuantParams(b, 1.0, 0, True))
            continue
        s, z = derive_params(b, *ranges[j])
        acts.append(QuantParams(b, s, z, bool(d)))
    if weights is True:
        wparams = quantize_weights(model)
    elif weights is None or weights is False:
        wparams = None
    else:
        wparams = list(weights)
    return QuantPlan(acts, wparams, ranges, epsilon)
