"""SR model representation, on-disk format, forward execution and fixtures.

A model is an ordered list of layers evaluated in index order. Each layer
reads the running tensor (the previous layer's output); ``residual_add``
additionally reads the output of an earlier layer (``source``), where
``source == -1`` names the network input.

On disk a model is a directory holding ``model.json`` (the manifest) and
``weights.bin`` (little-endian float32). Every conv owns the contiguous
slice ``[offset, offset + c_out*c_in*k*k + c_out)`` of the blob: weights in
(c_out, c_in, k, k) order followed by the bias.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quantization as q
from .errors import ModelFormatError, PlanError, ShapeError
from .tensor_core import add, as_tensor, conv2d, pixel_shuffle_memaware, relu

MODEL_FORMAT = "hybridsr-model"
MODEL_VERSION = 1
MANIFEST_NAME = "model.json"
BLOB_NAME = "weights.bin"
KINDS = ("conv", "relu", "residual_add", "pixel_shuffle")


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    offset: int = 0
    quantizable: bool = True
    scale: int = 0
    source: int = -1

    @property
    def weight_count(self):
        return self.c_out * self.c_in * self.k * self.k

    @property
    def blob_length(self):
        return self.weight_count + self.c_out

    def out_hw(self, h, w):
        if self.kind == "conv":
            return ((h + 2 * self.padding - self.k) // self.stride + 1,
                    (w + 2 * self.padding - self.k) // self.stride + 1)
        if self.kind == "pixel_shuffle":
            return h * self.scale, w * self.scale
        return h, w

    def mac_count(self, h, w, c=None):
        """Operation count for an input of spatial size (h, w).

        Convs count c_out*c_in*k*k MACs per output sample; elementwise
        layers count one op per output element (``c`` is the channel
        count of their input).
        """
        ho, wo = self.out_hw(h, w)
        if self.kind == "conv":
            return self.weight_count * ho * wo
        return (c or 0) * h * w

    def to_dict(self):
        base = {"index": self.index, "kind": self.kind}
        if self.kind == "conv":
            base.update(c_in=self.c_in, c_out=self.c_out, k=self.k, stride=self.stride,
                        padding=self.padding, offset=self.offset,
                        quantizable=self.quantizable)
        elif self.kind == "pixel_shuffle":
            base["scale"] = self.scale
        elif self.kind == "residual_add":
            base["source"] = self.source
        return base


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class ModelGraph:
    layers: list
    weights: np.ndarray
    upscale_factor: int
    name: str = "model"
    in_channels: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # stored weights are float32 values so the blob round-trips exactly
        self.weights = _f32(self.weights).ravel()
        self.weights.setflags(write=False)
        self.validate()

    def validate(self):
        scale = 1
        c = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ModelFormatError(f"layer {i} carries index {layer.index}")
            if layer.kind not in KINDS:
                raise ModelFormatError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == "conv":
                if layer.c_in != c:
                    raise ShapeError(f"conv expects {layer.c_in} input channels, stream has {c}",
                                     i, (layer.c_in, c))
                if layer.k < 1 or layer.k % 2 == 0 or layer.stride < 1:
                    raise ModelFormatError(f"layer {i}: bad kernel/stride {layer.k}/{layer.stride}")
                if layer.offset < 0 or layer.offset + layer.blob_length > self.weights.size:
                    raise ModelFormatError(
                        f"layer {i}: weight blob overflow (needs [{layer.offset}, "
                        f"{layer.offset + layer.blob_length}), blob has {self.weights.size})")
                c = layer.c_out
            elif layer.kind == "pixel_shuffle":
                if layer.scale < 1 or c % (layer.scale ** 2):
                    raise ShapeError(f"pixel shuffle x{layer.scale} on {c} channels", i, c)
                c //= layer.scale ** 2
                scale *= layer.scale
            elif layer.kind == "residual_add":
                if not -1 <= layer.source < i:
                    raise ModelFormatError(f"layer {i}: residual source {layer.source} "
                                           "must precede the layer")
        if scale != self.upscale_factor:
            raise ModelFormatError(f"pixel shuffles compose to x{scale}, "
                                   f"manifest says x{self.upscale_factor}")
        if c != self.in_channels:
            raise ModelFormatError(f"model outputs {c} channels for {self.in_channels} in")

    @property
    def quantizable_layers(self):
        """Graph indices of the conv layers that carry a wordlength."""
        return [l.index for l in self.layers if l.kind == "conv" and l.quantizable]

    def conv_weights(self, index):
        layer = self.layers[index]
        if layer.kind != "conv":
            raise ValueError(f"layer {index} is not a conv")
        o = layer.offset
        w = self.weights[o:o + layer.weight_count].reshape(layer.c_out, layer.c_in,
                                                           layer.k, layer.k)
        b = self.weights[o + layer.weight_count:o + layer.blob_length]
        return w, b

    def input_shapes(self, h, w):
        """(c, h, w) of every layer's running input for an (h, w) network input."""
        shapes = []
        c = self.in_channels
        for layer in self.layers:
            shapes.append((c, h, w))
            h, w = layer.out_hw(h, w)
            if layer.kind == "conv":
                c = layer.c_out
            elif layer.kind == "pixel_shuffle":
                c //= layer.scale ** 2
        return shapes

    def receptive_radius(self):
        """Half-width, in input pixels, of the model's receptive field."""
        return sum((l.k - 1) // 2 for l in self.layers if l.kind == "conv")

    def digest(self):
        h = hashlib.sha256(json.dumps(_manifest_layers(self), sort_keys=True).encode())
        h.update(_blob_bytes(self.weights))
        return h.hexdigest()


def _manifest_layers(model):
    return [l.to_dict() for l in model.layers]


def _blob_bytes(weights):
    return np.asarray(weights, dtype="<f4").tobytes()


class _Builder:
    """Accumulates layers and their weight slices."""

    def __init__(self, in_channels):
        self.layers = []
        self.blobs = []
        self.offset = 0
        self.c = in_channels

    def conv(self, weights, bias, padding=None, quantizable=True):
        weights = np.asarray(weights, dtype=np.float64)
        c_out, c_in, k, _ = weights.shape
        if bias is None:
            bias = np.zeros(c_out)
        if padding is None:
            padding = k // 2
        self.layers.append(LayerSpec(len(self.layers), "conv", c_in=c_in, c_out=c_out, k=k,
                                     padding=padding, offset=self.offset,
                                     quantizable=quantizable))
        self.blobs += [weights.ravel(), np.asarray(bias, dtype=np.float64).ravel()]
        self.offset += weights.size + c_out
        self.c = c_out
        return len(self.layers) - 1

    def relu(self):
        self.layers.append(LayerSpec(len(self.layers), "relu"))
        return len(self.layers) - 1

    def add(self, source):
        self.layers.append(LayerSpec(len(self.layers), "residual_add", source=source))
        return len(self.layers) - 1

    def shuffle(self, s):
        self.layers.append(LayerSpec(len(self.layers), "pixel_shuffle", scale=s))
        self.c //= s * s
        return len(self.layers) - 1

    def build(self, name, in_channels, upscale, meta=None):
        blob = np.concatenate(self.blobs) if self.blobs else np.zeros(0)
        return ModelGraph(self.layers, blob, upscale, name, in_channels, meta or {})


# --------------------------------------------------------------------------
# persistence


def save_model(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _blob_bytes(model.weights)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "name": model.name,
        "in_channels": model.in_channels,
        "upscale_factor": model.upscale_factor,
        "layers": _manifest_layers(model),
        "blob": {"file": BLOB_NAME, "dtype": "float32-le", "length": int(model.weights.size),
                 "sha256": hashlib.sha256(blob).hexdigest()},
        "meta": model.meta,
    }
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _layer_from_dict(d):
    try:
        kind = d["kind"]
        if kind == "conv":
            return LayerSpec(int(d["index"]), kind, c_in=int(d["c_in"]), c_out=int(d["c_out"]),
                             k=int(d["k"]), stride=int(d.get("stride", 1)),
                             padding=int(d.get("padding", 0)), offset=int(d["offset"]),
                             quantizable=bool(d.get("quantizable", True)))
        if kind == "pixel_shuffle":
            return LayerSpec(int(d["index"]), kind, scale=int(d["scale"]))
        if kind == "residual_add":
            return LayerSpec(int(d["index"]), kind, source=int(d["source"]))
        return LayerSpec(int(d["index"]), kind)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed layer entry {d!r}: {exc}") from None


def load_model(path):
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"missing manifest {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed manifest {manifest_path}: {exc}") from None
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{manifest_path}: not a {MODEL_FORMAT} manifest")
    if manifest.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    try:
        blob_info = manifest["blob"]
        blob_path = manifest_path.parent / blob_info["file"]
        layers = [_layer_from_dict(d) for d in manifest["layers"]]
        upscale = int(manifest["upscale_factor"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed manifest {manifest_path}: {exc}") from None
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"missing weight blob {blob_path}") from None
    if len(blob) % 4:
        raise ModelFormatError(f"{blob_path}: length {len(blob)} is not a multiple of 4")
    if "sha256" in blob_info and hashlib.sha256(blob).hexdigest() != blob_info["sha256"]:
        raise ModelFormatError(f"{blob_path}: checksum mismatch")
    if "length" in blob_info and int(blob_info["length"]) != len(blob) // 4:
        raise ModelFormatError(f"{blob_path}: length mismatch")
    weights = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    return ModelGraph(layers, weights, upscale, manifest.get("name", "model"),
                      int(manifest.get("in_channels", 1)), manifest.get("meta") or {})


# --------------------------------------------------------------------------
# execution


def prepare_weights(model, plan=None):
    """Effective (weights, bias) per conv.

    With a weight-quantized plan, each quantizable conv keeps a single
    8-bit code array; the float weights are its dequantization, shared by
    every activation wordlength.
    """
    out = {}
    quant = {layer: j for j, layer in enumerate(model.quantizable_layers)}
    for layer in model.layers:
        if layer.kind != "conv":
            continue
        w, b = model.conv_weights(layer.index)
        j = quant.get(layer.index)
        if plan is not None and plan.weights is not None and j is not None:
            codes = q.quantize_codes(w, plan.weights[j])
            w = q.dequantize_codes(codes, plan.weights[j])
        out[layer.index] = (w, b)
    return out


def _static_params(plan, stats, j):
    p = plan.activations[j]
    if stats is None or p.passthrough:
        return p
    r = stats.ranges[j]
    s, z = q.derive_params(p.bits, r.x_min, r.x_max)
    return q.QuantParams(p.bits, s, z, p.dynamic)


def forward(model, x, plan=None, stats=None, probe=None, counters=None, weights=None):
    """Run ``model`` on ``x``.

    With a plan, each quantizable conv's input is fake-quantized before the
    kernel: DRE layers derive params from the live tensor, the rest use the
    plan's calibration-derived params (re-derived from ``stats`` when
    given). ``probe(layer_index, tensor)`` sees every layer's input before
    quantization. ``weights`` accepts a precomputed :func:`prepare_weights`.
    """
    x = as_tensor(x)
    quant = model.quantizable_layers
    if plan is not None and len(plan) != len(quant):
        raise PlanError(f"plan covers {len(plan)} layers, model has {len(quant)} quantizable")
    if x.shape[1] != model.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {model.in_channels}",
                         0, x.shape)
    if weights is None:
        weights = prepare_weights(model, plan)
    pos = {layer: j for j, layer in enumerate(quant)}
    needed = {l.source for l in model.layers if l.kind == "residual_add"}
    saved = {-1: x} if -1 in needed else {}

    cur = x
    for layer in model.layers:
        if probe is not None:
            probe(layer.index, cur)
        if layer.kind == "conv":
            j = pos.get(layer.index)
            if plan is not None and j is not None:
                cur = _quantize_input(cur, plan, stats, j, counters)
            w, b = weights[layer.index]
            cur = conv2d(cur, w, b, layer.stride, layer.padding, layer=layer.index)
        elif layer.kind == "relu":
            cur = relu(cur)
        elif layer.kind == "residual_add":
            cur = add(cur, saved[layer.source], layer=layer.index)
        else:
            cur = pixel_shuffle_memaware(cur, layer.scale, layer=layer.index)
        if layer.index in needed:
            saved[layer.index] = cur
    return cur


def _quantize_input(x, plan, stats, j, counters):
    p = plan.activations[j]
    if p.passthrough:
        return x
    if p.dynamic:
        p = q.dre_params(x, p.bits)
        if counters is not None:
            counters.scan_elements += x.size
            counters.dre_calls[j] = counters.dre_calls.get(j, 0) + 1
    else:
        p = _static_params(plan, stats, j)
    out, clipped = q.quantize_with_clips(x, p)
    if counters is not None:
        counters.clips[j] = counters.clips.get(j, 0) + clipped
    return out


# --------------------------------------------------------------------------
# fixtures


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def _linear(t):
    return max(0.0, 1.0 - abs(t))


def phase_taps(kind, scale):
    """1-D interpolation taps per output phase, indexed by offset -R..R.

    Output sample ``s*y + i`` sits at input coordinate ``y + (i + 0.5)/s - 0.5``
    (pixel-centre alignment).
    """
    if kind == "bicubic":
        radius, kernel, support = 2, keys_cubic, (-1, 0, 1, 2)
    elif kind == "bilinear":
        radius, kernel, support = 1, _linear, (0, 1)
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    taps = np.zeros((scale, 2 * radius + 1))
    for i in range(scale):
        t = (i + 0.5) / scale - 0.5
        base = math.floor(t)
        for m in support:
            off = base + m
            taps[i, off + radius] += kernel(t - off)
    return taps


def interpolation_weights(kind, scale, channels=1):
    """Conv weights (channels*s*s, channels, K, K) producing the s*s phase planes."""
    taps = phase_taps(kind, scale)
    k = taps.shape[1]
    w = np.zeros((channels * scale * scale, channels, k, k))
    for c in range(channels):
        for i in range(scale):
            for j in range(scale):
                w[c * scale * scale + i * scale + j, c] = np.outer(taps[i], taps[j])
    return w


def make_analytic_model(kind="bicubic", scale=2, channels=1):
    """Classical interpolation as one conv plus a pixel shuffle.

    Borders follow the conv's zero padding, i.e. the image is treated as
    zero outside its support.
    """
    if scale not in (2, 3, 4):
        raise ValueError(f"unsupported scale {scale}; choose 2, 3 or 4")
    b = _Builder(channels)
    b.conv(interpolation_weights(kind, scale, channels), None)
    b.shuffle(scale)
    return b.build(f"{kind}_x{scale}", channels, scale, {"fixture": kind})


def make_synthetic_model(depth=4, channels=8, scale=2, seed=0, in_channels=1):
    """Seeded residual SR network with exactly ``depth`` quantizable convs.

    Layout: head conv (in -> channels) + relu, ``depth - 2`` body convs
    grouped in residual blocks (conv, relu, conv, add) with a trailing
    conv + relu when odd, then a 5x5 tail conv (-> in*s*s) and the pixel
    shuffle. ``depth == 1`` is the tail alone. The first ``in_channels``
    feature channels carry the image through the body unchanged and the
    tail interpolates them bicubically, so the untrained network already
    upscales sensibly; the remaining channels add a small seeded residual.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if channels <= in_channels:
        raise ValueError("channels must exceed in_channels")
    rng = np.random.default_rng(seed)
    ci = in_channels
    b = _Builder(ci)

    def body_weights(keep_identity, gain):
        w = rng.normal(0.0, gain / math.sqrt(channels * 9), (channels, channels, 3, 3))
        w[:ci] = 0.0
        if keep_identity:
            for c in range(ci):
                w[c, c, 1, 1] = 1.0
        bias = rng.normal(0.0, 0.05, channels)
        bias[:ci] = 0.0
        return w, bias

    if depth >= 2:
        w = rng.normal(0.0, 1.0 / math.sqrt(ci * 9), (channels, ci, 3, 3))
        w[:ci] = 0.0
        for c in range(ci):
            w[c, c, 1, 1] = 1.0
        bias = rng.normal(0.0, 0.05, channels)
        bias[:ci] = 0.0
        b.conv(w, bias)
        last = b.relu()
        body = depth - 2
        while body >= 2:
            block_in = last
            b.conv(*body_weights(True, 1.0))
            b.relu()
            b.conv(*body_weights(False, 0.5))
            last = b.add(block_in)
            body -= 2
        if body == 1:
            b.conv(*body_weights(True, 1.0))
            last = b.relu()
    feat = b.c
    tail = np.zeros((ci * scale * scale, feat, 5, 5))
    tail[:, :ci] = interpolation_weights("bicubic", scale, ci)
    tail[:, ci:] = rng.normal(0.0, 0.02 / math.sqrt(max(feat - ci, 1) * 25),
                              (ci * scale * scale, feat - ci, 5, 5))
    b.conv(tail, np.zeros(ci * scale * scale))
    b.shuffle(scale)
    return b.build(f"synthetic_d{depth}_c{channels}_x{scale}_s{seed}", ci, scale,
                   {"fixture": "synthetic", "depth": depth, "channels": channels,
                    "seed": seed, "quantizable_layers": depth})


def make_wide_range_model(scale=2, gain=40.0):
    """Three quantizable convs where only the first sees a wide input range.

    A non-quantizable 1x1 stem emits the image and a ``gain``-amplified
    copy; the first quantizable conv keeps the clean copy, so its input
    range is ``gain`` times wider than the signal it passes on. The
    second is an identity 3x3 and the third a bicubic upscaler.
    """
    b = _Builder(1)
    b.conv(np.array([1.0, gain]).reshape(2, 1, 1, 1), None, quantizable=False)
    b.conv(np.array([1.0, 0.0]).reshape(1, 2, 1, 1), None)
    ident = np.zeros((1, 1, 3, 3))
    ident[0, 0, 1, 1] = 1.0
    b.conv(ident, None)
    b.conv(interpolation_weights("bicubic", scale), None)
    b.shuffle(scale)
    return b.build(f"wide_range_x{scale}", 1, scale, {"fixture": "wide_range", "gain": gain})


def make_twin_model(scale=2):
    """Two identical 1x1 identity convs in series ahead of a frozen bicubic tail."""
    b = _Builder(1)
    one = np.ones((1, 1, 1, 1))
    b.conv(one, None)
    b.conv(one, None)
    b.conv(interpolation_weights("bicubic", scale), None, quantizable=False)
    b.shuffle(scale)
    return b.build(f"twin_x{scale}", 1, scale, {"fixture": "twin"})


def model_from_layers(layers, weights, upscale_factor, name="model", in_channels=1):
    """Build a graph from manifest-style layer dicts (used by tests and tools)."""
    return ModelGraph([_layer_from_dict(d) for d in layers], weights, upscale_factor,
                      name, in_channels)
