"""Declarative layer DAG, shape planning, execution and exact counters."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_ops as ops
from .errors import BindingError, ConfigurationError, DimensionError, FormatError, GraphError

SPEC_FORMAT = "dvstn-model"
SPEC_VERSION = 1

KINDS = (
    "input", "conv", "depthwise_conv", "batchnorm", "relu", "pool_max", "pool_avg",
    "global_avg_pool", "fully_connected", "softmax", "concat",
)
PARAMETERIZED = ("conv", "depthwise_conv", "batchnorm", "fully_connected")
ROLES = ("weights", "bias", "gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class LayerSpec:
    """One node of the model DAG.

    Kind-specific attributes live in ``attrs``:

    - conv: out_channels, kernel, stride, padding
    - depthwise_conv: kernel, stride, padding (channel count follows the input)
    - batchnorm: eps
    - pool_max / pool_avg: kernel, stride, padding, ceil_mode
    - fully_connected: out_features
    """

    id: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}", layer=self.id)

    def conv_params(self, in_channels=None):
        a = self.attrs
        if self.kind == "depthwise_conv":
            return ops.ConvParams(in_channels, a.get("kernel", 3), a.get("stride", 1),
                                  a.get("padding", 0), depthwise=True)
        return ops.ConvParams(a["out_channels"], a.get("kernel", 1), a.get("stride", 1),
                              a.get("padding", 0))

    def pool_params(self):
        a = self.attrs
        return ops.PoolParams(a.get("kernel", 2), a.get("stride", 2), a.get("padding", 0),
                              bool(a.get("ceil_mode", False)))

    def with_attrs(self, **changes):
        attrs = dict(self.attrs)
        attrs.update(changes)
        return replace(self, attrs=attrs)

    def to_dict(self):
        d = {"id": self.id, "kind": self.kind}
        if self.inputs:
            d["inputs"] = list(self.inputs)
        for k, v in self.attrs.items():
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        lid, kind = d.pop("id"), d.pop("kind")
        inputs = tuple(d.pop("inputs", ()))
        attrs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(lid, kind, inputs, attrs)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    class_count: int = 2
    provenance: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def layer(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def input_layer(self):
        return self.layers[0]

    @property
    def output_layer(self):
        return self.layers[-1]

    def consumers(self):
        out = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for src in layer.inputs:
                if src in out:
                    out[src].append(layer.id)
        return out

    def derive(self, *, name=None, layers=None, input_shape=None, record=None, metadata=None):
        """Copy with changes; ``record`` appends one provenance entry."""
        prov = self.provenance + ((record,) if record is not None else ())
        meta = dict(self.metadata)
        if metadata:
            meta.update(metadata)
        return ModelSpec(
            name=self.name if name is None else name,
            input_shape=self.input_shape if input_shape is None else input_shape,
            layers=self.layers if layers is None else layers,
            class_count=self.class_count,
            provenance=prov,
            metadata=meta,
        )

    def same_architecture(self, other):
        return self.input_shape == other.input_shape and self.layers == other.layers

    def to_dict(self):
        return {
            "format": SPEC_FORMAT,
            "version": SPEC_VERSION,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "provenance": [dict(p) for p in self.provenance],
            "metadata": dict(self.metadata),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != SPEC_FORMAT:
            raise FormatError(f"not a model spec (format={d.get('format')!r})")
        if d.get("version") != SPEC_VERSION:
            raise FormatError(f"unsupported model spec version {d.get('version')!r}")
        try:
            return cls(
                name=d["name"],
                input_shape=tuple(d["input_shape"]),
                layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
                class_count=int(d.get("class_count", 2)),
                provenance=tuple(d.get("provenance", ())),
                metadata=dict(d.get("metadata", {})),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed model spec: {exc}") from exc


def save_spec(spec, path):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


def load_spec(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return ModelSpec.from_dict(d)


# --- shape planning ----------------------------------------------------------

def _layer_output_shape(layer, in_shapes):
    kind = layer.kind
    if kind == "concat":
        if not in_shapes:
            raise GraphError("concat needs at least one input", layer=layer.id)
        h, w = in_shapes[0][1:]
        for s in in_shapes[1:]:
            if s[1:] != (h, w):
                raise DimensionError(f"concat inputs disagree spatially: {in_shapes}", layer=layer.id)
        return (sum(s[0] for s in in_shapes), h, w)
    if len(in_shapes) != 1:
        raise GraphError(f"{kind} takes exactly one input, got {len(in_shapes)}", layer=layer.id)
    c, h, w = in_shapes[0]
    if kind in ("conv", "depthwise_conv"):
        try:
            p = layer.conv_params(c)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), layer=layer.id) from None
        ho = ops.conv_output_extent(h, p.kernel[0], p.stride[0], p.padding[0])
        wo = ops.conv_output_extent(w, p.kernel[1], p.stride[1], p.padding[1])
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"output extent {ho}x{wo} from input {h}x{w}", layer=layer.id)
        return (p.out_channels, ho, wo)
    if kind in ("pool_max", "pool_avg"):
        p = layer.pool_params()
        ho = ops.pool_output_extent(h, p.kernel[0], p.stride[0], p.padding[0], p.ceil_mode)
        wo = ops.pool_output_extent(w, p.kernel[1], p.stride[1], p.padding[1], p.ceil_mode)
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"pooling output extent {ho}x{wo} from input {h}x{w}", layer=layer.id)
        return (c, ho, wo)
    if kind == "global_avg_pool":
        return (c, 1, 1)
    if kind == "fully_connected":
        k = int(layer.attrs["out_features"])
        if k < 1:
            raise ConfigurationError("out_features must be >= 1", layer=layer.id)
        return (k, 1, 1)
    # batchnorm, relu, softmax keep the shape
    return (c, h, w)


def validate_and_plan(spec, input_shape=None):
    """Propagate shapes through the DAG.

    Returns ``{layer_id: (C, H, W)}`` for every layer, in layer order.  Raises
    :class:`GraphError` for structural problems and
    :class:`ConfigurationError` / :class:`DimensionError` for shape failures,
    always naming the layer.
    """
    shape = tuple(spec.input_shape if input_shape is None else input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigurationError(f"input shape must be (C, H, W) with extents >= 1, got {shape}")
    if not spec.layers:
        raise GraphError("model has no layers")
    inputs = [layer for layer in spec.layers if layer.kind == "input"]
    if len(inputs) != 1 or spec.layers[0].kind != "input":
        raise GraphError("model needs exactly one input layer, placed first")
    plan = {}
    for layer in spec.layers:
        if layer.id in plan:
            raise GraphError("duplicate layer id", layer=layer.id)
        if layer.kind == "input":
            if layer.inputs:
                raise GraphError("input layer cannot have predecessors", layer=layer.id)
            plan[layer.id] = shape
            continue
        for src in layer.inputs:
            if src not in plan:
                raise GraphError(f"input {src!r} is not an earlier layer", layer=layer.id)
        plan[layer.id] = _layer_output_shape(layer, [plan[s] for s in layer.inputs])
    consumers = spec.consumers()
    sinks = [lid for lid, users in consumers.items() if not users]
    if sinks != [spec.layers[-1].id]:
        raise GraphError(f"model must have exactly one output layer (the last); dangling: {sinks}")
    return plan


def validate_classifier(spec):
    plan = validate_and_plan(spec)
    out = plan[spec.output_layer.id]
    if int(np.prod(out)) != spec.class_count:
        raise GraphError(
            f"output emits {out}, expected {spec.class_count} class scores", layer=spec.output_layer.id)
    return plan


def input_shapes(spec, plan=None):
    plan = validate_and_plan(spec) if plan is None else plan
    return {layer.id: [plan[s] for s in layer.inputs] for layer in spec.layers}


# --- counters ----------------------------------------------------------------

def parameter_extents(spec, plan=None):
    """``{layer_id: {role: shape}}`` for every parameterized layer."""
    plan = validate_and_plan(spec) if plan is None else plan
    out = {}
    for layer in spec.layers:
        if layer.kind not in PARAMETERIZED:
            continue
        c, h, w = plan[layer.inputs[0]]
        if layer.kind == "conv":
            p = layer.conv_params()
            out[layer.id] = {"weights": (p.out_channels, c) + p.kernel, "bias": (p.out_channels,)}
        elif layer.kind == "depthwise_conv":
            p = layer.conv_params(c)
            out[layer.id] = {"weights": (c, 1) + p.kernel, "bias": (c,)}
        elif layer.kind == "batchnorm":
            out[layer.id] = {r: (c,) for r in ("gamma", "beta", "mean", "var")}
        else:
            k = int(layer.attrs["out_features"])
            out[layer.id] = {"weights": (k, c * h * w), "bias": (k,)}
    return out


def layer_counts(spec, input_shape=None):
    """Per-layer ``(params, macs)`` in layer order."""
    plan = validate_and_plan(spec, input_shape)
    rows = []
    for layer in spec.layers:
        params = macs = 0
        if layer.inputs:
            c, h, w = plan[layer.inputs[0]]
        co, ho, wo = plan[layer.id]
        if layer.kind == "conv":
            kh, kw = layer.conv_params().kernel
            params = co * c * kh * kw + co
            macs = ho * wo * co * c * kh * kw
        elif layer.kind == "depthwise_conv":
            kh, kw = layer.conv_params(c).kernel
            params = c * kh * kw + c
            macs = ho * wo * c * kh * kw
        elif layer.kind == "batchnorm":
            params = 4 * c
            macs = 2 * c * h * w
        elif layer.kind == "fully_connected":
            d = c * h * w
            params = co * d + co
            macs = co * d
        rows.append((layer.id, layer.kind, params, macs))
    return rows


def count_params(spec):
    return sum(r[2] for r in layer_counts(spec))


def count_macs(spec, input_shape=None):
    return sum(r[3] for r in layer_counts(spec, input_shape))


# --- weights -----------------------------------------------------------------

class WeightStore:
    """Mapping layer id -> {role: float32 array}.  Treated as read-only."""

    def __init__(self, arrays=None):
        self._arrays = {}
        for lid, roles in (arrays or {}).items():
            for role in roles:
                if role not in ROLES:
                    raise BindingError(f"unknown array role {role!r}", layer=lid)
            self._arrays[lid] = {r: np.asarray(a) for r, a in roles.items()}

    def __getitem__(self, layer_id):
        return self._arrays[layer_id]

    def __contains__(self, layer_id):
        return layer_id in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def get(self, layer_id, default=None):
        return self._arrays.get(layer_id, default)

    def to_dict(self, copy_arrays=True):
        return {lid: {r: (a.copy() if copy_arrays else a) for r, a in roles.items()}
                for lid, roles in self._arrays.items()}

    def equals(self, other):
        """Bit-exact comparison of ids, roles, extents and values."""
        if set(self._arrays) != set(other._arrays):
            return False
        for lid, roles in self._arrays.items():
            theirs = other._arrays[lid]
            if set(roles) != set(theirs):
                return False
            for r, a in roles.items():
                b = theirs[r]
                if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
        return True

    def __repr__(self):
        return f"WeightStore({len(self._arrays)} layers)"


def check_weights(spec, weights, plan=None):
    """Raise :class:`BindingError` unless ``weights`` fits ``spec`` exactly."""
    extents = parameter_extents(spec, plan)
    for lid, roles in extents.items():
        have = weights.get(lid)
        if have is None:
            raise BindingError("no weights for layer", layer=lid)
        for role, shape in roles.items():
            if role not in have:
                raise BindingError(f"missing array {role!r}", layer=lid)
            if tuple(have[role].shape) != tuple(shape):
                raise BindingError(f"{role} has extents {have[role].shape}, expected {shape}", layer=lid)
    extra = set(weights) - set(extents)
    if extra:
        raise BindingError(f"weights for layers not in the model: {sorted(extra)}")


def init_weights(spec, seed=0, randomize_bn=False, dtype=np.float32):
    """Fan-in scaled Gaussian weights, zero biases.

    Batchnorm starts at gamma=1, beta=0, mean=0, var=1 unless ``randomize_bn``,
    which draws non-trivial statistics (useful for fold-equivalence tests).
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for lid, roles in parameter_extents(spec).items():
        if "gamma" in roles:
            (c,) = roles["gamma"]
            if randomize_bn:
                arrays[lid] = {
                    "gamma": rng.uniform(0.5, 1.5, c),
                    "beta": rng.normal(0.0, 0.1, c),
                    "mean": rng.normal(0.0, 0.1, c),
                    "var": rng.uniform(0.5, 1.5, c),
                }
            else:
                arrays[lid] = {"gamma": np.ones(c), "beta": np.zeros(c),
                               "mean": np.zeros(c), "var": np.ones(c)}
        else:
            wshape = roles["weights"]
            fan_in = int(np.prod(wshape[1:]))
            arrays[lid] = {
                "weights": rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape),
                "bias": np.zeros(roles["bias"]),
            }
        arrays[lid] = {r: a.astype(dtype) for r, a in arrays[lid].items()}
    return WeightStore(arrays)


def zero_weights(spec, dtype=np.float32):
    arrays = {}
    for lid, roles in parameter_extents(spec).items():
        arrays[lid] = {r: np.zeros(s, dtype=dtype) for r, s in roles.items()}
        if "var" in arrays[lid]:
            arrays[lid]["var"][:] = 1
    return WeightStore(arrays)


# --- execution ---------------------------------------------------------------

class CompiledModel:
    """A validated (spec, weights) pair ready for repeated inference.

    Immutable after construction; ``__call__`` may run concurrently from many
    threads.
    """

    def __init__(self, spec, weights, dtype=np.float32):
        self.spec = spec
        self.weights = weights
        self.dtype = np.dtype(dtype)
        self.plan = validate_and_plan(spec)
        check_weights(spec, weights, self.plan)
        last_use = {}
        for i, layer in enumerate(spec.layers):
            for src in layer.inputs:
                last_use[src] = i
        self._steps = []
        for i, layer in enumerate(spec.layers):
            release = tuple(s for s in set(layer.inputs) if last_use.get(s) == i)
            self._steps.append((layer.id, layer.inputs, self._make_fn(layer), release))
        self._output = spec.output_layer.id

    def _make_fn(self, layer):
        kind, lid = layer.kind, layer.id
        dt = self.dtype
        if kind == "conv":
            p = layer.conv_params()
            w = self.weights[lid]["weights"].astype(dt)
            b = self.weights[lid]["bias"].astype(dt)
            return lambda xs: ops.conv2d(xs[0], w, b, p, name=lid)
        if kind == "depthwise_conv":
            c = self.plan[layer.inputs[0]][0]
            p = layer.conv_params(c)
            w = self.weights[lid]["weights"].astype(dt)
            b = self.weights[lid]["bias"].astype(dt)
            return lambda xs: ops.depthwise_conv2d(xs[0], w, b, p, name=lid)
        if kind == "batchnorm":
            a = self.weights[lid]
            bn = ops.BatchNormParams(a["gamma"], a["beta"], a["mean"], a["var"],
                                     float(layer.attrs.get("eps", ops.DEFAULT_EPS)))
            return lambda xs: ops.batchnorm_infer(xs[0], bn, name=lid)
        if kind == "relu":
            return lambda xs: ops.relu(xs[0])
        if kind in ("pool_max", "pool_avg"):
            p = layer.pool_params()
            mode = "max" if kind == "pool_max" else "avg"
            return lambda xs: ops.pool2d(xs[0], mode, p.kernel, p.stride, p.padding, p.ceil_mode, name=lid)
        if kind == "global_avg_pool":
            return lambda xs: ops.global_avg_pool(xs[0], name=lid)
        if kind == "fully_connected":
            w = self.weights[lid]["weights"].astype(dt)
            b = self.weights[lid]["bias"].astype(dt)
            return lambda xs: ops.fully_connected(xs[0], w, b, name=lid)[:, :, None, None]
        if kind == "softmax":
            return lambda xs: ops.softmax(xs[0].reshape(xs[0].shape[0], -1), axis=1).reshape(xs[0].shape)
        if kind == "concat":
            return lambda xs: ops.channel_concat(xs, name=lid)
        return None  # input

    def __call__(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        x = ops.as_tensor(x, self.spec.input_layer.id, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise DimensionError(
                f"input shape {x.shape[1:]} does not match model input {self.spec.input_shape}",
                layer=self.spec.input_layer.id)
        values = {}
        for lid, inputs, fn, release in self._steps:
            values[lid] = x if fn is None else fn([values[s] for s in inputs])
            for s in release:
                del values[s]
        out = values[self._output]
        if out.shape[2:] == (1, 1):
            return out.reshape(out.shape[0], -1)
        return out


def compile_model(spec, weights, dtype=np.float32):
    return CompiledModel(spec, weights, dtype)


def forward(spec, weights, x, dtype=np.float32):
    """Run the model once.  Classifier heads return (N, K) logits."""
    return CompiledModel(spec, weights, dtype)(x)


def clone_spec(spec):
    return copy.deepcopy(spec)
