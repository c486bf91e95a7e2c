"""Model-to-model compression passes.

Every pass is a pure function returning a new :class:`~dvstn.graph.ModelSpec`
that has been re-validated, and appends a provenance record describing what
it did.  A pass that finds nothing to change returns its input unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor_ops as ops
from .errors import DvstnError, TransformError
from .graph import LayerSpec, WeightStore, check_weights, validate_and_plan

__all__ = [
    "fold_batchnorm",
    "separable_factorize",
    "scale_channels",
    "set_input_resolution",
    "apply_passes",
    "parse_passes",
    "filter_similarity",
]

FOLDABLE = ("conv", "depthwise_conv", "fully_connected")


def _revalidated(spec, pass_name):
    try:
        validate_and_plan(spec)
    except DvstnError as exc:
        raise TransformError(f"{pass_name} produced an invalid model: {exc}", layer=exc.layer) from exc
    return spec


def _rewire(layers, mapping):
    out = []
    for layer in layers:
        if any(s in mapping for s in layer.inputs):
            layer = LayerSpec(layer.id, layer.kind, tuple(mapping.get(s, s) for s in layer.inputs),
                              layer.attrs)
        out.append(layer)
    return out


def fold_batchnorm(spec, weights=None):
    """Absorb every inference-mode batchnorm into the layer feeding it.

    With ``weights`` the predecessor becomes ``W' = W * s`` and
    ``b' = (b - mean) * s + beta`` with ``s = gamma / sqrt(var + eps)`` per
    output channel, so the forward outputs are preserved.  Without weights
    only the architecture is rewritten.  Returns ``(spec, weights)``.
    """
    validate_and_plan(spec)
    consumers = spec.consumers()
    bns = [layer for layer in spec.layers if layer.kind == "batchnorm"]
    if not bns:
        return spec, weights
    by_id = {layer.id: layer for layer in spec.layers}
    mapping = {}
    for bn in bns:
        pred = by_id[bn.inputs[0]]
        if pred.kind not in FOLDABLE:
            raise TransformError(f"batchnorm follows {pred.kind} {pred.id!r}; nothing to fold into",
                                 layer=bn.id)
        if consumers[pred.id] != [bn.id]:
            raise TransformError(f"{pred.id!r} feeds layers other than this batchnorm", layer=bn.id)
        mapping[bn.id] = pred.id
    layers = _rewire([layer for layer in spec.layers if layer.kind != "batchnorm"], mapping)
    record = {"pass": "fold_batchnorm", "folded": len(bns)}
    folded = _revalidated(spec.derive(layers=layers, record=record), "fold_batchnorm")

    if weights is None:
        return folded, None
    check_weights(spec, weights)
    arrays = weights.to_dict()
    for bn in bns:
        a = arrays.pop(bn.id)
        eps = float(bn.attrs.get("eps", ops.DEFAULT_EPS))
        scale = a["gamma"].astype(np.float64) / np.sqrt(a["var"].astype(np.float64) + eps)
        pred = arrays[mapping[bn.id]]
        w = pred["weights"].astype(np.float64)
        b = pred["bias"].astype(np.float64)
        w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b = (b - a["mean"]) * scale + a["beta"]
        pred["weights"] = w.astype(np.float32)
        pred["bias"] = b.astype(np.float32)
    return folded, WeightStore(arrays)


def separable_factorize(spec, layers=None):
    """Split K>1 convolutions into a depthwise stage and a 1x1 pointwise stage.

    Every conv with Kh*Kw > 1 and C_in > 1 is eligible; ``layers`` restricts
    the rewrite to the named convs (each must be eligible).  Consumers of the
    original conv (its batchnorm/relu) now follow the pointwise stage.  This
    is an architecture change: weights are not carried over and the result
    must be retrained, which the returned spec records in its metadata.
    """
    plan = validate_and_plan(spec)
    wanted = None if layers is None else set(layers)
    chosen = []
    for layer in spec.layers:
        if layer.kind != "conv":
            continue
        kh, kw = layer.conv_params().kernel
        c_in = plan[layer.inputs[0]][0]
        eligible = kh * kw > 1 and c_in > 1
        if wanted is None:
            if eligible:
                chosen.append(layer.id)
        elif layer.id in wanted:
            if not eligible:
                raise TransformError("not a K>1 conv over more than one channel", layer=layer.id)
            chosen.append(layer.id)
    if wanted is not None and wanted - set(chosen):
        missing = sorted(wanted - set(chosen))
        raise TransformError(f"no conv layers named {missing}")
    if not chosen:
        return spec

    new_layers, mapping = [], {}
    for layer in spec.layers:
        if layer.id not in chosen:
            new_layers.append(layer)
            continue
        a = layer.attrs
        dw = LayerSpec(f"{layer.id}_dw", "depthwise_conv", layer.inputs,
                       {"kernel": a.get("kernel", 1), "stride": a.get("stride", 1),
                        "padding": a.get("padding", 0)})
        pw = LayerSpec(f"{layer.id}_pw", "conv", (dw.id,),
                       {"out_channels": a["out_channels"], "kernel": (1, 1), "stride": (1, 1),
                        "padding": (0, 0)})
        new_layers += [dw, pw]
        mapping[layer.id] = pw.id
    record = {"pass": "separable_factorize", "layers": chosen, "weights_carried": False}
    out = spec.derive(layers=_rewire(new_layers, mapping), record=record,
                      metadata={"weights_carried": False, "requires_retraining": True})
    return _revalidated(out, "separable_factorize")


def _round(value, rounding):
    if rounding == "half_up":
        return math.floor(value + 0.5)
    if rounding == "floor":
        return math.floor(value)
    if rounding == "ceil":
        return math.ceil(value)
    raise TransformError(f"unknown rounding mode {rounding!r}")


def scale_channels(spec, factor, rounding="half_up"):
    """Multiply every conv's output channel count by ``factor``.

    C' = max(1, round(factor * C)).  The network input and the classifier
    head are left alone; depthwise stages follow their input automatically,
    and concat widths follow their branches.
    """
    if not 0 < factor <= 1:
        raise TransformError(f"factor must lie in (0, 1], got {factor}")
    _round(1.0, rounding)
    if factor == 1:
        return spec
    validate_and_plan(spec)
    out_layer = spec.output_layer.id
    layers = []
    for layer in spec.layers:
        if layer.kind == "conv" and layer.id != out_layer:
            c = int(layer.attrs["out_channels"])
            layer = layer.with_attrs(out_channels=max(1, _round(factor * c, rounding)))
        layers.append(layer)
    record = {"pass": "scale_channels", "factor": factor, "rounding": rounding}
    out = spec.derive(layers=layers, record=record,
                      metadata={"weights_carried": False, "requires_retraining": True})
    return _revalidated(out, "scale_channels")


def set_input_resolution(spec, side):
    """Change the input to side x side, keeping all layer geometry."""
    side = int(side)
    shape = (spec.input_shape[0], side, side)
    if shape == spec.input_shape:
        return spec
    out = spec.derive(input_shape=shape, record={"pass": "set_input_resolution", "side": side})
    try:
        validate_and_plan(out)
    except DvstnError as exc:
        raise TransformError(f"input side {side} is not viable: {exc}", layer=exc.layer) from exc
    return out


# --- pass pipelines ------------------------------------------------------------

def parse_passes(text):
    """Parse ``"separable,scale:0.75,input:32,fold"`` into (name, args) pairs.

    ``separable:a+b`` limits factorization to layers a and b;
    ``scale:0.75:floor`` picks a rounding mode.
    """
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [t for t in (text or "").split(",") if t.strip()]
    out = []
    for item in items:
        name, *args = item.strip().split(":")
        name = name.strip().lower()
        if name in ("separable", "factorize"):
            layers = args[0].split("+") if args and args[0] else None
            out.append(("separable", {"layers": layers}))
        elif name == "scale":
            if not args:
                raise TransformError("scale needs a factor, e.g. scale:0.75")
            kw = {"factor": float(args[0])}
            if len(args) > 1:
                kw["rounding"] = args[1]
            out.append(("scale", kw))
        elif name == "input":
            if not args:
                raise TransformError("input needs a side, e.g. input:32")
            out.append(("input", {"side": int(args[0])}))
        elif name == "fold":
            out.append(("fold", {}))
        else:
            raise TransformError(f"unknown pass {name!r}")
    return out


def apply_passes(spec, passes, weights=None):
    """Apply passes in order.  Returns ``(spec, weights)``.

    Weights survive passes that keep every parameter extent (``input`` on a
    globally pooled model, ``fold``); architecture-changing passes drop them.
    """
    for name, kw in parse_passes(passes):
        if name == "separable":
            new = separable_factorize(spec, **kw)
        elif name == "scale":
            new = scale_channels(spec, **kw)
        elif name == "input":
            new = set_input_resolution(spec, **kw)
        else:
            spec, weights = fold_batchnorm(spec, weights)
            continue
        if weights is not None and new is not spec:
            try:
                check_weights(new, weights)
            except DvstnError:
                weights = None
        spec = new
    return spec, weights


def filter_similarity(weights, layer_id, threshold=0.9):
    """Pairwise cosine similarity between the filters of one conv layer.

    A cheap stand-in for eyeballing activation maps: many near-duplicate
    filters suggest the layer tolerates channel reduction.
    """
    w = np.asarray(weights[layer_id]["weights"], dtype=np.float64)
    flat = w.reshape(w.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    unit = flat / np.where(norms == 0, 1.0, norms)[:, None]
    sim = unit @ unit.T
    iu = np.triu_indices(flat.shape[0], k=1)
    pairs = np.abs(sim[iu])
    if pairs.size == 0:
        return {"filters": int(flat.shape[0]), "mean": 0.0, "max": 0.0, "fraction_above": 0.0}
    return {
        "filters": int(flat.shape[0]),
        "mean": float(pairs.mean()),
        "max": float(pairs.max()),
        "fraction_above": float((pairs > threshold).mean()),
    }
