"""Backpropagation, SGD training and F1 evaluation for the small models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

from . import tensor_ops as ops
from .errors import BindingError, ConfigurationError, DataError, TrainingDiverged
from .formats import read_frames
from .graph import WeightStore, check_weights, compile_model, init_weights, validate_and_plan
from .pipeline.window import (FALL_CLASS, SEGMENT_FRAMES, FrameWindow, classify_window,
                              extract_segments)
from .synth import read_manifest

log = logging.getLogger(__name__)

LEARNABLE = ("weights", "bias", "gamma", "beta")
BN_MOMENTUM = 0.9


# --- layer-local forward / backward -------------------------------------------

def _taps(kh, kw, sh, sw, ho, wo):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh),
                         slice(j, j + sw * (wo - 1) + 1, sw))


class _Net:
    """Differentiable executor for a ModelSpec.

    Batchnorm runs in training mode (batch statistics); ``state`` holds the
    running statistics, updated on every training forward.
    """

    def __init__(self, spec, params, state, dtype=np.float64):
        self.spec = spec
        self.plan = validate_and_plan(spec)
        self.params = params
        self.state = state
        self.dtype = dtype
        self.bn_momentum = BN_MOMENTUM

    def forward(self, x, train=True):
        x = np.asarray(x, dtype=self.dtype)
        values, caches = {}, {}
        for layer in self.spec.layers:
            if layer.kind == "input":
                values[layer.id] = x
                continue
            xs = [values[s] for s in layer.inputs]
            values[layer.id], caches[layer.id] = getattr(self, "_f_" + layer.kind)(layer, xs, train)
        self._caches = caches
        self._values_shapes = {k: v.shape for k, v in values.items()}
        return values[self.spec.output_layer.id]

    def backward(self, dout):
        """Gradients for parameters and for the input, given d loss / d output."""
        grads = {}
        upstream = {self.spec.output_layer.id: dout}
        for layer in reversed(self.spec.layers):
            dy = upstream.pop(layer.id, None)
            if layer.kind == "input":
                self.input_grad = dy
                continue
            if dy is None:
                dy = np.zeros(self._values_shapes[layer.id], dtype=self.dtype)
            dxs, g = getattr(self, "_b_" + layer.kind)(layer, self._caches[layer.id], dy)
            if g:
                grads[layer.id] = g
            for src, dx in zip(layer.inputs, dxs):
                if src in upstream:
                    upstream[src] = upstream[src] + dx
                else:
                    upstream[src] = dx
        return grads

    # conv
    def _f_conv(self, layer, xs, train):
        x = xs[0]
        p = layer.conv_params()
        w, b = self.params[layer.id]["weights"], self.params[layer.id]["bias"]
        n, c, h, wd = x.shape
        (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
        ho = ops.conv_output_extent(h, kh, sh, ph)
        wo = ops.conv_output_extent(wd, kw, sw, pw)
        cols = ops.im2col(x, kh, kw, sh, sw, ph, pw, ho, wo)
        wmat = w.reshape(w.shape[0], -1)
        y = (cols @ wmat.T + b).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape, p, ho, wo)

    def _b_conv(self, layer, cache, dy):
        cols, xshape, p, ho, wo = cache
        w = self.params[layer.id]["weights"]
        n, c, h, wd = xshape
        (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
        dmat = dy.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
        dw = (dmat.T @ cols).reshape(w.shape)
        db = dmat.sum(axis=0)
        dcols = (dmat @ w.reshape(w.shape[0], -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=dy.dtype)
        for i, j, sl in _taps(kh, kw, sh, sw, ho, wo):
            dxp[sl] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph:ph + h, pw:pw + wd]
        return [dx], {"weights": dw, "bias": db}

    # depthwise
    def _f_depthwise_conv(self, layer, xs, train):
        x = xs[0]
        p = layer.conv_params(x.shape[1])
        w, b = self.params[layer.id]["weights"], self.params[layer.id]["bias"]
        n, c, h, wd = x.shape
        (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
        ho = ops.conv_output_extent(h, kh, sh, ph)
        wo = ops.conv_output_extent(wd, kw, sw, pw)
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        y = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i, j, sl in _taps(kh, kw, sh, sw, ho, wo):
            y += xp[sl] * w[None, :, 0, i, j, None, None]
        y += b[None, :, None, None]
        return y, (xp, x.shape, p, ho, wo)

    def _b_depthwise_conv(self, layer, cache, dy):
        xp, xshape, p, ho, wo = cache
        w = self.params[layer.id]["weights"]
        n, c, h, wd = xshape
        (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for i, j, sl in _taps(kh, kw, sh, sw, ho, wo):
            dw[:, 0, i, j] = (dy * xp[sl]).sum(axis=(0, 2, 3))
            dxp[sl] += dy * w[None, :, 0, i, j, None, None]
        return [dxp[:, :, ph:ph + h, pw:pw + wd]], {"weights": dw, "bias": dy.sum(axis=(0, 2, 3))}

    # batchnorm (training mode)
    def _f_batchnorm(self, layer, xs, train):
        x = xs[0]
        a = self.params[layer.id]
        eps = float(layer.attrs.get("eps", ops.DEFAULT_EPS))
        if not train:
            st = self.state[layer.id]
            inv = 1.0 / np.sqrt(st["var"] + eps)
            xhat = (x - st["mean"][None, :, None, None]) * inv[None, :, None, None]
            return a["gamma"][None, :, None, None] * xhat + a["beta"][None, :, None, None], None
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        m = x.size // x.shape[1]
        st = self.state.get(layer.id)
        if st is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            mu = self.bn_momentum
            st["mean"] = mu * st["mean"] + (1 - mu) * mean
            st["var"] = mu * st["var"] + (1 - mu) * unbiased
        y = a["gamma"][None, :, None, None] * xhat + a["beta"][None, :, None, None]
        return y, (xhat, inv, m)

    def _b_batchnorm(self, layer, cache, dy):
        xhat, inv, m = cache
        gamma = self.params[layer.id]["gamma"]
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dx = (gamma * inv / m)[None, :, None, None] * (
            m * dy - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
        return [dx], {"gamma": dgamma, "beta": dbeta}

    def _f_relu(self, layer, xs, train):
        mask = xs[0] > 0
        return xs[0] * mask, mask

    def _b_relu(self, layer, mask, dy):
        return [dy * mask], None

    # pooling
    def _pool_geometry(self, layer, x):
        p = layer.pool_params()
        (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
        n, c, h, w = x.shape
        ho = ops.pool_output_extent(h, kh, sh, ph, p.ceil_mode)
        wo = ops.pool_output_extent(w, kw, sw, pw, p.ceil_mode)
        eh = max(0, (ho - 1) * sh + kh - (h + 2 * ph))
        ew = max(0, (wo - 1) * sw + kw - (w + 2 * pw))
        return kh, kw, sh, sw, ph, pw, ho, wo, ((0, 0), (0, 0), (ph, ph + eh), (pw, pw + ew))

    def _f_pool_max(self, layer, xs, train):
        x = xs[0]
        kh, kw, sh, sw, ph, pw, ho, wo, widths = self._pool_geometry(layer, x)
        xp = np.pad(x, widths, constant_values=-np.inf)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        flat = win.reshape(win.shape[:4] + (kh * kw,))
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape, xp.shape, (kh, kw, sh, sw, ph, pw, ho, wo))

    def _b_pool_max(self, layer, cache, dy):
        arg, xshape, pshape, (kh, kw, sh, sw, ph, pw, ho, wo) = cache
        dxp = np.zeros(pshape, dtype=dy.dtype)
        for i, j, sl in _taps(kh, kw, sh, sw, ho, wo):
            dxp[sl] += dy * (arg == i * kw + j)
        h, w = xshape[2:]
        return [dxp[:, :, ph:ph + h, pw:pw + w]], None

    def _f_pool_avg(self, layer, xs, train):
        x = xs[0]
        kh, kw, sh, sw, ph, pw, ho, wo, widths = self._pool_geometry(layer, x)
        xp = np.pad(x, widths)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        ones = np.pad(np.ones(x.shape[2:], dtype=x.dtype), widths[2:])
        count = sliding_window_view(ones, (kh, kw))[::sh, ::sw][:ho, :wo].sum(axis=(2, 3))
        return win.sum(axis=(4, 5)) / count, (count, x.shape, xp.shape, (kh, kw, sh, sw, ph, pw, ho, wo))

    def _b_pool_avg(self, layer, cache, dy):
        count, xshape, pshape, (kh, kw, sh, sw, ph, pw, ho, wo) = cache
        share = dy / count
        dxp = np.zeros(pshape, dtype=dy.dtype)
        for i, j, sl in _taps(kh, kw, sh, sw, ho, wo):
            dxp[sl] += share
        h, w = xshape[2:]
        return [dxp[:, :, ph:ph + h, pw:pw + w]], None

    def _f_global_avg_pool(self, layer, xs, train):
        return xs[0].mean(axis=(2, 3), keepdims=True), xs[0].shape

    def _b_global_avg_pool(self, layer, shape, dy):
        return [np.broadcast_to(dy / (shape[2] * shape[3]), shape).copy()], None

    def _f_fully_connected(self, layer, xs, train):
        x = xs[0]
        flat = x.reshape(x.shape[0], -1)
        a = self.params[layer.id]
        y = flat @ a["weights"].T + a["bias"]
        return y[:, :, None, None], (flat, x.shape)

    def _b_fully_connected(self, layer, cache, dy):
        flat, shape = cache
        w = self.params[layer.id]["weights"]
        d = dy.reshape(dy.shape[0], -1)
        return [(d @ w).reshape(shape)], {"weights": d.T @ flat, "bias": d.sum(axis=0)}

    def _f_softmax(self, layer, xs, train):
        x = xs[0]
        s = ops.softmax(x.reshape(x.shape[0], -1), axis=1)
        return s.reshape(x.shape), s

    def _b_softmax(self, layer, s, dy):
        d = dy.reshape(s.shape)
        dx = s * (d - (d * s).sum(axis=1, keepdims=True))
        return [dx.reshape(dy.shape)], None

    def _f_concat(self, layer, xs, train):
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def _b_concat(self, layer, widths, dy):
        cuts = np.cumsum(widths)[:-1]
        return list(np.split(dy, cuts, axis=1)), None


# --- losses --------------------------------------------------------------------

def _logits(out):
    return out.reshape(out.shape[0], -1)


def cross_entropy(logits, labels, loss_mode="segment"):
    """Mean cross-entropy and its gradient with respect to ``logits``.

    ``segment``: one label per row.  ``consensus``: rows come in consecutive
    triples (one clip's segments) whose logits are averaged first.
    """
    z = np.asarray(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if loss_mode == "segment":
        group = 1
    elif loss_mode == "consensus":
        group = 3
    else:
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    if z.shape[0] != group * labels.size:
        if labels.size == 1:
            labels = np.repeat(labels, z.shape[0] // group)
        else:
            raise DataError(f"{z.shape[0]} rows of logits for {labels.size} labels")
    k = z.shape[1]
    zg = z.reshape(-1, group, k).mean(axis=1)
    if np.any((labels < 0) | (labels >= k)):
        raise DataError(f"labels must lie in [0, {k})")
    p = ops.softmax(zg, axis=1)
    b = zg.shape[0]
    z64 = zg.astype(np.float64)
    top = z64.max(axis=1)
    log_p = z64[np.arange(b), labels] - top - np.log(np.exp(z64 - top[:, None]).sum(axis=1))
    loss = float(-log_p.mean())
    dzg = p.copy()
    dzg[np.arange(b), labels] -= 1
    dzg /= b
    dz = np.repeat(dzg / group, group, axis=0)
    return loss, dz.astype(z.dtype, copy=False)


# --- public gradient API -------------------------------------------------------

def _split(weights, dtype):
    params, state = {}, {}
    for lid, roles in weights.items():
        params[lid] = {r: np.array(a, dtype=dtype) for r, a in roles.items() if r in LEARNABLE}
        if "mean" in roles:
            state[lid] = {r: np.array(roles[r], dtype=dtype) for r in ("mean", "var")}
    return params, state


def loss_and_gradients(spec, weights, x, labels, loss_mode="segment", dtype=np.float64):
    """Forward in training mode and back-propagate cross-entropy.

    Returns ``(loss, grads)`` where ``grads`` maps layer id to
    ``{role: gradient}`` for the learnable roles.  Running statistics in
    ``weights`` are not modified.
    """
    check_weights(spec, weights)
    params, state = _split(weights, dtype)
    net = _Net(spec, params, state, dtype)
    out = net.forward(x, train=True)
    loss, dz = cross_entropy(_logits(out), labels, loss_mode)
    grads = net.backward(dz.reshape(out.shape))
    return loss, grads


def backward(spec, weights, x, labels, loss_mode="segment", dtype=np.float64):
    """Gradient store of the cross-entropy loss for one input batch."""
    return WeightStore(loss_and_gradients(spec, weights, x, labels, loss_mode, dtype)[1])


def training_loss(spec, weights, x, labels, loss_mode="segment", dtype=np.float64):
    params, state = _split(weights, dtype)
    out = _Net(spec, params, state, dtype).forward(x, train=True)
    return cross_entropy(_logits(out), labels, loss_mode)[0]


def input_gradient(spec, weights, x, labels, loss_mode="segment"):
    params, state = _split(weights, np.float64)
    net = _Net(spec, params, state, np.float64)
    out = net.forward(x, train=True)
    _, dz = cross_entropy(_logits(out), labels, loss_mode)
    net.backward(dz.reshape(out.shape))
    return net.input_grad


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)


@dataclass
class GradCheck:
    layer: str
    role: str
    samples: int
    max_relative_error: float

    @property
    def passed(self):
        return self.max_relative_error <= 1e-3


def gradient_check(spec, weights, x, labels, layer_id, role=None, samples=32, eps=1e-3, seed=0,
                   loss_mode="segment"):
    """Compare analytic and central-difference gradients at sampled entries.

    ``role=None`` checks every learnable role of ``layer_id``; ``role="input"``
    checks the gradient with respect to the network input instead.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    arrays = {lid: {r: np.asarray(a, dtype=np.float64) for r, a in roles.items()}
              for lid, roles in weights.items()}
    if role == "input":
        analytic = input_gradient(spec, WeightStore(arrays), x, labels, loss_mode)
        idx = rng.choice(x.size, size=min(samples, x.size), replace=False)
        errs = []
        for i in idx:
            xp, xm = x.copy(), x.copy()
            xp.flat[i] += eps
            xm.flat[i] -= eps
            num = (training_loss(spec, WeightStore(arrays), xp, labels, loss_mode)
                   - training_loss(spec, WeightStore(arrays), xm, labels, loss_mode)) / (2 * eps)
            errs.append(relative_error(analytic.flat[i], num))
        return [GradCheck(layer_id, "input", len(idx), float(max(errs)))]

    if layer_id not in arrays:
        raise BindingError(f"no parameters for layer {layer_id!r}", layer=layer_id)
    _, grads = loss_and_gradients(spec, WeightStore(arrays), x, labels, loss_mode)
    roles = [role] if role else [r for r in LEARNABLE if r in arrays[layer_id]]
    sizes = [arrays[layer_id][r].size for r in roles]
    offsets = np.cumsum([0] + sizes)
    picks = rng.choice(offsets[-1], size=min(samples, int(offsets[-1])), replace=False)
    errs = {r: [] for r in roles}
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        r, i = roles[k], int(flat - offsets[k])
        target = arrays[layer_id][r]
        old = target.flat[i]
        target.flat[i] = old + eps
        lp = training_loss(spec, WeightStore(arrays), x, labels, loss_mode)
        target.flat[i] = old - eps
        lm = training_loss(spec, WeightStore(arrays), x, labels, loss_mode)
        target.flat[i] = old
        errs[r].append(relative_error(grads[layer_id][r].flat[i], (lp - lm) / (2 * eps)))
    return [GradCheck(layer_id, r, len(e), float(max(e))) for r, e in errs.items() if e]


# --- data ------------------------------------------------------------------------

def _check_model_input(spec):
    c, h, w = spec.input_shape
    if c != SEGMENT_FRAMES or h != w:
        raise ConfigurationError(
            f"model input {spec.input_shape} does not take {SEGMENT_FRAMES}-frame square segments")
    return h


def clip_window(path, side):
    window = FrameWindow(side=side)
    frames = read_frames(path)
    if len(frames) < window.capacity:
        raise DataError(f"{path}: {len(frames)} frames, need {window.capacity}")
    window.extend(frames[-window.capacity:])
    return window


def load_segments(manifest, side):
    """Every clip's three segments as samples: ``(x[N,10,S,S], labels[N])``."""
    if isinstance(manifest, (str, bytes)) or hasattr(manifest, "__fspath__"):
        manifest = read_manifest(manifest)
    xs, ys = [], []
    for row in manifest.rows:
        for stack in extract_segments(clip_window(manifest.clip_path(row), side), side=side):
            xs.append(stack.tensor[0])
            ys.append(row.label)
    if not xs:
        raise DataError(f"{manifest.path}: no clips")
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


# --- training ----------------------------------------------------------------------

@dataclass
class HyperParams:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    weight_decay: float = 0.0
    recalibrate_bn: bool = True
    loss_mode: str = "segment"


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    f1: float

    def to_record(self):
        f1 = "nan" if math.isnan(self.f1) else f"{self.f1:.4f}"
        return f"epoch\t{self.epoch}\tloss\t{self.loss:.6f}\tf1\t{f1}"


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)

    @property
    def losses(self):
        return [e.loss for e in self.epochs]

    def lines(self):
        return [e.to_record() for e in self.epochs]


def train(spec, manifest, hparams=None, eval_manifest=None, init=None, on_epoch=None, evaluate_every=1):
    """Mini-batch SGD with momentum.

    ``loss_mode="segment"`` trains on individual segments labelled with their
    clip's label; ``"consensus"`` batches ``batch_size`` clips and applies the
    loss to their averaged segment logits, as inference does.

    Returns ``(weights, log)``.  With ``recalibrate_bn`` the running
    statistics are re-estimated over the training set after every epoch
    (see ``recalibrate_batchnorm``).  ``init`` overrides the seeded
    initialization; ``eval_manifest`` (default: the training set) is scored
    after each epoch, or every ``evaluate_every`` epochs (0 disables it).
    """
    hp = hparams or HyperParams()
    side = _check_model_input(spec)
    x, y = load_segments(manifest, side)
    # consensus mode batches whole clips: their three segments are adjacent rows
    group = {"segment": 1, "consensus": 3}.get(hp.loss_mode)
    if group is None:
        raise ConfigurationError(f"unknown loss mode {hp.loss_mode!r}")
    weights = init if init is not None else init_weights(spec, seed=hp.seed)
    check_weights(spec, weights)
    params, state = _split(weights, np.float32)
    net = _Net(spec, params, state, np.float32)
    velocity = {lid: {r: np.zeros_like(a) for r, a in roles.items()} for lid, roles in params.items()}
    rng = np.random.default_rng(hp.seed)
    train_log = TrainingLog()
    eval_set = eval_manifest if eval_manifest is not None else manifest

    # overflow ends in a NaN loss, reported below as TrainingDiverged
    with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, hp.epochs + 1):
            order = rng.permutation(len(y) // group)
            total, seen = 0.0, 0
            for start in range(0, len(order), hp.batch_size):
                batch = order[start:start + hp.batch_size]
                rows = (group * batch[:, None] + np.arange(group)).ravel()
                out = net.forward(x[rows], train=True)
                loss, dz = cross_entropy(_logits(out), y[rows[::group]], hp.loss_mode)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became {loss} at epoch {epoch}, batch starting at sample {start}; "
                        f"try a lower learning rate (lr={hp.lr})")
                grads = net.backward(dz.reshape(out.shape))
                for lid, g in grads.items():
                    for r, gr in g.items():
                        if hp.weight_decay and r == "weights":
                            gr = gr + hp.weight_decay * params[lid][r]
                        v = velocity[lid][r]
                        v *= hp.momentum
                        v += gr
                        params[lid][r] -= np.float32(hp.lr) * v
                total += loss * len(batch)
                seen += len(batch)
            if hp.recalibrate_bn and state:
                _recalibrate(net, x, hp.batch_size)
            f1 = float("nan")
            if evaluate_every and (epoch % evaluate_every == 0 or epoch == hp.epochs):
                f1 = evaluate(spec, _merge(params, state), eval_set).f1
            rec = EpochRecord(epoch, total / seen, f1)
            train_log.epochs.append(rec)
            log.info(rec.to_record())
            if on_epoch is not None:
                on_epoch(rec)
    return _merge(params, state), train_log


def _recalibrate(net, x, batch_size):
    # cumulative average of batch statistics: every batch gets equal weight
    for k, start in enumerate(range(0, len(x), batch_size)):
        net.bn_momentum = k / (k + 1)
        net.forward(x[start:start + batch_size], train=True)
    net.bn_momentum = BN_MOMENTUM


def recalibrate_batchnorm(spec, weights, x, batch_size=16):
    """Replace running statistics with the average batch statistics over ``x``.

    Momentum averages trail the weights while they move; re-estimating them
    once the weights are final makes inference match what training saw.
    """
    params, state = _split(weights, np.float32)
    net = _Net(spec, params, state, np.float32)
    with threadpool_limits(limits=1):
        _recalibrate(net, np.asarray(x), batch_size)
    return _merge(params, state)


def _merge(params, state):
    arrays = {}
    for lid, roles in params.items():
        arrays[lid] = {r: a.astype(np.float32) for r, a in roles.items()}
        if lid in state:
            arrays[lid].update({r: a.astype(np.float32) for r, a in state[lid].items()})
    return WeightStore(arrays)


# --- evaluation --------------------------------------------------------------------

@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)

    def to_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def f1_score(precision, recall):
    s = precision + recall
    return 2 * precision * recall / s if s > 0 else 0.0


def confusion(y_true, y_pred):
    t = np.asarray(y_true, dtype=bool)
    p = np.asarray(y_pred, dtype=bool)
    return Metrics(int((t & p).sum()), int((~t & p).sum()), int((~t & ~p).sum()), int((t & ~p).sum()))


def evaluate(spec, weights, manifest, threshold=0.5):
    """Classify each clip through the window / consensus path and score it."""
    if isinstance(manifest, (str, bytes)) or hasattr(manifest, "__fspath__"):
        manifest = read_manifest(manifest)
    if not manifest.rows:
        raise DataError(f"{manifest.path}: empty dataset")
    side = _check_model_input(spec)
    model = compile_model(spec, weights)
    truth, pred = [], []
    for row in manifest.rows:
        det = classify_window(clip_window(manifest.clip_path(row), side), model, threshold=threshold)
        truth.append(row.label == FALL_CLASS)
        pred.append(det.label == "fall")
    return confusion(truth, pred)
