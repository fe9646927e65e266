"""Minimal reverse-mode autodiff with a quantized linear layer.

The engine supports exactly the operations the toy models need: linear
maps, bias adds, elementwise products, sigmoid/silu gates, and the two
losses.  All arithmetic is float64; quantization is simulated ("fake"):
tensors are scaled, rounded to the HiF8 grid, and scaled back, so the
matmuls themselves run in full precision.

`QuantLinear` implements the W8A8 recipe: weights and activations are
fake-quantized in the forward pass, the upstream gradient is fake-
quantized in the backward pass, and the quantizer's derivative is taken
as identity everywhere (straight-through estimator), including clipped
elements.  Each quantization event reports its saturation count.

Scale handling is the delayed/current split from `scaling`: a delayed
state estimates from past observations only, and the true amax of every
tensor is recorded *after* its scale has been used, which is what makes
the delay observable in tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .codec import CodecParams, fake_quantize
from .errors import SequencingError, ShapeError
from .scaling import (
    AmaxAlgo,
    Current,
    ScaleManager,
    ScaleState,
    TraceRow,
    compute_scale,
)

__all__ = [
    "Tensor",
    "linear",
    "add",
    "mul",
    "sigmoid",
    "silu",
    "total",
    "mse_loss",
    "cross_entropy",
    "SaturationReport",
    "StepContext",
    "Linear",
    "QuantLinear",
    "fake_quant_ste",
    "ste_identity_check",
]


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        topo = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.requires_grad:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _sum_to_shape(g, shape):
    """Undo numpy broadcasting when accumulating a gradient."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def linear(x: Tensor, w: Tensor) -> Tensor:
    """y = x @ w.T for a weight stored as (out_features, in_features)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = Tensor(x.data @ w.data.T, _parents=(x, w))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)

    out._backward_fn = backward_fn
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.data.shape))

    out._backward_fn = backward_fn
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.data.shape))

    out._backward_fn = backward_fn
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y, _parents=(x,))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * y * (1.0 - y))

    out._backward_fn = backward_fn
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x), the smooth gate used in the toy MLP blocks."""
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s, _parents=(x,))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (s + x.data * s * (1.0 - s)))

    out._backward_fn = backward_fn
    return out


def total(x) -> Tensor:
    """Sum of all elements, as a scalar node."""
    x = _as_tensor(x)
    out = Tensor(x.data.sum(), _parents=(x,))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    out._backward_fn = backward_fn
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = _as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    out = Tensor(np.mean(diff * diff), _parents=(pred,))

    def backward_fn(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / diff.size)

    out._backward_fn = backward_fn
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    batch = np.arange(labels.size)
    nll = -np.log(probs[batch, labels])
    out = Tensor(nll.mean(), _parents=(logits,))

    def backward_fn(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[batch, labels] -= 1.0
            logits._accumulate(g * grad / labels.size)

    out._backward_fn = backward_fn
    return out


class SaturationReport:
    """Per-tensor clipping telemetry: cumulative counts plus a step log."""

    def __init__(self):
        self.cumulative: dict[tuple[str, str], list[int]] = {}
        self.events: list[tuple[int, str, str, int, int]] = []

    def record(self, step: int, layer_id: str, role: str, saturated: int, count: int) -> None:
        cum = self.cumulative.setdefault((layer_id, role), [0, 0])
        cum[0] += saturated
        cum[1] += count
        self.events.append((step, layer_id, role, saturated, count))

    def total_saturated(self) -> int:
        return sum(c[0] for c in self.cumulative.values())

    def saturations_per_step(self, total_steps: int) -> list[int]:
        per_step = [0] * (total_steps + 1)
        for step, _, _, saturated, _ in self.events:
            if 0 <= step <= total_steps:
                per_step[step] += saturated
        return per_step[1:]

    def event_rows(self):
        """Rows for the CSV export: step, layer_id, role, saturated, total."""
        return list(self.events)


@dataclass
class StepContext:
    """Per-step switches threaded through a model's forward pass.

    `trace`, when present, collects every amax observation as a
    `scaling.TraceRow` so a run can be replayed through other scaling
    strategies afterwards.
    """

    step: int
    quantize: bool
    report: SaturationReport | None = None
    trace: list | None = None


class Linear:
    """Plain full-precision linear layer (no bias)."""

    def __init__(self, layer_id: str, weight: np.ndarray):
        self.layer_id = layer_id
        self.weight = Tensor(weight, requires_grad=True)

    def parameters(self):
        return [self.weight]

    def __call__(self, x: Tensor, ctx: StepContext | None = None) -> Tensor:
        return linear(x, self.weight)


@dataclass
class _ForwardCapture:
    """Everything the STE backward needs from one quantized forward."""

    step: int
    quantized: bool
    x_data: np.ndarray
    w_data: np.ndarray
    ctx: StepContext | None = None
    report_key: str = ""


class QuantLinear:
    """Linear layer with W8A8 fake quantization and STE backward.

    With quantization off (either the layer switch or the step context)
    forward and backward are exactly the full-precision path, including
    the precise order of numpy operations, so disabled runs are
    bit-identical to a plain `Linear`.
    """

    def __init__(self, layer_id: str, weight: np.ndarray, manager: ScaleManager, *,
                 algo: AmaxAlgo, history_len: int, max_val: float = 15.0,
                 mode: str = "dts", min_normal_exponent: int = -10,
                 quantize_gradients: bool = True):
        if mode not in ("dts", "cts"):
            raise ShapeError(f"mode must be 'dts' or 'cts', got {mode!r}")
        self.layer_id = layer_id
        self.weight = Tensor(weight, requires_grad=True)
        self.manager = manager
        self.mode = mode
        self.codec_params = CodecParams(max_val=max_val, min_normal_exponent=min_normal_exponent)
        self.max_val = float(max_val)
        self.quantization_enabled = True
        self.quantize_gradients = quantize_gradients
        self.states: dict[str, ScaleState] = {
            role: manager.state_for(layer_id, role, algo, history_len)
            for role in ("weight", "activation", "gradient")
        }
        self.last_scales: dict[str, float] = {}
        self._last_capture: _ForwardCapture | None = None

    def parameters(self):
        return [self.weight]

    def _record_observation(self, state: ScaleState, role: str, amax: float,
                            ctx: StepContext) -> None:
        state.observe(amax)
        if ctx.trace is not None:
            ctx.trace.append(TraceRow(step=ctx.step, layer_id=self.layer_id,
                                      role=role, amax=amax))

    def _quantize_tensor(self, data: np.ndarray, role: str, ctx: StepContext) -> np.ndarray:
        """Scale, round to the grid, count clips, and scale back."""
        state = self.states[role]
        amax = float(np.max(np.abs(data)))
        if amax == 0.0:
            # An all-zero tensor is already on the grid; nothing to scale.
            if ctx.report is not None:
                ctx.report.record(ctx.step, self.layer_id, role, 0, data.size)
            return data
        if self.mode == "cts":
            estimate = state.estimate(Current(), current_amax=amax)
        else:
            estimate = state.estimate()
        scale = compute_scale(estimate, self.max_val)
        result = fake_quantize(data * scale, self.codec_params)
        if ctx.report is not None:
            ctx.report.record(ctx.step, self.layer_id, role,
                              result.saturated_count, result.total_count)
        self.last_scales[role] = scale
        self._record_observation(state, role, amax, ctx)
        return result.values / scale

    def _observe_only(self, data: np.ndarray, role: str, ctx: StepContext) -> None:
        amax = float(np.max(np.abs(data)))
        if amax > 0.0:
            self._record_observation(self.states[role], role, amax, ctx)

    def __call__(self, x: Tensor, ctx: StepContext) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.weight.data.shape[1]:
            raise ShapeError(
                f"{self.layer_id}: input {x.shape} does not match weight {self.weight.shape}"
            )
        w = self.weight
        quantize = self.quantization_enabled and ctx.quantize

        if quantize:
            # The weight scale is estimated before this step's amax is
            # observed (delayed semantics); observation happens inside
            # _quantize_tensor after the scale has been used.
            qw = self._quantize_tensor(w.data, "weight", ctx)
            qx = self._quantize_tensor(x.data, "activation", ctx)
            out_data = qx @ qw.T
            capture = _ForwardCapture(step=ctx.step, quantized=True,
                                      x_data=qx, w_data=qw, ctx=ctx)
        else:
            out_data = x.data @ w.data.T
            self._observe_only(w.data, "weight", ctx)
            self._observe_only(x.data, "activation", ctx)
            capture = _ForwardCapture(step=ctx.step, quantized=False,
                                      x_data=x.data, w_data=w.data, ctx=ctx)
        self._last_capture = capture

        out = Tensor(out_data, _parents=(x, w))

        def backward_fn(g):
            gx, gw = self._backward_from_capture(capture, g)
            if x.requires_grad:
                x._accumulate(gx)
            if w.requires_grad:
                w._accumulate(gw)

        out._backward_fn = backward_fn
        return out

    def _backward_from_capture(self, capture: _ForwardCapture, g: np.ndarray):
        """STE backward: quantize the upstream gradient, then plain matmuls.

        The quantizer contributes derivative 1 everywhere (clipped
        elements included), so the upstream gradient flows through the
        forward quantizations untouched; only the explicit gradient
        quantization below alters it.
        """
        if capture.quantized and self.quantize_gradients:
            g = self._quantize_tensor(g, "gradient", capture.ctx)
        elif not capture.quantized:
            self._observe_only(g, "gradient", capture.ctx)
        gx = g @ capture.w_data
        gw = g.T @ capture.x_data
        return gx, gw

    def backward(self, upstream: np.ndarray):
        """Manual backward against the most recent forward call.

        Mainly a testing surface; training uses the autograd sweep.
        """
        if self._last_capture is None:
            raise SequencingError(f"{self.layer_id}: backward called before any forward")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape[1] != self.weight.data.shape[0]:
            raise ShapeError(
                f"{self.layer_id}: upstream {upstream.shape} does not match output width "
                f"{self.weight.data.shape[0]}"
            )
        return self._backward_from_capture(self._last_capture, upstream)


def fake_quant_ste(x: Tensor, scale: float, params: CodecParams,
                   ctx: StepContext | None = None, layer_id: str = "ste",
                   role: str = "activation") -> Tensor:
    """Standalone STE quantization node: Q(x * scale) / scale, derivative 1."""
    x = _as_tensor(x)
    result = fake_quantize(x.data * scale, params)
    if ctx is not None and ctx.report is not None:
        ctx.report.record(ctx.step, layer_id, role, result.saturated_count, result.total_count)
    out = Tensor(result.values / scale, _parents=(x,))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g)

    out._backward_fn = backward_fn
    return out


def ste_identity_check(f, x0: float) -> float:
    """|STE gradient - identity-surrogate gradient| of a scalar chain at x0.

    `f(t, quantize)` must map a 1-element Tensor to a scalar Tensor and
    apply exactly one `fake_quant_ste` when `quantize` is true; with
    `quantize` false the quantizer is skipped (identity surrogate).  For
    a chain that is affine downstream of the quantizer the two gradients
    are identical float for float, so the discrepancy is exactly 0, even
    when x0 lands in the clipped region.
    """
    g = []
    for quantize in (True, False):
        t = Tensor(np.array([float(x0)]), requires_grad=True)
        out = f(t, quantize)
        out.backward()
        g.append(float(t.grad[0]))
    return abs(g[0] - g[1])
