"""Experiment harness: two-phase training runs and the preset matrix.

The toy task is teacher-student regression: a frozen, randomly
initialized copy of the model generates noisy targets, and the student
trains against them with SGD.  The model is an 8-block MLP stack with a
full-precision mixing layer per block (the attention stand-in) and the
three gate/up/down projections, which are the quantization targets; the
boundary blocks selected by `layout` stay fully in high precision.

A quantized run follows the two-phase protocol:

1. steps 1 .. warmup_steps run with quantization disabled while amax
   observations accumulate;
2. at the start of the final warmup step the global scale registry is
   reset, discarding the early history, and that step re-populates it
   with one fresh observation per tensor;
3. steps warmup_steps+1 .. total_steps run quantized.

Runs are deterministic given (seed, config): the model init, the
teacher, and the batch stream all derive from seeded generators.
"""

import json
import os
import tempfile
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, MetricError
from .layout import select_high_precision_blocks
from .qat_core import (
    Linear,
    QuantLinear,
    SaturationReport,
    StepContext,
    Tensor,
    add,
    mse_loss,
    mul,
    sigmoid,
    silu,
)
from .scaling import (
    AmaxAlgo,
    Current,
    ExpSmooth,
    MaxWindow,
    MostRecent,
    ScaleManager,
    TraceRow,
    algo_name,
    parse_algo,
)

__all__ = [
    "QuantConfig",
    "RunRecord",
    "ToyModel",
    "build_model",
    "two_phase_train",
    "baseline_train",
    "ape",
    "run_matrix",
    "paper_presets",
    "write_run_outputs",
    "write_matrix_csv",
    "MATRIX_COLUMNS",
    "atomic_write_text",
]

# Toy-scale stand-ins for the reference learning-rate axis (1e-4 vs 1e-5
# at full scale): the high rate trains fast enough to finish in the toy
# budget, the low rate keeps the 10x ratio.
LR_HIGH = 0.01
LR_LOW = 0.001


@dataclass
class QuantConfig:
    """All knobs of one experiment."""

    name: str = "run"
    max_val: float = 15.0
    amax_algo: AmaxAlgo = field(default_factory=lambda: MaxWindow(64))
    history_len: int = 64
    warmup_steps: int = 100
    high_precision_layers: int = 2
    learning_rate: float = LR_HIGH
    total_steps: int = 2000
    seed: int = 0
    dts_or_cts: str = "dts"
    batch_size: int = 32
    n_blocks: int = 8
    hidden: int = 16
    intermediate: int = 32
    out_dim: int = 8
    label_noise: float = 0.75
    min_normal_exponent: int = -10
    quantize_gradients: bool = True
    quantization_enabled: bool = True

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"warmup_steps must satisfy 0 <= warmup < total_steps, "
                f"got {self.warmup_steps} vs {self.total_steps}"
            )
        if self.dts_or_cts not in ("dts", "cts"):
            raise ConfigError(f"dts_or_cts must be 'dts' or 'cts', got {self.dts_or_cts!r}")
        delayed = self.dts_or_cts == "dts" and not isinstance(self.amax_algo, Current)
        if delayed and self.warmup_steps < 1:
            raise ConfigError(
                "delayed scaling needs warmup_steps >= 1 so history is non-empty "
                "when quantization starts"
            )
        if self.history_len < 1:
            raise ConfigError("history_len must be >= 1")
        if isinstance(self.amax_algo, MaxWindow) and self.amax_algo.window > self.history_len:
            raise ConfigError(
                f"max window {self.amax_algo.window} exceeds history_len {self.history_len}"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.high_precision_layers <= self.n_blocks:
            raise ConfigError(
                f"high_precision_layers must lie in [0, {self.n_blocks}], "
                f"got {self.high_precision_layers}"
            )
        if self.label_noise < 0:
            raise ConfigError("label_noise must be non-negative")

    def to_flat_dict(self) -> dict:
        """Flat key/value form used by config files and JSON summaries."""
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "amax_algo"}
        d["amax_algo"] = algo_name(self.amax_algo)
        if isinstance(self.amax_algo, ExpSmooth):
            d["exp_smooth_alpha"] = self.amax_algo.alpha
        if isinstance(self.amax_algo, MaxWindow):
            d["max_window"] = self.amax_algo.window
        return d

    @classmethod
    def from_flat_dict(cls, raw: dict) -> "QuantConfig":
        raw = dict(raw)
        algo_nm = str(raw.pop("amax_algo", "max"))
        alpha = float(raw.pop("exp_smooth_alpha", 0.9))
        window = raw.pop("max_window", None)
        window = int(window) if window is not None else None
        known = {f.name: f.type for f in fields(cls) if f.name != "amax_algo"}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name == "amax_algo" or f.name not in raw:
                continue
            value = raw[f.name]
            target = type(getattr(cls(), f.name))
            try:
                kwargs[f.name] = target(value) if not isinstance(value, target) else value
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {f.name}: {value!r}") from exc
        history_len = kwargs.get("history_len", cls.history_len)
        kwargs["amax_algo"] = parse_algo(algo_nm, alpha=alpha, window=window,
                                         history_len=history_len)
        config = cls(**kwargs)
        config.validate()
        return config


@dataclass
class RunRecord:
    """Everything one training run produced."""

    name: str
    config: QuantConfig
    losses: list[float]
    saturations_per_step: list[int]
    report: SaturationReport
    amax_trace: list[TraceRow]
    reset_step: int | None
    quantized: bool
    wall_time: float

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def total_saturations(self) -> int:
        return self.report.total_saturated()


class ToyBlock:
    """One block: full-precision mixing layer plus a gated MLP."""

    def __init__(self, index: int, rng: np.random.Generator, config: QuantConfig,
                 manager: ScaleManager | None, quantize_mlp: bool):
        h, m = config.hidden, config.intermediate
        # Draw in a fixed order so plain and quantized models share init bits.
        # The residual-writing weights are damped so the stream stays
        # bounded through the stack without normalization layers.
        w_mix = rng.standard_normal((h, h)) * (0.5 / np.sqrt(h))
        b_mix = np.zeros(h)
        w_gate = rng.standard_normal((m, h)) / np.sqrt(h)
        w_up = rng.standard_normal((m, h)) / np.sqrt(h)
        w_down = rng.standard_normal((h, m)) * (0.5 / np.sqrt(m))

        self.mix = Linear(f"block{index}.mix", w_mix)
        self.b_mix = Tensor(b_mix, requires_grad=True)
        if quantize_mlp:
            assert manager is not None
            mk = lambda name, w: QuantLinear(
                f"block{index}.{name}", w, manager,
                algo=config.amax_algo, history_len=config.history_len,
                max_val=config.max_val, mode=config.dts_or_cts,
                min_normal_exponent=config.min_normal_exponent,
                quantize_gradients=config.quantize_gradients,
            )
        else:
            mk = lambda name, w: Linear(f"block{index}.{name}", w)
        self.gate = mk("gate_proj", w_gate)
        self.up = mk("up_proj", w_up)
        self.down = mk("down_proj", w_down)

    def parameters(self):
        return [self.mix.weight, self.b_mix, self.gate.weight,
                self.up.weight, self.down.weight]

    def __call__(self, hidden: Tensor, ctx: StepContext | None) -> Tensor:
        mixed = silu(add(self.mix(hidden, ctx), self.b_mix))
        hidden = add(hidden, mixed)
        # Bounded sigmoid gate: keeps the residual stream linear in the
        # input instead of quadratic, so deep stacks cannot blow up.
        gated = mul(sigmoid(self.gate(hidden, ctx)), self.up(hidden, ctx))
        return add(hidden, self.down(gated, ctx))


class ToyModel:
    """Block stack with a full-precision readout head."""

    def __init__(self, config: QuantConfig, rng: np.random.Generator,
                 manager: ScaleManager | None = None, quantized: bool = False):
        hp_blocks = frozenset()
        if quantized:
            hp_blocks = build_layout_blocks(config)
        self.blocks = [
            ToyBlock(i, rng, config, manager,
                     quantize_mlp=quantized and i not in hp_blocks)
            for i in range(config.n_blocks)
        ]
        h = config.hidden
        self.readout = Linear("readout", rng.standard_normal((config.out_dim, h)) / np.sqrt(h))
        self.b_out = Tensor(np.zeros(config.out_dim), requires_grad=True)

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend([self.readout.weight, self.b_out])
        return params

    def quant_layers(self):
        return [layer for block in self.blocks
                for layer in (block.gate, block.up, block.down)
                if isinstance(layer, QuantLinear)]

    def forward(self, x: Tensor, ctx: StepContext | None = None) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h, ctx)
        return add(self.readout(h, ctx), self.b_out)


def build_layout_blocks(config: QuantConfig) -> frozenset[int]:
    """High-precision boundary block indices for the toy architecture."""
    return select_high_precision_blocks(config.n_blocks, config.high_precision_layers)


def build_model(config: QuantConfig, model_seed,
                manager: ScaleManager | None = None, quantized: bool = False) -> ToyModel:
    """`model_seed` may be an int, a SeedSequence, or a Generator."""
    rng = np.random.default_rng(model_seed)
    return ToyModel(config, rng, manager=manager, quantized=quantized)


class TeacherTask:
    """Noisy regression targets from a frozen random network."""

    def __init__(self, config: QuantConfig, data_seed: int):
        teacher_ss, batch_ss = np.random.SeedSequence(data_seed).spawn(2)
        self.teacher = build_model(config, teacher_ss)
        self.config = config
        self.rng = np.random.default_rng(batch_ss)

    def batch(self):
        cfg = self.config
        x = self.rng.standard_normal((cfg.batch_size, cfg.hidden))
        y = self.teacher.forward(Tensor(x)).data
        if cfg.label_noise > 0:
            y = y + cfg.label_noise * self.rng.standard_normal(y.shape)
        return x, y


def derive_seeds(seed: int) -> tuple[int, int]:
    """Split the run seed into independent model and data seeds."""
    children = np.random.SeedSequence(seed).spawn(2)
    return (int(children[0].generate_state(1)[0]), int(children[1].generate_state(1)[0]))


def _train(config: QuantConfig, *, quantized: bool,
           model_seed: int | None, data_seed: int | None) -> RunRecord:
    config.validate()
    if model_seed is None or data_seed is None:
        derived_model, derived_data = derive_seeds(config.seed)
        model_seed = derived_model if model_seed is None else model_seed
        data_seed = derived_data if data_seed is None else data_seed

    manager = ScaleManager() if quantized else None
    report = SaturationReport()
    trace: list[TraceRow] = []
    model = build_model(config, model_seed, manager=manager, quantized=quantized)
    task = TeacherTask(config, data_seed)
    params = model.parameters()

    losses: list[float] = []
    reset_step: int | None = None
    start = time.perf_counter()
    for step in range(1, config.total_steps + 1):
        if quantized and config.warmup_steps > 0 and step == config.warmup_steps:
            # Discard warmup history; this final warmup step re-populates
            # every state with one representative observation before the
            # first quantized step uses it.
            manager.reset_all()
            reset_step = step
        quantize_now = (quantized and config.quantization_enabled
                        and step > config.warmup_steps)
        ctx = StepContext(step=step, quantize=quantize_now,
                          report=report, trace=trace if quantized else None)
        x, y = task.batch()
        pred = model.forward(Tensor(x), ctx)
        loss = mse_loss(pred, y)
        for p in params:
            p.zero_grad()
        loss.backward()
        lr = config.learning_rate
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad
        losses.append(float(loss.data))
    wall = time.perf_counter() - start

    return RunRecord(
        name=config.name,
        config=config,
        losses=losses,
        saturations_per_step=report.saturations_per_step(config.total_steps),
        report=report,
        amax_trace=trace,
        reset_step=reset_step,
        quantized=quantized,
        wall_time=wall,
    )


def two_phase_train(config: QuantConfig, model_seed: int | None = None,
                    data_seed: int | None = None) -> RunRecord:
    """Quantized run: full-precision warmup, history reset, then QAT."""
    return _train(config, quantized=True, model_seed=model_seed, data_seed=data_seed)


def baseline_train(config: QuantConfig, model_seed: int | None = None,
                   data_seed: int | None = None) -> RunRecord:
    """Plain trainer: same model, data, and optimizer, no quantization machinery."""
    return _train(config, quantized=False, model_seed=model_seed, data_seed=data_seed)


def ape(quant_losses, baseline_losses, window: tuple[int, int] | None = None) -> float:
    """Average percentage error between two loss series.

    mean over the window of |q_t - b_t| / |b_t| * 100.  `window` is a
    half-open (start, stop) index range; None means the whole series.
    """
    q = np.asarray(quant_losses, dtype=np.float64)
    b = np.asarray(baseline_losses, dtype=np.float64)
    if q.shape != b.shape or q.ndim != 1:
        raise MetricError(f"loss series must be equal-length vectors, got {q.shape} vs {b.shape}")
    if window is not None:
        start, stop = window
        q = q[start:stop]
        b = b[start:stop]
    if q.size == 0:
        raise MetricError("window selects no steps")
    if np.any(b == 0.0):
        raise MetricError("baseline loss is zero inside the window; APE is undefined")
    return float(np.mean(np.abs(q - b) / np.abs(b)) * 100.0)


def final_window(total_steps: int) -> tuple[int, int]:
    """The trailing 10% of steps (at least one step)."""
    tail = max(1, total_steps // 10)
    return (total_steps - tail, total_steps)


def paper_presets(total_steps: int = 600, seed: int = 7) -> list[QuantConfig]:
    """The six named reference configurations, translated to toy scale.

    History lengths carry over directly; the 500-step warmup scales to
    100 toy steps; configurations that originally ran without a warmup
    get the minimum one observation step that delayed scaling needs.
    """
    max_warmup = min(100, max(1, total_steps // 6))

    def cfg(name, algo, history, warmup, lr, mode):
        return QuantConfig(name=name, amax_algo=algo, history_len=history,
                           warmup_steps=warmup, learning_rate=lr,
                           dts_or_cts=mode, total_steps=total_steps, seed=seed)

    return [
        cfg("dts_mr", MostRecent(), 30, 1, LR_HIGH, "dts"),
        cfg("dts_exp", ExpSmooth(0.9), 30, 1, LR_HIGH, "dts"),
        cfg("cts", MostRecent(), 30, 0, LR_HIGH, "cts"),
        cfg("dts_exp_2", ExpSmooth(0.9), 128, 1, LR_HIGH, "dts"),
        cfg("max_quant", MaxWindow(64), 64, max_warmup, LR_HIGH, "dts"),
        cfg("max_quant_lr1e5", MaxWindow(64), 64, max_warmup, LR_LOW, "dts"),
    ]


MATRIX_COLUMNS = [
    "name", "lr", "amax_algo", "history", "warmup", "scaling",
    "final_loss", "ape_overall_pct", "ape_final_window_pct",
    "saturation_events", "status",
]


def _baseline_key(config: QuantConfig) -> tuple:
    return (config.learning_rate, config.seed, config.total_steps, config.batch_size,
            config.n_blocks, config.hidden, config.intermediate, config.out_dim,
            config.label_noise)


def run_matrix(presets: list[QuantConfig], out_dir: str | None = None):
    """Run every preset against its matched-lr baseline; one row per preset.

    A failing preset is recorded as failed and does not abort the rest.
    Returns (rows, records) where records maps preset name to the pair
    (quantized RunRecord, baseline RunRecord) for successful rows.
    """
    baselines: dict[tuple, RunRecord] = {}
    rows: list[dict] = []
    records: dict[str, tuple[RunRecord, RunRecord]] = {}
    for preset in presets:
        row = {
            "name": preset.name,
            "lr": repr(preset.learning_rate),
            "amax_algo": algo_name(preset.amax_algo),
            "history": preset.history_len,
            "warmup": preset.warmup_steps,
            "scaling": preset.dts_or_cts,
        }
        try:
            key = _baseline_key(preset)
            if key not in baselines:
                baselines[key] = baseline_train(preset)
            base = baselines[key]
            run = two_phase_train(preset)
            row.update({
                "final_loss": repr(run.final_loss),
                "ape_overall_pct": repr(ape(run.losses, base.losses)),
                "ape_final_window_pct": repr(
                    ape(run.losses, base.losses, window=final_window(preset.total_steps))
                ),
                "saturation_events": run.total_saturations,
                "status": "ok",
            })
            records[preset.name] = (run, base)
            if out_dir is not None:
                preset_dir = os.path.join(out_dir, preset.name)
                os.makedirs(preset_dir, exist_ok=True)
                write_run_outputs(run, base, preset_dir)
        except Exception as exc:  # noqa: BLE001 - a row failure must not kill the matrix
            row.update({
                "final_loss": "", "ape_overall_pct": "", "ape_final_window_pct": "",
                "saturation_events": "", "status": f"failed: {exc}",
            })
        rows.append(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_matrix_csv(os.path.join(out_dir, "matrix.csv"), rows)
    return rows, records


def atomic_write_text(path: str, text: str) -> None:
    """Write a file via temp-then-rename so partial runs never corrupt it."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_matrix_csv(path: str, rows: list[dict]) -> None:
    lines = [",".join(MATRIX_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row.get(col, "")) for col in MATRIX_COLUMNS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_run_outputs(run: RunRecord, baseline: RunRecord | None, out_dir: str) -> None:
    """Per-run CSV (step series) and JSON summary, both written atomically."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["step,loss,saturation_events_this_step"]
    for i, loss in enumerate(run.losses):
        sat = run.saturations_per_step[i] if i < len(run.saturations_per_step) else 0
        lines.append(f"{i + 1},{loss!r},{sat}")
    atomic_write_text(os.path.join(out_dir, "run.csv"), "\n".join(lines) + "\n")

    summary = {
        "name": run.name,
        "config": run.config.to_flat_dict(),
        "quantized": run.quantized,
        "reset_step": run.reset_step,
        "final_loss": run.final_loss,
        "total_saturations": run.total_saturations,
    }
    if baseline is not None:
        summary["ape_overall_pct"] = ape(run.losses, baseline.losses)
        summary["ape_final_window_pct"] = ape(
            run.losses, baseline.losses, window=final_window(run.config.total_steps)
        )
        summary["baseline_final_loss"] = baseline.final_loss
    atomic_write_text(os.path.join(out_dir, "summary.json"),
                      json.dumps(summary, indent=2, sort_keys=True) + "\n")
