"""Desk-scale laboratory for HiF8 W8A8 quantization-aware training.

Pieces:

* `codec`    - the tiered-mantissa 8-bit grid and fake quantization
* `scaling`  - per-tensor amax histories and the four scale strategies
* `layout`   - which blocks and linears get quantized
* `qat_core` - minimal reverse-mode autodiff with an STE quantized linear
* `harness`  - two-phase training runs, the APE metric, preset matrix
* `cli`      - command-line front end
"""

from .codec import (
    CodecParams,
    Hif8Encoder,
    QuantResult,
    TierSpec,
    fake_quantize,
    representable_grid,
    signed_grid,
    tier_of,
)
from .harness import (
    QuantConfig,
    RunRecord,
    ape,
    baseline_train,
    paper_presets,
    run_matrix,
    two_phase_train,
)
from .layout import (
    ArchSpec,
    QuantLayout,
    REFERENCE_ARCH,
    build_layout,
    count_quantized_params,
    select_high_precision_blocks,
)
from .qat_core import (
    Linear,
    QuantLinear,
    SaturationReport,
    StepContext,
    Tensor,
    fake_quant_ste,
    ste_identity_check,
)
from .scaling import (
    Current,
    ExpSmooth,
    MaxWindow,
    MostRecent,
    ScaleManager,
    ScaleState,
    compute_scale,
)

__version__ = "0.1.0"
