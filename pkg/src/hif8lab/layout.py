"""Block and module selection: which linear layers get quantized.

Coverage follows the reference recipe: only the three MLP projections
(gate, up, down) of a transformer block are quantized; attention,
embeddings, the output head, and norms stay in high precision.  On top
of that, the first ceil(k/2) and last floor(k/2) blocks are kept
entirely in high precision as boundary buffers.
"""

import json
from dataclasses import dataclass, field

from .errors import LayoutError

__all__ = [
    "MLP_LAYER_NAMES",
    "ArchSpec",
    "QuantLayout",
    "REFERENCE_ARCH",
    "select_high_precision_blocks",
    "build_layout",
    "count_quantized_params",
    "layout_to_json",
]

MLP_LAYER_NAMES = ("gate_proj", "up_proj", "down_proj")


@dataclass(frozen=True)
class ArchSpec:
    """Shape summary of a block-stack model.

    `total_params` is a declared estimate (embedding and head sizes are
    not derivable from the block shapes alone); it only feeds the
    quantized-fraction diagnostic.
    """

    n_blocks: int
    hidden: int
    intermediate: int
    total_params: int
    mlp_linear_shapes: tuple[tuple[str, int, int], ...] = field(default=())

    def __post_init__(self):
        if self.n_blocks < 1 or self.hidden < 1 or self.intermediate < 1:
            raise LayoutError("architecture dimensions must be positive")
        if not self.mlp_linear_shapes:
            shapes = (
                ("gate_proj", self.intermediate, self.hidden),
                ("up_proj", self.intermediate, self.hidden),
                ("down_proj", self.hidden, self.intermediate),
            )
            object.__setattr__(self, "mlp_linear_shapes", shapes)


# 26 blocks, hidden 1536, intermediate 6144; roughly 1B parameters total.
REFERENCE_ARCH = ArchSpec(n_blocks=26, hidden=1536, intermediate=6144,
                          total_params=1_000_000_000)


@dataclass(frozen=True)
class QuantLayout:
    """Result of layer selection: boundary blocks plus quantized linears."""

    high_precision_blocks: frozenset[int]
    quantized_linears: tuple[tuple[int, str], ...]


def select_high_precision_blocks(n_blocks: int, k: int) -> frozenset[int]:
    """Indices of the k boundary blocks kept in high precision.

    The first ceil(k/2) and the last floor(k/2) block indices.
    """
    if k < 0:
        raise LayoutError(f"high-precision block count must be non-negative, got {k}")
    if k > n_blocks:
        raise LayoutError(f"cannot keep {k} high-precision blocks in a {n_blocks}-block model")
    head = (k + 1) // 2
    tail = k // 2
    return frozenset(range(head)) | frozenset(range(n_blocks - tail, n_blocks))


def build_layout(arch: ArchSpec, k: int) -> QuantLayout:
    """Quantize the MLP linears of every non-boundary block."""
    hp = select_high_precision_blocks(arch.n_blocks, k)
    linears = tuple(
        (block, name)
        for block in range(arch.n_blocks)
        if block not in hp
        for name, _, _ in arch.mlp_linear_shapes
    )
    return QuantLayout(high_precision_blocks=hp, quantized_linears=linears)


def count_quantized_params(layout: QuantLayout, arch: ArchSpec) -> tuple[int, int, float]:
    """(quantized layer count, quantized parameter count, fraction of total)."""
    shapes = {name: (rows, cols) for name, rows, cols in arch.mlp_linear_shapes}
    params = 0
    for block, name in layout.quantized_linears:
        if not 0 <= block < arch.n_blocks:
            raise LayoutError(f"layout references block {block} outside a {arch.n_blocks}-block model")
        if name not in shapes:
            raise LayoutError(f"layout references unknown layer {name!r}")
        rows, cols = shapes[name]
        params += rows * cols
    fraction = params / arch.total_params if params else 0.0
    return len(layout.quantized_linears), params, fraction


def layout_to_json(layout: QuantLayout, arch: ArchSpec) -> str:
    """Audit dump: per block, its precision class and quantized layer names."""
    per_block: dict[str, dict] = {}
    quantized_by_block: dict[int, list[str]] = {}
    for block, name in layout.quantized_linears:
        quantized_by_block.setdefault(block, []).append(name)
    for block in range(arch.n_blocks):
        if block in layout.high_precision_blocks:
            per_block[str(block)] = {"precision": "high", "quantized_layers": []}
        else:
            per_block[str(block)] = {
                "precision": "quantized_mlp",
                "quantized_layers": quantized_by_block.get(block, []),
            }
    n_layers, n_params, fraction = count_quantized_params(layout, arch)
    doc = {
        "n_blocks": arch.n_blocks,
        "high_precision_blocks": sorted(layout.high_precision_blocks),
        "blocks": per_block,
        "quantized_layer_count": n_layers,
        "quantized_param_count": n_params,
        "quantized_fraction": fraction,
    }
    return json.dumps(doc, indent=2, sort_keys=True)
