"""blockmc: composable stateful-block MCMC.

Models are declared in a small line-oriented DSL, decomposed into
stateful sampling blocks over a shared value pool, updated by generic
kernels (NUTS, slice, conjugate Gibbs, FFBS, stick-breaking), and
checked by a quantitative runtime validation pipeline.
"""

from .blocks import build_sampler
from .core import (Block, BlockDescriptor, BlockMcError, CompositeBlock,
                   History, RngStreams, Sampler, SharedPool, Value)
from .graph import (ModelGraph, build_graph, derive_prediction_dag,
                    initial_values, predict_at)
from .modelspec import (BlockPlan, Diagnostic, ModelSpec, SpecError,
                        assign_blocks, parse_spec, print_spec)
from .templates import TEMPLATE_NAMES, load_template
from .validation import DiagnosticsReport, run_validation

__version__ = "0.1.0"

__all__ = [
    "Block", "BlockDescriptor", "BlockMcError", "BlockPlan", "CompositeBlock",
    "Diagnostic", "DiagnosticsReport", "History", "ModelGraph", "ModelSpec",
    "RngStreams", "Sampler", "SharedPool", "SpecError", "TEMPLATE_NAMES",
    "Value", "assign_blocks", "build_graph", "build_sampler",
    "derive_prediction_dag", "initial_values", "load_template", "parse_spec",
    "predict_at", "print_spec", "run_validation",
]
