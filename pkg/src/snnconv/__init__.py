"""ANN-to-SNN conversion and integrate-and-fire simulation.

Pipeline: describe a small conv net as a ModelGraph, fold its batchnorm
layers, sample per-channel activation maxima, normalize weights with them,
lower to a stage schedule, and simulate under rate or spike-time-weighted
coding. metrics compares decoded outputs against the ANN and prices both
networks in joules. The cli module wraps the whole thing for the shell.
"""

from .convert import (
    BIAS_RULES,
    SCHEMES,
    V_INIT_FRACTION,
    V_THR,
    CodingConfig,
    ConvertedModel,
    SnnPlan,
    Stage,
    build_snn,
    denormalize_weights,
    load_converted,
    normalize_weights,
    normalized_forward,
    save_converted,
)
from .engine import (
    InjectionPlan,
    NeuronLayerState,
    RunResult,
    StageReport,
    decode_output,
    encode_input,
    fire_phase,
    fire_phase_rate,
    fire_phase_stdi,
    run_snn,
    single_neuron_oracle,
    spike_maxpool,
    weighted_units,
)
from .errors import ValidationError
from .fixtures import FIXTURE_NAMES, Fixture, FixtureSpec, build_fixture, gen_fixture
from .graph import LayerSpec, ModelGraph, ann_forward, fold_batchnorm
from .metrics import (
    E_AC_PJ,
    E_MAC_PJ,
    ComparisonResult,
    EnergyConstants,
    EnergyReport,
    compare_outputs,
    count_ann_flops,
    count_snn_flops,
    energy_report,
    fanout_weighted_ac,
)
from .model_io import (
    load_input,
    load_model,
    load_stats,
    load_tensors,
    save_model,
    save_stats,
    save_tensors,
)
from .stats import EPSILON_STAT, NormStats, sample_activation_stats
from .tensor_ops import concat_channels, conv2d, convtranspose2d, maxpool2d, relu

__version__ = "0.1.0"

__all__ = [
    "BIAS_RULES",
    "SCHEMES",
    "V_INIT_FRACTION",
    "V_THR",
    "E_AC_PJ",
    "E_MAC_PJ",
    "EPSILON_STAT",
    "FIXTURE_NAMES",
    "CodingConfig",
    "ComparisonResult",
    "ConvertedModel",
    "EnergyConstants",
    "EnergyReport",
    "Fixture",
    "FixtureSpec",
    "InjectionPlan",
    "LayerSpec",
    "ModelGraph",
    "NeuronLayerState",
    "NormStats",
    "RunResult",
    "SnnPlan",
    "Stage",
    "StageReport",
    "ValidationError",
    "ann_forward",
    "build_fixture",
    "build_snn",
    "compare_outputs",
    "concat_channels",
    "conv2d",
    "convtranspose2d",
    "count_ann_flops",
    "count_snn_flops",
    "decode_output",
    "denormalize_weights",
    "encode_input",
    "energy_report",
    "fanout_weighted_ac",
    "fire_phase",
    "fire_phase_rate",
    "fire_phase_stdi",
    "fold_batchnorm",
    "gen_fixture",
    "load_converted",
    "load_input",
    "load_model",
    "load_stats",
    "load_tensors",
    "maxpool2d",
    "normalize_weights",
    "normalized_forward",
    "relu",
    "run_snn",
    "sample_activation_stats",
    "save_converted",
    "save_model",
    "save_stats",
    "save_tensors",
    "single_neuron_oracle",
    "spike_maxpool",
    "weighted_units",
]
