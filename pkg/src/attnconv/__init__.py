"""Self-attention as dynamic 1x1 convolutions.

Both formulations of the attention block are implemented and verified equal:
the standard token-matrix path and a kernel-bank path where keys/values act
as paired dynamic convolution kernels under a selection rule. On top of that
sit the activation-variant ablation grid, the depth-wise attention block, an
analytic complexity counter, and a toy training harness.
"""

from .activations import ActivationVariant, apply_activation, VARIANT_STRINGS
from .attention import (
    AttentionConfig,
    AttentionParams,
    attention_forward,
    qkv_project,
)
from .backend import backend_name
from .complexity import ComplexityReport, count, savings
from .convform import (
    KernelBank,
    SelectionRule,
    StaticKernelBank,
    build_kernel_bank,
    conv_form_attention,
    conv_form_block,
    dconv_reference,
    ddwconv_reference,
    merge_selected_kernels,
    select_kernels,
)
from .data import Dataset, generate_dataset, load_dataset, save_dataset
from .depthwise import (
    DepthwiseAttentionConfig,
    DepthwiseAttentionParams,
    depthwise_attention_forward,
    depthwise_locality_check,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    TrainingDiverged,
)
from .models import (
    Model,
    ModelConfig,
    PRESETS,
    build_model,
    count_model_params,
    forward_classify,
    load_checkpoint,
    preset_config,
    save_checkpoint,
)
from .positional import (
    AbsolutePositionTable,
    RelativeBiasTable,
    add_absolute,
    bias_application_site,
    materialize_relative_bias,
)
from .tensor import (
    GradTape,
    Tensor,
    backward,
    elementwise,
    expand,
    finite_diff_check,
    matmul,
    no_grad,
    softmax,
)
from .tensor_io import load_tensor, save_tensor
from .train import TrainConfig, TrainLog, ablate, train

__version__ = "0.1.0"
