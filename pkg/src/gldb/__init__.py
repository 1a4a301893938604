"""Content-aware global-local deblurring on a minimal autodiff engine."""

import os as _os

# BLAS thread cap must land in the environment before numpy loads.
_threads = _os.environ.get("GLDB_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .tensor import (  # noqa: E402
    Tensor,
    ShapeError,
    as_tensor,
    conv2d,
    no_grad,
    reduce,
    softmax_axis,
    track_allocations,
)
from .gradcheck import finite_diff_check, run_suite  # noqa: E402
from .attention import (  # noqa: E402
    AttentionMaps,
    AttentionParams,
    aggregate_global,
    attention_forward,
    build_attention_maps,
    channel_gate,
    cross_attention_forward,
    distribute,
    naive_attention_oracle,
)
from .dynconv import (  # noqa: E402
    AdaptiveKernelField,
    DynConvParams,
    generate_kernels,
    gl_fuse,
    pixel_adaptive_conv,
)
from .network import (  # noqa: E402
    NetworkConfig,
    NetParams,
    init_params,
    merge_patches,
    network_forward,
    network_forward_batch,
    residual_block_forward,
    split_patches,
)

__version__ = "0.1.0"
