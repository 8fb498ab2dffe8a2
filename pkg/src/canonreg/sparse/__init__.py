from .tensor import (
    CoordinateSet,
    ConvLayer,
    KernelMap,
    SparseTensor,
    build_kernel_map,
    conv_backward,
    conv_forward,
    kernel_offsets,
    quantize,
)
from .nn import (
    Conv,
    FeatureNet,
    ForwardState,
    L2Normalize,
    ReLU,
    ResBlock,
    Sequential,
    UNetSkip,
    net_backward,
    net_forward,
)
