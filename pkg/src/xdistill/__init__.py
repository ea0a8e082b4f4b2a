"""Explanation distillation against shortcut learning, on a small numpy autodiff core."""

from .autodiff import Tensor, backward, grad, no_grad, enable_grad, tensor
from .biasdata import BiasSpec, BiasedDataset, debias_background, gen_background_bias, gen_colored_glyphs, load_mnist_idx
from .distill import DistillConfig, Distiller, LossReport, dissimilarity, distill_step, pyramidal_loss
from .estimators import ERMClassifier, ExplanationDistiller, HeatmapTransformer
from .exceptions import ContractError, DimensionError, FormatError, NumericFaultError, XDistillError
from .explain import Heatmap, attention_map, explain, grad_cam, gradient_times_input, input_gradient, lrp
from .nn import Network, build_network, cnn_spec, forward, load_network, save_network

__version__ = "0.1.0"
