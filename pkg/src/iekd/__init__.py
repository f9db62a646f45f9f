"""Inheritance-and-exploration knowledge distillation on a small numpy autodiff core."""

from .analysis import SharpnessCurve, active_neurons, linear_cka, sharpness_probe
from .codec import FactorCodec, FactorEncoder, pretrain_codec, reconstruction_loss
from .data import Dataset, generate_synthetic, load_csv, load_idx
from .losses import (
    MetricKind,
    SplitSpec,
    exploration_loss,
    ieod_losses,
    inheritance_loss,
    split_channels,
    total_student_loss,
)
from .manifest import RunManifest
from .nets import NetConfig, PairConfig, build_net, build_reference_nets
from .nn import LayerStack
from .optim import SGD
from .tensor import Tensor, backward, no_grad, recording
from .train import DistillConfig, distill_iekd, run_ablation, train_codec, train_iedml, train_supervised, train_teacher

__version__ = "0.1.0"
