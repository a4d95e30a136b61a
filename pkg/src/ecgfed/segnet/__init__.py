from .loss import compound_loss, loss_and_grad, soft_dice
from .net import Layout, NetConfig, SegNet
from .optim import OptConfig, OptState, adamw_step, clip_by_global_norm, lr_at
from .train import ClientData, local_train

__all__ = [
    "ClientData", "Layout", "NetConfig", "OptConfig", "OptState", "SegNet", "adamw_step",
    "clip_by_global_norm", "compound_loss", "local_train", "loss_and_grad", "lr_at", "soft_dice",
]
