from .checkpoint import load_checkpoint, parameter_checksum, save_checkpoint
from .ema import EmaShadow, backbone_refresh, ema_update
from .heads import ConvHead, Discriminator, SemanticHead, discriminator_forward, make_head
from .lora import LoRALinear, lora_attach, lora_parameters
from .velocity import NetConfig, VelocityNet, generate

__all__ = [
    "ConvHead",
    "Discriminator",
    "EmaShadow",
    "LoRALinear",
    "NetConfig",
    "SemanticHead",
    "VelocityNet",
    "backbone_refresh",
    "discriminator_forward",
    "ema_update",
    "generate",
    "load_checkpoint",
    "lora_attach",
    "lora_parameters",
    "make_head",
    "parameter_checksum",
    "save_checkpoint",
]
