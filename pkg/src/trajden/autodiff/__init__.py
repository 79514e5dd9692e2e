from .tensor import Grid, backward
from .params import AdamW, ParamStore, load_checkpoint, save_checkpoint
from . import ops, losses

__all__ = ["Grid", "backward", "AdamW", "ParamStore", "load_checkpoint", "save_checkpoint", "ops", "losses"]
