"""U-net segmentation of fracture-surface micrographs into intergranular and
transgranular modes, with the IoU / F-measure evaluation protocol."""

from .unet import UNetConfig, UNetModel, build, load_weights, save_weights, import_encoder

__all__ = ["UNetConfig", "UNetModel", "build", "load_weights", "save_weights", "import_encoder"]
__version__ = "0.1.0"
