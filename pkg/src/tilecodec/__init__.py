"""Tile-based learned image codec.

Images are split into 32x32 tiles coded in raster order.  Each tile is first
predicted from its already decoded neighbours by a convolutional context
predictor; the remaining residual is coded by a recurrent binary autoencoder
that emits 128 bits per iteration.  Tiles may use different iteration counts
so that each meets a local quality target.
"""
from .bitstream import load_model_file, load_toy_model, read_stream, save_model_file
from .errors import (
    ModelError,
    ModelMismatchError,
    ShapeError,
    StreamError,
    TileCodecError,
)
from .estimator import TileCodec
from .image_io import read_image, write_image
from .model import PAPER_ARCH, TOY_ARCH, Architecture, CodecModel
from .pipeline import EncodeConfig, EncodedImage, decode_image, encode_image, psnr

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "CodecModel",
    "EncodeConfig",
    "EncodedImage",
    "ModelError",
    "ModelMismatchError",
    "PAPER_ARCH",
    "ShapeError",
    "StreamError",
    "TOY_ARCH",
    "TileCodec",
    "TileCodecError",
    "decode_image",
    "encode_image",
    "load_model_file",
    "load_toy_model",
    "psnr",
    "read_image",
    "read_stream",
    "save_model_file",
    "write_image",
]
