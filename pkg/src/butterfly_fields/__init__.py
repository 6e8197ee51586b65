"""Butterfly composite fields: encoding, voting decoder, losses and evaluation."""
from .core import BBox, DecoderConfig, Detection, FieldCell, FieldGrid, cell_center, from_corners, iou, to_corners
from .decoder import ButterflyDecoder, decode, decode_no_voting, soft_nms
from .encoder import EncodeMode, FieldEncoder, assign_cells, encode
from .evaluation import EvalConfig, EvalReport, average_precision, evaluate, match

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "FieldCell", "FieldGrid", "DecoderConfig",
    "cell_center", "from_corners", "to_corners", "iou",
    "EncodeMode", "FieldEncoder", "assign_cells", "encode",
    "ButterflyDecoder", "decode", "decode_no_voting", "soft_nms",
    "EvalConfig", "EvalReport", "average_precision", "evaluate", "match",
]
