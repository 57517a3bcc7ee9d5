"""Binary-hashed answer representations for fast answer selection."""

from .codestore import CodeStore, build_index, memory_report
from .config import TrainConfig, load_config
from .data import Dataset, Vocabulary, build_vocab, load_dataset, tokenize_pad
from .errors import CapacityError, FormatError, HashQAError, InputError, NumericError, ParseError, UsageError
from .hashing import BinaryMatrix, hard_binarize, pack_bits, soft_binarize, unpack_bits
from .serve import bench, evaluate, rank, rank_recompute
from .trainer import grad_check, train

__version__ = "0.1.0"
