"""Encode view prompts and item images into aligned embedding stores."""

from .corpus import EncodeResult, encode_corpus, read_prompt_dump
from .encoders import EncoderSpec, build_encoder
from .store_format import merge_stores, read_store_file, validate_store, write_store_file

__version__ = "0.1.0"

__all__ = [
    "EncodeResult",
    "EncoderSpec",
    "build_encoder",
    "encode_corpus",
    "merge_stores",
    "read_prompt_dump",
    "read_store_file",
    "validate_store",
    "write_store_file",
]
