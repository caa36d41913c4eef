"""Hierarchical seeds: ``stage_seed = master XOR first-8-bytes(sha256(tag))``."""
import hashlib

MASK64 = (1 << 64) - 1


def derive_seed(master: int, tag: str) -> int:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return (int(master) & MASK64) ^ int.from_bytes(digest[:8], "little")
