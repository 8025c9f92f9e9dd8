import hashlib


def derive_seed(base: int, *tags) -> int:
    """Stable 64-bit seed from a base seed and tags (task id, purpose, ...)"""
    text = ':'.join([str(base)] + [str(tag) for tag in tags])
    return int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:8], 'little')
