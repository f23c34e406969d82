"""Label PRF and value encryption used by every proxy layer.

Labels are HMAC-SHA256 over a canonical replica encoding, truncated to a
fixed length. Values are length-prefixed, zero-padded to a fixed size and
sealed with AES-GCM under a fresh random nonce, so every ciphertext has the
same length and re-encrypting an unchanged value yields a new string.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DEFAULT_VALUE_SIZE = 1024
DEFAULT_LABEL_SIZE = 16
NONCE_SIZE = 12
TAG_SIZE = 16
_LEN_PREFIX = struct.Struct(">I")


class AuthenticityError(Exception):
    """Raised when a ciphertext fails authentication."""


class ValueTooLarge(ValueError):
    pass


@dataclass
class CryptoSuite:
    """Secret keys plus the fixed sizes for labels and padded values."""

    prf_key: bytes = field(default_factory=lambda: os.urandom(32))
    enc_key: bytes = field(default_factory=lambda: AESGCM.generate_key(bit_length=256))
    value_size: int = DEFAULT_VALUE_SIZE
    label_size: int = DEFAULT_LABEL_SIZE

    def __post_init__(self) -> None:
        if self.value_size < _LEN_PREFIX.size + 1:
            raise ValueError("value_size too small")
        if not 8 <= self.label_size <= 32:
            raise ValueError("label_size must be in [8, 32]")
        self._aead = AESGCM(self.enc_key)

    @classmethod
    def from_seed(cls, seed: int, value_size: int = DEFAULT_VALUE_SIZE,
                  label_size: int = DEFAULT_LABEL_SIZE) -> "CryptoSuite":
        """Derive both keys from an integer seed (simulation only)."""
        material = hashlib.sha512(b"shortstack-keys" + seed.to_bytes(16, "big", signed=True)).digest()
        return cls(prf_key=material[:32], enc_key=material[32:], value_size=value_size,
                   label_size=label_size)

    @property
    def ciphertext_size(self) -> int:
        return NONCE_SIZE + self.value_size + TAG_SIZE

    def prf(self, data: bytes) -> bytes:
        return hmac.new(self.prf_key, data, hashlib.sha256).digest()[: self.label_size]

    def pad(self, value: bytes) -> bytes:
        room = self.value_size - _LEN_PREFIX.size
        if len(value) > room:
            raise ValueTooLarge(f"value of {len(value)} bytes exceeds padded size {room}")
        return _LEN_PREFIX.pack(len(value)) + value + bytes(room - len(value))

    @staticmethod
    def unpad(padded: bytes) -> bytes:
        (length,) = _LEN_PREFIX.unpack_from(padded)
        return padded[_LEN_PREFIX.size: _LEN_PREFIX.size + length]

    def encrypt_value(self, value: bytes, label: bytes = b"") -> bytes:
        """Pad and seal ``value``; the label is bound as associated data."""
        nonce = os.urandom(NONCE_SIZE)
        return nonce + self._aead.encrypt(nonce, self.pad(value), label)

    def decrypt_value(self, ciphertext: bytes, label: bytes = b"") -> bytes:
        if len(ciphertext) != self.ciphertext_size:
            raise AuthenticityError("ciphertext has wrong length")
        nonce, body = ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:]
        try:
            padded = self._aead.decrypt(nonce, body, label)
        except InvalidTag as exc:
            raise AuthenticityError("authentication tag mismatch") from exc
        return self.unpad(padded)
