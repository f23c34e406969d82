"""Label PRF and value encryption."""

import pytest
from hypothesis import given, strategies as st

from shortstack.crypto import AuthenticityError, CryptoSuite, ValueTooLarge


@pytest.fixture(scope="module")
def suite():
    return CryptoSuite.from_seed(11, value_size=64)


@given(st.binary(max_size=60))
def test_round_trip(value):
    suite = CryptoSuite.from_seed(11, value_size=64)
    ct = suite.encrypt_value(value, b"lbl")
    assert len(ct) == suite.ciphertext_size
    assert suite.decrypt_value(ct, b"lbl") == value


def test_encryption_is_randomized(suite):
    a, b = suite.encrypt_value(b"same"), suite.encrypt_value(b"same")
    assert a != b
    assert suite.decrypt_value(a) == suite.decrypt_value(b) == b"same"


def test_tamper_and_label_swap_are_detected(suite):
    ct = bytearray(suite.encrypt_value(b"v", b"one"))
    with pytest.raises(AuthenticityError):
        suite.decrypt_value(bytes(ct), b"two")
    ct[-1] ^= 1
    with pytest.raises(AuthenticityError):
        suite.decrypt_value(bytes(ct), b"one")
    with pytest.raises(AuthenticityError):
        suite.decrypt_value(bytes(ct[:-1]), b"one")


def test_oversized_value_rejected(suite):
    with pytest.raises(ValueTooLarge):
        suite.encrypt_value(bytes(61))


def test_prf_is_keyed_and_fixed_length():
    a, b = CryptoSuite.from_seed(1), CryptoSuite.from_seed(2)
    assert a.prf(b"x") == CryptoSuite.from_seed(1).prf(b"x")
    assert a.prf(b"x") != b.prf(b"x")
    assert len(a.prf(b"x")) == len(a.prf(b"y" * 1000)) == a.label_size


def test_bad_sizes_rejected():
    with pytest.raises(ValueError):
        CryptoSuite.from_seed(0, value_size=2)
    with pytest.raises(ValueError):
        CryptoSuite.from_seed(0, label_size=4)
