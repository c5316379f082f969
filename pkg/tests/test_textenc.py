import itertools

import numpy as np
import pytest

from gazedistill.reports import BOUNDARIES, CHARACTERISTICS, CONFIDENCES, LOCATIONS, LesionReport, canonical_text
from gazedistill.textenc import (
    DeterministicEncoder,
    TextEncodeError,
    make_encoder,
    tokenize,
)


def test_tokenize_splits_on_whitespace_and_punctuation():
    assert tokenize("clear boundary") == ["clear", "boundary"]
    assert tokenize("area: 12.5%;") == ["area", "12", "5"]
    assert tokenize("upper_left") == ["upper", "left"]


def test_same_text_bitwise_identical():
    enc = DeterministicEncoder(width=64, seed=7)
    a = enc.encode("clear boundary")
    b = enc.encode("clear boundary")
    assert np.array_equal(a.vectors, b.vectors)


def test_token_order_permutes_rows():
    enc = DeterministicEncoder(width=64, seed=7)
    ab = enc.encode("a b").vectors
    ba = enc.encode("b a").vectors
    assert np.array_equal(ab[0], ba[1])
    assert np.array_equal(ab[1], ba[0])
    assert not np.array_equal(ab[0], ab[1])


def test_rows_unit_norm():
    enc = DeterministicEncoder(width=768, seed=7)
    emb = enc.encode("location upper left boundary clear")
    norms = np.linalg.norm(emb.vectors, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_width_and_token_count():
    enc = DeterministicEncoder(width=32, seed=0)
    emb = enc.encode("one two three")
    assert emb.width == 32
    assert emb.token_count == 3
    assert emb.vectors.shape == (3, 32)


def test_fixed_seed_bitwise_stable_across_instances():
    a = DeterministicEncoder(width=48, seed=9).encode("stable text")
    b = DeterministicEncoder(width=48, seed=9).encode("stable text")
    assert np.array_equal(a.vectors, b.vectors)


def test_seed_changes_vectors():
    a = DeterministicEncoder(width=48, seed=1).encode("token")
    b = DeterministicEncoder(width=48, seed=2).encode("token")
    assert not np.array_equal(a.vectors, b.vectors)


def test_empty_text_is_input_error():
    enc = DeterministicEncoder(width=16, seed=7)
    with pytest.raises(TextEncodeError):
        enc.encode("")
    with pytest.raises(TextEncodeError):
        enc.encode("!!! ---")


def test_finite_on_report_vocabulary_closure():
    enc = DeterministicEncoder(width=768, seed=7)
    for location, boundary, confidence in itertools.product(LOCATIONS, BOUNDARIES, CONFIDENCES):
        report = LesionReport(location, boundary, CHARACTERISTICS, 42.0, confidence, "note")
        emb = enc.encode(canonical_text(report))
        assert np.isfinite(emb.vectors).all()
        assert emb.width == 768


def test_make_encoder_deterministic_backend():
    enc = make_encoder("deterministic_test", width=24, seed=3)
    assert isinstance(enc, DeterministicEncoder)
    assert enc.width == 24


def test_make_encoder_unknown_backend():
    with pytest.raises(ValueError):
        make_encoder("quantum")


def test_pretrained_unavailable_falls_back_only_when_allowed(monkeypatch):
    # unreachable model name: offline load fails fast
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
    from gazedistill.textenc import TextBackendError

    with pytest.raises(TextBackendError):
        make_encoder("pretrained", width=768, model_name="no-such-org/no-such-model")
    enc = make_encoder(
        "pretrained", width=768, seed=5, model_name="no-such-org/no-such-model",
        allow_fallback=True,
    )
    assert isinstance(enc, DeterministicEncoder)
