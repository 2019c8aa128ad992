"""Hash-embedding checks: tokenizer, FNV vectors, vector-space properties."""

import numpy as np
import pytest

from pcfmem import embed
from pcfmem.physics import Geometry, SimResult


def test_fnv1a64_published_vectors():
    assert embed.fnv1a64("") == 0xCBF29CE484222325
    assert embed.fnv1a64("a") == 0xAF63DC4C8601EC8C
    assert embed.fnv1a64("foobar") == 0x85944171F73967E8


def test_tokenize_lowercases_and_splits_on_nonalnum():
    assert embed.tokenize("Pitch: 2.30um!") == ["pitch", "2", "30um"]
    assert embed.tokenize("") == []
    assert embed.tokenize("   --- ") == []
    assert embed.tokenize("n_eff") == ["n", "eff"]


def test_embed_text_unit_norm_and_deterministic():
    v1 = embed.embed_text("raise the pitch to cut loss")
    v2 = embed.embed_text("raise the pitch to cut loss")
    assert v1.shape == (embed.TEXT_DIM,)
    assert abs(np.linalg.norm(v1) - 1.0) < 1e-12
    assert np.array_equal(v1, v2)


def test_embed_text_empty_is_zero_vector():
    v = embed.embed_text("")
    assert v.shape == (embed.TEXT_DIM,)
    assert np.all(v == 0.0)


def test_related_texts_score_higher_than_unrelated():
    a = embed.embed_text("increase pitch to reduce confinement loss")
    b = embed.embed_text("raising pitch lowers the confinement loss")
    c = embed.embed_text("quarterly revenue grew across all regions")
    assert embed.cosine(a, b) > embed.cosine(a, c)


def test_cosine_properties():
    rng = np.random.default_rng(7)
    v = rng.normal(0.0, 1.0, embed.TEXT_DIM)
    assert embed.cosine(v, v) == pytest.approx(1.0, abs=1e-12)
    assert embed.cosine(v, np.zeros(embed.TEXT_DIM)) == 0.0
    with pytest.raises(ValueError):
        embed.cosine(v, np.zeros(8))


def test_embed_numeric_shape_and_range():
    geom = Geometry(2.3, 1.15, 6)
    res = SimResult(
        n_eff=1.431, dispersion_ps_nm_km=77.2, loss_db_km=0.025, lambda_um=1.55
    )
    v = embed.embed_numeric(geom, res)
    assert v.shape == (embed.NUMERIC_DIM,)
    assert np.all(v >= 0.0) and np.all(v <= 1.0)
    assert v[-1] == 0.0  # reserved slot
