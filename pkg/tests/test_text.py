import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reifiedqa.exceptions import InputError, ShapeError
from reifiedqa.text import EmbeddingTable, encode, encode_backward, span_embed, tokenize

from conftest import assert_grad_close, numeric_grad


class TestTokenize:
    def test_example(self):
        toks = tokenize("What position does Carlos Gomez play?")
        assert toks.tokens == ("what", "position", "does", "carlos", "gomez", "play")

    def test_offsets_point_into_question(self):
        q = "Who directed  'Blade Runner', anyway?"
        toks = tokenize(q)
        for tok, (a, b) in zip(toks.tokens, toks.offsets):
            assert q[a:b].lower() == tok

    def test_underscore_and_digits(self):
        assert tokenize("foo_bar 1982").tokens == ("foo", "bar", "1982")

    @pytest.mark.parametrize("q", ["", "   ", "?!"])
    def test_empty(self, q):
        with pytest.raises(InputError):
            tokenize(q)


@pytest.fixture
def table():
    return EmbeddingTable.from_questions(["what position does carlos gomez play"], dim=8, rng=0)


class TestEncode:
    def test_unknown_row_zero(self, table):
        assert table.tokens[0] == "<unk>"
        ids = table.row_ids(tokenize("carlos zzz"))
        assert ids[1] == 0 and ids[0] > 0

    def test_mean_pooling(self, table):
        enc = encode(table, tokenize("what does carlos play"))
        np.testing.assert_allclose(enc.h_q, enc.token_embs.mean(axis=0))
        np.testing.assert_allclose(span_embed(enc, 0, 3), enc.h_q)
        np.testing.assert_array_equal(span_embed(enc, 2, 2), enc.token_embs[2])

    def test_span_bounds(self, table):
        enc = encode(table, tokenize("what does carlos play"))
        for i, j in [(2, 1), (-1, 0), (0, 4)]:
            with pytest.raises(IndexError):
                span_embed(enc, i, j)

    def test_rows_override(self, table):
        rows = np.ones_like(table.rows)
        enc = encode(table, tokenize("what"), rows=rows)
        np.testing.assert_array_equal(enc.h_q, np.ones(8))

    @settings(max_examples=30, deadline=None)
    @given(perm_seed=st.integers(0, 1000))
    def test_permutation(self, perm_seed):
        table = EmbeddingTable.from_questions(["what position does carlos gomez play"], dim=8, rng=0)
        words = "what position does carlos gomez play".split()
        perm = np.random.default_rng(perm_seed).permutation(len(words))
        a = encode(table, tokenize(" ".join(words)))
        b = encode(table, tokenize(" ".join(words[k] for k in perm)))
        np.testing.assert_allclose(b.h_q, a.h_q, rtol=1e-12, atol=1e-15)
        np.testing.assert_array_equal(b.token_embs, a.token_embs[perm])

    def test_backward_finite_differences(self, table):
        rng = np.random.default_rng(0)
        toks = tokenize("carlos play carlos what zzz")
        gh, gt = rng.normal(size=8), rng.normal(size=(5, 8))

        def f():
            enc = encode(table, toks)
            return float(gh @ enc.h_q + np.sum(gt * enc.token_embs))

        analytic = encode_backward(table, toks, gh, gt)
        assert_grad_close(analytic, numeric_grad(f, table.rows))

    def test_backward_shape_errors(self, table):
        toks = tokenize("carlos play")
        with pytest.raises(ShapeError):
            encode_backward(table, toks, np.zeros(3))
        with pytest.raises(ShapeError):
            encode_backward(table, toks, None, np.zeros((3, 8)))


class TestVocabFile:
    def test_round_trip(self, table, tmp_path):
        table.save_vocab(tmp_path / "vocab.txt")
        back = EmbeddingTable.load_vocab(tmp_path / "vocab.txt", dim=8)
        assert back.tokens == table.tokens

    def test_missing_unk(self, tmp_path):
        (tmp_path / "v.txt").write_text("hello\n")
        with pytest.raises(InputError):
            EmbeddingTable.load_vocab(tmp_path / "v.txt")
