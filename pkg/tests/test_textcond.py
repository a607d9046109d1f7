import numpy as np
import pytest
import torch

from pairflow import textcond
from pairflow.errors import ValidationError, VocabularyError
from pairflow.textcond import TextEncoder, Vocabulary


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="module")
def encoder(vocab):
    torch.manual_seed(0)
    return TextEncoder(vocab, d_text=32, embed_width=16)


def test_tokenize_generate(vocab):
    ids = vocab.tokenize("generate", ["a", "red", "circle"])
    assert ids[0] == vocab.task_id("generate")
    assert [vocab.words[i] for i in ids[1:4]] == ["a", "red", "circle"]
    assert all(i == vocab.pad_id for i in ids[4:])


def test_tokenize_edit(vocab):
    ids = vocab.tokenize("edit", ["remove", "the", "square"])
    assert ids[0] == vocab.task_id("edit")
    assert [vocab.words[i] for i in ids[1:4]] == ["remove", "the", "square"]


def test_out_of_vocabulary_word_names_the_word(vocab):
    with pytest.raises(VocabularyError, match="xyzzy"):
        vocab.tokenize("generate", ["xyzzy"])


def test_unknown_task_rejected(vocab):
    with pytest.raises(ValidationError):
        vocab.tokenize("label", ["a"])


def test_vocab_size_is_closed_and_small(vocab):
    assert 40 <= len(vocab) <= 70


def test_all_pad_sequence_embeds_to_zero(vocab, encoder):
    ids = np.full(textcond.L_MAX, vocab.pad_id, dtype=np.int64)
    out = encoder(torch.from_numpy(ids))
    assert torch.all(out == 0)


def test_padding_does_not_change_non_pad_rows(vocab, encoder):
    a = vocab.tokenize("generate", ["a", "red", "circle"])
    b = vocab.tokenize("generate", ["a", "red", "circle", "and", "a", "blue", "square"])
    ea, eb = encoder(torch.from_numpy(a)), encoder(torch.from_numpy(b))
    assert torch.equal(ea[:4], eb[:4])
    assert torch.all(ea[4:] == 0)


def test_task_routing_is_positional(vocab, encoder):
    g = encoder(torch.from_numpy(vocab.tokenize("generate", ["a", "red", "circle"])))
    e = encoder(torch.from_numpy(vocab.tokenize("edit", ["a", "red", "circle"])))
    assert not torch.equal(g[0], e[0])
    assert torch.equal(g[1:], e[1:])


def test_embedding_gradient_localized_to_used_ids(vocab):
    # finite-difference probe: perturbing an unused table row never moves the
    # output; perturbing a used row does
    torch.manual_seed(1)
    enc = TextEncoder(vocab, d_text=8, embed_width=4)
    ids = torch.from_numpy(vocab.tokenize("generate", ["a", "red", "circle"]))
    used = set(int(i) for i in ids if int(i) != vocab.pad_id)
    unused = next(i for i in range(len(vocab)) if i not in used)
    some_used = next(iter(used))

    def out_sum(table):
        with torch.no_grad():
            old = enc.table.weight.data.clone()
            enc.table.weight.data = table
            val = float(enc(ids).sum())
            enc.table.weight.data = old
        return val

    base = enc.table.weight.data.clone()
    eps = 1e-3
    for idx, expect_move in ((unused, False), (some_used, True)):
        pert = base.clone()
        pert[idx, 0] += eps
        moved = abs(out_sum(pert) - out_sum(base)) > 1e-9
        assert moved == expect_move


def test_null_condition_deterministic_and_shaped(vocab, encoder):
    a = encoder.null_condition()
    b = encoder.null_condition()
    assert torch.equal(a, b)
    assert torch.all(a[1:] == 0)  # zero rows beyond position 0
    assert not torch.all(a[0] == 0)


def test_null_condition_distinct_from_caption_embeddings(vocab, encoder):
    null = encoder.null_condition()
    for word in ("circle", "red", "a", "remove"):
        ids = vocab.tokenize("generate", [word])
        emb = encoder(torch.from_numpy(ids))
        assert not torch.equal(emb, null)


def test_task_preserving_null_tokens(vocab):
    ids = vocab.null_tokens("edit")
    assert ids[0] == vocab.task_id("edit")
    assert vocab.words[ids[1]] == textcond.NULL_TOKEN
    bare = vocab.null_tokens()
    assert vocab.words[bare[0]] == textcond.NULL_TOKEN
    assert all(i == vocab.pad_id for i in bare[1:])


def test_caption_too_long_rejected(vocab):
    with pytest.raises(ValidationError):
        vocab.tokenize("generate", ["a"] * textcond.L_MAX)
