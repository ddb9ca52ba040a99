import math

import numpy as np
import pytest
import torch

from gdmrg.decoder import (
    BOS,
    EOS,
    PAD,
    ReportDecoder,
    Vocab,
    beam_search,
    decoder_forward,
    encode_report,
    generate,
    greedy_decode,
    nll_loss,
    pad_batch,
    render_reports,
    total_objective,
)
from gdmrg.errors import ConfigError, DataError, ShapeError
from gdmrg.labels import ClinicalState
from gdmrg.numcore import DTYPE, finite_diff_check


@pytest.fixture
def vocab():
    return Vocab.build([["the", "heart", "is", "enlarged", "."], ["no", "effusion", "."]])


def _decoder(vocab_size=12, d_mem=6, **kw):
    return ReportDecoder(vocab_size, d_mem=d_mem, d_m=8, heads=2, n_layers=2, max_len=16, **kw).eval()


# ---------------- vocab / encoding ----------------

def test_vocab_layout_and_round_trip(tmp_path, vocab):
    assert vocab.tokens[:7] == ["<pad>", "<bos>", "<eos>", "[POS]", "[NEG]", "[BLA]", "[UNC]"]
    assert Vocab.load(vocab.save(tmp_path / "vocab.txt")).tokens == vocab.tokens
    with pytest.raises(DataError):
        Vocab(["<pad>", "<bos>"])
    with pytest.raises(DataError, match="not in the vocabulary"):
        vocab.word_id("lungs")


def test_encode_report_layout(vocab):
    ids, truncated = encode_report(vocab, [ClinicalState.POS, ClinicalState.BLA], ["no", "effusion", "."], max_len=10)
    assert ids[0] == BOS and ids[-1] == EOS
    assert ids[1:3] == [Vocab.state_id(0), Vocab.state_id(2)]
    assert vocab.render(ids) == "no effusion ."
    assert vocab.render(ids, show_prompt=True) == "[POS] [BLA] no effusion ."
    assert not truncated


def test_encode_report_truncates_words(vocab):
    ids, truncated = encode_report(vocab, [0, 1], ["no", "effusion", "."], max_len=6)
    assert truncated
    assert len(ids) == 6 and ids[-1] == EOS
    with pytest.raises(ConfigError):
        encode_report(vocab, [0] * 5, [], max_len=6)


def test_pad_batch():
    out = pad_batch([[1, 5, 2], [1, 2]])
    assert out.tolist() == [[1, 5, 2], [1, 2, PAD]]


# ---------------- forward ----------------

def test_decoder_is_causal():
    dec = _decoder()
    mem = torch.randn(1, 3, 6, dtype=DTYPE)
    tokens = torch.tensor([[1, 4, 7, 8, 9, 10]])
    base = decoder_forward(tokens, mem, dec)
    changed = tokens.clone()
    changed[0, 3] = 11
    out = decoder_forward(changed, mem, dec)
    torch.testing.assert_close(out[:, :3], base[:, :3], rtol=0, atol=1e-12)
    assert not torch.allclose(out[:, 3:], base[:, 3:])


@pytest.mark.parametrize("seed", range(100))
def test_suffix_changes_never_reach_earlier_positions(seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    dec = _decoder()
    t = int(torch.randint(3, 12, (1,), generator=gen))
    cut = int(torch.randint(1, t, (1,), generator=gen))
    tokens = torch.randint(3, 12, (2, t), generator=gen)
    mem = torch.randn(2, 4, 6, dtype=DTYPE, generator=gen)
    changed = tokens.clone()
    changed[:, cut:] = torch.randint(3, 12, (2, t - cut), generator=gen)
    base = decoder_forward(tokens, mem, dec)
    out = decoder_forward(changed, mem, dec)
    torch.testing.assert_close(out[:, :cut], base[:, :cut], rtol=0, atol=1e-12)


def test_single_token_depends_only_on_bos_and_memory():
    dec = _decoder()
    mem = torch.randn(1, 3, 6, dtype=DTYPE)
    a = dec(torch.tensor([[BOS, 5]]), mem)[:, :1]
    b = dec(torch.tensor([[BOS]]), mem)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_decoder_shape_errors():
    dec = _decoder()
    with pytest.raises(ShapeError):
        dec(torch.ones(1, 3, dtype=torch.long), torch.randn(1, 3, 5, dtype=DTYPE))
    with pytest.raises(ShapeError):
        dec(torch.ones(1, 17, dtype=torch.long), torch.randn(1, 3, 6, dtype=DTYPE))


def test_decoder_gradients():
    dec = _decoder(vocab_size=9)
    mem = torch.randn(2, 3, 6, dtype=DTYPE)
    tokens = torch.randint(1, 9, (2, 6))
    err = finite_diff_check(
        lambda: nll_loss(dec(tokens[:, :-1], mem), tokens[:, 1:]).loss,
        list(dec.parameters()),
        max_entries=3,
    )
    assert err < 1e-4


# ---------------- losses ----------------

def test_uniform_logits_nll_is_log_vocab():
    res = nll_loss(torch.zeros(2, 3, 4, dtype=DTYPE), torch.tensor([[1, 2, 3], [3, 1, PAD]]))
    assert res.loss.item() == pytest.approx(math.log(4), abs=1e-12)
    assert res.n_tokens == 5


def test_all_pad_is_flagged():
    res = nll_loss(torch.randn(1, 3, 4, dtype=DTYPE), torch.zeros(1, 3, dtype=torch.long))
    assert res.empty and res.loss.item() == 0.0


def test_prompt_masking_skips_prompt_targets():
    logits = torch.zeros(1, 4, 5, dtype=DTYPE)
    targets = torch.tensor([[3, 4, 1, 2]])
    logits[0, 2, 1] = 100.0
    logits[0, 3, 2] = 100.0
    assert nll_loss(logits, targets, "prompt_masked", prompt_len=2).loss.item() < 1e-30
    assert nll_loss(logits, targets, "full", prompt_len=2).loss.item() > 0.5
    with pytest.raises(ConfigError):
        nll_loss(logits, targets, "suffix")


def test_total_objective_weights():
    one = torch.tensor(1.0, dtype=DTYPE)
    assert total_objective(one, 2 * one, 3 * one, lambda_cls=0.5, lambda_lm=2.0).item() == pytest.approx(7.5)


# ---------------- decoding ----------------

def _table_step(table):
    def step(seq):
        return np.log(np.asarray(table[tuple(seq)], dtype=np.float64))
    return step


def test_beam_prefers_better_full_sequence_than_greedy():
    # vocab: 0 pad, 1 bos, 2 eos, 3 a, 4 b
    table = {
        (1,): [1e-9, 1e-9, 1e-9, 0.6, 0.4],
        (1, 3): [1e-9, 1e-9, 0.5, 0.25, 0.25],
        (1, 4): [1e-9, 1e-9, 1.0, 1e-9, 1e-9],
        (1, 3, 3): [1e-9, 1e-9, 1.0, 1e-9, 1e-9],
        (1, 3, 4): [1e-9, 1e-9, 1.0, 1e-9, 1e-9],
    }
    step = _table_step(table)
    assert greedy_decode(step, [1], max_len=5) == [1, 3]
    # length-normalized: [a] scores log(.6 * .5) / 2, [b] scores log(.4) / 2
    assert beam_search(step, [1], beam_width=2, max_len=5) == [1, 4]
    assert beam_search(step, [1], beam_width=1, max_len=5) == [1, 3]


def test_finished_hypothesis_does_not_narrow_the_beam():
    calls = []

    def step(seq):
        calls.append(tuple(seq))
        if seq == [1]:
            return np.log([1e-9, 1e-9, 0.3, 0.5, 0.2])
        return np.log([1e-9, 1e-9, 0.1, 0.45, 0.45])

    beam_search(step, [1], beam_width=2, max_len=4)
    assert {(1, 3), (1, 4)} <= set(calls)
    assert sum(len(c) == 3 for c in calls) == 2


def _exhaustive_best(step, prefix, max_len):
    # every hypothesis ends in EOS or stops at max_len
    best, best_score = None, -np.inf
    stack = [(list(prefix), 0.0)]
    while stack:
        seq, logp = stack.pop()
        for tok, lp in enumerate(step(seq)):
            cand = seq + [tok]
            score = logp + lp
            if tok == EOS or len(cand) == max_len:
                norm = score / (len(cand) - len(prefix))
                if norm > best_score:
                    best, best_score = cand, norm
            else:
                stack.append((cand, score))
    return best[:-1] if best[-1] == EOS else best


@pytest.mark.parametrize("seed", range(20))
def test_full_width_beam_matches_exhaustive_search(seed):
    vocab_size = 5
    gen = np.random.default_rng(seed)
    logits = {}

    def step(seq):
        key = tuple(seq)
        if key not in logits:
            z = gen.normal(size=vocab_size) * 2
            logits[key] = z - np.log(np.exp(z).sum())
        return logits[key]

    for max_len in (2, 3):
        expected = _exhaustive_best(step, [1], max_len)
        assert beam_search(step, [1], beam_width=vocab_size, max_len=max_len) == expected


@pytest.mark.parametrize("seed", range(20))
def test_width_one_beam_is_greedy(seed):
    gen = np.random.default_rng(100 + seed)
    table = {}

    def step(seq):
        return table.setdefault(tuple(seq), np.log(gen.dirichlet(np.ones(5))))

    assert beam_search(step, [1], beam_width=1, max_len=8) == greedy_decode(step, [1], max_len=8)


def test_beam_respects_max_len():
    step = lambda seq: np.log(np.array([1e-9, 1e-9, 1e-9, 0.9, 0.1]))
    out = beam_search(step, [1], beam_width=3, max_len=4)
    assert len(out) == 4 and EOS not in out
    with pytest.raises(ConfigError):
        beam_search(step, [1], beam_width=0, max_len=4)


def test_generate_returns_prompt_then_words(vocab):
    dec = _decoder(vocab_size=len(vocab))
    states = [ClinicalState.POS, ClinicalState.NEG, ClinicalState.BLA]
    seq = generate(dec, torch.randn(3, 6, dtype=DTYPE), states, beam_width=2, max_len=10)
    assert seq[:3] == [Vocab.state_id(s) for s in states]
    assert BOS not in seq and EOS not in seq
    assert len(seq) <= 9
    mem = torch.zeros(3, 6, dtype=DTYPE)
    assert generate(dec, mem, states, 2, 10) == generate(dec, mem, states, 2, 10)


def test_render_reports_hides_prompt(vocab):
    ids = [Vocab.state_id(0), vocab.word_id("no"), vocab.word_id("effusion")]
    assert render_reports(vocab, [ids]) == ["no effusion"]
    assert render_reports(vocab, [ids], show_prompt=True) == ["[POS] no effusion"]
