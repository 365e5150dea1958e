import copy
import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import fd_check, module_params
from handslt.errors import ConfigurationError, ShapeError, ValidationError
from handslt.nn_blocks import inject_lora
from handslt.translator import (
    BOS,
    EOS,
    PAD,
    UNK,
    LLMEncoder,
    TokenSequence,
    TranslationDecoder,
    TranslatorConfig,
    Vocabulary,
    beam_search,
    decode,
    greedy_decode,
    length_normalized,
    slt_loss,
    teacher_forcing_batch,
)

TINY = TranslatorConfig(input_dim=6, dim=8, encoder_layers=1, decoder_layers=1, num_heads=2, ffn_dim=16, dropout=0.0)


# -- vocabulary -----------------------------------------------------------------


def test_vocab_round_trip(tmp_path):
    vocab = Vocabulary.build(["the cat sat", "a dog sat"])
    assert len(vocab) == 4 + 5
    ids = vocab.encode("the dog sat", add_bos=True, add_eos=True)
    assert ids[0] == BOS and ids[-1] == EOS
    assert vocab.decode(ids) == "the dog sat"
    vocab.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json").itos == vocab.itos


def test_unknown_token_maps_to_unk():
    vocab = Vocabulary(["a"])
    assert vocab.encode("a zebra") == [4, UNK]


def test_token_sequence_validation():
    TokenSequence([BOS, 5, 6, EOS]).validate(10)
    for bad in ([5, PAD], [5, EOS, 6], [5, BOS], [42]):
        with pytest.raises(ValidationError):
            TokenSequence(bad).validate(10)


def test_teacher_forcing_batch():
    inputs, targets = teacher_forcing_batch([[5, 6], [7]])
    assert inputs.tolist() == [[BOS, 5, 6], [BOS, 7, PAD]]
    assert targets.tolist() == [[5, 6, EOS], [7, EOS, PAD]]


# -- encoder / decoder ------------------------------------------------------------


def test_llm_encoder_shape_and_errors():
    enc = LLMEncoder(TranslatorConfig(input_dim=512, dim=128)).eval()
    y, _ = enc(torch.randn(1, 8, 512))
    assert y.shape == (1, 8, 128)
    with pytest.raises(ConfigurationError):
        enc(torch.randn(1, 8, 500))


def test_llm_encoder_padding_invariance():
    enc = LLMEncoder(TINY).eval()
    x = torch.randn(1, 5, 6)
    y, _ = enc(x)
    xp = torch.cat([x, torch.randn(1, 3, 6) * 30], dim=1)
    mask = torch.tensor([[True] * 5 + [False] * 3])
    yp, _ = enc(xp, mask)
    assert torch.allclose(yp[:, :5], y, atol=1e-5)


def test_llm_encoder_lora_noop_at_init():
    cfg = TranslatorConfig(**{**TINY.__dict__, "lora_rank": 2, "lora_alpha": 4.0})
    plain = LLMEncoder(TINY).eval()
    adapted = copy.deepcopy(plain)
    assert inject_lora(adapted, cfg.lora_config()) == 2
    x = torch.randn(2, 4, 6)
    assert torch.equal(plain(x)[0], adapted(x)[0])


def test_decoder_is_causal():
    dec = TranslationDecoder(12, TINY).eval()
    y = torch.randn(1, 4, 8)
    a = dec(torch.tensor([[BOS, 5, 6, 7]]), y)
    b = dec(torch.tensor([[BOS, 5, 9, 9]]), y)
    assert torch.allclose(a[:, :2], b[:, :2], atol=1e-6)


# -- loss --------------------------------------------------------------------------


def test_uniform_logits_loss():
    loss = slt_loss(torch.zeros(1, 3, 10, dtype=torch.float64), torch.tensor([[4, 5, 6]]))
    assert loss.total.item() == pytest.approx(3 * math.log(10), abs=1e-9)
    assert loss.mean.item() == pytest.approx(math.log(10), abs=1e-9)


def test_confident_logits_loss_near_zero():
    target = torch.tensor([[4, 5, EOS]])
    logits = torch.full((1, 3, 8), -50.0)
    logits[0, torch.arange(3), target[0]] = 50.0
    assert slt_loss(logits, target).total < 1e-6


def test_loss_shift_invariance_and_padding():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 9, generator=g, dtype=torch.float64)
    target = torch.tensor([[4, 5, 6, EOS], [7, EOS, PAD, PAD]])
    base = slt_loss(logits, target)
    shifted = slt_loss(logits + torch.randn(2, 4, 1, generator=g, dtype=torch.float64) * 5, target)
    assert torch.isclose(base.total, shifted.total, atol=1e-9)
    ref = -sum(torch.log_softmax(logits[b, t], -1)[target[b, t]] for b in range(2) for t in range(4)
               if target[b, t] != PAD)
    assert torch.isclose(base.total, ref, atol=1e-12)
    assert torch.isclose(base.mean, ref / 6, atol=1e-12)


def test_loss_length_mismatch():
    with pytest.raises(ShapeError):
        slt_loss(torch.zeros(1, 3, 5), torch.zeros(1, 4, dtype=torch.long))


def test_grad_slt_loss():
    logits = torch.randn(2, 3, 7, dtype=torch.float64, requires_grad=True)
    target = torch.tensor([[4, 5, EOS], [6, EOS, PAD]])
    assert fd_check(lambda: slt_loss(logits, target).total, [logits]) < 1e-4


def test_grad_encoder_decoder_through_loss():
    enc = LLMEncoder(TINY).double()
    dec = TranslationDecoder(9, TINY).double()
    z = torch.randn(2, 4, 6, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True] * 4, [True, True, True, False]])
    prev, gold = teacher_forcing_batch([[4, 5], [6]])

    def loss():
        y, m = enc(z, mask)
        return slt_loss(dec(prev, y, m), gold).mean

    assert fd_check(loss, [z, *module_params(enc), *module_params(dec)], max_coords=12) < 1e-4


# -- decoding -----------------------------------------------------------------------

# vocabulary for the toy models: 0 = a, 1 = b, 2 = eos; bos is id 3 (never emitted)
TOY_BOS, TOY_EOS = 3, 2


def toy_step(table: torch.Tensor):
    """Step function whose next-token log-probs depend only on the last token."""

    def step(prefixes):
        return table[prefixes[:, -1]]

    return step


def brute_force(table, max_len, alpha):
    best, best_score = None, -math.inf
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(3), repeat=n):
            if TOY_EOS in seq[:-1]:
                continue
            if seq[-1] != TOY_EOS and n != max_len:
                continue
            prev, logp = TOY_BOS, 0.0
            for tok in seq:
                logp += table[prev, tok].item()
                prev = tok
            score = length_normalized(logp, n, alpha)
            if score > best_score:
                best, best_score = list(seq), score
    return best, best_score


def trap_table():
    # greedy takes "a" first, but every continuation after "a" is poor;
    # the best sentence is "b b eos"
    p = torch.tensor(
        [
            [0.34, 0.33, 0.33],  # after a
            [0.05, 0.90, 0.05],  # after b
            [0.34, 0.33, 0.33],  # after eos (unused)
            [0.55, 0.45, 0.00],  # after bos
        ],
        dtype=torch.float64,
    )
    p[1] = torch.tensor([0.02, 0.08, 0.90], dtype=torch.float64)
    return p.log()


def test_beam4_recovers_global_optimum_on_trap_model():
    table = trap_table()
    expected, expected_score = brute_force(table, 4, 1.0)
    greedy, _ = greedy_decode(toy_step(table), 1, 4, bos=TOY_BOS, eos=TOY_EOS)[0]
    seq, score = beam_search(toy_step(table), 4, 4, 1.0, bos=TOY_BOS, eos=TOY_EOS)
    assert seq == expected and score == pytest.approx(expected_score, abs=1e-12)
    assert greedy != expected


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), alpha=st.sampled_from([0.0, 0.6, 1.0]), max_len=st.integers(1, 4))
def test_wide_beam_is_exhaustive(seed, alpha, max_len):
    g = torch.Generator().manual_seed(seed)
    table = torch.log_softmax(torch.randn(4, 3, generator=g, dtype=torch.float64) * 2, -1)
    expected, expected_score = brute_force(table, max_len, alpha)
    seq, score = beam_search(toy_step(table), 27, max_len, alpha, bos=TOY_BOS, eos=TOY_EOS)
    assert score == pytest.approx(expected_score, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), beam=st.integers(1, 5), max_len=st.integers(1, 6))
def test_beam_never_scores_below_greedy(seed, beam, max_len):
    g = torch.Generator().manual_seed(seed)
    table = torch.log_softmax(torch.randn(4, 3, generator=g, dtype=torch.float64) * 2, -1)
    gseq, glogp = greedy_decode(toy_step(table), 1, max_len, bos=TOY_BOS, eos=TOY_EOS)[0]
    _, score = beam_search(toy_step(table), beam, max_len, 1.0, bos=TOY_BOS, eos=TOY_EOS)
    assert score >= length_normalized(glogp, len(gseq), 1.0) - 1e-12


def exhaustive_beam(step_fn, beam_size, max_len, alpha, bos, eos):
    """Beam search that always runs to max_len, as the reference for early stopping."""
    active, finished = [([], 0.0)], []
    for step in range(max_len):
        logp = step_fn(torch.tensor([[bos, *q] for q, _ in active])).to(torch.float64)
        cand = (torch.tensor([sc for _, sc in active], dtype=torch.float64)[:, None] + logp).flatten()
        k = min(beam_size, int(torch.isfinite(cand).sum()))
        top_scores, top_idx = cand.topk(k)
        nxt = []
        for sc, idx in zip(top_scores.tolist(), top_idx.tolist()):
            q = active[idx // logp.shape[-1]][0] + [idx % logp.shape[-1]]
            (finished if q[-1] == eos or step == max_len - 1 else nxt).append((q, sc))
        active = nxt
        if not active:
            break
    finished.extend(greedy_decode(step_fn, 1, max_len, bos, eos))
    return max(finished, key=lambda f: length_normalized(f[1], len(f[0]), alpha))


@settings(max_examples=80, deadline=None)
@given(
    seed=st.integers(0, 100_000),
    beam=st.integers(1, 6),
    max_len=st.integers(1, 12),
    alpha=st.sampled_from([0.0, 0.5, 1.0, 2.0]),
)
def test_early_stopping_matches_exhaustive_beam(seed, beam, max_len, alpha):
    g = torch.Generator().manual_seed(seed)
    vocab, eos, bos = 6, 0, 5
    table = torch.log_softmax(torch.randn(vocab, vocab, generator=g, dtype=torch.float64) * 3, -1)
    table[:, bos] = -math.inf
    table = torch.log_softmax(table, -1)
    def step(prefixes):
        return table[prefixes[:, -1]]

    ref_seq, ref_sc = exhaustive_beam(step, beam, max_len, alpha, bos, eos)
    seq, score = beam_search(step, beam, max_len, alpha, bos=bos, eos=eos)
    assert seq == ref_seq
    assert score == pytest.approx(length_normalized(ref_sc, len(ref_seq), alpha), abs=1e-12)


def test_decode_beam1_equals_greedy_and_is_deterministic():
    torch.manual_seed(3)
    dec = TranslationDecoder(10, TINY).eval()
    y = torch.randn(3, 5, 8)
    greedy = decode(dec, y, mode="greedy", max_len=6)
    assert decode(dec, y, mode="beam", beam_size=1, max_len=6) == greedy
    assert decode(dec, y, mode="beam", beam_size=3, max_len=6) == decode(dec, y, mode="beam", beam_size=3, max_len=6)


def test_decode_never_emits_pad_or_bos():
    torch.manual_seed(4)
    dec = TranslationDecoder(6, TINY).eval()
    with torch.no_grad():
        dec.out.bias[PAD] = 100.0
        dec.out.bias[BOS] = 100.0
    for seq in decode(dec, torch.randn(2, 3, 8), mode="beam", beam_size=2, max_len=5):
        assert PAD not in seq and BOS not in seq


def test_max_len_one_gives_single_token():
    torch.manual_seed(5)
    dec = TranslationDecoder(10, TINY).eval()
    y = torch.randn(2, 3, 8)
    for mode in ("greedy", "beam"):
        assert all(len(s) == 1 for s in decode(dec, y, mode=mode, max_len=1))


def test_invalid_beam_size():
    dec = TranslationDecoder(10, TINY)
    with pytest.raises(ConfigurationError):
        decode(dec, torch.randn(1, 3, 8), beam_size=0)
    with pytest.raises(ConfigurationError):
        beam_search(lambda p: torch.zeros(len(p), 3), 0, 3)
