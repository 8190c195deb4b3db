import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from conftest import fd_relative_error, probe_model
from saco.core import EOS_ID, PAD_ID, SOS_ID
from saco.generator import (
    DecoderState, beam_search, caption_loss, decode_forward, greedy_decode, greedy_decode_batch,
    normalized_log_prob, sample_decode, sample_tokens, sequence_log_prob, teacher_inputs, triplet_repr,
)


@pytest.fixture
def model():
    return probe_model(vocab_size=12)


@pytest.fixture
def fused(model):
    torch.manual_seed(1)
    return model.encode(torch.randn(1, 4, 10, dtype=torch.float64), torch.tensor([1]))


def test_causality(model, fused):
    prefix = torch.tensor([[SOS_ID, 5, 6, 7, 8, 9]])
    base = decode_forward(model.decoder, fused.V_s, fused.s_v, prefix).logits
    for j in range(1, prefix.shape[1]):
        changed = prefix.clone()
        changed[0, j] = 4 if prefix[0, j] != 4 else 10
        out = decode_forward(model.decoder, fused.V_s, fused.s_v, changed).logits
        assert torch.equal(out[:, :j], base[:, :j])
        assert not torch.equal(out[:, j:], base[:, j:])


def test_deterministic_and_normalized(model, fused):
    prefix = torch.tensor([[SOS_ID, 4, 5]])
    a = decode_forward(model.decoder, fused.V_s, fused.s_v, prefix)
    b = decode_forward(model.decoder, fused.V_s, fused.s_v, prefix)
    assert isinstance(a, DecoderState)
    assert torch.equal(a.logits, b.logits)
    assert a.hidden.shape == (1, 3, 8) and a.logits.shape == (1, 3, 12)
    sums = F.softmax(a.logits.float(), -1).sum(-1)
    assert torch.all((sums - 1).abs() <= 1e-6)


def test_prefix_errors(model, fused):
    with pytest.raises(ValueError):
        decode_forward(model.decoder, fused.V_s, fused.s_v, torch.zeros(1, 0, dtype=torch.long))
    with pytest.raises(ValueError):
        decode_forward(model.decoder, fused.V_s, fused.s_v, torch.tensor([[4, 5]]))
    with pytest.raises(ValueError):
        decode_forward(model.decoder, fused.V_s, fused.s_v, torch.tensor([[SOS_ID] + [4] * 30]))


def test_style_token_flag():
    with_style = probe_model(decoder_uses_style_token=True)
    without = probe_model(decoder_uses_style_token=False)
    V_s, s_v = torch.randn(1, 4, 8, dtype=torch.float64), torch.randn(1, 8, dtype=torch.float64)
    assert with_style.decoder.memory(V_s, s_v).shape[-2] == 5
    assert without.decoder.memory(V_s, s_v).shape[-2] == 4


class TestCaptionLoss:
    def test_uniform(self):
        logits = torch.zeros(5, 8, dtype=torch.float64)
        gold = torch.tensor([4, 5, 6, 7, 2])
        assert abs(caption_loss(logits, gold).item() - math.log(8)) <= 1e-9

    def test_one_hot_correct(self):
        gold = torch.tensor([4, 2])
        logits = torch.full((2, 6), -1e4, dtype=torch.float64)
        logits[0, 4] = logits[1, 2] = 0.0
        assert caption_loss(logits, gold).item() == 0.0

    def test_hand_arithmetic(self):
        probs = torch.tensor([[0.5, 0.5, 0, 0], [0.25, 0.25, 0.25, 0.25]], dtype=torch.float64)
        logits = torch.log(probs.clamp_min(1e-300))
        gold = torch.tensor([1, 3])
        expected = (math.log(2) + math.log(4)) / 2
        assert abs(caption_loss(logits, gold).item() - expected) <= 1e-12
        assert abs(expected - 1.0397207708399179) < 1e-15

    def test_pad_excluded(self):
        logits = torch.randn(1, 4, 9, dtype=torch.float64)
        gold = torch.tensor([[5, 2, PAD_ID, PAD_ID]])
        assert torch.isclose(caption_loss(logits, gold), caption_loss(logits[:, :2], gold[:, :2]))

    def test_no_positions(self):
        with pytest.raises(ValueError):
            caption_loss(torch.zeros(2, 5), torch.tensor([PAD_ID, PAD_ID]))

    def test_gradient(self, model, fused):
        gold = torch.tensor([[5, 6, 7, EOS_ID]])
        err = fd_relative_error(lambda: caption_loss(model.decode(model.encode(
            torch.linspace(-1, 1, 40, dtype=torch.float64).reshape(1, 4, 10), torch.tensor([0])), gold).logits,
            gold), model.parameters(), max_coords=8)
        assert err <= 1e-4


class TestTripletRepr:
    def test_identity_mean(self):
        h = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        assert torch.equal(triplet_repr(h, nn.Identity()), torch.tensor([0.5, 0.5]))

    def test_single_step(self):
        h = torch.randn(1, 3)
        assert torch.equal(triplet_repr(h, nn.Identity()), h[0])

    def test_sign_equivariant_linear(self):
        lin = nn.Linear(4, 3, bias=False)
        h = torch.randn(5, 4)
        assert torch.allclose(triplet_repr(-h, lin), -triplet_repr(h, lin))

    def test_permutation_invariant(self, model):
        h = torch.randn(6, 8, dtype=torch.float64)
        perm = torch.randperm(6)
        assert torch.allclose(triplet_repr(h[perm], model.decoder.mlp_tri), triplet_repr(h, model.decoder.mlp_tri))

    def test_mask_ignores_padding(self):
        h = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]]])
        mask = torch.tensor([[True, True, False]])
        assert torch.equal(triplet_repr(h, nn.Identity(), mask), torch.tensor([[0.5, 0.5]]))

    def test_gradient_through_mlp_tri(self, model):
        x = torch.linspace(-1, 1, 40, dtype=torch.float64).reshape(1, 4, 10)
        caps = torch.tensor([[5, 6, EOS_ID]])
        probe = torch.randn(8, dtype=torch.float64)

        def loss():
            f = model.encode(x, torch.tensor([2]))
            return (model.triplet(model.decode(f, caps), caps) * probe).sum()

        assert fd_relative_error(loss, model.decoder.mlp_tri.parameters()) <= 1e-4
        for block in model.decoder.blocks:
            assert fd_relative_error(loss, block.parameters(), max_coords=10) <= 1e-4


class TestDecoding:
    def test_greedy_equals_beam_one(self):
        for seed in range(5):
            model = probe_model(seed=seed)
            f = model.encode(torch.randn(1, 4, 10, dtype=torch.float64), torch.tensor([seed % 3]))
            assert greedy_decode(model.decoder, f.V_s, f.s_v) == beam_search(model.decoder, f.V_s, f.s_v, beam=1)

    def test_greedy_deterministic_and_bounded(self, model, fused):
        a = greedy_decode(model.decoder, fused.V_s, fused.s_v)
        assert a == greedy_decode(model.decoder, fused.V_s, fused.s_v)
        assert 1 <= len(a) <= 30
        assert greedy_decode(model.decoder, fused.V_s, fused.s_v, max_len=3) == a[:3]

    def test_batch_greedy_matches_single(self, model):
        x = torch.randn(3, 4, 10, dtype=torch.float64)
        f = model.encode(x, torch.tensor([0, 1, 2]))
        batch = greedy_decode_batch(model.decoder, f.V_s, f.s_v)
        for i in range(3):
            assert batch[i] == greedy_decode(model.decoder, f.V_s[i : i + 1], f.s_v[i : i + 1])

    def test_zero_temperature_matches_greedy(self, model, fused):
        ids, _ = sample_decode(model.decoder, fused.V_s, fused.s_v, rng_seed=3, temperature=0)
        assert ids == greedy_decode(model.decoder, fused.V_s, fused.s_v)

    def test_sample_log_probs_match_teacher_forcing(self, model, fused):
        ids, logps = sample_decode(model.decoder, fused.V_s, fused.s_v, rng_seed=11)
        assert len(ids) == len(logps) <= 30
        tf = sequence_log_prob(model.decoder, fused.V_s, fused.s_v, ids).item()
        assert abs(sum(logps) - tf) <= 1e-9

    def test_sampling_seeded(self, model, fused):
        a = sample_decode(model.decoder, fused.V_s, fused.s_v, rng_seed=5)
        assert a == sample_decode(model.decoder, fused.V_s, fused.s_v, rng_seed=5)

    def test_multinomial_frequencies(self):
        probs = torch.tensor([0.2, 0.3, 0.5]).expand(10_000, 3)
        draws = sample_tokens(probs, torch.Generator().manual_seed(0))
        freq = np.bincount(draws.numpy(), minlength=3) / 10_000
        np.testing.assert_allclose(freq, [0.2, 0.3, 0.5], atol=0.02)

    def test_beam_never_below_greedy(self):
        for seed in range(8):
            model = probe_model(seed=seed, vocab_size=9)
            f = model.encode(torch.randn(1, 4, 10, dtype=torch.float64), torch.tensor([seed % 3]))
            g = greedy_decode(model.decoder, f.V_s, f.s_v, max_len=8)
            for B in (1, 2, 3):
                b = beam_search(model.decoder, f.V_s, f.s_v, beam=B, max_len=8)
                assert len(b) <= 8
                assert (normalized_log_prob(model.decoder, f.V_s, f.s_v, b)
                        >= normalized_log_prob(model.decoder, f.V_s, f.s_v, g) - 1e-12)


class ToyDecoder(nn.Module):
    """Next-token distributions looked up by prefix; ignores the visual memory."""

    VOCAB = 16

    def __init__(self, table):
        super().__init__()
        self.table = table

    def default(self):
        p = np.zeros(self.VOCAB)
        p[4:] = 1.0
        p[EOS_ID] = 1.0
        return p / p.sum()

    def dist(self, prefix):
        return np.asarray(self.table.get(tuple(prefix), self.default()), dtype=np.float64)

    def forward(self, V_s, s_v, seqs):
        seqs = torch.as_tensor(seqs)
        rows = seqs if seqs.dim() == 2 else seqs.unsqueeze(0)
        out = torch.empty(rows.shape[0], rows.shape[1], self.VOCAB, dtype=torch.float64)
        for b, row in enumerate(rows.tolist()):
            for t in range(len(row)):
                out[b, t] = torch.log(torch.tensor(self.dist(row[1 : t + 1])).clamp_min(1e-300))
        out = out if seqs.dim() == 2 else out[0]
        return DecoderState(out, out)


def toy_table():
    def p(entries):
        v = np.zeros(ToyDecoder.VOCAB)
        for tok, prob in entries.items():
            v[tok] = prob
        return v

    spread = {t: 0.1 for t in range(6, 16)}  # ten tokens at 0.1 each
    table = {
        (): p({4: 0.5, 5: 0.4, EOS_ID: 0.1}),
        (4,): p(spread),
        (5,): p({7: 0.9, 8: 0.1}),
        (5, 7): p({EOS_ID: 0.9, 9: 0.1}),
    }
    for t in range(6, 16):
        # EOS (id 2) wins the tie among ten tokens at 0.1
        table[(4, t)] = p({EOS_ID: 0.1, **{u: 0.1 for u in range(7, 16)}})
    return table


def brute_force_best(decoder, max_len):
    best, best_seq = -math.inf, None
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(ToyDecoder.VOCAB), repeat=length):
            if EOS_ID in seq[:-1] or (length < max_len and seq[-1] != EOS_ID):
                continue
            lp = sum(math.log(max(decoder.dist(seq[:i])[tok], 1e-300)) for i, tok in enumerate(seq))
            if lp / length > best:
                best, best_seq = lp / length, list(seq)
    return best_seq, best


def test_beam_finds_delayed_path():
    dec = ToyDecoder(toy_table())
    V_s, s_v = torch.zeros(1, 1, 1), torch.zeros(1, 1)
    greedy = greedy_decode(dec, V_s, s_v, max_len=3)
    assert greedy == [4, 6, EOS_ID]
    expected, score = brute_force_best(dec, 3)
    assert expected == [5, 7, EOS_ID]
    assert abs(score - math.log(0.4 * 0.9 * 0.9) / 3) < 1e-12
    assert beam_search(dec, V_s, s_v, beam=2, max_len=3) == expected
    assert beam_search(dec, V_s, s_v, beam=1, max_len=3) == greedy


def test_teacher_inputs_shift():
    caps = torch.tensor([[5, 6, EOS_ID]])
    assert teacher_inputs(caps).tolist() == [[SOS_ID, 5, 6]]
