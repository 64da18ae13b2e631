"""Recurrent cell against a hand-unrolled numpy oracle, plus schedule and wiring."""

import math

import numpy as np
import pytest

from ccrnn.ccgru import (
    CcgruCell,
    OutputProjection,
    Seq2Seq,
    build_cell,
    build_seq2seq,
    ccgru_step,
    decode,
    encode,
    sampling_probability,
)
from ccrnn.cgc import CoupledStructure, IndependentStructure, count_parameters
from ccrnn.graphgen import FactorPair
from ccrnn.tensor import (
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
    mul,
    tsum,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def dense_diffusion(z, e1, e2, thetas):
    a = e1 @ e2.T
    out = z @ thetas[0]
    s = z
    for theta in thetas[1:]:
        s = a @ s
        out = out + s @ theta
    return out


def tiny_cell(rng, n=4, channels=2, beta=3, rank=2, m_layers=1, k_hops=1):
    base = FactorPair(
        e1=Tensor(rng.standard_normal((n, rank)) * 0.5, requires_grad=True),
        e2=Tensor(rng.standard_normal((n, rank)) * 0.5, requires_grad=True),
    )
    return build_cell(channels, beta, m_layers, k_hops, base, True, rng, "cell"), base


class TestCcgruStep:
    def test_matches_hand_rolled_gru(self):
        """M=1 collapses aggregation to the single layer output; unroll by hand."""
        rng = np.random.default_rng(71)
        cell, _ = tiny_cell(rng)
        # Non-trivial biases so the gates are exercised away from sigma(0).
        cell.b_r.data += rng.standard_normal(3) * 0.3
        cell.b_u.data += rng.standard_normal(3) * 0.3
        cell.b_c.data += rng.standard_normal(3) * 0.3

        x = Tensor(rng.standard_normal((4, 2)))
        h = Tensor(rng.standard_normal((4, 3)))
        got = ccgru_step(x, h, cell)

        e1 = cell.structure.base.e1.data
        e2 = cell.structure.base.e2.data

        def gate(stack, z):
            return dense_diffusion(z, e1, e2, [t.data for t in stack.layers[0].thetas])

        xh = np.concatenate([x.data, h.data], axis=-1)
        r = sigmoid(gate(cell.reset, xh) + cell.b_r.data)
        u = sigmoid(gate(cell.update, xh) + cell.b_u.data)
        xc = np.concatenate([x.data, r * h.data], axis=-1)
        c = np.tanh(gate(cell.candidate, xc) + cell.b_c.data)
        want = u * h.data + (1.0 - u) * c
        np.testing.assert_allclose(got.data, want, atol=1e-10)

    def test_station_mismatch_raises(self):
        rng = np.random.default_rng(72)
        cell, _ = tiny_cell(rng)
        with pytest.raises(ShapeError):
            ccgru_step(
                Tensor(rng.standard_normal((5, 2))),
                Tensor(rng.standard_normal((4, 3))),
                cell,
            )

    def test_zero_input_zero_state_stays_zero(self):
        """With zero biases the cell has an exact fixed point at the origin."""
        rng = np.random.default_rng(73)
        cell, _ = tiny_cell(rng)
        h = ccgru_step(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 3))), cell)
        np.testing.assert_array_equal(h.data, np.zeros((4, 3)))


class TestEncodeDecode:
    def test_encoder_consumes_window_stepwise(self):
        rng = np.random.default_rng(81)
        cell, _ = tiny_cell(rng)
        window = rng.standard_normal((5, 4, 2))
        got = encode(window, cell)
        h = Tensor(np.zeros((4, 3)))
        for t in range(5):
            h = ccgru_step(Tensor(window[t]), h, cell)
        np.testing.assert_allclose(got.data, h.data, atol=1e-12)

    def test_decoder_feeds_back_own_projection(self):
        rng = np.random.default_rng(82)
        cell, _ = tiny_cell(rng)
        proj = OutputProjection(
            w=Tensor(rng.standard_normal((3, 2)), requires_grad=True),
            b=Tensor(rng.standard_normal(2), requires_grad=True),
        )
        h0 = Tensor(rng.standard_normal((4, 3)))
        got = decode(h0, 3, cell, proj)

        h = h0
        y = Tensor(np.zeros((4, 2)))  # GO frame
        frames = []
        for _ in range(3):
            h = ccgru_step(y, h, cell)
            y = Tensor(h.data @ proj.w.data + proj.b.data)
            frames.append(y.data)
        np.testing.assert_allclose(got.data, np.stack(frames), atol=1e-10)

    def test_full_teacher_forcing_feeds_targets(self):
        rng = np.random.default_rng(83)
        cell, _ = tiny_cell(rng)
        proj = OutputProjection(
            w=Tensor(rng.standard_normal((3, 2)), requires_grad=True),
            b=Tensor(rng.standard_normal(2), requires_grad=True),
        )
        h0 = Tensor(rng.standard_normal((4, 3)))
        targets = rng.standard_normal((3, 4, 2))
        got = decode(
            h0, 3, cell, proj, targets=targets, teacher_prob=1.0,
            rng=np.random.default_rng(0),
        )

        h = h0
        y = np.zeros((4, 2))
        frames = []
        for q in range(3):
            h = ccgru_step(Tensor(y), h, cell)
            frames.append(h.data @ proj.w.data + proj.b.data)
            y = targets[q]
        np.testing.assert_allclose(got.data, np.stack(frames), atol=1e-10)

    def test_teacher_forcing_requires_targets_and_rng(self):
        rng = np.random.default_rng(84)
        cell, _ = tiny_cell(rng)
        proj = OutputProjection(
            w=Tensor(np.zeros((3, 2)), requires_grad=True),
            b=Tensor(np.zeros(2), requires_grad=True),
        )
        h0 = Tensor(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            decode(h0, 2, cell, proj, teacher_prob=0.5)
        with pytest.raises(ValueError):
            decode(h0, 2, cell, proj, targets=np.zeros((2, 4, 2)), teacher_prob=0.5)

    def test_nonpositive_horizon_rejected(self):
        rng = np.random.default_rng(85)
        cell, _ = tiny_cell(rng)
        proj = OutputProjection(
            w=Tensor(np.zeros((3, 2)), requires_grad=True),
            b=Tensor(np.zeros(2), requires_grad=True),
        )
        with pytest.raises(ValueError):
            decode(Tensor(np.zeros((4, 3))), 0, cell, proj)


class TestSeq2Seq:
    def test_output_shapes(self):
        rng = np.random.default_rng(91)
        base = FactorPair(
            e1=Tensor(rng.standard_normal((4, 2)) * 0.5, requires_grad=True),
            e2=Tensor(rng.standard_normal((4, 2)) * 0.5, requires_grad=True),
        )
        model = build_seq2seq(2, 3, 2, 1, base, rng)
        single = model.forward(rng.standard_normal((5, 4, 2)), horizon=3)
        assert single.shape == (3, 4, 2)
        batched = model.forward(rng.standard_normal((6, 5, 4, 2)), horizon=3)
        assert batched.shape == (6, 3, 4, 2)

    def test_batched_forward_matches_per_sample(self):
        rng = np.random.default_rng(92)
        base = FactorPair(
            e1=Tensor(rng.standard_normal((4, 2)) * 0.5, requires_grad=True),
            e2=Tensor(rng.standard_normal((4, 2)) * 0.5, requires_grad=True),
        )
        model = build_seq2seq(2, 3, 2, 1, base, rng)
        windows = rng.standard_normal((3, 5, 4, 2))
        got = model.forward(windows, horizon=2)
        for b in range(3):
            single = model.forward(windows[b], horizon=2)
            np.testing.assert_allclose(got.data[b], single.data, atol=1e-10)

    def test_gradients_flow_through_whole_unroll(self):
        rng = np.random.default_rng(93)
        base = FactorPair(
            e1=Tensor(rng.standard_normal((3, 2)) * 0.5, requires_grad=True),
            e2=Tensor(rng.standard_normal((3, 2)) * 0.5, requires_grad=True),
        )
        model = build_seq2seq(1, 2, 2, 1, base, rng)
        window = rng.standard_normal((2, 3, 1))
        probe = Tensor(rng.standard_normal((2, 3, 1)))

        def forward():
            return tsum(mul(model.forward(window, horizon=2), probe))

        report = finite_difference_check(forward, model.named_parameters())
        assert report.passed, report.failures()

    def test_frozen_base_receives_no_gradient(self):
        rng = np.random.default_rng(94)
        base = FactorPair(
            e1=Tensor(rng.standard_normal((3, 2)), requires_grad=False),
            e2=Tensor(rng.standard_normal((3, 2)), requires_grad=False),
        )
        model = build_seq2seq(1, 2, 2, 1, base, rng)
        assert not model.encoder.structure.base.e1.requires_grad
        loss = tsum(model.forward(rng.standard_normal((2, 3, 1)), horizon=2))
        grads = backward(loss)
        assert model.encoder.structure.base.e1 not in grads
        assert model.encoder.reset.layers[0].thetas[0] in grads


class TestParameterRegistry:
    def test_census_matches_closed_form(self):
        rng = np.random.default_rng(101)
        n, rank, m, k, d, beta = 7, 3, 3, 2, 2, 4
        base = FactorPair(
            e1=Tensor(rng.standard_normal((n, rank)), requires_grad=True),
            e2=Tensor(rng.standard_normal((n, rank)), requires_grad=True),
        )
        model = build_seq2seq(d, beta, m, k, base, rng)
        graph = 2 * n * rank + (m - 1) * rank * (rank + 1)
        per_gate = (k + 1) * ((d + beta) * beta + (m - 1) * beta * beta) + (n * beta + 1)
        cell = graph + 3 * per_gate + 3 * beta
        want = 2 * cell + beta * d + d
        assert count_parameters(model.named_parameters()) == want

    def test_gate_stacks_share_one_structure_per_cell(self):
        rng = np.random.default_rng(102)
        base = FactorPair(
            e1=Tensor(rng.standard_normal((5, 2)), requires_grad=True),
            e2=Tensor(rng.standard_normal((5, 2)), requires_grad=True),
        )
        model = build_seq2seq(1, 3, 2, 1, base, rng)
        enc = model.encoder
        assert enc.reset.structure is enc.update.structure is enc.candidate.structure
        assert enc.structure is not model.decoder.structure
        # Encoder and decoder start from the same values but train separately.
        np.testing.assert_array_equal(
            enc.structure.base.e1.data, model.decoder.structure.base.e1.data
        )
        assert enc.structure.base.e1 is not model.decoder.structure.base.e1

    def test_uncoupled_variant_swaps_structure_kind(self):
        rng = np.random.default_rng(103)
        n, rank, m = 6, 2, 3
        base = FactorPair(
            e1=Tensor(rng.standard_normal((n, rank)), requires_grad=True),
            e2=Tensor(rng.standard_normal((n, rank)), requires_grad=True),
        )
        coupled = build_seq2seq(1, 3, m, 1, base, np.random.default_rng(1), coupled=True)
        uncoupled = build_seq2seq(1, 3, m, 1, base, np.random.default_rng(1), coupled=False)
        assert isinstance(coupled.encoder.structure, CoupledStructure)
        assert isinstance(uncoupled.encoder.structure, IndependentStructure)
        for pair in uncoupled.encoder.structure.pairs:
            np.testing.assert_array_equal(pair.e1.data, base.e1.data)
        delta = count_parameters(uncoupled.named_parameters()) - count_parameters(
            coupled.named_parameters()
        )
        per_cell = (m - 1) * 2 * n * rank - (m - 1) * rank * (rank + 1)
        assert delta == 2 * per_cell


class TestSamplingSchedule:
    def test_starts_near_one(self):
        assert sampling_probability(0, 2000.0) == pytest.approx(2000.0 / 2001.0)

    def test_halfway_point(self):
        s = 2000.0
        it = round(s * math.log(s))
        assert sampling_probability(it, s) == pytest.approx(0.5, abs=1e-3)

    def test_monotone_decreasing_to_zero(self):
        s = 50.0
        values = [sampling_probability(i, s) for i in range(0, 5000, 100)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert sampling_probability(10_000_000, s) == 0.0

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            sampling_probability(0, 0.0)
        with pytest.raises(ValueError):
            sampling_probability(-1, 10.0)
