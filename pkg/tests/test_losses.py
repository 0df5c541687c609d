import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crreid.errors import DomainError, NumericError, ShapeError
from crreid.losses import (
    LossWeights,
    PrototypeClassifier,
    VerificationHead,
    id_logits,
    id_loss,
    total_loss,
    verification_loss,
    verification_loss_from_logits,
    verification_probability,
)
from crreid.resolution import EmbeddingLayout, pad_batch


def classifier(dims, num_classes, W=None):
    clf = PrototypeClassifier(EmbeddingLayout(dims), num_classes).double()
    if W is not None:
        with torch.no_grad():
            clf.weight.copy_(torch.as_tensor(W, dtype=torch.float64))
    return clf


def logsumexp_oracle(xs):
    top = max(xs)
    return top + math.log(sum(math.exp(x - top) for x in xs))


class TestIdLogits:
    def test_zero_vector(self):
        clf = classifier((2, 2), 3)
        np.testing.assert_array_equal(id_logits(torch.zeros(4, dtype=torch.float64), clf).detach().numpy(), 0.0)

    def test_padding_hides_second_block(self):
        clf = classifier((1, 1), 2, W=[[1.0, 0.0], [7.0, -9.0]])
        out = id_logits(torch.tensor([3.0, 0.0], dtype=torch.float64), clf)
        np.testing.assert_array_equal(out.detach().numpy(), [3.0, 0.0])

    def test_block_sum_oracle(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(6, 5))
        v1, v2 = rng.normal(size=2), rng.normal(size=2)
        clf = classifier((2, 2, 2), 5, W)
        z = torch.from_numpy(np.concatenate([v1, v2, np.zeros(2)]))
        expected = W[0:2].T @ v1 + W[2:4].T @ v2
        np.testing.assert_allclose(id_logits(z, clf).detach().numpy(), expected, atol=1e-9, rtol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            id_logits(torch.zeros(5), classifier((2, 2), 3))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(1, 6), st.data())
    def test_factorization_property(self, dims, C, data):
        lay = EmbeddingLayout(tuple(dims))
        k = data.draw(st.integers(1, lay.m))
        seed = data.draw(st.integers(0, 2**31 - 1))
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(lay.total_dim, C))
        v = rng.normal(size=lay.total_dim)
        clf = classifier(tuple(dims), C, W)
        z = pad_batch(torch.from_numpy(v)[None], torch.tensor([k]), lay)[0]
        expected = sum(W[lay.offsets[j]:lay.offsets[j + 1]].T @ v[lay.offsets[j]:lay.offsets[j + 1]] for j in range(k))
        np.testing.assert_allclose(id_logits(z, clf).detach().numpy(), expected, atol=1e-9, rtol=0)


class TestIdLoss:
    def test_uniform_logits(self):
        assert abs(float(id_loss(torch.zeros(10, dtype=torch.float64), 3)) - math.log(10)) < 1e-12

    def test_large_margin_goes_to_zero(self):
        logits = torch.tensor([60.0, 0.0, 0.0], dtype=torch.float64)
        assert float(id_loss(logits, 0)) < 1e-20

    def test_logsumexp_oracle(self):
        xs = [1.0, 2.0, 3.0]
        expected = logsumexp_oracle(xs) - xs[2]
        got = float(id_loss(torch.tensor(xs, dtype=torch.float64), 2).detach())
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.4076) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            id_loss(torch.zeros(3), 3)

    def test_batch_is_mean(self):
        logits = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
        expected = 0.5 * (logsumexp_oracle([1, 2, 3]) - 3 + math.log(3))
        assert abs(float(id_loss(logits, [2, 1])) - expected) < 1e-12

    def test_padded_dims_get_no_gradient(self):
        lay = EmbeddingLayout((2, 3, 1))
        clf = classifier(lay.dims, 4)
        v = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
        levels = torch.tensor([1, 2, 3])
        loss = id_loss(id_logits(pad_batch(v, levels, lay), clf), [0, 1, 3])
        loss.backward()
        g = v.grad.numpy()
        assert np.all(g[0, 2:] == 0.0) and np.all(g[1, 5:] == 0.0)
        assert np.all(g[0, :2] != 0.0)


class TestVerification:
    def head(self, dim, hidden=None):
        return VerificationHead(dim, hidden).double()

    def test_equal_inputs_zero_bias_half(self):
        h = self.head(4)
        with torch.no_grad():
            h.hidden.bias.zero_()
            h.out.bias.zero_()
        v = torch.randn(4, dtype=torch.float64)
        assert float(verification_probability(v, v, h).detach()) == 0.5

    def test_hand_traced_one_hidden_unit(self):
        h = self.head(2, hidden=1)
        a, b, c, u, e = 0.7, -0.4, 0.1, 1.5, -0.2
        with torch.no_grad():
            h.hidden.weight.copy_(torch.tensor([[a, b]]))
            h.hidden.bias.fill_(c)
            h.out.weight.fill_(u)
            h.out.bias.fill_(e)
        vi = torch.tensor([1.0, 0.0], dtype=torch.float64)
        vj = torch.tensor([0.0, 1.0], dtype=torch.float64)
        f = u * math.tanh(a * 1 + b * -1 + c) + e
        expected = 1 / (1 + math.exp(-f))
        assert abs(float(verification_probability(vi, vj, h).detach()) - expected) < 1e-9

    def test_saturated_logit_probability_one(self):
        h = self.head(2, hidden=1)
        with torch.no_grad():
            h.out.bias.fill_(60.0)
            h.out.weight.zero_()
        assert float(verification_probability(torch.zeros(2), torch.zeros(2), h.float()).detach()) == pytest.approx(1.0)

    def test_ln2_at_half(self):
        for y in (0.0, 1.0):
            loss = verification_loss_from_logits(torch.zeros(1, dtype=torch.float64), [y])
            assert abs(float(loss.total) - math.log(2)) < 1e-12

    def test_two_pair_oracle(self):
        p = torch.tensor([0.8, 0.3], dtype=torch.float64)
        logits = torch.log(p / (1 - p))
        loss = verification_loss_from_logits(logits, [1.0, 0.0])
        expected = -(math.log(0.8) + math.log(0.7))
        assert abs(float(loss.total) - expected) < 1e-12
        assert abs(float(loss.mean) - expected / 2) < 1e-12
        assert abs(expected - 0.5798) < 1e-4

    def test_perfect_positive_goes_to_zero(self):
        loss = verification_loss_from_logits(torch.tensor([80.0], dtype=torch.float64), [1.0])
        assert float(loss.total) < 1e-30

    def test_empty_pairs(self):
        with pytest.raises(DomainError):
            verification_loss_from_logits(torch.zeros(0), [])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            verification_probability(torch.zeros(4), torch.zeros(3), self.head(4).float())

    def test_loss_through_head(self):
        h = self.head(4)
        vi = torch.randn(3, 4, dtype=torch.float64)
        vj = torch.randn(3, 4, dtype=torch.float64)
        y = [1.0, 0.0, 1.0]
        p = verification_probability(vi, vj, h).detach().numpy()
        expected = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y))
        np.testing.assert_allclose(float(verification_loss(vi, vj, y, h).total.detach()), expected, rtol=1e-12)


class TestTotalLoss:
    def test_default_lambda(self):
        assert total_loss(1.0, 2.0) == 2.0

    def test_lambda_zero(self):
        assert total_loss(0.37, 123.0, LossWeights(0.0)) == 0.37

    def test_chained_anchor(self):
        assert abs(total_loss(0.4076, 0.6931) - 0.7542) < 1e-4

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_raises(self, bad):
        with pytest.raises(NumericError):
            total_loss(bad, 1.0)
        with pytest.raises(NumericError):
            total_loss(1.0, torch.tensor(bad))

    def test_negative_lambda(self):
        with pytest.raises(DomainError):
            LossWeights(-0.1)
