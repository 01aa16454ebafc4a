import itertools
import math

import numpy as np
import pytest
import torch

from benthic_uda.losses import (
    EPS_P,
    DualHeadOutput,
    class_confusion_loss,
    classification_loss,
    combine_objectives,
    domain_confusion_loss,
    domain_discrimination_loss,
    entropy_minimization_loss,
    lambda_schedule,
)

from conftest import autodiff_grad, central_difference_grad, relative_error

LOG2, LOG4, LOG6, LOG12 = (math.log(v) for v in (2, 4, 6, 12))


def from_joint(p_st):
    """DualHeadOutput consistent with a joint distribution: each head is its block renormalized."""
    p_st = torch.as_tensor(np.asarray(p_st), dtype=torch.float64)
    K = p_st.shape[1] // 2
    p_s = p_st[:, :K] / p_st[:, :K].sum(1, keepdim=True).clamp_min(1e-300)
    p_t = p_st[:, K:] / p_st[:, K:].sum(1, keepdim=True).clamp_min(1e-300)
    return DualHeadOutput(p_s, p_t, p_st)


def from_logits(logit_s, logit_t):
    return DualHeadOutput(torch.softmax(logit_s, 1), torch.softmax(logit_t, 1),
                          torch.softmax(torch.cat([logit_s, logit_t], 1), 1))


def uniform(n, K):
    return from_joint(torch.full((n, 2 * K), 1.0 / (2 * K), dtype=torch.float64))


def labels(*ys):
    return torch.tensor(ys, dtype=torch.long)


class TestClassification:
    def test_one_hot_correct(self):
        out = from_joint([[1, 0, 0, 1, 0, 0], [0, 0, 1, 0, 0, 1]])
        out = out._replace(p_s=out.p_st[:, :3], p_t=out.p_st[:, 3:])
        assert classification_loss(out, labels(0, 2), "source").item() == 0.0
        assert classification_loss(out, labels(0, 2), "target").item() == 0.0

    def test_uniform(self):
        assert classification_loss(uniform(4, 6), labels(0, 1, 2, 5)).item() == pytest.approx(LOG6, abs=1e-12)

    def test_hand_values(self):
        p = torch.tensor([[0.8, 0.2], [0.5, 0.5]], dtype=torch.float64)
        out = DualHeadOutput(p, p, torch.cat([p, p], 1) / 2)
        value = classification_loss(out, labels(0, 1))
        assert value.item() == pytest.approx(-(math.log(0.8) + math.log(0.5)) / 2, abs=1e-12)
        assert value.item() == pytest.approx(0.458145, abs=1e-6)

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            classification_loss(uniform(0, 3), labels())

    def test_zero_only_for_one_hot(self):
        p = torch.tensor([[0.999, 0.001]], dtype=torch.float64)
        out = DualHeadOutput(p, p, torch.cat([p, p], 1) / 2)
        assert classification_loss(out, labels(0)).item() > 0


class TestDomainDiscrimination:
    def test_perfect_separation(self):
        src = from_joint([[0.3, 0.7, 0, 0]])
        tgt = from_joint([[0, 0, 0.5, 0.5]])
        assert domain_discrimination_loss(src, tgt).item() == 0.0

    def test_uniform(self):
        assert domain_discrimination_loss(uniform(3, 4), uniform(5, 4)).item() == pytest.approx(2 * LOG2, abs=1e-12)

    def test_hand_values(self):
        src = from_joint([[0.6, 0.3, 0.05, 0.05]])
        tgt = from_joint([[0.15, 0.1, 0.5, 0.25]])
        expected = -math.log(0.9) - math.log(0.75)
        assert domain_discrimination_loss(src, tgt).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.393043, abs=1e-6)


class TestClassConfusion:
    def test_uniform_k2(self):
        assert class_confusion_loss(uniform(2, 2), labels(0, 1)).item() == pytest.approx(LOG4, abs=1e-12)

    def test_even_split(self):
        out = from_joint([[0, 0.5, 0, 0.5]])
        assert class_confusion_loss(out, labels(1)).item() == pytest.approx(LOG2, abs=1e-12)

    def test_grid_minimum_is_even_split(self):
        # mass u on index y, 1-u on y+K; brute grid over u
        us = np.linspace(0.001, 0.999, 999)
        values = [class_confusion_loss(from_joint([[u, 0, 1 - u, 0]]), labels(0)).item() for u in us]
        best = int(np.argmin(values))
        assert us[best] == pytest.approx(0.5, abs=1e-3)
        assert min(values) == pytest.approx(LOG2, abs=1e-9)
        assert all(v >= LOG2 - 1e-12 for v in values)


class TestDomainConfusion:
    def test_uniform(self):
        assert domain_confusion_loss(uniform(3, 5)).item() == pytest.approx(LOG2, abs=1e-12)

    def test_one_block_clipped(self):
        out = from_joint([[0.2, 0.8, 0, 0]])
        assert domain_confusion_loss(out).item() == pytest.approx(-0.5 * math.log(EPS_P), abs=1e-9)
        assert domain_confusion_loss(out).item() == pytest.approx(9.21, abs=5e-3)

    def test_grid_minimum_at_half(self):
        ss = np.linspace(0.001, 0.999, 999)
        values = [domain_confusion_loss(from_joint([[s, 0, 1 - s, 0]])).item() for s in ss]
        assert ss[int(np.argmin(values))] == pytest.approx(0.5, abs=1e-3)
        assert min(values) == pytest.approx(LOG2, abs=1e-9)

    def test_depends_only_on_block_sums(self, rng):
        for _ in range(10):
            a = rng.dirichlet(np.ones(3)) * 0.3
            b = rng.dirichlet(np.ones(3)) * 0.7
            shuffled = np.concatenate([rng.permutation(a), rng.permutation(b)])
            v1 = domain_confusion_loss(from_joint([np.concatenate([a, b])])).item()
            v2 = domain_confusion_loss(from_joint([shuffled])).item()
            assert v1 == pytest.approx(v2, abs=1e-12)


class TestEntropy:
    def test_one_hot_q(self):
        out = from_joint([[0, 0.4, 0, 0, 0.6, 0]])
        assert entropy_minimization_loss(out).item() == 0.0

    def test_uniform_k6(self):
        assert entropy_minimization_loss(uniform(2, 6)).item() == pytest.approx(LOG6, abs=1e-12)

    def test_hand_value(self):
        out = from_joint([[0.5, 0.05, 0.4, 0.05]])
        expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert entropy_minimization_loss(out).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.325083, abs=1e-6)

    @pytest.mark.parametrize("K", [2, 3])
    def test_grid_extremes(self, K):
        step = 0.02
        ticks = np.arange(0, 1 + 1e-9, step)
        values, qs = [], []
        for combo in itertools.product(ticks, repeat=K - 1):
            if sum(combo) > 1 + 1e-9:
                continue
            q = np.array(list(combo) + [max(0.0, 1 - sum(combo))])
            values.append(entropy_minimization_loss(from_joint([np.concatenate([q / 2, q / 2])])).item())
            qs.append(q)
        values = np.array(values)
        assert values.min() == pytest.approx(0.0, abs=1e-12)
        assert np.max(qs[int(np.argmin(values))]) == pytest.approx(1.0)
        # uniform q may fall off the grid for K=3; the grid max approaches log K from below
        assert values.max() <= math.log(K) + 1e-12
        assert values.max() == pytest.approx(math.log(K), abs=2e-3)


class TestLambda:
    # the ramp at p=1 is 2/(1+e^-10)-1 = 0.999909
    @pytest.mark.parametrize("p,expected", [(0.0, 0.0), (1.0, 0.999909), (0.5, 0.986614)])
    def test_values(self, p, expected):
        assert lambda_schedule(p) == pytest.approx(expected, abs=1e-6)

    def test_monotone(self):
        values = [lambda_schedule(p) for p in np.linspace(0, 1, 1000)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_clamped_with_warning(self):
        with pytest.warns(UserWarning, match="clamping"):
            assert lambda_schedule(1.5) == lambda_schedule(1.0)
        with pytest.warns(UserWarning):
            assert lambda_schedule(-0.1) == 0.0


class TestCombined:
    def test_lambda_zero_leaves_class_confusion(self, rng):
        src = from_logits(torch.from_numpy(rng.standard_normal((4, 3))), torch.from_numpy(rng.standard_normal((4, 3))))
        tgt = from_logits(torch.from_numpy(rng.standard_normal((5, 3))), torch.from_numpy(rng.standard_normal((5, 3))))
        y = labels(0, 1, 2, 0)
        obj = combine_objectives(src, y, tgt, 0.0)
        assert obj.extractor.item() == class_confusion_loss(src, y).item()

    def test_uniform_k6(self):
        y = labels(0, 3, 5)
        lam = 0.37
        obj = combine_objectives(uniform(3, 6), y, uniform(4, 6), lam)
        assert obj.classifier.item() == pytest.approx(2 * LOG6 + 2 * LOG2, abs=1e-12)
        assert obj.classifier.item() == pytest.approx(4.969813, abs=1e-6)
        assert obj.extractor.item() == pytest.approx(LOG12 + lam * (LOG2 + LOG6), abs=1e-12)

    def test_source_only_ignores_target(self):
        src = uniform(2, 3)
        obj = combine_objectives(src, labels(0, 1), None, 0.5, use_symmnet=False)
        assert obj.extractor is None
        assert set(obj.terms) == {"cls_s", "cls_t", "class_conf"}
        assert obj.classifier.item() == pytest.approx(2 * math.log(3) + math.log(6), abs=1e-12)

    def test_symmnet_requires_target(self):
        with pytest.raises(ValueError):
            combine_objectives(uniform(2, 3), labels(0, 1), None, 0.5)

    def test_adversarial_tension(self):
        # K=2, one source sample (label 0) and one target sample. Both objectives split into a
        # source-sample part and a target-sample part, so each side is searched on its own logit grid.
        ticks = torch.linspace(-8, 8, 9, dtype=torch.float64)
        grid = torch.cartesian_prod(ticks, ticks, ticks, ticks)
        y = labels(0)
        src_rows, tgt_rows = [], []
        fixed = from_logits(torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))
        for logits in grid:
            out = from_logits(logits[None, :2], logits[None, 2:])
            src_rows.append((classification_loss(out, y, "source") + classification_loss(out, y, "target")
                             + domain_discrimination_loss(out, fixed) - domain_discrimination_loss(fixed, fixed) / 2,
                             class_confusion_loss(out, y)))
            tgt_rows.append((domain_discrimination_loss(fixed, out) - domain_discrimination_loss(fixed, fixed) / 2,
                             domain_confusion_loss(out) + entropy_minimization_loss(out)))
        for rows in (torch.tensor(src_rows), torch.tensor(tgt_rows)):
            cls_obj, ext_obj = rows[:, 0], rows[:, 1]
            best_cls = cls_obj <= cls_obj.min() + 1e-2
            # whatever nearly minimizes the classifier side is far from the extractor optimum
            assert ext_obj[best_cls].min() > ext_obj.min() + 1.5
            assert cls_obj[ext_obj <= ext_obj.min() + 1e-2].min() > cls_obj.min() + 0.5
        # a separable sum cannot reach zero on both sides simultaneously
        total = (torch.tensor(src_rows).sum(1).min() + torch.tensor(tgt_rows).sum(1).min()).item()
        assert total > math.log(2)


class TestProperties:
    ALL = {
        "cls_s": lambda s, y, t: classification_loss(s, y, "source"),
        "cls_t": lambda s, y, t: classification_loss(s, y, "target"),
        "dom_disc": lambda s, y, t: domain_discrimination_loss(s, t),
        "class_conf": lambda s, y, t: class_confusion_loss(s, y),
        "dom_conf": lambda s, y, t: domain_confusion_loss(t),
        "entropy": lambda s, y, t: entropy_minimization_loss(t),
    }

    @pytest.mark.parametrize("name", sorted(ALL))
    def test_gradient_vs_finite_differences(self, name, rng):
        loss = self.ALL[name]
        K = 3
        ls, lt = (torch.from_numpy(rng.standard_normal((4, K))).requires_grad_() for _ in range(2))
        ms, mt = (torch.from_numpy(rng.standard_normal((5, K))).requires_grad_() for _ in range(2))
        y = labels(0, 2, 1, 2)

        def fn():
            return loss(from_logits(ls, lt), y, from_logits(ms, mt))

        tensors = [ls, lt, ms, mt]
        ad = autodiff_grad(fn, tensors)
        fd = central_difference_grad(fn, tensors, step=1e-3)
        assert relative_error(fd, ad) < 1e-4

    @pytest.mark.parametrize("name", sorted(ALL))
    def test_nonnegative_finite_and_batch_invariant(self, name, rng):
        loss = self.ALL[name]
        for _ in range(5):
            s = from_logits(*(torch.from_numpy(rng.standard_normal((3, 4)) * 5) for _ in range(2)))
            t = from_logits(*(torch.from_numpy(rng.standard_normal((2, 4)) * 5) for _ in range(2)))
            y = torch.from_numpy(rng.integers(0, 4, 3))
            value = loss(s, y, t).item()
            assert value >= 0 and math.isfinite(value)
            s2 = DualHeadOutput(*(torch.cat([x, x]) for x in s))
            t2 = DualHeadOutput(*(torch.cat([x, x]) for x in t))
            assert loss(s2, torch.cat([y, y]), t2).item() == pytest.approx(value, rel=1e-12)

    def test_extreme_inputs_stay_finite(self):
        one_block = from_joint([[1.0, 0, 0, 0]])
        for loss in self.ALL.values():
            assert math.isfinite(loss(one_block, labels(1), one_block).item())
