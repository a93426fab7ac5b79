import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import small_config, small_model
from spikealign.encoders import params_digest
from spikealign.errors import ContractError, DataError, DomainError
from spikealign.finetune import (LabelSet, ce_loss, class_probs, classify, evaluate, expanded_labelset,
                                 finetune, finetune_loss, kl_loss, label_embeddings, replaced_labelset,
                                 robustness_suite)
from spikealign.io import TeacherStore
from spikealign.tensor import Tensor, l2_normalize, softmax


def simplex(rng, n, k):
    e = np.exp(rng.normal(size=(n, k)))
    return e / e.sum(axis=1, keepdims=True)


class TestCrossEntropy:
    def test_perfect(self):
        assert ce_loss(Tensor([[1.0, 1e-30]], dtype=np.float64), [[1, 0]]).item() == 0.0

    def test_uniform_ten(self):
        assert ce_loss(Tensor(np.full((1, 10), 0.1)), np.eye(10)[[3]]).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_batch_mean(self, rng):
        y = simplex(rng, 4, 3)
        t = np.eye(3)[[0, 2, 1, 1]]
        expected = -np.mean(np.log(y[np.arange(4), [0, 2, 1, 1]]))
        assert ce_loss(Tensor(y, dtype=np.float64), t).item() == pytest.approx(expected, rel=1e-12)

    def test_class_permutation(self, rng):
        y, t = simplex(rng, 3, 5), np.eye(5)[[0, 4, 2]]
        perm = rng.permutation(5)
        a = ce_loss(Tensor(y, dtype=np.float64), t).item()
        assert ce_loss(Tensor(y[:, perm], dtype=np.float64), t[:, perm]).item() == a

    @pytest.mark.parametrize("target", [[[0.5, 0.5]], [[1, 1]], [[0, 0]]])
    def test_one_hot_required(self, target):
        with pytest.raises(ContractError):
            ce_loss(Tensor([[0.5, 0.5]]), target)

    def test_nonpositive_probability(self):
        with pytest.raises(DomainError):
            ce_loss(Tensor([[1.0, 0.0]]), [[0, 1]])


class TestKL:
    def test_identical_exact_zero(self, rng):
        h = simplex(rng, 3, 4)
        assert kl_loss(h, Tensor(h, dtype=np.float64)).item() == 0.0

    def test_half_half(self):
        assert kl_loss([[1.0, 0.0]], Tensor([[0.5, 0.5]])).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_zeros_identical(self):
        assert kl_loss([[0.0, 1.0]], Tensor([[0.0, 1.0]])).item() == 0.0

    def test_negative_entries(self):
        with pytest.raises(DomainError):
            kl_loss([[1.1, -0.1]], Tensor([[0.5, 0.5]]))

    @settings(deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 6))
    def test_lower_bound(self, seed, k):
        rng = np.random.default_rng(seed)
        h, y = simplex(rng, 3, k), simplex(rng, 3, k)
        assert kl_loss(h, Tensor(y, dtype=np.float64)).item() >= -1e-9

    def test_reductions(self, rng):
        h, y = simplex(rng, 4, 3), simplex(rng, 4, 3)
        t = np.eye(3)[[0, 1, 2, 0]]
        yt = Tensor(y, dtype=np.float64)
        assert abs(finetune_loss(yt, t, h, 0.0).item() - kl_loss(h, yt).item()) <= 1e-9
        lam = 0.7
        both = finetune_loss(yt, t, y, lam).item()
        assert abs(both - lam * ce_loss(yt, t).item()) <= 1e-9


class TestClassify:
    def test_identical_labels_uniform(self, rng):
        labels = l2_normalize(Tensor(np.tile(rng.normal(size=4), (3, 1))))
        p = class_probs(Tensor(rng.normal(size=(2, 4))), labels).data
        np.testing.assert_allclose(p, 1 / 3, rtol=1e-6)

    @given(st.integers(0, 2**31))
    def test_probs_normalised(self, seed):
        rng = np.random.default_rng(seed)
        labels = l2_normalize(Tensor(rng.normal(size=(5, 4))))
        p = class_probs(Tensor(rng.normal(size=(3, 4))), labels, temperature=0.3).data
        np.testing.assert_allclose(p.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)

    @given(st.integers(0, 2**31), st.integers(0, 4))
    def test_duplicate_entry_keeps_original_argmax(self, seed, dup):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(5, 4))
        img = Tensor(rng.normal(size=(3, 4)))
        base = class_probs(img, l2_normalize(Tensor(emb))).data.argmax(axis=1)
        dup_probs = class_probs(img, l2_normalize(Tensor(np.vstack([emb, emb[dup:dup + 1]])))).data
        assert np.array_equal(dup_probs[:, :5].argmax(axis=1), base)

    def test_label_order_permutation(self, rng):
        model, data = small_model()
        imgs = [img for _, img, _ in data.test]
        ls = LabelSet(data.labels)
        _, pred = classify(model, imgs, ls)
        perm = [2, 0, 1]
        _, pred_p = classify(model, imgs, LabelSet(tuple(ls.labels[i] for i in perm)))
        assert [ls.labels[p] for p in pred] == [ls.labels[perm[p]] for p in pred_p]

    def test_needs_two_labels(self):
        model, _ = small_model()
        with pytest.raises(ContractError):
            label_embeddings(model, LabelSet(("dark",)))

    def test_duplicate_labels_rejected(self):
        with pytest.raises(DataError):
            LabelSet(("a", "a"))


def _train(data, n=None):
    return data.train[:n] if n else data.train


class TestFinetune:
    def test_fixed_point(self):
        model, data = small_model(**{"optim.name": "sgd"})
        item = data.train[0]
        ls = LabelSet(data.labels)
        probs, _ = classify(model, [item[1]], ls)
        teacher = TeacherStore("class_probabilities", 3)
        teacher.add(item[0], probs[0] / probs[0].astype(np.float64).sum())
        before = {k: v.data.copy() for k, v in model.state().items()}
        cfg = small_config(**{"optim.name": "sgd", "finetune.lambda": 0.0, "finetune.epochs": 1,
                              "finetune.batch": 1})
        hist = finetune(model, [item], ls, teacher, cfg)
        assert hist[0]["loss"] == pytest.approx(0.0, abs=1e-7)
        # the KL gradient at h == y is O(eps), not exactly zero
        for k, v in model.state().items():
            np.testing.assert_allclose(v.data, before[k], atol=1e-9, rtol=0)

    def test_text_encoder_frozen(self):
        model, data = small_model()
        before = params_digest(model.text_params())
        image_before = params_digest(model.image_params())
        cfg = small_config(**{"finetune.epochs": 2})
        finetune(model, _train(data), LabelSet(data.labels), data.probs_teacher, cfg)
        assert params_digest(model.text_params()) == before
        assert params_digest(model.image_params()) != image_before

    def test_class_count_mismatch(self):
        model, data = small_model()
        teacher = TeacherStore("class_probabilities", 2)
        with pytest.raises(DataError):
            finetune(model, _train(data), LabelSet(data.labels), teacher, small_config())

    def test_missing_probability_record(self):
        model, data = small_model()
        teacher = TeacherStore("class_probabilities", 3)
        with pytest.raises(DataError, match="train0000"):
            finetune(model, _train(data), LabelSet(data.labels), teacher, small_config())

    def test_logs_per_epoch(self):
        model, data = small_model()
        hist = finetune(model, _train(data), LabelSet(data.labels), data.probs_teacher,
                        small_config(**{"finetune.epochs": 3}))
        assert [h["epoch"] for h in hist] == [0, 1, 2]
        assert all(0 <= h["train_acc"] <= 1 and 0 <= h["eval_acc"] <= 1 for h in hist)


class TestRobustness:
    labels = LabelSet(tuple(f"l{i}" for i in range(10)))

    def test_expand_two_doubles_candidates(self):
        ls = expanded_labelset(self.labels, 2, [f"d{i}" for i in range(30)])
        assert len(ls) == 20 and ls.labels[:10] == self.labels.labels

    def test_expand_one_identity(self):
        assert expanded_labelset(self.labels, 1, []) == self.labels

    def test_expand_too_few_distractors(self):
        with pytest.raises(DataError):
            expanded_labelset(self.labels, 3, [f"d{i}" for i in range(19)])

    @pytest.mark.parametrize("p,count", [(0, 0), (20, 2), (25, 3), (40, 4), (80, 8), (100, 10)])
    def test_replacement_count(self, p, count):
        subs = {l: l.upper() for l in self.labels.labels}
        ls = replaced_labelset(self.labels, p, subs, seed=1)
        assert sum(a != b for a, b in zip(ls.labels, self.labels.labels)) == count

    def test_replacement_needs_substitute(self):
        with pytest.raises(DataError):
            replaced_labelset(self.labels, 100, {}, seed=0)

    def test_suite_contracts(self):
        model, data = small_model()
        pixels = model.prepare_images([img for _, img, _ in data.train])
        classes = [c for _, _, c in data.train]
        ls = LabelSet(data.labels)
        base = evaluate(model, pixels, classes, ls)
        recs = robustness_suite(model, pixels, classes, ls, expand=[1, 2, 3, 4], replace=[0, 40, 100],
                                distractors=data.distractors, substitutes=data.substitutes, seeds=[0, 1, 2])
        by = {}
        for r in recs:
            by.setdefault(r["setting"], []).append(r)
        assert by["expand_x1"][0]["accuracy"] == base
        accs = [by[f"expand_x{n}"][0]["accuracy"] for n in (1, 2, 3, 4)]
        assert all(a >= b for a, b in zip(accs, accs[1:]))
        assert [r["accuracy"] for r in by["replace_0"] if r["seed"] != "summary"] == [base] * 3
        summary = by["replace_40"][-1]
        runs = [r["accuracy"] for r in by["replace_40"][:-1]]
        assert summary["seed"] == "summary" and len(runs) == 3
        assert summary["mean"] == pytest.approx(np.mean(runs)) and summary["variance"] == pytest.approx(np.var(runs))
        assert len(by["replace_100"]) == 1
