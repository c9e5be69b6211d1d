"""Loss, gradient, batch-sampling, and training-loop tests.

Oracles here are deliberately independent implementations: a plain symmetric
InfoNCE, a direct unstabilized transcription of the weighted loss, and
central finite differences for every parameter.
"""

import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from covr_forge.retrieval import Gallery, GalleryEntry, ComposedQuery, rank_of_target
from covr_forge.training import (
    BY_TARGET,
    BY_TRIPLET,
    FusionHead,
    HnNceConfig,
    TrainingBatch,
    TrainingError,
    TrainingRow,
    batch_loss,
    hn_nce_loss,
    hn_nce_weights,
    init_head,
    load_head,
    loss_gradient,
    sample_batches,
    save_head,
    train,
)


def plain_symmetric_infonce(S: np.ndarray, tau: float, alpha: float = 1.0) -> float:
    """Independent InfoNCE oracle (no weighting, direct evaluation)."""
    B = S.shape[0]
    total = 0.0
    for M in (S, S.T):
        for i in range(B):
            num = math.exp(M[i, i] / tau)
            den = alpha * num + sum(math.exp(M[i, j] / tau) for j in range(B) if j != i)
            total += -math.log(num / den)
    return total


def direct_weighted_loss(S: np.ndarray, tau: float, alpha: float, beta: float) -> float:
    """Direct, unstabilized transcription of the loss formula."""
    B = S.shape[0]
    total = 0.0
    for M in (S, S.T):
        for i in range(B):
            C = sum(math.exp(beta * M[i, k] / tau) for k in range(B) if k != i)
            den = alpha * math.exp(M[i, i] / tau)
            for j in range(B):
                if j == i:
                    continue
                w = (B - 1) * math.exp(beta * M[i, j] / tau) / C
                den += math.exp(M[i, j] / tau) * w
            total += -math.log(math.exp(M[i, i] / tau) / den)
    return total


def random_rows(rng, B, d, distinct_targets=True):
    rows = []
    for k in range(B):
        v = rng.standard_normal(d)
        t = rng.standard_normal(d)
        h = rng.standard_normal(d)
        rows.append(
            TrainingRow(
                target_id=f"t{k}" if distinct_targets else f"t{k % 2}",
                visual=v / np.linalg.norm(v),
                text=t / np.linalg.norm(t),
                target=h / np.linalg.norm(h),
            )
        )
    return rows


class TestLoss:
    def test_batch_of_one_is_exactly_zero(self):
        cfg = HnNceConfig(alpha=1.0)
        assert hn_nce_loss(np.array([[0.37]]), cfg) == 0.0

    def test_beta_zero_equals_infonce(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for B in (2, 3, 6):
            S = rng.uniform(-1, 1, size=(B, B))
            cfg = HnNceConfig(beta=0.0)
            assert hn_nce_loss(S, cfg) == pytest.approx(plain_symmetric_infonce(S, cfg.tau), abs=1e-9)

    def test_example_matrix_against_direct_oracle(self):
        S = np.array([[0.9, 0.1], [0.2, 0.8]])
        cfg = HnNceConfig(tau=0.07, alpha=1.0, beta=0.5)
        assert hn_nce_loss(S, cfg) == pytest.approx(direct_weighted_loss(S, 0.07, 1.0, 0.5), abs=1e-9)

    def test_random_matrices_against_direct_oracle(self):
        rng = np.random.Generator(np.random.PCG64(1))
        for _ in range(10):
            B = int(rng.integers(2, 7))
            S = rng.uniform(-1, 1, size=(B, B))
            cfg = HnNceConfig(tau=0.07, alpha=1.0, beta=float(rng.uniform(0, 1.5)))
            assert hn_nce_loss(S, cfg) == pytest.approx(
                direct_weighted_loss(S, cfg.tau, cfg.alpha, cfg.beta), rel=1e-9
            )

    def test_nonnegative_when_alpha_one(self):
        rng = np.random.Generator(np.random.PCG64(2))
        for _ in range(20):
            B = int(rng.integers(1, 8))
            S = rng.uniform(-1, 1, size=(B, B))
            assert hn_nce_loss(S, HnNceConfig(alpha=1.0)) >= 0.0

    def test_non_square_rejected(self):
        with pytest.raises(TrainingError, match="square"):
            hn_nce_loss(np.zeros((2, 3)), HnNceConfig())

    def test_nan_rejected(self):
        S = np.array([[0.5, np.nan], [0.1, 0.5]])
        with pytest.raises(TrainingError, match="NaN"):
            hn_nce_loss(S, HnNceConfig())

    def test_weight_sums(self):
        rng = np.random.Generator(np.random.PCG64(3))
        for _ in range(20):
            B = int(rng.integers(2, 9))
            S = rng.uniform(-1, 1, size=(B, B))
            w_row, w_col = hn_nce_weights(S, HnNceConfig(beta=0.5))
            assert np.allclose(w_row.sum(axis=1), B - 1, atol=1e-9)
            assert np.allclose(w_col.sum(axis=0), B - 1, atol=1e-9)


class TestFusionForward:
    def test_constant_head(self):
        d = 3
        head = FusionHead(
            W1=np.zeros((2 * d, 2 * d)),
            b1=np.zeros(2 * d),
            W2=np.zeros((2 * d, d)),
            b2=np.array([1.0, 0.0, 0.0]),
        )
        for seed in range(3):
            rng = np.random.Generator(np.random.PCG64(seed))
            v = rng.standard_normal(d)
            f = head.forward(v / np.linalg.norm(v), v / np.linalg.norm(v))
            assert np.allclose(f, [1.0, 0.0, 0.0], atol=1e-12)

    def test_identity_like_head_passthrough(self):
        # relu splits x into positive/negative parts; W2 recombines the
        # visual half, so the output is the normalized visual input
        d = 2
        eye = np.eye(2 * d)
        W1 = np.concatenate([eye, -eye], axis=1)  # (2d, 4d)
        W2 = np.zeros((4 * d, d))
        W2[0, 0] = W2[1, 1] = 1.0
        W2[2 * d + 0, 0] = W2[2 * d + 1, 1] = -1.0
        head = FusionHead(W1=W1, b1=np.zeros(4 * d), W2=W2, b2=np.zeros(d))
        v = np.array([0.6, -0.8])
        t = np.array([0.0, 1.0])
        assert np.allclose(head.forward(v, t), v, atol=1e-12)

    def test_output_unit_norm(self):
        rng = np.random.Generator(np.random.PCG64(5))
        head = init_head(8, seed=0)
        for _ in range(10):
            v = rng.standard_normal(8)
            t = rng.standard_normal(8)
            f = head.forward(v / np.linalg.norm(v), t / np.linalg.norm(t))
            assert abs(np.linalg.norm(f) - 1.0) < 1e-9

    def test_shape_mismatch(self):
        head = init_head(4, seed=0)
        with pytest.raises(TrainingError):
            head.forward(np.zeros(3), np.zeros(4))

    def test_zero_vector_output_rejected(self):
        d = 2
        head = FusionHead(W1=np.zeros((4, 4)), b1=np.zeros(4), W2=np.zeros((4, 2)), b2=np.zeros(2))
        with pytest.raises(TrainingError, match="zero vector"):
            head.forward(np.array([1.0, 0.0]), np.array([0.0, 1.0]))


class TestGradients:
    def finite_difference(self, batch, head, cfg, name, eps=1e-4):
        P = head.params()[name]
        grad = np.zeros_like(P)
        it = np.nditer(P, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = P[idx]
            P[idx] = orig + eps
            lp = batch_loss(batch, head, cfg)
            P[idx] = orig - eps
            lm = batch_loss(batch, head, cfg)
            P[idx] = orig
            grad[idx] = (lp - lm) / (2 * eps)
        return grad

    @pytest.mark.parametrize("trial", range(4))
    def test_matches_finite_differences(self, trial):
        rng = np.random.Generator(np.random.PCG64(100 + trial))
        B = int(rng.integers(2, 9))
        d = int(rng.integers(3, 17))
        batch = TrainingBatch(random_rows(rng, B, d))
        head = init_head(d, seed=trial, h_dim=int(rng.integers(4, 20)))
        cfg = HnNceConfig(tau=0.07, alpha=1.0, beta=0.5)
        _, grads = loss_gradient(batch, head, cfg)
        for name in ("W1", "b1", "W2", "b2"):
            fd = self.finite_difference(batch, head, cfg, name)
            # relative to the block's gradient scale; per-entry relative
            # error is dominated by FD truncation noise on tiny entries
            scale = max(float(np.max(np.abs(fd))), 1e-6)
            assert float(np.max(np.abs(grads[name] - fd))) / scale < 1e-4, name

    def test_constant_head_has_zero_upstream_grads(self):
        d = 4
        rng = np.random.Generator(np.random.PCG64(8))
        batch = TrainingBatch(random_rows(rng, 3, d))
        head = init_head(d, seed=0)
        head.W2[:] = 0.0
        head.b2[:] = np.array([1.0, 0, 0, 0])
        _, grads = loss_gradient(batch, head, HnNceConfig())
        assert np.all(grads["W1"] == 0.0) and np.all(grads["b1"] == 0.0)

    def test_gradient_of_mean_loss(self):
        rng = np.random.Generator(np.random.PCG64(9))
        batch = TrainingBatch(random_rows(rng, 4, 6))
        head = init_head(6, seed=1)
        loss, _ = loss_gradient(batch, head, HnNceConfig())
        assert loss == pytest.approx(batch_loss(batch, head, HnNceConfig()), abs=1e-12)


class TestSampleBatches:
    def make_rows(self):
        rng = np.random.Generator(np.random.PCG64(10))
        rows = []
        for t in range(10):
            for _ in range(t % 3 + 1):
                rows.extend(random_rows(rng, 1, 4))
                rows[-1] = TrainingRow(f"target{t}", rows[-1].visual, rows[-1].text, rows[-1].target)
        return rows

    def test_by_target_batch_sizes_and_distinctness(self):
        rows = self.make_rows()
        batches = list(sample_batches(rows, 4, seed=0, mode=BY_TARGET))
        assert [len(b) for b in batches] == [4, 4, 2]
        seen = []
        for b in batches:
            ids = b.target_ids()
            assert len(set(ids)) == len(ids)
            seen.extend(ids)
        assert sorted(seen) == sorted({r.target_id for r in rows})

    def test_by_triplet_can_repeat_targets(self):
        rows = random_rows(np.random.Generator(np.random.PCG64(11)), 8, 4, distinct_targets=False)
        repeated = False
        for batch in sample_batches(rows, 4, seed=1, mode=BY_TRIPLET):
            ids = batch.target_ids()
            repeated = repeated or len(set(ids)) < len(ids)
        assert repeated

    def test_selection_uniform_chi_squared(self):
        base = np.random.Generator(np.random.PCG64(12))
        rows = []
        for i in range(5):
            r = random_rows(base, 1, 4)[0]
            rows.append(TrainingRow("shared", r.visual, r.text, np.eye(4)[i % 4] * 1.0))
        other = random_rows(base, 1, 4)[0]
        rows.append(TrainingRow("other", other.visual, other.text, other.target))
        counts = np.zeros(5)
        for seed in range(10_000):
            for batch in sample_batches(rows, 2, seed=seed, mode=BY_TARGET):
                for row in batch.rows:
                    if row.target_id == "shared":
                        counts[next(i for i, r in enumerate(rows[:5]) if r is row)] += 1
        assert counts.sum() == 10_000
        p = scipy_stats.chisquare(counts).pvalue
        assert p > 0.01

    def test_batch_size_validation(self):
        rows = random_rows(np.random.Generator(np.random.PCG64(13)), 4, 4)
        with pytest.raises(TrainingError):
            list(sample_batches(rows, 1, seed=0))

    def test_deterministic_given_seed(self):
        rows = self.make_rows()
        a = [[r.target_id for r in b.rows] for b in sample_batches(rows, 4, seed=5)]
        b = [[r.target_id for r in b.rows] for b in sample_batches(rows, 4, seed=5)]
        assert a == b


def separable_world(rng, d=16, groups=5, tokens=5, queries_per_target=6):
    """Targets live at normalize(u_g + w_c); queries carry noisy copies of
    u_g (visual) and w_c (text), so composition is required and sufficient."""
    us = [rng.standard_normal(d) for _ in range(groups)]
    ws = [rng.standard_normal(d) for _ in range(tokens)]
    us = [u / np.linalg.norm(u) for u in us]
    ws = [w / np.linalg.norm(w) for w in ws]

    def noisy(center):
        noise = rng.standard_normal(d)
        v = center + 0.3 * noise / np.linalg.norm(noise)
        return v / np.linalg.norm(v)

    rows, eval_rows = [], []
    targets = {}
    for g in range(groups):
        for c in range(tokens):
            tid = f"g{g}c{c}"
            h = us[g] + ws[c]
            targets[tid] = h / np.linalg.norm(h)
            for q in range(queries_per_target):
                row = TrainingRow(tid, noisy(us[g]), noisy(ws[c]), targets[tid])
                (rows if q > 0 else eval_rows).append(row)
    return rows, eval_rows, targets


class TestTrain:
    def test_zero_learning_rate_is_a_no_op(self):
        rng = np.random.Generator(np.random.PCG64(14))
        rows = random_rows(rng, 12, 6)
        cfg = HnNceConfig(learning_rate=0.0, epochs=4, batch_size=4, seed=0)
        before = init_head(6, seed=0, h_dim=cfg.h_dim or 12)
        result = train(rows, 6, cfg)
        for name, param in result.head.params().items():
            assert np.array_equal(param, before.params()[name])
        assert len(set(result.loss_curve)) == 1

    def test_same_seed_bit_identical(self):
        rng = np.random.Generator(np.random.PCG64(15))
        rows = random_rows(rng, 20, 6)
        cfg = HnNceConfig(learning_rate=0.05, epochs=3, batch_size=4, seed=3)
        a = train(rows, 6, cfg)
        b = train(rows, 6, cfg)
        assert a.loss_curve == b.loss_curve
        for name in ("W1", "b1", "W2", "b2"):
            assert np.array_equal(a.head.params()[name], b.head.params()[name])

    def test_loss_decreases_on_separable_task(self):
        rng = np.random.Generator(np.random.PCG64(16))
        rows, _, _ = separable_world(rng)
        cfg = HnNceConfig(learning_rate=0.1, epochs=5, batch_size=8, seed=0)
        curve = train(rows, 16, cfg).loss_curve
        for earlier, later in zip(curve, curve[1:]):
            assert later < earlier

    def test_separable_task_reaches_high_recall(self):
        rng = np.random.Generator(np.random.PCG64(17))
        rows, eval_rows, targets = separable_world(rng)
        cfg = HnNceConfig(learning_rate=0.1, epochs=40, batch_size=8, seed=0)
        head = train(rows, 16, cfg).head
        gallery = Gallery([GalleryEntry(tid, h) for tid, h in sorted(targets.items())])
        hits = 0
        for i, row in enumerate(eval_rows):
            f = head.forward(row.visual, row.text)
            q = ComposedQuery(f"q{i}", f, row.target_id)
            hits += rank_of_target(q, gallery) == 1
        assert hits / len(eval_rows) >= 0.9

    def test_nan_inputs_abort_with_diagnostic(self):
        rng = np.random.Generator(np.random.PCG64(18))
        rows = random_rows(rng, 8, 4)
        bad = rows[3]
        rows[3] = TrainingRow(bad.target_id, bad.visual, bad.text, np.full(4, np.nan))
        cfg = HnNceConfig(learning_rate=0.05, epochs=2, batch_size=4, seed=0)
        with pytest.raises(TrainingError, match="NaN"):
            train(rows, 4, cfg)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        head = init_head(6, seed=4)
        path = tmp_path / "head.ckpt"
        save_head(head, path, meta={"seed": 4})
        loaded, header = load_head(path)
        assert header["dim"] == 6 and header["seed"] == 4
        for name in ("W1", "b1", "W2", "b2"):
            assert np.allclose(loaded.params()[name], head.params()[name], atol=1e-6)

    def test_truncated_checkpoint(self, tmp_path):
        head = init_head(4, seed=0)
        path = tmp_path / "head.ckpt"
        save_head(head, path)
        (tmp_path / "bad.ckpt").write_bytes(path.read_bytes()[:-40])
        with pytest.raises(TrainingError, match="truncated"):
            load_head(tmp_path / "bad.ckpt")
