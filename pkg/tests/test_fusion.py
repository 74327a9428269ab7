import numpy as np
import pytest

from enfuse.errors import InvalidArgumentError
from enfuse.features import FeatureMatrix
from enfuse.fusion import (
    apply_transform,
    concat_features,
    elementwise_fuse,
    fit_ica,
    fit_lda,
    fit_pca,
    fuse_pipeline,
    load_transform,
    save_transform,
)


def fm(data, labels=None):
    return FeatureMatrix(np.asarray(data, dtype=float), labels=labels)


class TestConcat:
    def test_shapes(self):
        rng = np.random.default_rng(0)
        fused = concat_features([fm(rng.random((6, 3))), fm(rng.random((6, 5)))])
        assert fused.matrix.data.shape == (6, 8)

    def test_single_part_identity(self):
        rng = np.random.default_rng(1)
        x = rng.random((4, 3))
        fused = concat_features([fm(x)])
        assert np.array_equal(fused.matrix.data, x)

    def test_source_map_tiles(self):
        rng = np.random.default_rng(2)
        parts = [fm(rng.random((5, 3))), fm(rng.random((5, 5))), fm(rng.random((5, 2)))]
        fused = concat_features(parts, names=["a", "b", "c"])
        assert fused.source_map == [("a", 0, 3), ("b", 3, 8), ("c", 8, 10)]

    def test_row_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            concat_features([fm(np.zeros((4, 2))), fm(np.zeros((5, 2)))])

    def test_elementwise(self):
        a, b = fm([[1.0, 2.0]] * 2), fm([[3.0, 4.0]] * 2)
        assert np.array_equal(elementwise_fuse([a, b], "add").data, [[4, 6], [4, 6]])
        assert np.array_equal(elementwise_fuse([a, b], "mul").data, [[3, 8], [3, 8]])


class TestPca:
    def test_diagonal_line(self):
        t_vals = np.linspace(-1, 1, 20)
        x = fm(np.stack([t_vals, t_vals], axis=1) + 0.001 * np.random.default_rng(0).normal(size=(20, 2)))
        t = fit_pca(x, 1)
        direction = t.components[:, 0]
        assert abs(abs(direction @ np.array([1, 1]) / np.sqrt(2)) - 1) < 1e-2

    def test_isotropic_ratios(self):
        rng = np.random.default_rng(3)
        x = fm(rng.normal(size=(2000, 4)))
        t = fit_pca(x, 4)
        assert np.all(np.abs(t.explained_variance_ratio - 0.25) < 0.025)

    def test_uncorrelated_output(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(size=(50, 5)) @ rng.normal(size=(5, 5))
        t = fit_pca(fm(raw), 4)
        out = apply_transform(t, fm(raw)).data
        corr = np.corrcoef(out.T)
        off = corr - np.diag(np.diag(corr))
        assert np.max(np.abs(off)) < 1e-8

    def test_ratios_nonincreasing_and_sum(self):
        rng = np.random.default_rng(5)
        x = fm(rng.normal(size=(30, 6)) * np.array([5, 4, 3, 2, 1, 0.5]))
        t = fit_pca(x, 6)
        r = t.explained_variance_ratio
        assert np.all(np.diff(r) <= 1e-12)
        assert r.sum() <= 1 + 1e-9
        assert r.sum() == pytest.approx(1.0, abs=1e-9)

    def test_full_rank_pca_is_isometry(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(20, 4))
        t = fit_pca(fm(raw), 4)
        out = apply_transform(t, fm(raw)).data
        scaled = (raw - t.mean) / t.std
        d_in = np.linalg.norm(scaled[:, None] - scaled[None], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=2)
        assert np.max(np.abs(d_in - d_out)) < 1e-8


class TestIca:
    def _mixed_sources(self, n=2000, seed=0):
        rng = np.random.default_rng(seed)
        t_axis = np.linspace(0, 40, n)
        s1 = np.sin(t_axis)
        s2 = rng.uniform(-1, 1, n)
        sources = np.stack([s1, s2], axis=1)
        mixing = np.array([[1.0, 0.5], [0.5, 1.0]])
        return sources, sources @ mixing.T

    def test_source_recovery(self):
        sources, mixed = self._mixed_sources()
        t = fit_ica(fm(mixed), 2, seed=1)
        recovered = apply_transform(t, fm(mixed)).data
        corr = np.abs(np.corrcoef(recovered.T, sources.T)[:2, 2:])
        # best assignment up to permutation/sign
        best = max(corr[0, 0] * corr[1, 1], corr[0, 1] * corr[1, 0])
        assert best > 0.99 ** 2
        assert max(min(corr[0, 0], corr[1, 1]), min(corr[0, 1], corr[1, 0])) > 0.99

    def test_unmixing_rows_unit_norm(self):
        _, mixed = self._mixed_sources(seed=2)
        t = fit_ica(fm(mixed), 2, seed=1)
        assert np.allclose(np.linalg.norm(t.unmixing, axis=1), 1.0, atol=1e-9)

    def test_gaussian_degenerate_ok(self):
        rng = np.random.default_rng(7)
        x = fm(rng.normal(size=(500, 3)))
        t = fit_ica(x, 3, seed=0)
        assert t.components.shape == (3, 3)

    def test_component_count(self):
        rng = np.random.default_rng(8)
        x = fm(rng.normal(size=(60, 10)))
        t = fit_ica(x, 4, seed=0)
        assert apply_transform(t, x).data.shape == (60, 4)

    def test_rank_deficient_reduces_k(self):
        rng = np.random.default_rng(9)
        base = rng.normal(size=(40, 2))
        x = fm(np.concatenate([base, base @ rng.normal(size=(2, 3))], axis=1))
        with pytest.warns(UserWarning, match="rank"):
            t = fit_ica(x, 4, seed=0)
        assert t.out_dim <= 2


class TestLda:
    def _two_classes(self, seed=0):
        rng = np.random.default_rng(seed)
        a = rng.normal([0, 0], 0.3, size=(30, 2))
        b = rng.normal([4, 4], 0.3, size=(30, 2))
        x = np.concatenate([a, b])
        y = np.array([0] * 30 + [1] * 30)
        return fm(x, labels=y)

    def test_separation(self):
        x = self._two_classes()
        t = fit_lda(x, 1)
        out = apply_transform(t, x).data.ravel()
        a, b = out[:30], out[30:]
        assert max(a.min(), b.min()) > min(a.max(), b.max()) or \
            max(b.min(), a.min()) > min(b.max(), a.max())
        assert (a.max() < b.min()) or (b.max() < a.min())

    def test_k_capped_at_classes_minus_one(self):
        rng = np.random.default_rng(1)
        x = fm(rng.normal(size=(30, 5)), labels=rng.integers(0, 3, 30))
        with pytest.raises(InvalidArgumentError):
            fit_lda(x, 3)
        t = fit_lda(x, 2)
        assert t.out_dim == 2

    def test_label_dependence(self):
        x = self._two_classes()
        t1 = fit_lda(x, 1)
        permuted = FeatureMatrix(x.data, labels=np.roll(x.labels, 17))
        t2 = fit_lda(permuted, 1)
        assert not np.allclose(t1.components, t2.components)

    def test_three_class_shape(self):
        rng = np.random.default_rng(2)
        x = fm(rng.normal(size=(45, 6)), labels=np.repeat([0, 1, 2], 15))
        t = fit_lda(x, 2)
        out = apply_transform(t, x)
        assert out.data.shape == (45, 2)


class TestApplyAndPipeline:
    def test_apply_deterministic(self):
        rng = np.random.default_rng(3)
        x = fm(rng.normal(size=(25, 6)))
        t = fit_pca(x, 3)
        a = apply_transform(t, x).data
        b = apply_transform(t, x).data
        assert np.array_equal(a, b)

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        t = fit_pca(fm(rng.normal(size=(10, 4))), 2)
        with pytest.raises(InvalidArgumentError):
            apply_transform(t, fm(rng.normal(size=(10, 5))))

    def test_pipeline_shapes(self):
        rng = np.random.default_rng(5)
        labels = np.repeat([0, 1, 2], 10)
        parts = [fm(rng.normal(size=(30, 16)), labels=labels) for _ in range(6)]
        fused, t = fuse_pipeline(parts, "concat+ica")
        assert fused.matrix.data.shape == (30, min(29, 128, 96))
        assert t.kind == "ICA"

    def test_concat_only(self):
        rng = np.random.default_rng(6)
        parts = [fm(rng.normal(size=(10, 4))), fm(rng.normal(size=(10, 6)))]
        fused, t = fuse_pipeline(parts, "concat-only")
        assert fused.matrix.data.shape == (10, 10)
        assert t.kind == "Identity"

    def test_no_test_time_refit(self):
        rng = np.random.default_rng(7)
        train = fm(rng.normal(size=(30, 8)))
        test = fm(rng.normal(loc=3.0, size=(10, 8)))
        t = fit_pca(train, 4)
        fp = t.fit_fingerprint
        out = apply_transform(t, test)
        assert t.fit_fingerprint == fp
        # test rows use the train-fitted mean, so they are far from centered
        assert abs(out.data.mean()) > 0.1

    def test_transform_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        x = fm(rng.normal(size=(20, 5)))
        t = fit_pca(x, 3)
        save_transform(t, tmp_path / "t.bin")
        back = load_transform(tmp_path / "t.bin")
        assert back.kind == "PCA"
        assert np.array_equal(back.components, t.components)
        assert np.array_equal(apply_transform(back, x).data, apply_transform(t, x).data)
