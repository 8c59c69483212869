import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stdaffect.datamodel import FrameRecord, SubjectSequence
from stdaffect.features import (
    PcaModel,
    WindowBatch,
    WindowConfig,
    fuse,
    interpolate_gaps,
    make_windows,
    pca_fit,
    pca_inverse,
    pca_transform,
    standardize_global,
    standardize_per_subject,
    window_frame_indices,
)

from conftest import make_sequence

# -- PCA ---------------------------------------------------------------------


def test_pca_rank_deficient_plane(rng):
    basis = rng.normal(size=(2, 5))
    X = rng.normal(size=(200, 2)) @ basis + rng.normal(size=5)
    model = pca_fit(X, 2)
    recon = pca_inverse(model, pca_transform(model, X))
    assert np.abs(recon - X).max() < 1e-10


def test_pca_full_rank_round_trip(rng):
    X = rng.normal(size=(50, 8)) * np.arange(1, 9)
    model = pca_fit(X, 8, sample_fraction=1.0)
    recon = pca_inverse(model, pca_transform(model, X))
    assert np.linalg.norm(recon - X) / np.linalg.norm(X) < 1e-8


def test_pca_isotropic_variances_match_eigensolver(rng):
    X = rng.normal(size=(20000, 10))
    model = pca_fit(X, 3)
    eig = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1][:3]
    np.testing.assert_allclose(model.explained_variance, eig, rtol=1e-10)
    ev = model.explained_variance
    assert ev.max() / ev.min() < 1.1


def test_pca_invariants(rng):
    model = pca_fit(rng.normal(size=(100, 12)) * rng.uniform(0.5, 3, 12), 6, sample_fraction=0.5, seed=3)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(6), atol=1e-8)
    assert np.all(np.diff(model.explained_variance) <= 0)
    pivots = np.abs(model.components).argmax(axis=1)
    assert np.all(model.components[np.arange(6), pivots] > 0)


def test_pca_too_many_components(rng):
    with pytest.raises(ValueError, match="maximum is 9"):
        pca_fit(rng.normal(size=(100, 20)), 10, sample_fraction=0.1)


def test_pca_subsample_is_seeded(rng):
    X = rng.normal(size=(500, 6))
    a = pca_fit(X, 3, sample_fraction=0.2, seed=1)
    b = pca_fit(X, 3, sample_fraction=0.2, seed=1)
    c = pca_fit(X, 3, sample_fraction=0.2, seed=2)
    assert np.array_equal(a.components, b.components)
    assert not np.allclose(a.mean, c.mean)


def test_pca_transform_examples(rng):
    model = pca_fit(rng.normal(size=(60, 5)), 3)
    assert np.allclose(pca_transform(model, model.mean), 0.0)
    np.testing.assert_allclose(pca_transform(model, model.mean + model.components[0]), [[1, 0, 0]], atol=1e-12)
    rows = rng.normal(size=(7, 5))
    oracle = np.array([[sum((r[d] - model.mean[d]) * c[d] for d in range(5)) for c in model.components] for r in rows])
    np.testing.assert_allclose(pca_transform(model, rows), oracle, atol=1e-10)
    with pytest.raises(ValueError):
        pca_transform(model, rng.normal(size=(2, 4)))


def test_pca_csv_round_trip(tmp_path, rng):
    model = pca_fit(rng.normal(size=(30, 4)), 2)
    model.save(tmp_path / "pca.csv")
    back = PcaModel.load(tmp_path / "pca.csv")
    assert np.array_equal(back.components, model.components)
    assert np.array_equal(back.mean, model.mean)
    assert np.array_equal(back.explained_variance, model.explained_variance)


# -- standardization ---------------------------------------------------------


def test_standardize_constant_dimension():
    X = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    out = standardize_per_subject(X)
    assert np.all(out[:, 0] == 0)


def test_standardize_hand_moments():
    x = np.array([[1.0], [2.0], [3.0]])
    assert np.std(x) == pytest.approx(np.sqrt(2 / 3))
    out = standardize_per_subject(x)
    assert out.mean() == pytest.approx(0, abs=1e-15)
    assert out.std() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(out.ravel(), [-np.sqrt(1.5), 0, np.sqrt(1.5)])


def test_standardize_shift_invariance(rng):
    X = rng.normal(size=(40, 6))
    np.testing.assert_allclose(standardize_per_subject(X), standardize_per_subject(X + 7.5), atol=1e-12)


def test_standardize_uses_valid_frames_only():
    X = np.array([[1.0], [2.0], [3.0], [100.0]])
    out = standardize_per_subject(X, valid=[True, True, True, False])
    np.testing.assert_allclose(out[:3].ravel(), [-np.sqrt(1.5), 0, np.sqrt(1.5)])


subject = arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)),
                 elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False))


@given(subject, st.floats(0.1, 10), st.floats(-50, 50))
@settings(max_examples=200)
def test_standardize_invariants(X, a, b):
    out = standardize_per_subject(X)
    std = X.std(axis=0)
    live = std > 1e-3
    assert np.all(np.abs(out[:, live].mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out[:, live].var(axis=0) - 1) < 1e-6)
    np.testing.assert_allclose(standardize_per_subject(a * X + b)[:, live], out[:, live], atol=1e-9)


def test_global_single_subject_matches_per_subject(rng):
    X = rng.normal(size=(30, 4))
    np.testing.assert_allclose(standardize_global([X])[0], standardize_per_subject(X), atol=1e-14)


def test_global_all_constant():
    outs = standardize_global([np.ones((4, 3)), np.ones((6, 3))])
    assert all(np.all(o == 0) for o in outs)


def test_global_matches_single_pass_oracle(rng):
    A = rng.normal(2, 3, size=(25, 3))
    B = rng.normal(-1, 0.5, size=(40, 3))
    n, s1, s2 = 0, np.zeros(3), np.zeros(3)
    for row in itertools.chain(A, B):
        n += 1
        s1 += row
        s2 += row * row
    mean = s1 / n
    std = np.sqrt(s2 / n - mean ** 2)
    outA, outB = standardize_global([A, B])
    np.testing.assert_allclose(outA, (A - mean) / std, atol=1e-10)
    np.testing.assert_allclose(outB, (B - mean) / std, atol=1e-10)


# -- interpolation -----------------------------------------------------------


def test_interpolation_fills_linearly():
    seq = make_sequence("A", [10, 14], value_fn=lambda i: [0.0] if i == 10 else [4.0])
    (seg,) = interpolate_gaps(seq)
    assert [f.frame_index for f in seg.frames] == [10, 11, 12, 13, 14]
    assert [f.image_feature[0] for f in seg.frames] == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert [f.interpolated for f in seg.frames] == [False, True, True, True, False]


def test_interpolation_keeps_labels_of_invalid_frames():
    frames = [
        FrameRecord("A", 0, valid=True, image_feature=np.array([0.0])),
        FrameRecord("A", 1, valid=False, expression=4, valence=0.5, arousal=0.2),
        FrameRecord("A", 2, valid=True, image_feature=np.array([2.0])),
    ]
    (seg,) = interpolate_gaps(SubjectSequence("A", frames))
    assert seg.frames[1].valid and seg.frames[1].expression == 4
    assert seg.frames[1].image_feature[0] == 1.0


def test_long_gap_splits():
    seq = make_sequence("A", list(range(0, 10)) + list(range(41, 50)))
    segs = interpolate_gaps(seq)
    assert len(segs) == 2
    assert segs[0].frames[-1].frame_index == 9 and segs[1].frames[0].frame_index == 41
    # a 30-frame gap is still filled
    assert len(interpolate_gaps(make_sequence("A", [0, 31]))) == 1


def test_no_gaps_identity():
    seq = make_sequence("A", range(20))
    (seg,) = interpolate_gaps(seq)
    assert [f.frame_index for f in seg.frames] == list(range(20))
    assert all(a is b for a, b in zip(seg.frames, seq.frames))


def test_leading_trailing_invalid_dropped():
    seq = make_sequence("A", range(6), valid=[False, True, True, False, True, False])
    (seg,) = interpolate_gaps(seq)
    assert [f.frame_index for f in seg.frames] == [1, 2, 3, 4]


@given(st.lists(st.booleans(), min_size=1, max_size=120), st.integers(1, 40))
@settings(max_examples=100)
def test_interpolation_idempotent(mask, max_gap):
    seq = make_sequence("A", range(len(mask)), valid=mask)
    once = interpolate_gaps(seq, max_gap)
    twice = [s for seg in once for s in interpolate_gaps(seg, max_gap)]
    assert len(once) == len(twice)
    for a, b in zip(once, twice):
        assert [f.frame_index for f in a.frames] == [f.frame_index for f in b.frames]
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.image_feature, fb.image_feature)


# -- fusion and windows ------------------------------------------------------


@pytest.mark.parametrize("d_img, d_aud, expected", [(300, 300, 600), (512, 300, 812)])
def test_fuse_dims(d_img, d_aud, expected):
    assert fuse(np.zeros(d_img), np.ones(d_aud)).shape == (expected,)


def test_fuse_without_audio():
    x = np.arange(4.0)
    assert np.array_equal(fuse(x, np.empty(0)), x)
    assert np.array_equal(fuse(x, None), x)


def test_fuse_image_first():
    assert fuse([1.0], [2.0]).tolist() == [1.0, 2.0]


@pytest.mark.parametrize("d_aud, d_img, N, L, size", [(300, 300, 2, 6, 12000), (300, 512, 3, 6, 24360)])
def test_window_datasize(d_aud, d_img, N, L, size):
    cfg = WindowConfig(N=N, L=L, dim_image=d_img, dim_audio=d_aud)
    assert cfg.datasize() == size
    n = cfg.span + 2
    X = np.zeros((n, d_img + d_aud))
    batch = make_windows(X, np.arange(n), np.zeros(n, dtype=int), cfg)
    assert batch.windows.shape[1] * batch.windows.shape[2] == size


def test_window_config_errors():
    with pytest.raises(ValueError):
        WindowConfig(N=1, L=7)


def enumerate_windows(n_frames, labelled, T, L):
    out = []
    for t in range(n_frames):
        if not labelled[t]:
            continue
        idx = [t - k * L for k in range(T - 1, -1, -1)]
        if all(0 <= i < n_frames for i in idx):
            out.append(idx)
    return out


def test_sixty_frame_segment_gives_six_windows():
    cfg = WindowConfig(N=2, L=6, dim_image=2, dim_audio=1)
    assert cfg.span == 55
    X = np.arange(60 * 3, dtype=float).reshape(60, 3)
    batch = make_windows(X, np.arange(100, 160), np.arange(60) % 7, cfg, "A", standardized=False)
    oracle = enumerate_windows(60, [True] * 60, cfg.timesteps, cfg.L)
    assert len(batch) == len(oracle) == 6
    assert [k[1] for k in batch.window_keys] == [154, 155, 156, 157, 158, 159]
    for w, idx in zip(batch.windows, oracle):
        assert np.array_equal(w, X[idx])
    assert batch.labels.tolist() == [(54 + i) % 7 for i in range(6)]


@given(st.integers(1, 90), st.sampled_from([(1, 6), (2, 6), (1, 5), (1, 30)]), st.data())
@settings(max_examples=60)
def test_windows_match_enumeration(n, NL, data):
    N, L = NL
    labelled = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    cfg = WindowConfig(N=N, L=L, dim_image=1, dim_audio=0)
    X = np.arange(n, dtype=float)[:, None]
    labels = np.where(labelled, 1, -1)
    batch = make_windows(X, np.arange(n), labels, cfg, standardized=False)
    oracle = enumerate_windows(n, labelled, cfg.timesteps, L)
    assert len(batch) == len(oracle)
    for w, idx in zip(batch.windows, oracle):
        assert w[:, 0].tolist() == idx


def test_window_doubling_appends_standardized_copy(rng):
    cfg = WindowConfig(N=1, L=10, dim_image=3, dim_audio=1)
    X = rng.normal(size=(40, 4)) * 5 + 3
    batch = make_windows(X, np.arange(40), np.zeros(40, int), cfg)
    Z = standardize_per_subject(X)
    assert batch.windows.shape[2] == 8
    last = batch.windows[-1]
    np.testing.assert_allclose(last[:, :4], X[[19, 29, 39]])
    np.testing.assert_allclose(last[:, 4:], Z[[19, 29, 39]])


def test_window_padding_option():
    cfg = WindowConfig(N=1, L=10, dim_image=1, dim_audio=0, pad=True)
    X = np.arange(5, dtype=float)[:, None]
    batch = make_windows(X, np.arange(5), np.zeros(5, int), cfg, standardized=False)
    assert len(batch) == 5
    assert batch.windows[4, :, 0].tolist() == [0.0, 0.0, 4.0]


def test_windows_skip_unlabelled_va():
    cfg = WindowConfig(N=1, L=30, dim_image=1, dim_audio=0)
    labels = np.full((3, 2), np.nan)
    labels[1] = [0.2, 0.3]
    batch = make_windows(np.zeros((3, 1)), np.arange(3), labels, cfg, standardized=False)
    assert batch.window_keys == [("", 1)]


def test_windows_reject_non_contiguous():
    cfg = WindowConfig(N=1, L=30, dim_image=1, dim_audio=0)
    with pytest.raises(ValueError):
        make_windows(np.zeros((2, 1)), [0, 2], [0, 0], cfg)


def test_window_frame_indices():
    assert window_frame_indices(59, WindowConfig(N=2, L=6)) == list(range(5, 60, 6))


def test_window_batch_file_round_trip(tmp_path, rng):
    cfg = WindowConfig(N=1, L=10, dim_image=2, dim_audio=0)
    batch = make_windows(rng.normal(size=(30, 2)), np.arange(30), np.arange(30) % 7, cfg, "v1")
    batch.save(tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    assert np.frombuffer(raw[:12], "<u4").tolist() == [len(batch), 3, 4]
    back = WindowBatch.load(tmp_path / "w.bin")
    np.testing.assert_allclose(back.windows, batch.windows, rtol=1e-6)
    assert back.window_keys == batch.window_keys
    assert back.labels.tolist() == batch.labels.tolist()
