import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from oracles import brute_force_conv3d, direct_conv3d, exhaustive_max_abs_cos, manhattan_profile_distance
from scnet.data_model import CoordinateTable
from scnet.errors import DimensionMismatch, MaskMismatch, TooFewProfiles, ZeroNorm
from scnet.similarity import (abs_cosine_matrix, agglomerate, blur3d, canonical_maps, cluster_features, common_space,
                              cossim_abs, cut_linkage, dominance_summary, dominance_test, gather, gaussian_kernel,
                              profile_distances, project_to_grid, similarity_profiles)
from scnet.synth import raster_coords


def test_project_single_voxel_and_round_trip():
    c = CoordinateTable((3, 3, 3), np.array([[1, 1, 1]]))
    vol = project_to_grid(np.array([5.0]), c)
    assert np.count_nonzero(vol) == 1 and vol[1, 1, 1] == 5.0
    rng = np.random.default_rng(0)
    coords = raster_coords(40, (5, 5, 5))
    q = rng.standard_normal(40)
    vol = project_to_grid(q, coords)
    assert vol.sum() == pytest.approx(q.sum(), abs=1e-12)
    assert np.array_equal(gather(vol, coords), q)
    with pytest.raises(DimensionMismatch):
        project_to_grid(np.ones(3), coords)
    with pytest.raises(MaskMismatch):
        gather(np.zeros((4, 4, 4)), coords)


def test_kernel_normalised_with_default_radius():
    k = gaussian_kernel(3.0)
    assert k.size == 19 and abs(k.sum() - 1.0) < 1e-15 and np.allclose(k, k[::-1])
    with pytest.raises(ValueError):
        gaussian_kernel(0.0)


def test_blur_matches_both_convolution_oracles():
    rng = np.random.default_rng(1)
    vol = rng.standard_normal((7, 6, 5))
    k = gaussian_kernel(1.0)
    ref = brute_force_conv3d(vol, k)
    assert np.abs(blur3d(vol, 1.0) - ref).max() < 1e-12
    assert np.abs(direct_conv3d(vol, k) - ref).max() < 1e-12


def test_blur_constant_interior_and_impulse():
    vol = np.ones((25, 25, 25))
    out = blur3d(vol, 1.0)
    assert np.abs(out[3:-3, 3:-3, 3:-3] - 1.0).max() < 1e-10
    delta = np.zeros((21, 21, 21))
    delta[10, 10, 10] = 1.0
    out = blur3d(delta, 3.0)
    assert abs(out.sum() - 1.0) < 1e-10
    k = gaussian_kernel(3.0)
    assert np.abs(out[10, 10, 1:20] - k * k[9] * k[9]).max() < 1e-15


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 2.5))
def test_blur_linearity(seed, sigma):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 6, 7, 5))
    assert np.abs(blur3d(a + b, sigma) - blur3d(a, sigma) - blur3d(b, sigma)).max() < 1e-10


def test_common_space_drops_cells_outside_mask():
    coords = CoordinateTable((9, 9, 9), np.array([[4, 4, 4]]))
    mask = CoordinateTable((9, 9, 9), np.array([[4, 4, 4], [4, 4, 5]]))
    out = common_space(np.array([[1.0, 2.0]]), coords, mask, sigma=1.0)
    k = gaussian_kernel(1.0)
    assert out.shape == (2, 2)
    assert out[1, 0] == pytest.approx(2 * k[3] ** 3) and out[1, 1] == pytest.approx(2 * k[3] ** 2 * k[4])


def test_cossim_examples():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(50)
    assert cossim_abs(a, a) == 1.0 and cossim_abs(a, -a) == 1.0
    e1, e2 = np.zeros(4), np.zeros(4)
    e1[0], e2[1] = 1.0, 1.0
    assert cossim_abs(e1, e2) == 0.0
    with pytest.raises(ZeroNorm):
        cossim_abs(a, np.zeros(50))
    with pytest.raises(ZeroNorm):
        abs_cosine_matrix(np.zeros((2, 3)))
    C = abs_cosine_matrix(rng.standard_normal((6, 30)))
    assert np.all(np.diag(C) == 1.0) and np.all((C >= 0) & (C <= 1))


def _random_maps(seed, sizes, n=400):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((k, n)) for k in sizes], rng.standard_normal((5, n))


def test_profiles_match_exhaustive_scan():
    subj, group = _random_maps(3, [3, 4, 2])
    p = similarity_profiles(subj, group)
    i = 0
    for s, maps in enumerate(subj):
        for k in range(maps.shape[0]):
            assert p.IS[i, s] == 1.0 and p.is_match[i, s] == k
            for t, other in enumerate(subj):
                best, arg = exhaustive_max_abs_cos(maps[k], other)
                assert p.IS[i, t] == pytest.approx(best, abs=1e-12)
                if t != s:
                    assert p.is_match[i, t] == arg
            best, arg = exhaustive_max_abs_cos(maps[k], group)
            assert p.IGS[i] == pytest.approx(best, abs=1e-12) and p.igs_match[i] == arg
            i += 1
    assert np.all(p.IS[p.IS != 1.0] < 0.3)


def test_profiles_identical_and_disjoint_maps():
    a = np.zeros((1, 10))
    a[0, :5] = 1.0
    b = np.zeros((1, 10))
    b[0, 5:] = 1.0
    p = similarity_profiles([a, a.copy()], b)
    assert p.IS[0, 1] == 1.0 and p.IGS[0] == 0.0
    p = similarity_profiles([a], a)
    assert p.IGS[0] == 1.0
    with pytest.raises(TooFewProfiles):
        similarity_profiles([], b)
    with pytest.raises(DimensionMismatch):
        similarity_profiles([np.ones((1, 3))], b)


def test_profiles_invariant_to_sign_and_order():
    subj, group = _random_maps(4, [3, 3, 3])
    rng = np.random.default_rng(5)
    flipped = [m[rng.permutation(m.shape[0])] * rng.choice([-1.0, 1.0], size=(m.shape[0], 1)) for m in subj]
    gflip = group[::-1] * -1.0
    base = similarity_profiles([canonical_maps(m) for m in subj], canonical_maps(group))
    again = similarity_profiles([canonical_maps(m) for m in flipped], canonical_maps(gflip))
    assert base.IS.tobytes() == again.IS.tobytes() and base.IGS.tobytes() == again.IGS.tobytes()
    # without canonicalisation the multiset of values is still the same
    raw = similarity_profiles(flipped, gflip)
    assert sorted(raw.IGS.tolist()) == pytest.approx(sorted(base.IGS.tolist()), abs=1e-14)


def test_dominance_examples():
    assert dominance_test(np.ones(5), 0.0, owner=2)
    assert not dominance_test(np.array([0.0, 1.0, 0.0]), 1.0, owner=1)
    # strict: ties do not count
    assert not dominance_test(np.array([1.0, 0.5, 0.5]), 0.5, owner=0)
    # two of three others above IGS, ceil(3/2) = 2 needed
    assert dominance_test(np.array([1.0, 0.6, 0.7, 0.1]), 0.5, owner=0)
    assert not dominance_test(np.array([1.0, 0.6, 0.2, 0.1]), 0.5, owner=0)
    assert not dominance_test(np.array([1.0]), 0.0, owner=0)


def test_dominance_summary():
    subj, _ = _random_maps(6, [2, 2])
    p = similarity_profiles(subj, np.vstack([subj[0], subj[1]]))
    s = dominance_summary(p)
    assert not s.ic_pass.any() and s.n_failed_subjects == 2


def test_hand_computed_manhattan_distances():
    IS = np.array([[1.0, 0.2, 0.4], [0.3, 1.0, 0.5], [0.9, 0.8, 1.0]])
    IGS = np.array([0.1, 0.6, 0.25])
    D = profile_distances(IS, IGS)
    # d01 = .7 + .8 + .1 + 3 * .5;  d02 = .1 + .6 + .6 + 3 * .15;  d12 = .6 + .2 + .5 + 3 * .35
    expected = np.array([[0, 3.1, 1.75], [3.1, 0, 2.35], [1.75, 2.35, 0]])
    assert np.abs(D - expected).max() < 1e-12
    feats = np.column_stack([IS, IGS])
    for i in range(3):
        for j in range(3):
            assert D[i, j] == pytest.approx(manhattan_profile_distance(feats[i], feats[j], 3), abs=1e-15)
    # differing only in IGS by delta gives |S| * delta
    assert profile_distances(np.ones((2, 4)), np.array([0.2, 0.45]))[0, 1] == pytest.approx(4 * 0.25)
    E = profile_distances(IS, IGS, "euclidean")
    assert E[0, 1] == pytest.approx(np.sqrt(0.49 + 0.64 + 0.01 + 3 * 0.25))
    with pytest.raises(ValueError):
        profile_distances(IS, IGS, "cosine")


@pytest.mark.parametrize("method", ["weighted", "average", "single", "complete"])
def test_agglomerate_matches_scipy(method):
    rng = np.random.default_rng(7)
    X = rng.random((15, 4))
    D = np.abs(X[:, None] - X[None]).sum(axis=2)
    Z = agglomerate(D, method)
    Zs = linkage(squareform(D, checks=False), method=method)
    assert np.allclose(Z[:, 2], Zs[:, 2], atol=1e-12)
    assert np.all(np.diff(Z[:, 2]) >= -1e-12)
    for k in (2, 3, 5):
        ours = cut_linkage(Z, 15, k)
        theirs = fcluster(Zs, k, criterion="maxclust")
        assert len({(a, b) for a, b in zip(ours, theirs)}) == k


def test_identical_profiles_merge_at_zero():
    Z = agglomerate(np.zeros((2, 2)))
    assert Z.tolist() == [[0.0, 1.0, 0.0, 2.0]]
    with pytest.raises(ValueError):
        agglomerate(np.zeros((2, 2)), "ward")


def test_two_blobs_recovered_exactly():
    rng = np.random.default_rng(8)
    hi = np.column_stack([rng.uniform(0.8, 0.9, (10, 4)), rng.uniform(0.1, 0.2, 10)])
    lo = np.column_stack([rng.uniform(0.1, 0.2, (12, 4)), rng.uniform(0.7, 0.8, 12)])
    F = np.vstack([hi, lo])
    res = cluster_features(F[:, :4], F[:, 4], n_clusters=2)
    assert res.labels[:10].tolist() == [1] * 10 and res.labels[10:].tolist() == [2] * 12
    assert res.candidate == 1
    assert res.mean_is[0] > res.mean_is[1] and res.mean_igs[0] < res.mean_igs[1]
    with pytest.raises(TooFewProfiles):
        cluster_features(F[:1, :4], F[:1, 4], n_clusters=2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_clustering_order_invariant(seed, n_clusters):
    rng = np.random.default_rng(seed)
    IS = np.round(rng.random((12, 3)), 1)  # coarse values force ties
    IGS = np.round(rng.random(12), 1)
    perm = rng.permutation(12)
    a = cluster_features(IS, IGS, n_clusters)
    b = cluster_features(IS[perm], IGS[perm], n_clusters)
    assert np.array_equal(a.heights, b.heights)
    pairs = {(x, y) for x, y in zip(a.labels[perm], b.labels)}
    assert len(pairs) == len(set(a.labels))
    assert np.array_equal(np.sort(a.mean_is), np.sort(b.mean_is))
