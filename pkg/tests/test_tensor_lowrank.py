import numpy as np
import pytest

from core.errors import CheckpointFormatError, DimensionMismatchError, UnknownModeError
from core.grid import BasisFamily, build_uniform_grid
from core.integral_engine import axis_tables, build_stencils
from core.structured_matrix import ThreeLevelCirculant, dense_band
from core.tensor_lowrank import (
    CHECKPOINT_MAGIC,
    CanonicalTensor,
    TensorOperator,
    TensorStorage,
    compress,
    decompose_operator,
    load_checkpoint,
    merge_parallel_terms,
    orthonormalize_tensors,
    save_checkpoint,
    tensor_matvec,
)


def random_cp(rng, dims, rank):
    return CanonicalTensor.from_factors(rng.uniform(0.5, 2.0, rank), [rng.standard_normal((n, rank)) for n in dims])


def test_from_factors_normalizes_and_sorts():
    factors = [np.array([[2.0, 0.0], [0.0, 1.0]]), np.eye(2), np.eye(2)]
    t = CanonicalTensor.from_factors([1.0, -3.0], factors)
    np.testing.assert_allclose(t.weights, [3.0, 2.0])
    np.testing.assert_allclose(np.linalg.norm(t.factors[0], axis=0), 1.0)
    assert t.factors[0][1, 0] == -1.0
    dense = np.zeros((2, 2, 2))
    dense[0, 0, 0] = 2.0
    dense[1, 1, 1] = -3.0
    np.testing.assert_allclose(t.full(), dense)


def test_inner_and_norm_match_dense(rng):
    a, b = random_cp(rng, (4, 3, 5), 3), random_cp(rng, (4, 3, 5), 2)
    assert a.inner(b) == pytest.approx(np.sum(a.full() * b.full()), rel=1e-12)
    assert a.norm() == pytest.approx(np.linalg.norm(a.full()), rel=1e-12)
    np.testing.assert_allclose((a + b).full(), a.full() + b.full(), atol=1e-12)
    np.testing.assert_allclose(a.scaled(-2.0).full(), -2.0 * a.full(), atol=1e-12)
    with pytest.raises(DimensionMismatchError):
        a + random_cp(rng, (4, 3, 4), 1)


@pytest.mark.parametrize("tol", [0.0, 0.05, 0.3])
def test_from_dense_controls_the_error(tol, rng):
    X = rng.standard_normal((5, 4, 3))
    t = CanonicalTensor.from_dense(X, tol)
    actual = np.linalg.norm(X - t.full()) / np.linalg.norm(X)
    assert actual <= tol + 1e-12
    assert t.error == pytest.approx(actual, abs=1e-10)
    if tol == 0.0:
        assert t.rank <= 12


def test_from_dense_of_zero_is_empty():
    assert CanonicalTensor.from_dense(np.zeros((2, 3, 4))).rank == 0


def test_kinetic_decomposition_is_exact():
    dims = (4, 5, 3)
    _, A = build_stencils(build_uniform_grid(*dims, 1.0, 0), BasisFamily(0))
    kinetic_1d = {0: 2.0, 1: -1.0, -1: -1.0}
    overlap_1d = {0: 1.0}
    op = decompose_operator("kinetic_A", (overlap_1d, kinetic_1d, dims))
    assert op.rank == 3
    assert op.achieved
    np.testing.assert_allclose(op.dense(), dense_band(A.entries, dims), atol=1e-12)


def test_tensor_matvec_matches_dense_operator(rng):
    dims = (4, 3, 5)
    terms = [tuple(rng.standard_normal((n, n)) for n in dims) for _ in range(2)]
    op = TensorOperator(terms, dims)
    x = random_cp(rng, dims, 3)
    y = tensor_matvec(op, x)
    assert y.rank == op.rank * x.rank
    np.testing.assert_allclose(y.full().reshape(-1), op.apply_dense(x.full()), atol=1e-10)
    np.testing.assert_allclose(op.apply_dense(x.full()), op.dense() @ x.full().reshape(-1), atol=1e-10)
    with pytest.raises(DimensionMismatchError):
        tensor_matvec(op, random_cp(rng, (4, 3, 4), 1))
    assert tensor_matvec(op, CanonicalTensor.zeros(dims)).rank == 0


def test_merge_combines_parallel_terms(rng):
    base = random_cp(rng, (5, 4, 3), 2)
    doubled = CanonicalTensor.from_factors(
        np.concatenate([base.weights, base.weights]),
        [np.hstack([f, -f if axis == 1 else f]) for axis, f in enumerate(base.factors)],
    )
    assert merge_parallel_terms(doubled).rank == 0
    same = base + base
    merged = merge_parallel_terms(same)
    assert merged.rank == 2
    np.testing.assert_allclose(merged.full(), 2.0 * base.full(), atol=1e-12)


def test_compress_recovers_planted_rank(rng):
    dims = (6, 5, 4)
    planted = random_cp(rng, dims, 3)
    split = CanonicalTensor.from_factors(
        np.repeat(planted.weights / 3.0, 3),
        [np.repeat(f, 3, axis=1) for f in planted.factors],
    )
    assert split.rank == 9
    result = compress(split, tol=1e-6, R_max=6)
    assert result.rank == 3
    assert result.error < 1e-6
    np.testing.assert_allclose(result.full(), planted.full(), atol=1e-9)


def test_compress_rejects_non_positive_tolerance(rng):
    with pytest.raises(ValueError):
        compress(random_cp(rng, (3, 3, 3), 2), tol=0.0, R_max=2)


def test_compress_reports_best_fit_when_tolerance_is_out_of_reach(rng):
    x = random_cp(rng, (6, 6, 6), 5)
    result = compress(x, tol=1e-12, R_max=1, restarts=1, sweeps=50)
    assert result.rank == 1
    assert 0.0 < result.error < 1.0


def test_coulomb_decomposition_of_separable_generator(rng):
    dims = (4, 3, 5)
    a, b, c = (rng.uniform(0.5, 1.5, n) for n in dims)
    C = ThreeLevelCirculant(dims, np.einsum("i,j,k->ijk", a, b, c))
    op = decompose_operator("coulomb_T", C, tol=1e-6)
    assert op.rank == 1
    assert op.achieved
    np.testing.assert_allclose(op.dense(), C.dense(), atol=1e-9)


def test_nuclear_decomposition_of_kronecker_sum(rng):
    dims = (3, 4, 3)
    first, second = [], []
    for n in dims:
        q, _ = np.linalg.qr(rng.standard_normal((n * n, 2)))
        first.append(q[:, 0].reshape(n, n))
        second.append(q[:, 1].reshape(n, n))
    B = 3.0 * np.kron(first[0], np.kron(first[1], first[2])) + np.kron(second[0], np.kron(second[1], second[2]))
    op = decompose_operator("nuclear_B", (B, dims), tol=1e-6, R_max=4)
    assert op.rank <= 4
    assert op.achieved
    np.testing.assert_allclose(op.dense(), B, atol=1e-6)


def test_unknown_operator_kind():
    with pytest.raises(UnknownModeError):
        decompose_operator("exchange", None)


def test_orthonormalize_gives_identity_gram(rng):
    dims = (4, 4, 3)
    tensors = [random_cp(rng, dims, 2) for _ in range(3)]
    out = orthonormalize_tensors(tensors, 1e-12, R_max=10)
    gram = np.array([[a.inner(b) for b in out] for a in out])
    np.testing.assert_allclose(gram, np.eye(3), atol=1e-10)


def test_tensor_storage_returns_orthonormal_columns(rng):
    dims = (3, 4, 2)
    X, _ = np.linalg.qr(rng.standard_normal((24, 2)))
    storage = TensorStorage(dims, tol=1e-12, R_max=12)
    Y = storage(X)
    np.testing.assert_allclose(Y.T @ Y, np.eye(2), atol=1e-10)
    assert len(storage.ranks) == 1
    assert 1 <= storage.peak_rank <= 12


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = [random_cp(rng, (4, 3, 5), 2), random_cp(rng, (2, 2, 2), 1)]
    path = tmp_path / "orbitals.hfct"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert len(loaded) == 2
    for a, b in zip(tensors, loaded):
        np.testing.assert_array_equal(a.weights, b.weights)
        for fa, fb in zip(a.factors, b.factors):
            np.testing.assert_array_equal(fa, fb)


def test_checkpoint_rejects_corruption(tmp_path, rng):
    path = tmp_path / "orbitals.hfct"
    save_checkpoint(path, [random_cp(rng, (3, 3, 3), 2)])
    data = path.read_bytes()
    assert data.startswith(CHECKPOINT_MAGIC)

    bad_magic = tmp_path / "magic.hfct"
    bad_magic.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "short.hfct"
    truncated.write_bytes(data[:-5])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.hfct"
    trailing.write_bytes(data + b"\x00")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(trailing)


@pytest.mark.parametrize("degree", [0, 1])
def test_axis_tables_rebuild_both_stencils(degree):
    dims = (3, 4, 3)
    basis = BasisFamily(degree)
    S, A = build_stencils(build_uniform_grid(*dims, 1.0, degree), basis)
    overlap_1d, kinetic_1d = axis_tables(basis)
    kinetic = decompose_operator("kinetic_A", (overlap_1d, kinetic_1d, dims))
    np.testing.assert_allclose(kinetic.dense(), dense_band(A.entries, dims), atol=1e-12)
    overlap = decompose_operator("kinetic_A", (overlap_1d, overlap_1d, dims))
    np.testing.assert_allclose(overlap.dense(), 3.0 * dense_band(S.entries, dims), atol=1e-12)
