import numpy as np
import pytest
from numpy.testing import assert_array_equal

from richiv.data import (
    Column,
    ComplierType,
    RegressorSpec,
    build_regressors,
    make_dataset,
    read_csv,
    to_table,
    validate,
    write_csv,
)
from richiv.errors import (
    EmptyData,
    NonBinaryColumn,
    NonFinite,
    RaggedColumns,
    RankDeficient,
)


def test_minimal_valid_dataset():
    ds = validate({"y": [0.0], "t": [0.0], "z": [0.0], "c1": [0.0]})
    assert ds.n == 1
    assert ds.d == 1
    assert ds.cluster is None


def test_non_binary_treatment_rejected():
    with pytest.raises(NonBinaryColumn) as err:
        validate({"y": [1.0, 2.0], "t": [0.0, 0.5], "z": [0.0, 1.0], "c1": [0.0, 1.0]})
    assert err.value.context["column"] == "t"
    assert err.value.context["rows"] == [1]


def test_ragged_columns_rejected():
    with pytest.raises(RaggedColumns):
        validate({"y": [1.0, 2.0], "t": [0.0, 1.0, 0.0], "z": [0.0, 1.0, 1.0], "c1": [0.0, 1.0, 2.0]})


def test_empty_rejected():
    with pytest.raises(EmptyData):
        validate({"y": [], "t": [], "z": [], "c1": []})


def test_non_finite_rejected():
    with pytest.raises(NonFinite):
        validate({"y": [np.nan, 1.0], "t": [0.0, 1.0], "z": [0.0, 1.0], "c1": [0.0, 1.0]})


def test_cluster_reindexed_to_dense_ids():
    ds = validate(
        {
            "y": [1.0, 2.0, 3.0],
            "t": [0.0, 1.0, 1.0],
            "z": [1.0, 0.0, 1.0],
            "c1": [0.5, -0.5, 0.0],
            "cluster": [17, -3, 17],
        }
    )
    assert_array_equal(ds.cluster, [1, 0, 1])
    assert ds.n_clusters == 2


def test_validate_serialize_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    ds = make_dataset(
        y=rng.normal(size=20),
        t=rng.integers(0, 2, 20),
        z=rng.integers(0, 2, 20),
        C=rng.normal(size=(20, 3)),
        cluster=rng.integers(0, 4, 20),
    )
    again = validate(to_table(ds))
    for a, b in ((ds.y, again.y), (ds.t, again.t), (ds.z, again.z), (ds.C, again.C)):
        assert_array_equal(a, b)
    assert_array_equal(ds.cluster, again.cluster)


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    ds = make_dataset(
        y=rng.normal(size=31) * 1e3,
        t=rng.integers(0, 2, 31),
        z=rng.integers(0, 2, 31),
        C=rng.normal(size=(31, 2)) / 7.0,
        cluster=rng.integers(0, 5, 31),
    )
    path = tmp_path / "ds.csv"
    write_csv(ds, path)
    again = read_csv(path)
    assert_array_equal(ds.y, again.y)
    assert_array_equal(ds.C, again.C)
    assert_array_equal(ds.cluster, again.cluster)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,z,t,c1\n1,0,0,0\n")
    with pytest.raises(RaggedColumns):
        read_csv(path)


def test_csv_reports_offending_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,t,z,c1\n1.0,0,0,0.5\n2.0,2,1,0.1\n")
    with pytest.raises(NonBinaryColumn) as err:
        read_csv(path)
    assert err.value.context["column"] == "t"


def test_csv_unparseable_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,t,z,c1\n1.0,0,0,oops\n")
    with pytest.raises(NonFinite) as err:
        read_csv(path)
    assert err.value.context["row"] == 2


# --- regressor building ---------------------------------------------------


def _tiny(C):
    n = C.shape[0]
    return make_dataset(np.zeros(n), np.zeros(n), np.ones(n), C)


def test_identity_spec_with_intercept():
    ds = _tiny(np.array([[1.0], [2.0]]))
    R = build_regressors(ds, RegressorSpec())
    assert_array_equal(R, [[1.0, 1.0], [1.0, 2.0]])


def test_duplicate_column_rank_deficient():
    ds = _tiny(np.array([[1.0], [2.0], [3.0]]))
    dup = RegressorSpec(
        columns=(
            Column("c1", lambda C: C[:, 0]),
            Column("c1_again", lambda C: C[:, 0]),
        )
    )
    with pytest.raises(RankDeficient):
        build_regressors(ds, dup)


def test_square_transform():
    ds = _tiny(np.array([[-1.0], [0.0], [2.0]]))
    spec = RegressorSpec(
        include_intercept=False, columns=(Column("c1^2", lambda C: C[:, 0] ** 2),)
    )
    R = build_regressors(ds, spec)
    assert_array_equal(R[:, 0], [1.0, 0.0, 4.0])


def test_build_regressors_is_pure():
    rng = np.random.default_rng(2)
    ds = _tiny(rng.normal(size=(15, 4)))
    spec = RegressorSpec()
    assert_array_equal(build_regressors(ds, spec), build_regressors(ds, spec))


def test_spec_labels():
    assert RegressorSpec().labels(2) == ("const", "c1", "c2")
    assert RegressorSpec(columns=()).labels(2) == ("const",)


# --- complier labels --------------------------------------------------------


@pytest.mark.parametrize(
    "t0,t1,expected",
    [
        (0, 0, ComplierType.NEVER_TAKER),
        (0, 1, ComplierType.COMPLIER),
        (1, 1, ComplierType.ALWAYS_TAKER),
    ],
)
def test_complier_mapping(t0, t1, expected):
    assert ComplierType.from_potential(t0, t1) is expected


def test_defiers_forbidden():
    with pytest.raises(ValueError):
        ComplierType.from_potential(1, 0)
