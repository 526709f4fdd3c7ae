import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitocascade.errors import BadFoldIndex, DuplicateId, TooFewImages
from mitocascade.folds import FoldAssignment, fisher_yates, split, train_val

IDS_150 = [f"slide_{i:03d}" for i in range(150)]


def test_150_images_four_folds():
    fa = split(IDS_150, 4, seed=7)
    assert sorted(fa.sizes(), reverse=True) == [38, 38, 37, 37]
    train, val = train_val(fa, 0)
    assert (len(val), len(train)) == (38, 112)


def test_one_per_fold():
    fa = split(["a", "b", "c", "d"], 4, seed=1)
    assert sorted(fa.assignments.values()) == [0, 1, 2, 3]


def test_deterministic_and_seed_sensitive():
    assert split(IDS_150, 4, 3) == split(IDS_150, 4, 3)
    assert split(IDS_150, 4, 3) != split(IDS_150, 4, 4)


def test_fisher_yates_is_a_permutation():
    out = fisher_yates(list(range(50)), 11)
    assert sorted(out) == list(range(50)) and out != list(range(50))


def test_errors():
    with pytest.raises(TooFewImages):
        split(["a", "b", "c"], 4)
    with pytest.raises(DuplicateId, match="'b'"):
        split(["a", "b", "b", "c", "d"], 4)
    with pytest.raises(BadFoldIndex):
        train_val(split(IDS_150, 4), 4)


def test_csv_round_trip(tmp_path):
    fa = split(IDS_150, 4, 0)
    fa.write_csv(tmp_path / "folds.csv")
    assert (tmp_path / "folds.csv").read_text().startswith("image_id,fold\n")
    assert FoldAssignment.read_csv(tmp_path / "folds.csv") == fa


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 60), st.integers(0, 2**63))
def test_partition_properties(k, extra, seed):
    ids = [f"id{i}" for i in range(k + extra)]
    fa = split(ids, k, seed)
    sizes = fa.sizes()
    assert max(sizes) - min(sizes) <= 1
    union = []
    for f in range(k):
        train, val = train_val(fa, f)
        assert not set(train) & set(val)
        assert len(train) + len(val) == len(ids)
        union += val
    assert sorted(union) == sorted(ids)
