from itertools import combinations

import numpy as np
import pytest

from flexmoe import tensor as T
from flexmoe.errors import EmptyComboError, InvalidLookupError
from flexmoe.modality import (
    ADNI,
    MIMIC,
    ExpertIndexMap,
    ModalitySet,
    bank_init,
    bank_lookup,
    combo_from_flags,
    expert_index,
)


def test_full_flags():
    c = combo_from_flags([True, True, True, True])
    assert c.mask == 0b1111 and c.is_full


def test_flags_ib():
    c = ADNI.combo_from_flags([True, False, False, True])
    assert ADNI.label(c) == "IB"
    assert c.observed() == [0, 3]


def test_empty_flags_rejected():
    with pytest.raises(EmptyComboError):
        combo_from_flags([False] * 4)


def test_flag_length_checked():
    with pytest.raises(ValueError):
        ADNI.combo_from_flags([True, False])


def test_modality_set_validation():
    with pytest.raises(ValueError):
        ModalitySet(("I", "I"))
    with pytest.raises(ValueError):
        ModalitySet(("I",))


def test_label_roundtrip():
    for c in ExpertIndexMap(ADNI).combos():
        assert ADNI.parse(ADNI.label(c)) == c
    ms = ModalitySet(("img", "txt", "tab"))
    c = ms.parse("img+tab")
    assert ms.label(c) == "img+tab"


@pytest.mark.parametrize(
    "label,index",
    [("IGCB", 0), ("IGC", 1), ("IGB", 2), ("ICB", 3), ("GCB", 4), ("IG", 5), ("IC", 6), ("IB", 7),
     ("GC", 8), ("GB", 9), ("CB", 10), ("I", 11), ("G", 12), ("C", 13), ("B", 14)],
)
def test_adni_expert_indices(label, index):
    assert expert_index(ADNI.parse(label)) == index
    assert ExpertIndexMap(ADNI).index(ADNI.parse(label)) == index


def test_three_subsets_by_enumeration():
    # enumerate 3-subsets of positions in lexicographic order after the single 4-subset
    expected = {frozenset(s): 1 + i for i, s in enumerate(combinations(range(4), 3))}
    imap = ExpertIndexMap(ADNI)
    for members, idx in expected.items():
        mask = sum(1 << j for j in members)
        assert imap.index(ADNI.combo(mask)) == idx
    assert expected[frozenset({1, 2, 3})] == 4  # GCB


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_expert_index_bijective_and_monotone(n):
    ms = ModalitySet(tuple(f"m{j}" for j in range(n)))
    imap = ExpertIndexMap(ms)
    indices = sorted(imap.index(ms.combo(mask)) for mask in range(1, 2**n))
    assert indices == list(range(2**n - 1))
    for a in range(1, 2**n):
        for b in range(1, 2**n):
            ca, cb = ms.combo(a), ms.combo(b)
            if ca.cardinality > cb.cardinality:
                assert imap.index(ca) < imap.index(cb)


def test_mask_to_index_table_agrees():
    imap = ExpertIndexMap(MIMIC)
    for mask in range(1, 8):
        assert imap.mask_to_index[mask] == imap.index(MIMIC.combo(mask))


@pytest.mark.parametrize("ms,shape", [(ADNI, (15, 4, 128)), (MIMIC, (7, 3, 128))])
def test_bank_shapes(ms, shape):
    assert bank_init(ms, 128, seed=0).shape == shape


def test_bank_init_deterministic_and_small():
    a = bank_init(ADNI, 16, seed=5).table.data
    b = bank_init(ADNI, 16, seed=5).table.data
    np.testing.assert_array_equal(a, b)
    assert abs(a.std() - 0.02) < 0.005


def test_bank_lookup_reads_expected_cell():
    bank = bank_init(ADNI, 8, seed=1)
    observed = ADNI.parse("IGB")
    cell = bank_lookup(bank, observed, ADNI.index("C"))
    np.testing.assert_array_equal(cell.data, bank.table.data[observed.mask - 1, 2])


def test_bank_lookup_errors():
    bank = bank_init(ADNI, 8, seed=1)
    with pytest.raises(InvalidLookupError):
        bank_lookup(bank, ADNI.full, 0)
    with pytest.raises(InvalidLookupError):
        bank_lookup(bank, ADNI.parse("C"), ADNI.index("C"))


def test_bank_readable_mask():
    bank = bank_init(ADNI, 4, seed=0)
    readable = bank.readable()
    assert not readable[-1].any()
    for mask in range(1, 15):
        for m in range(4):
            assert readable[mask - 1, m] == (not (mask >> m & 1))


def test_bank_gradient_only_on_looked_up_cell():
    bank = bank_init(ADNI, 4, seed=0)
    observed = ADNI.parse("CB")
    w = np.arange(1.0, 5.0)

    def loss():
        return (bank_lookup(bank, observed, 0) * w).sum()

    with T.Tape() as tape:
        tape.backward(loss())
    grad = bank.table.grad
    np.testing.assert_array_equal(grad[observed.row, 0], w)
    others = np.ones(grad.shape[:2], dtype=bool)
    others[observed.row, 0] = False
    assert np.all(grad[others] == 0.0)

    # perturbing the read cell moves the loss; perturbing any other cell does not
    base = loss().item()
    bank.table.data[observed.row, 0, 0] += 1e-3
    assert loss().item() != base
    bank.table.data[observed.row, 0, 0] -= 1e-3
    bank.table.data[observed.row, 1, 0] += 1e-3
    assert loss().item() == base
