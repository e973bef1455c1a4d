import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexmoe.data import (
    ModalitySchema,
    SynthConfig,
    bayes_accuracy,
    load_labels_csv,
    load_manifest,
    load_modality_csv,
    split_dataset,
    synth_generate,
    tables_to_dataset,
    training_means,
    write_dataset_csv,
)
from flexmoe.errors import ConfigError, ParseError, SchemaError, SplitError
from flexmoe.modality import ADNI, ExpertIndexMap


def test_default_synth_is_full_modality():
    ds = synth_generate(SynthConfig(n_samples=50))
    assert ds.is_full().all()


def test_same_seed_identical():
    cfg = SynthConfig(combo_distribution={"IGCB": 0.5, "C": 0.5}, n_samples=40, seed=3)
    a, b = synth_generate(cfg), synth_generate(cfg)
    np.testing.assert_array_equal(a.masks, b.masks)
    np.testing.assert_array_equal(a.labels, b.labels)
    for x, y in zip(a.features, b.features):
        np.testing.assert_array_equal(x, y)


def test_combo_frequencies_concentrate():
    dist = {"IGCB": 0.3, "IGC": 0.2, "C": 0.25, "GB": 0.15, "I": 0.1}
    ds = synth_generate(SynthConfig(combo_distribution=dist, n_samples=10000, seed=1))
    counts = ds.combo_counts()
    for label, p in dist.items():
        # four standard errors of a binomial proportion at n = 10000 stay below 0.02
        assert abs(counts[label] / 10000 - p) <= 0.02


def test_unobserved_features_absent():
    ds = synth_generate(SynthConfig(combo_distribution={"IB": 1.0}, n_samples=5))
    s = ds[0]
    assert s.features[1] is None and s.features[2] is None
    assert s.features[0].shape == (16,) and s.features[3].shape == (8,)


@pytest.mark.parametrize(
    "kwargs",
    [{"combo_distribution": {"IGCB": 0.6, "C": 0.3}}, {"noise_sigma": 0.0}, {"combo_distribution": {"XY": 1.0}}],
)
def test_invalid_synth_config(kwargs):
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(**kwargs))


def test_bayes_accuracy_reasonable():
    cfg = SynthConfig(combo_distribution={"IGCB": 0.5, "B": 0.5}, n_samples=4000, noise_sigma=2.0)
    acc = bayes_accuracy(cfg, synth_generate(cfg))
    assert acc["IGCB"] > acc["B"] > 1 / 3


def test_structure_seed_shares_generating_model():
    a = SynthConfig(seed=1).means()
    b = SynthConfig(seed=2).means()
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------- CSV


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_blank_cell_gets_training_mean(tmp_path):
    p = _write(tmp_path / "c.csv", "id,a\nx,1.0\ny,\nz,3.0\n")
    t = load_modality_csv(p, ModalitySchema("C"), train_ids=["x", "y", "z"])
    np.testing.assert_array_equal(t.values[:, 0], [1.0, 2.0, 3.0])


def test_imputation_uses_training_rows_only(tmp_path):
    p = _write(tmp_path / "c.csv", "id,a\nx,1.0\ny,\nz,3.0\nw,11.0\n")
    train_only = load_modality_csv(p, ModalitySchema("C"), train_ids=["x", "y", "z"])
    leaky = load_modality_csv(p, ModalitySchema("C"), train_ids=["x", "y", "z", "w"])
    assert train_only.row("y")[0] == 2.0
    assert leaky.row("y")[0] == 5.0


def test_clinical_only_sample(tmp_path):
    tables = [
        load_modality_csv(_write(tmp_path / f"{n}.csv", "id,f\n" + ("a,1\n" if n != "C" else "a,1\nb,2\n")), ModalitySchema(n))
        for n in ADNI.names
    ]
    ds = tables_to_dataset(ADNI, tables, {"a": 0, "b": 1})
    assert ADNI.label(ds[1].combo) == "C"
    assert ds[0].combo.is_full


def test_empty_body_means_modality_missing(tmp_path):
    t = load_modality_csv(_write(tmp_path / "i.csv", "id,a,b\n"), ModalitySchema("I"))
    assert len(t.ids) == 0
    assert "x" not in t


def test_sample_with_no_modality_dropped(tmp_path, caplog):
    tables = [load_modality_csv(_write(tmp_path / f"{n}.csv", "id,f\na,1\n"), ModalitySchema(n)) for n in ADNI.names]
    with caplog.at_level("WARNING"):
        ds = tables_to_dataset(ADNI, tables, {"a": 0, "ghost": 1})
    assert ds.ids == ["a"]
    assert "ghost" in caplog.text


def test_schema_mismatch(tmp_path):
    p = _write(tmp_path / "g.csv", "id,a,b\nx,1,2\n")
    with pytest.raises(SchemaError):
        load_modality_csv(p, ModalitySchema("G", columns=["a", "c"]))
    with pytest.raises(SchemaError):
        load_modality_csv(p, ModalitySchema("G", input_dim=3))
    with pytest.raises(SchemaError):
        load_modality_csv(_write(tmp_path / "h.csv", "key,a\n"), ModalitySchema("G"))


def test_parse_error_location(tmp_path):
    p = _write(tmp_path / "g.csv", "id,a,b\nx,1,2\ny,3,oops\n")
    with pytest.raises(ParseError) as info:
        load_modality_csv(p, ModalitySchema("G"))
    assert info.value.row == 3 and info.value.column == "b"


def test_labels_csv(tmp_path):
    assert load_labels_csv(_write(tmp_path / "l.csv", "id,label\na,2\nb,0\n")) == {"a": 2, "b": 0}
    with pytest.raises(ParseError):
        load_labels_csv(_write(tmp_path / "m.csv", "id,label\na,two\n"))


def test_manifest_roundtrip(tmp_path):
    ds = synth_generate(SynthConfig(combo_distribution={"IGCB": 0.5, "CB": 0.25, "I": 0.25}, n_samples=30))
    back = load_manifest(write_dataset_csv(ds, tmp_path))
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.masks, ds.masks)
    np.testing.assert_array_equal(back.labels, ds.labels)
    for a, b in zip(back.features, ds.features):
        np.testing.assert_array_equal(np.isnan(a), np.isnan(b))
        np.testing.assert_array_equal(a[~np.isnan(a)], b[~np.isnan(b)])


# ---------------------------------------------------------------- split protocol


def _counted(n, n_full, seed=0):
    rng = np.random.default_rng(seed)
    partial = [m for m in range(1, 15)]
    masks = np.array([15] * n_full + list(rng.choice(partial, size=n - n_full)))
    ds = synth_generate(SynthConfig(n_samples=n, seed=seed))
    ds.masks = masks
    for m, block in enumerate(ds.features):
        block[(masks >> m & 1) == 0] = np.nan
    return ds


def test_split_example_arithmetic():
    sp = split_dataset(_counted(100, 40))
    assert (len(sp.train), len(sp.val), len(sp.test)) == (70, 15, 15)
    assert sp.train.is_full().sum() == 10
    assert (~sp.train.is_full()).sum() == 60


def test_split_all_full_is_plain():
    sp = split_dataset(synth_generate(SynthConfig(n_samples=100)))
    assert (len(sp.train), len(sp.val), len(sp.test)) == (70, 15, 15)


def test_split_insufficient_full():
    with pytest.raises(SplitError, match="30.*20"):
        split_dataset(_counted(100, 20))


def test_split_seed_deterministic():
    ds = _counted(80, 50)
    a, b = split_dataset(ds, seed=4), split_dataset(ds, seed=4)
    np.testing.assert_array_equal(a.test_index, b.test_index)


def check_split_invariants(ds, seed):
    sp = split_dataset(ds, seed=seed)
    assert sp.val.is_full().all() and sp.test.is_full().all()
    idx = [set(sp.train_index), set(sp.val_index), set(sp.test_index)]
    assert not (idx[0] & idx[1] or idx[0] & idx[2] or idx[1] & idx[2])
    assert idx[0] | idx[1] | idx[2] == set(range(len(ds)))
    imputed = sp.impute()
    means = training_means(sp.train)
    # every blank cell of an observed modality takes the training column mean
    for part, raw in ((imputed.val, sp.val), (imputed.test, sp.test), (imputed.train, sp.train)):
        present = raw.present()
        for m in range(len(ds.modality_set)):
            block, filled = raw.features[m][present[:, m]], part.features[m][present[:, m]]
            holes = np.isnan(block)
            assert not np.isnan(filled).any()
            np.testing.assert_array_equal(filled[holes], np.broadcast_to(means[m], block.shape)[holes])
    return sp, means


def _with_holes(ds, rng, rate=0.1):
    for block in ds.features:
        holes = rng.random(block.shape) < rate
        block[holes] = np.nan
    return ds


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_split_invariants_property(seed):
    rng = np.random.default_rng(seed)
    ds = _with_holes(_random_dataset(rng), rng)
    need = round(0.15 * len(ds)) * 2
    if ds.is_full().sum() < need:
        with pytest.raises(SplitError):
            split_dataset(ds, seed=seed)
    else:
        check_split_invariants(ds, seed)


def _random_dataset(rng):
    n = int(rng.integers(40, 160))
    full = float(rng.uniform(0.35, 1.0))
    rest = (1 - full) / 14
    dist = {ADNI.label(c): (full if c.is_full else rest) for c in ExpertIndexMap(ADNI).combos()}
    return synth_generate(SynthConfig(combo_distribution=dist, n_samples=n, seed=int(rng.integers(2**31))))


def test_means_ignore_heldout_rows():
    rng = np.random.default_rng(0)
    ds = _with_holes(_random_dataset(rng), rng)
    sp = split_dataset(ds, seed=0)
    means = training_means(sp.train)
    all_means = training_means(ds)
    # negative control: including the held-out rows changes the statistics
    assert any(not np.allclose(a, b) for a, b in zip(means, all_means))
