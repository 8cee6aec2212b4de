import numpy as np
import pytest

from xmodal import data
from xmodal.errors import (
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    MissingAttributeError,
    NonFiniteError,
)


def tiny_corpus(d=8, name="tiny"):
    rng = np.random.default_rng(0)
    images = rng.normal(size=(4, d))
    texts = rng.normal(size=(4, d))
    labels = [0, 0, 1, 1]
    attrs = {0: rng.normal(size=d), 1: rng.normal(size=d)}
    return data.make_corpus(images, texts, labels, attrs, name=name)


def test_fixture_corpus_counts():
    c = tiny_corpus()
    assert len(c) == 4
    assert len(c.class_attrs) == 2
    assert c.dims == (8, 8, 8)


def test_unknown_label_names_missing_class():
    rng = np.random.default_rng(1)
    with pytest.raises(MissingAttributeError, match="missing attribute for class 7"):
        data.make_corpus(
            rng.normal(size=(2, 4)),
            rng.normal(size=(2, 4)),
            [0, 7],
            {0: rng.normal(size=4)},
        )


def test_row_count_mismatch_is_named_error():
    rng = np.random.default_rng(2)
    with pytest.raises(DimensionMismatchError):
        data.make_corpus(
            rng.normal(size=(3, 4)),
            rng.normal(size=(2, 4)),
            [0, 0],
            {0: rng.normal(size=4)},
        )


def test_nonfinite_feature_rejected():
    rng = np.random.default_rng(3)
    images = rng.normal(size=(2, 4))
    images[1, 2] = np.nan
    with pytest.raises(NonFiniteError):
        data.make_corpus(
            images, rng.normal(size=(2, 4)), [0, 0], {0: rng.normal(size=4)}
        )


def test_embedding_file_round_trip(tmp_path):
    X = np.random.default_rng(4).normal(size=(5, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "x.femb"
    data.write_embedding_file(path, X)
    back = data.read_embedding_file(path)
    assert np.array_equal(X, back)


def test_embedding_file_bad_magic(tmp_path):
    path = tmp_path / "bad.femb"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(FileFormatError, match="bad magic"):
        data.read_embedding_file(path)


def test_embedding_file_truncated(tmp_path):
    X = np.ones((3, 3))
    path = tmp_path / "x.femb"
    data.write_embedding_file(path, X)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FileFormatError):
        data.read_embedding_file(path)


def test_corpus_write_load_round_trip_bitwise(tmp_path):
    corpus = data.synth_corpus(n_classes=3, per_class=4, dim=8, seed=9)
    data.write_corpus(corpus, tmp_path)
    back = data.load_corpus_dir(tmp_path)
    assert len(back) == len(corpus)
    assert back.classes() == corpus.classes()
    assert np.array_equal(back.image_matrix(), corpus.image_matrix())
    assert np.array_equal(back.text_matrix(), corpus.text_matrix())
    assert np.array_equal(back.labels(), corpus.labels())
    for c in corpus.classes():
        assert np.array_equal(back.class_attrs[c], corpus.class_attrs[c])


def test_load_rejects_attr_index_mismatch(tmp_path):
    corpus = data.synth_corpus(n_classes=3, per_class=2, dim=4, seed=1)
    paths = data.write_corpus(corpus, tmp_path)
    with open(paths["attr_ids"], "w") as f:
        f.write("0\n1\n")  # one id short of the 3 attribute rows
    with pytest.raises(DimensionMismatchError):
        data.load_corpus_dir(tmp_path)


# ---------------------------------------------------------------------------
# splits


def ten_class_corpus(per_class=6, d=8, seed=0):
    return data.synth_corpus(n_classes=10, per_class=per_class, dim=d, seed=seed)


def test_ten_classes_split_five_five():
    corpus = ten_class_corpus()
    split = data.split_xshot(corpus, x=0, seed=3)
    assert len(split.source_classes) == 5
    assert len(split.target_classes) == 5
    assert set(split.source_classes).isdisjoint(split.target_classes)
    assert set(split.source_classes) | set(split.target_classes) == set(range(10))


def test_zero_shot_target_train_empty():
    split = data.split_xshot(ten_class_corpus(), x=0, seed=1)
    assert split.target_train == ()


def test_xshot_counts_exact_per_class():
    corpus = data.synth_corpus(n_classes=8, per_class=10, dim=8, seed=5)
    split = data.split_xshot(corpus, x=3, seed=11)
    assert len(split.target_classes) == 4
    assert len(split.target_train) == 12
    tally = {c: 0 for c in split.target_classes}
    for i in split.target_train:
        tally[corpus.instances[i].label] += 1
    assert all(v == 3 for v in tally.values())


def test_partitions_are_disjoint_and_domain_pure():
    corpus = ten_class_corpus()
    split = data.split_xshot(corpus, x=2, seed=7)
    parts = [
        split.source_train,
        split.source_query,
        split.source_gallery,
        split.target_train,
        split.target_query,
        split.target_gallery,
    ]
    flat = [i for p in parts for i in p]
    assert len(flat) == len(set(flat))
    for i in split.source_train + split.source_query + split.source_gallery:
        assert corpus.instances[i].label in split.source_classes
    for i in split.target_train + split.target_query + split.target_gallery:
        assert corpus.instances[i].label in split.target_classes


def test_split_is_pure_function_of_inputs():
    corpus = ten_class_corpus()
    a = data.split_xshot(corpus, x=1, seed=42)
    b = data.split_xshot(corpus, x=1, seed=42)
    assert a == b
    c = data.split_xshot(corpus, x=1, seed=43)
    assert c != a


def test_x_exceeding_smallest_target_class_errors():
    corpus = data.synth_corpus(n_classes=4, per_class=3, dim=4, seed=0)
    with pytest.raises(ConfigError, match="smallest target class"):
        data.split_xshot(corpus, x=4, seed=0)


def test_odd_class_count_warns_and_splits_floor_ceil():
    corpus = data.synth_corpus(n_classes=5, per_class=4, dim=4, seed=2)
    with pytest.warns(UserWarning, match="odd class count"):
        split = data.split_xshot(corpus, x=0, seed=0)
    assert len(split.source_classes) == 3
    assert len(split.target_classes) == 2


def test_shots_in_gallery_flag():
    corpus = data.synth_corpus(n_classes=4, per_class=6, dim=4, seed=3)
    split = data.split_xshot(corpus, x=2, seed=0, shots_in_gallery=True)
    assert set(split.target_train) <= set(split.target_gallery)


# ---------------------------------------------------------------------------
# synthetic corpus


def test_degenerate_noise_recovers_prototypes():
    corpus = data.synth_corpus(
        n_classes=3, per_class=5, dim=16, modality_gap=0.0, noise_sigma=1e-12, seed=8
    )
    for inst in corpus.instances:
        proto = corpus.class_attrs[inst.label]
        cos_img = (inst.image_feat @ proto.T).item()
        cos_txt = (inst.text_feat @ proto.T).item()
        assert cos_img == pytest.approx(1.0, abs=1e-6)
        assert cos_txt == pytest.approx(1.0, abs=1e-6)


def test_default_corpus_nearest_prototype_accuracy():
    corpus = data.synth_corpus(n_classes=8, per_class=50, dim=64, seed=1)
    protos = np.vstack([corpus.class_attrs[c] for c in corpus.classes()])
    sims = corpus.image_matrix() @ protos.T
    pred = np.asarray(corpus.classes())[sims.argmax(axis=1)]
    accuracy = (pred == corpus.labels()).mean()
    assert accuracy > 0.95


def test_same_seed_identical_corpora():
    a = data.synth_corpus(n_classes=4, per_class=3, dim=8, seed=77)
    b = data.synth_corpus(n_classes=4, per_class=3, dim=8, seed=77)
    assert np.array_equal(a.image_matrix(), b.image_matrix())
    assert np.array_equal(a.text_matrix(), b.text_matrix())
    assert np.array_equal(a.labels(), b.labels())


def test_attrs_are_prototypes_and_features_unit_norm():
    corpus = data.synth_corpus(n_classes=5, per_class=4, dim=32, seed=6)
    for inst in corpus.instances:
        assert inst.attr_feat is corpus.class_attrs[inst.label]
    norms = np.linalg.norm(corpus.image_matrix(), axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)
    norms_t = np.linalg.norm(corpus.text_matrix(), axis=1)
    assert np.allclose(norms_t, 1.0, atol=1e-6)


def test_synth_validations():
    with pytest.raises(ConfigError):
        data.synth_corpus(n_classes=2, per_class=2, dim=1)
    with pytest.raises(ConfigError):
        data.synth_corpus(n_classes=0, per_class=2, dim=4)
    with pytest.raises(ConfigError):
        data.synth_corpus(n_classes=2, per_class=2, dim=4, noise_sigma=0.0)
