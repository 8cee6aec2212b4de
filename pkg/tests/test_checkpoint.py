import numpy as np
import pytest

from xmodal import checkpoint as ckpt
from xmodal import data, generation as gen, projection as proj, retrieval as ret
from xmodal.errors import CheckpointError
from xmodal.util import stream


@pytest.fixture(scope="module")
def small_setup():
    corpus = data.synth_corpus(n_classes=4, per_class=8, dim=8, seed=3, noise_sigma=0.15)
    split = data.split_xshot(corpus, x=0, seed=3)
    gen_hp = gen.GenHyperParams(lr=1e-3, batch=8, epochs=3, seed=3)
    img, txt, _ = gen.train_generation(split, corpus, gen_hp)
    proj_hp = proj.ProjHyperParams(lr=1e-3, batch=8, epochs=3, seed=3)
    model, _ = proj.train_projection(split, corpus, None, proj_hp)
    return corpus, split, img, txt, model


def test_vaegan_round_trip_bitwise(small_setup, tmp_path):
    _, _, img, _, _ = small_setup
    path = tmp_path / "gen.ckpt"
    ckpt.save_vaegan(img, path)
    back = ckpt.load_vaegan(path)
    for (n1, p1), (n2, p2) in zip(img.named_params(), back.named_params()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
        assert np.array_equal(p1.adam_m, p2.adam_m)
        assert np.array_equal(p1.adam_v, p2.adam_v)
        assert p1.step_count == p2.step_count
    assert np.array_equal(img.scaler.lo, back.scaler.lo)
    assert np.array_equal(img.scaler.span, back.scaler.span)
    assert img.rng_state == back.rng_state
    assert back.d_z == img.d_z


def test_vaegan_reload_synthesizes_identically(small_setup, tmp_path):
    corpus, split, img, _, _ = small_setup
    path = tmp_path / "gen.ckpt"
    ckpt.save_vaegan(img, path)
    back = ckpt.load_vaegan(path)
    attrs = np.repeat(corpus.class_attrs[split.target_classes[0]], 4, axis=0)
    a = img.synthesize(attrs, stream(9, "syn"))
    b = back.synthesize(attrs, stream(9, "syn"))
    assert np.array_equal(a, b)


def test_projection_round_trip_and_identical_eval(small_setup, tmp_path):
    corpus, split, _, _, model = small_setup
    before = ret.evaluate(model, split, corpus)
    path = tmp_path / "proj.ckpt"
    ckpt.save_projection(model, path)
    back = ckpt.load_projection(path)
    assert back.classes == model.classes
    assert back.use_gate == model.use_gate
    after = ret.evaluate(back, split, corpus)
    assert abs(after["img2txt"].map_score - before["img2txt"].map_score) < 1e-12
    assert abs(after["txt2img"].map_score - before["txt2img"].map_score) < 1e-12
    assert after["img2txt"].per_query_ap == before["img2txt"].per_query_ap


def test_tampered_magic_rejected(small_setup, tmp_path):
    _, _, img, _, _ = small_setup
    path = tmp_path / "gen.ckpt"
    ckpt.save_vaegan(img, path)
    blob = path.read_bytes()
    path.write_bytes(b"BADMAGIC" + blob[8:])
    with pytest.raises(CheckpointError, match="bad magic"):
        ckpt.load_vaegan(path)


def test_version_mismatch_names_both_versions(small_setup, tmp_path):
    _, _, img, _, _ = small_setup
    path = tmp_path / "gen.ckpt"
    ckpt.save_vaegan(img, path)
    blob = bytearray(path.read_bytes())
    blob[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match=r"version 99.*version 1"):
        ckpt.load_vaegan(path)


def test_kind_mismatch_rejected(small_setup, tmp_path):
    _, _, img, _, _ = small_setup
    path = tmp_path / "gen.ckpt"
    ckpt.save_vaegan(img, path)
    with pytest.raises(CheckpointError, match="vaegan"):
        ckpt.load_projection(path)


def test_truncated_payload_rejected(small_setup, tmp_path):
    _, _, img, _, _ = small_setup
    path = tmp_path / "gen.ckpt"
    ckpt.save_vaegan(img, path)
    path.write_bytes(path.read_bytes()[:-64])
    with pytest.raises(CheckpointError, match="truncated"):
        ckpt.load_vaegan(path)
