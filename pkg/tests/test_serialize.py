"""Model container round trips checked against a hand-packed byte oracle.

The binary layout is verified by packing a small matrix by hand with
``struct`` and comparing raw bytes in both directions; save/load round
trips must be bit-exact for every model kind, and each corruption mode
(truncation, bad magic, unknown version, flipped payload byte, edited
manifest dimensions) must raise the documented error.
"""

import json
import struct

import numpy as np
import pytest

from cpalign.align import CpaModel
from cpalign.learn import MixtureCpaModel
from cpalign.recognize import GalleryModel
from cpalign.serialize import (
    FORMAT_VERSION,
    load_model,
    read_array,
    save_model,
    validate_container,
    write_array,
)
from cpalign.shapemodel import EdgeGaussian, TreeConfig, TreeShapeModel
from cpalign.synth import SynthScenario, generate, grid_constellation, subject_model


@pytest.fixture(scope="module")
def single_model():
    scenario = SynthScenario(
        seed=5,
        subjects=2,
        illum_modes=2,
        constellation=grid_constellation(4, part_width=12, part_height=10),
    )
    data = generate(scenario)
    return data, subject_model(data, 0, eta_hat=0.01)


def gallery_from(data, first: CpaModel) -> GalleryModel:
    second = subject_model(data, 1, eta_hat=0.01)
    return GalleryModel(
        domains=first.domains,
        shape=first.shape,
        labels=("s00", "s01"),
        dictionaries=(first.dictionaries, second.dictionaries),
        lambda_hat=first.lambda_hat,
        eta_hat=first.eta_hat,
        frame=first.frame,
    )


def mixture_from(model: CpaModel) -> MixtureCpaModel:
    def restrict(keep):
        parent = tuple([0] + list(range(len(keep) - 1)))
        edges = tuple(EdgeGaussian(np.zeros(4), np.eye(4)) for _ in keep)
        return CpaModel(
            domains=tuple(model.domains[i] for i in keep),
            dictionaries=tuple(model.dictionaries[i] for i in keep),
            shape=TreeShapeModel(TreeConfig(parent), edges),
            lambda_hat=model.lambda_hat,
            eta_hat=model.eta_hat,
            frame=model.frame,
        )

    return MixtureCpaModel(
        components=(restrict((0, 1, 2)), restrict((1, 2, 3))),
        masks=((True, True, True, False), (False, True, True, True)),
    )


def test_write_array_matches_hand_packed_bytes(tmp_path):
    mat = np.array([[1.5, -2.0, 0.25], [3.0, 4.5, -6.0]])
    path = tmp_path / "m.cpad"
    write_array(path, mat)
    # Column-major payload: walk columns, then rows within each column.
    payload = b"".join(
        struct.pack("<d", mat[r, c]) for c in range(3) for r in range(2)
    )
    expected = struct.pack("<4sHII", b"CPAD", FORMAT_VERSION, 2, 3) + payload
    assert path.read_bytes() == expected


def test_read_array_parses_hand_packed_bytes(tmp_path):
    mat = np.array([[0.0, -1.0], [2.5, 1e-300], [1e300, 7.0]])
    payload = b"".join(
        struct.pack("<d", mat[r, c]) for c in range(2) for r in range(3)
    )
    path = tmp_path / "m.cpad"
    path.write_bytes(struct.pack("<4sHII", b"CPAD", FORMAT_VERSION, 3, 2) + payload)
    assert np.array_equal(read_array(path), mat)


def test_array_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    for idx in range(20):
        mat = rng.standard_normal((rng.integers(1, 9), rng.integers(1, 9)))
        path = tmp_path / f"a{idx}.cpad"
        write_array(path, mat)
        assert np.array_equal(read_array(path), mat)


def test_write_array_rejects_non_matrix(tmp_path):
    with pytest.raises(ValueError, match="matrix"):
        write_array(tmp_path / "v.cpad", np.zeros(4))


def test_read_array_error_contract(tmp_path):
    path = tmp_path / "m.cpad"
    write_array(path, np.ones((3, 2)))
    raw = path.read_bytes()

    path.write_bytes(raw[:6])
    with pytest.raises(ValueError, match="truncated at byte 6"):
        read_array(path)

    path.write_bytes(raw[:30])
    with pytest.raises(ValueError, match=r"truncated at byte 30, expected 62"):
        read_array(path)

    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a dictionary array"):
        read_array(path)

    path.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(ValueError, match="unknown format version 9"):
        read_array(path)


def test_single_round_trip_bit_exact(single_model, tmp_path):
    _, model = single_model
    container = save_model(model, tmp_path / "m", vartheta=0.25)
    assert container.kind == "single"
    assert container.manifest["vartheta"] == 0.25
    back = load_model(tmp_path / "m")
    assert isinstance(back, CpaModel)
    assert back.frame == model.frame
    assert back.lambda_hat == model.lambda_hat
    assert back.eta_hat == model.eta_hat
    assert back.domains == model.domains
    assert back.shape.tree.parent == model.shape.tree.parent
    for a, b in zip(model.dictionaries, back.dictionaries):
        assert np.array_equal(a, b)
    for e1, e2 in zip(model.shape.edges, back.shape.edges):
        assert np.array_equal(e1.mu, e2.mu)
        assert np.array_equal(e1.precision, e2.precision)


def test_gallery_round_trip_bit_exact(single_model, tmp_path):
    data, model = single_model
    gallery = gallery_from(data, model)
    save_model(gallery, tmp_path / "g")
    back = load_model(tmp_path / "g")
    assert isinstance(back, GalleryModel)
    assert back.labels == gallery.labels
    assert back.domains == gallery.domains
    assert back.shape.tree.parent == gallery.shape.tree.parent
    for mats_a, mats_b in zip(gallery.dictionaries, back.dictionaries):
        for a, b in zip(mats_a, mats_b):
            assert np.array_equal(a, b)


def test_mixture_round_trip_bit_exact(single_model, tmp_path):
    _, model = single_model
    mixture = mixture_from(model)
    save_model(mixture, tmp_path / "x")
    back = load_model(tmp_path / "x")
    assert isinstance(back, MixtureCpaModel)
    assert back.masks == mixture.masks
    for comp_a, comp_b in zip(mixture.components, back.components):
        assert comp_b.domains == comp_a.domains
        assert comp_b.shape.tree.parent == comp_a.shape.tree.parent
        for a, b in zip(comp_a.dictionaries, comp_b.dictionaries):
            assert np.array_equal(a, b)


def test_save_is_deterministic(single_model, tmp_path):
    _, model = single_model
    save_model(model, tmp_path / "a", vartheta=0.25)
    save_model(model, tmp_path / "b", vartheta=0.25)
    text_a = (tmp_path / "a" / "manifest.json").read_text()
    text_b = (tmp_path / "b" / "manifest.json").read_text()
    assert text_a == text_b
    for name in json.loads(text_a)["arrays"].values():
        raw_a = (tmp_path / "a" / name["file"]).read_bytes()
        raw_b = (tmp_path / "b" / name["file"]).read_bytes()
        assert raw_a == raw_b


def test_validate_container_passes_and_returns_manifest(single_model, tmp_path):
    _, model = single_model
    save_model(model, tmp_path / "m", vartheta=0.5)
    manifest = validate_container(tmp_path / "m")
    assert manifest["kind"] == "single"
    assert manifest["vartheta"] == 0.5
    assert len(manifest["arrays"]) == len(model.domains)


def test_load_error_contract(single_model, tmp_path):
    _, model = single_model
    root = tmp_path / "m"
    save_model(model, root)

    with pytest.raises(ValueError, match="no manifest.json"):
        load_model(tmp_path / "absent")

    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text())

    manifest["format_version"] = 99
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="unknown format version 99"):
        load_model(root)
    manifest["format_version"] = FORMAT_VERSION

    entry = manifest["arrays"]["part01"]
    array_path = root / entry["file"]
    raw = array_path.read_bytes()

    array_path.unlink()
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="missing array file"):
        load_model(root)
    array_path.write_bytes(raw)

    corrupt = bytearray(raw)
    corrupt[-1] ^= 0xFF
    array_path.write_bytes(bytes(corrupt))
    with pytest.raises(ValueError, match="checksum mismatch"):
        load_model(root)
    array_path.write_bytes(raw)

    array_path.write_bytes(raw[:40])
    with pytest.raises(ValueError, match="truncated at byte 40"):
        load_model(root)
    array_path.write_bytes(raw)

    # Edit declared dimensions but keep a consistent checksum for the file.
    entry["rows"] = entry["rows"] + 1
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="dimension mismatch"):
        load_model(root)


def test_unknown_kind_rejected(single_model, tmp_path):
    _, model = single_model
    root = tmp_path / "m"
    save_model(model, root)
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["kind"] = "holographic"
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="unknown model kind"):
        load_model(root)


def test_save_rejects_foreign_objects(tmp_path):
    with pytest.raises(ValueError, match="cannot save"):
        save_model(object(), tmp_path / "m")
