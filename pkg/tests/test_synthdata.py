import json
import struct
import zlib

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from bbuda.synthdata import (SOURCE_SPEC, TARGET_SPEC, DatasetError, DatasetVersionError, DomainSpec,
                             GeometryError, SegSample, dataset_digest, decode_sample, encode_sample,
                             generate_domain, generate_sample, load_dataset, load_manifest, make_splits,
                             save_dataset, stack)


@pytest.fixture(scope="module")
def source100():
    return generate_domain(SOURCE_SPEC, 100)


@pytest.fixture(scope="module")
def target100():
    return generate_domain(TARGET_SPEC, 100)


def test_zero_lesions_gives_background_only():
    spec = SOURCE_SPEC.replace(lesion_count=(0, 0))
    for s in generate_domain(spec, 5):
        assert not s.label.any()


def test_generation_is_deterministic():
    a, b = generate_domain(TARGET_SPEC, 6), generate_domain(TARGET_SPEC, 6)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.label, y.label)
        assert x.id == y.id


def test_sample_depends_only_on_spec_and_index():
    tail = generate_domain(SOURCE_SPEC, 3, start=10)
    np.testing.assert_array_equal(tail[1].image, generate_sample(SOURCE_SPEC, 11).image)


def test_splits_are_disjoint():
    train, test = make_splits(SOURCE_SPEC, 10, 5)
    assert not {s.id for s in train} & {s.id for s in test}


@pytest.mark.parametrize("spec", [SOURCE_SPEC, TARGET_SPEC], ids=["source", "target"])
def test_images_clipped_and_shaped(spec):
    for s in generate_domain(spec, 20):
        assert s.image.shape == (4, 32, 32) and s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.label.shape == (32, 32) and set(np.unique(s.label)) <= {0, 1, 2, 3}


def _nested(label):
    """core pixels lie inside enhancing-or-core, which lies inside the whole lesion."""
    from scipy.ndimage import binary_fill_holes

    whole = label > 0
    enh_or_core = label >= 2
    return (np.all(binary_fill_holes(enh_or_core) <= binary_fill_holes(whole))
            and np.all((label == 3) <= binary_fill_holes(enh_or_core)))


@pytest.mark.parametrize("spec", [SOURCE_SPEC, TARGET_SPEC], ids=["source", "target"])
def test_class_regions_are_nested(spec):
    for s in generate_domain(spec, 50):
        assert _nested(s.label), s.id


@pytest.mark.parametrize("fixture", ["source100", "target100"])
def test_every_class_present_in_most_samples(fixture, request):
    samples = request.getfixturevalue(fixture)
    for c in range(4):
        assert np.mean([(s.label == c).any() for s in samples]) >= 0.95


@pytest.mark.parametrize("fixture,spec", [("source100", SOURCE_SPEC), ("target100", TARGET_SPEC)])
def test_lesion_contrast_matches_spec(fixture, spec, request):
    """Lesion-minus-background mean intensity vs the class contrasts weighted by area."""
    samples = request.getfixturevalue(fixture)
    img, lab = stack(samples)
    lesion = lab > 0
    measured = np.array([img[:, ch][lesion].mean() - img[:, ch][~lesion].mean() for ch in range(4)])
    area = np.array([(lab == c).sum() for c in (1, 2, 3)], float)
    expected = (area / area.sum()) @ spec.contrast()
    assert np.linalg.norm(measured - expected) <= 0.1 * np.linalg.norm(expected)


def test_domains_separable_by_lesion_area(source100, target100):
    src = np.array([(s.label > 0).sum() for s in source100])
    tgt = np.array([(s.label > 0).sum() for s in target100])
    threshold = (src.mean() + tgt.mean()) / 2
    correct = (src > threshold).sum() + (tgt <= threshold).sum()
    assert correct / 200 >= 0.9


def test_infeasible_geometry():
    with pytest.raises(GeometryError):
        generate_domain(SOURCE_SPEC.replace(radius=(10.0, 20.0)), 1)
    with pytest.raises(GeometryError):
        DomainSpec(radius=(0.5, 2.0))


def test_halo_brightens_unlabelled_rim_only():
    plain = SOURCE_SPEC.replace(halo_width=0.0, noise=0.0, texture=0.0)
    rimmed = plain.replace(halo_width=2.0, halo_level=0.5)
    a, b = generate_sample(plain, 3), generate_sample(rimmed, 3)
    assert np.array_equal(a.label, b.label)
    fg = a.label > 0
    ring = binary_dilation(fg, iterations=2) & ~fg
    far = ~binary_dilation(fg, iterations=6)
    flair = 3
    assert (b.image[flair][ring] - a.image[flair][ring]).mean() > 0.05
    assert np.array_equal(a.image[:, far], b.image[:, far])


def test_halo_validation():
    with pytest.raises(ValueError):
        DomainSpec(halo_width=-1.0)
    with pytest.raises(ValueError):
        DomainSpec(halo_level=1.5)


def test_spec_dict_round_trip():
    assert DomainSpec.from_dict(json.loads(json.dumps(TARGET_SPEC.to_dict()))) == TARGET_SPEC


# -- persistence ---------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    samples = generate_domain(TARGET_SPEC, 5)
    save_dataset(samples, tmp_path / "d", TARGET_SPEC)
    back = load_dataset(tmp_path / "d")
    assert [s.id for s in back] == [s.id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.label, b.label)
    manifest = load_manifest(tmp_path / "d")
    assert manifest["count"] == len(list((tmp_path / "d").glob("*.bbud"))) == 5
    assert DomainSpec.from_dict(manifest["spec"]) == TARGET_SPEC


def test_unlabelled_samples_round_trip():
    s = generate_sample(SOURCE_SPEC, 0).unlabeled()
    back = decode_sample(encode_sample(s), s.id)
    assert back.label is None
    np.testing.assert_array_equal(back.image, s.image)


def test_record_header():
    data = encode_sample(generate_sample(SOURCE_SPEC, 0))
    assert data[:4] == b"BBUD"
    assert struct.unpack_from("<HHHH", data, 4) == (1, 4, 32, 32)


def _with_version(data: bytes, version: int) -> bytes:
    buf = bytearray(data[:-4])
    struct.pack_into("<H", buf, 4, version)
    return bytes(buf) + struct.pack("<I", zlib.crc32(bytes(buf)))


def test_old_version_record_is_rejected_explicitly():
    data = _with_version(encode_sample(generate_sample(SOURCE_SPEC, 0)), 0)
    with pytest.raises(DatasetVersionError, match="version 0"):
        decode_sample(data, "old")


def test_corrupted_record_fails_checksum(tmp_path):
    save_dataset(generate_domain(SOURCE_SPEC, 2), tmp_path)
    f = next(tmp_path.glob("*.bbud"))
    raw = bytearray(f.read_bytes())
    raw[100] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(tmp_path)


def test_missing_record_and_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    save_dataset(generate_domain(SOURCE_SPEC, 2), tmp_path)
    next(tmp_path.glob("*.bbud")).unlink()
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(tmp_path)


def test_digest_tracks_content(tmp_path):
    save_dataset(generate_domain(SOURCE_SPEC, 2), tmp_path / "a")
    save_dataset(generate_domain(SOURCE_SPEC, 2), tmp_path / "b")
    save_dataset(generate_domain(TARGET_SPEC, 2), tmp_path / "c")
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")
    assert dataset_digest(tmp_path / "a") != dataset_digest(tmp_path / "c")


def test_stack_without_labels():
    images, labels = stack([generate_sample(SOURCE_SPEC, 0).unlabeled()])
    assert images.shape == (1, 4, 32, 32) and labels is None
