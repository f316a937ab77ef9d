import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stainforge.data import (DataError, FilterRules, PatchRecord, SynthSpec, deoverlap, filter_by_coverage,
                             filter_empty_by_ssim, generate_synthetic, ingest_directory, tile_starts, write_directory,
                             zero_ratio)

SPEC = SynthSpec(size=32, M=4, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SPEC, 40)


def test_generation_is_bitwise_deterministic(corpus):
    again = generate_synthetic(SPEC, 40)
    for a, b in zip(corpus, again):
        assert a.id == b.id
        assert a.source.tobytes() == b.source.tobytes()
        assert all(a.markers[m].tobytes() == b.markers[m].tobytes() for m in SPEC.panel())


def test_records_depend_only_on_seed_and_index(corpus):
    tail = generate_synthetic(SPEC, 3, offset=10)
    for a, b in zip(corpus[10:13], tail):
        assert a.id == b.id and np.array_equal(a.source, b.source)
    other = generate_synthetic(SynthSpec(size=32, M=4, seed=4), 1)[0]
    assert not np.array_equal(other.source, corpus[0].source)


def test_record_invariants(corpus):
    for r in corpus:
        assert r.source.shape == (3, 32, 32)
        assert 0 <= r.source.min() and r.source.max() <= 1
        for img in r.markers.values():
            assert img.shape == (1, 32, 32) and 0 <= img.min() and img.max() <= 1
        assert set(np.unique(r.mask)) <= {0.0, 1.0}


def test_marker_channels_differ_pairwise(corpus):
    names = SPEC.panel()
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            assert np.mean([np.abs(r.markers[a] - r.markers[b]).mean() for r in corpus]) > 0.01


def test_zero_ratio_spans_a_wide_range(corpus):
    ratios = {m: [zero_ratio(r.markers[m]) for r in corpus] for m in SPEC.panel()}
    assert max(ratios["DAPI"]) == 0.0  # nuclei channel has a non-zero floor
    assert max(np.mean(v) for v in ratios.values()) > 0.8
    assert any(r.meta["background"] for r in corpus)


def test_spec_validation():
    with pytest.raises(ValueError):
        generate_synthetic(SynthSpec(M=7), 1)
    with pytest.raises(ValueError):
        generate_synthetic(SynthSpec(M=2, rules=("nuclei", "nuclei")), 1)
    with pytest.raises(ValueError):
        generate_synthetic(SPEC, 0)
    assert SynthSpec(M=6).panel() == ("DAPI", "panCK", "CD3", "CD68", "Ki67", "SMA")


def test_patch_record_checks_shapes():
    with pytest.raises(DataError):
        PatchRecord("x", np.zeros((3, 4, 4)), {"A": np.zeros((1, 4, 5))})
    with pytest.raises(DataError):
        PatchRecord("x", np.zeros((3, 4, 4)), {}, split="holdout")


def test_zero_ratio_examples():
    assert zero_ratio(np.zeros((1, 4, 4))) == 1.0
    assert zero_ratio(np.full((1, 4, 4), 0.5)) == 0.0
    # values below half a quantisation step count as zero
    assert zero_ratio(np.full((4, 4), 0.001)) == 1.0
    assert zero_ratio(np.full((4, 4), 0.001), bit_depth=16) == 0.0


@pytest.mark.parametrize("length,patch,overlap,expected", [
    (1024, 512, 0.0, [0, 512]),
    (1024, 512, 0.5, [0, 256, 512]),
    (1000, 512, 0.0, [0, 488]),
    (512, 512, 0.5, [0]),
])
def test_tile_starts(length, patch, overlap, expected):
    assert tile_starts(length, patch, overlap) == expected


def test_tile_starts_rejects_small_images():
    with pytest.raises(DataError):
        tile_starts(100, 512, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 300), st.integers(1, 64), st.floats(0, 0.9))
def test_tiling_covers_every_pixel(length, patch, overlap):
    if patch > length:
        return
    covered = np.zeros(length, bool)
    for s in tile_starts(length, patch, overlap):
        assert 0 <= s <= length - patch
        covered[s : s + patch] = True
    assert covered.all()


def _write_raw(root, ident, source, markers):
    (root / "source").mkdir(parents=True, exist_ok=True)
    Image.fromarray(source).save(root / "source" / f"{ident}.png")
    for name, arr in markers.items():
        (root / "markers" / name).mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(root / "markers" / name / f"{ident}.png")


def test_ingest_tiling_counts(tmp_path):
    rng = np.random.default_rng(0)
    _write_raw(tmp_path, "slide", rng.integers(0, 255, (64, 64, 3), dtype=np.uint8),
               {"A": rng.integers(0, 65535, (64, 64), dtype=np.uint16)})
    assert len(ingest_directory(tmp_path, ["A"], 32, 0.0)) == 4
    tiles = ingest_directory(tmp_path, ["A"], 32, 0.5)
    assert len(tiles) == 9 and len({t.id for t in tiles}) == 9
    whole = ingest_directory(tmp_path, ["A"], 64)
    assert [t.id for t in whole] == ["slide"]


def test_ingest_normalises_16_bit_markers(tmp_path):
    arr = np.array([[0, 65535], [32768, 1]], dtype=np.uint16)
    _write_raw(tmp_path, "a", np.zeros((2, 2, 3), np.uint8), {"A": arr})
    rec = ingest_directory(tmp_path, ["A"])[0]
    np.testing.assert_allclose(rec.markers["A"][0], arr / 65535.0, rtol=1e-6)


@pytest.mark.parametrize("bit_depth", [8, 16])
def test_write_then_ingest_round_trip(tmp_path, corpus, bit_depth):
    recs = corpus[:5]
    manifest = write_directory(recs, tmp_path, SPEC.panel(), bit_depth)
    assert manifest["count"] == 5 and len(manifest["records"]) == 5
    back = ingest_directory(tmp_path, SPEC.panel())
    assert [r.id for r in back] == [r.id for r in recs]
    levels = (1 << bit_depth) - 1
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(b.source, a.source)  # already 8-bit quantised
        np.testing.assert_array_equal(b.mask, a.mask)
        for m in SPEC.panel():
            np.testing.assert_array_equal(b.markers[m], (np.round(a.markers[m] * levels) / levels).astype(np.float32))


def test_ingest_errors(tmp_path):
    rng = np.random.default_rng(0)
    _write_raw(tmp_path, "a", rng.integers(0, 255, (8, 8, 3), dtype=np.uint8), {"A": np.zeros((8, 8), np.uint8)})
    with pytest.raises(DataError, match="markers/B"):
        ingest_directory(tmp_path, ["A", "B"])
    (tmp_path / "markers" / "B").mkdir()
    with pytest.raises(DataError, match="missing marker B"):
        ingest_directory(tmp_path, ["A", "B"])
    Image.fromarray(np.zeros((8, 9), np.uint8)).save(tmp_path / "markers" / "B" / "a.png")
    with pytest.raises(DataError, match="marker B"):
        ingest_directory(tmp_path, ["A", "B"])
    with pytest.raises(DataError):
        ingest_directory(tmp_path / "nothing", ["A"])


def test_manifest_has_split_and_marker_stats(tmp_path, corpus):
    write_directory(corpus[:3], tmp_path, SPEC.panel())
    m = json.loads((tmp_path / "manifest.json").read_text())
    entry = m["records"][0]
    assert entry["split"] == "train" and set(entry["markers"]) == set(SPEC.panel())
    assert {"zero_ratio", "empty", "mean"} <= set(entry["markers"]["CD3"])


def _rec(i, mask=None, marker=None):
    marker = np.zeros((1, 16, 16)) if marker is None else marker
    return PatchRecord(f"r{i}", np.zeros((3, 16, 16)), {"A": marker}, mask)


def test_coverage_filter_matches_mask_fraction_oracle():
    rng = np.random.default_rng(0)
    recs = [_rec(i, (rng.random((1, 16, 16)) < rng.random()).astype(np.float32)) for i in range(60)]
    kept = filter_by_coverage(recs, FilterRules(min_cell_coverage=0.25))
    expected = [r.id for r in recs if np.count_nonzero(r.mask) / r.mask.size >= 0.25]
    assert [r.id for r in kept] == expected
    assert len(filter_by_coverage(recs, FilterRules(min_cell_coverage=0.0))) == 60
    assert filter_by_coverage([_rec(0, np.zeros((1, 16, 16)))], FilterRules(min_cell_coverage=0.25)) == []


def test_coverage_filter_fallback_and_error():
    marker = np.zeros((1, 16, 16))
    marker[0, :8] = 0.5
    rec = _rec(0, None, marker)
    assert filter_by_coverage([rec], FilterRules(0.5, fallback_marker="A")) == [rec]
    assert filter_by_coverage([rec], FilterRules(0.6, fallback_marker="A")) == []
    with pytest.raises(DataError):
        filter_by_coverage([rec], FilterRules(0.25))


def test_empty_filter_semantics():
    signal = np.zeros((1, 16, 16))
    signal[0, 2:14, 2:14] = np.random.default_rng(0).uniform(0.3, 1, (12, 12))
    recs = [_rec(0), _rec(1, marker=signal)]
    kept, n_out = filter_empty_by_ssim(recs, "A", 0.8)
    assert [r.id for r in kept] == ["r1"] and n_out == 1
    kept, n_out = filter_empty_by_ssim(recs, "A", 1.0)  # strict '>' keeps the all-zero patch
    assert n_out == 0
    with pytest.raises(KeyError):
        filter_empty_by_ssim(recs, "B", 0.8)
    with pytest.raises(ValueError):
        filter_empty_by_ssim(recs, "A", 1.5)


def test_filters_are_idempotent(corpus):
    once, _ = filter_empty_by_ssim(corpus, "CD3", 0.8)
    twice, n = filter_empty_by_ssim(once, "CD3", 0.8)
    assert [r.id for r in twice] == [r.id for r in once] and n == 0
    rules = FilterRules(min_cell_coverage=0.3)
    c1 = filter_by_coverage(corpus, rules)
    assert [r.id for r in filter_by_coverage(c1, rules)] == [r.id for r in c1]


def test_deoverlap_by_centre_distance():
    recs = []
    for i, (y, x) in enumerate([(0, 0), (0, 8), (0, 16), (16, 0)]):
        r = _rec(i)
        r.meta.update(parent="s", origin=(y, x))
        recs.append(r)
    assert [r.id for r in deoverlap(recs, 10)] == ["r0", "r2", "r3"]
    assert len(deoverlap(recs, 0)) == 4
