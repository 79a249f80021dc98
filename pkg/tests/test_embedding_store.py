from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import deltastyle as ds
from deltastyle import embedding_store as store
from deltastyle import synthetic_world as sw
from deltastyle.errors import (
    BadMagicError,
    DigestError,
    TruncatedError,
    ValidationError,
    VersionError,
)


def unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


def small_dataset(seed=0, n=3, clip=6, style=10):
    rng = np.random.default_rng(seed)
    return store.EmbeddingDataset(images=unit_rows(rng, n, clip),
                                  styles=rng.normal(size=(n, style)))


# --------------------------------------------------------------------------
# FNV-1a digest


def _fnv1a_oracle(data: bytes) -> int:
    # Independent reimplementation, kept deliberately naive.
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def test_fnv1a_known_vectors():
    assert store.fnv1a(b"") == 0xCBF29CE484222325
    assert store.fnv1a(b"a") == _fnv1a_oracle(b"a")
    assert store.fnv1a(b"foobar") == _fnv1a_oracle(b"foobar")


def test_fnv1a_chaining_equals_one_shot():
    data = b"some longer payload for chunked hashing"
    assert store.fnv1a(data[7:], store.fnv1a(data[:7])) == store.fnv1a(data)


# --------------------------------------------------------------------------
# dataset round trips


def test_write_read_round_trip_bit_exact(tmp_path):
    dataset = small_dataset()
    path = tmp_path / "d.deds"
    store.write_dataset(path, dataset)
    assert store.read_dataset(path) == dataset


def test_rewrite_is_byte_identical(tmp_path):
    dataset = small_dataset(5)
    a, b = tmp_path / "a.deds", tmp_path / "b.deds"
    store.write_dataset(a, dataset)
    store.write_dataset(b, dataset)
    assert a.read_bytes() == b.read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(1, 7),
       st.integers(0, 2 ** 31 - 1))
def test_round_trip_property(tmp_path_factory, n, clip, style, seed):
    dataset = small_dataset(seed, n=n, clip=clip, style=style)
    path = tmp_path_factory.mktemp("rt") / "d.deds"
    store.write_dataset(path, dataset)
    assert store.read_dataset(path) == dataset


def test_large_synthetic_dataset_digest_matches_independent_oracle(tmp_path):
    world = sw.gen_world(sw.WorldConfig(), 11)
    dataset = sw.gen_dataset(world, 10000, seed=77)
    assert dataset.clip_dim == 64 and dataset.style_dim == 352
    path = tmp_path / "big.deds"
    store.write_dataset(path, dataset)
    assert store.read_dataset(path) == dataset

    raw = path.read_bytes()
    header = struct.unpack("<4sIQIIQ", raw[:32])
    stored_digest = header[5]
    assert _fnv1a_oracle(raw[32:]) == stored_digest


def test_multiple_dataset_files_concatenate(tmp_path):
    a = small_dataset(1, n=3)
    b = small_dataset(2, n=4)
    pa, pb = tmp_path / "a.deds", tmp_path / "b.deds"
    store.write_dataset(pa, a)
    store.write_dataset(pb, b)
    merged = store.read_datasets(f"{pa},{pb}")
    assert merged.n == 7
    assert np.array_equal(merged.images[:3], a.images)
    assert np.array_equal(merged.styles[3:], b.styles)


def test_multiple_dataset_files_must_share_dims(tmp_path):
    a = small_dataset(1, clip=6)
    b = small_dataset(2, clip=8)
    pa, pb = tmp_path / "a.deds", tmp_path / "b.deds"
    store.write_dataset(pa, a)
    store.write_dataset(pb, b)
    with pytest.raises(ValidationError, match="dims"):
        store.read_datasets(f"{pa},{pb}")


def test_norm_violation_refused_before_write(tmp_path):
    rng = np.random.default_rng(1)
    images = unit_rows(rng, 3, 4)
    images = images.copy()
    images[1] *= 0.5
    dataset = store.EmbeddingDataset(images=images,
                                     styles=rng.normal(size=(3, 5)))
    path = tmp_path / "bad.deds"
    with pytest.raises(ValidationError, match="unit-norm"):
        store.write_dataset(path, dataset)
    assert not path.exists()


# --------------------------------------------------------------------------
# dataset read errors


def _written(tmp_path, dataset=None):
    path = tmp_path / "x.deds"
    store.write_dataset(path, dataset or small_dataset())
    return path


def test_bad_magic(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        store.read_dataset(path)


def test_version_mismatch(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        store.read_dataset(path)


def test_truncated_payload_names_byte_counts(tmp_path):
    path = _written(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 10])
    with pytest.raises(TruncatedError) as err:
        store.read_dataset(path)
    assert "expected" in str(err.value) and "got" in str(err.value)


def test_trailing_garbage_rejected(tmp_path):
    path = _written(tmp_path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(TruncatedError):
        store.read_dataset(path)


def test_corrupted_payload_fails_digest(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DigestError):
        store.read_dataset(path)


def test_non_finite_payload_rejected_at_read(tmp_path):
    dataset = small_dataset()
    path = tmp_path / "x.deds"
    store.write_dataset(path, dataset)
    raw = bytearray(path.read_bytes())
    # plant a NaN into the styles payload, then re-stamp the digest
    images_bytes = dataset.images.tobytes()
    styles = dataset.styles.copy()
    styles[0, 0] = np.nan
    payload = images_bytes + styles.tobytes()
    digest = store.fnv1a(payload)
    header = raw[:32]
    header[24:32] = struct.pack("<Q", digest)
    path.write_bytes(bytes(header) + payload)
    with pytest.raises(ValidationError, match="non-finite"):
        store.read_dataset(path)


# --------------------------------------------------------------------------
# validate


def test_validate_clean_dataset_empty_report():
    report = store.validate(small_dataset())
    assert report.ok
    assert report.summary() == "ok"


def test_validate_cites_planted_nan_index():
    rng = np.random.default_rng(2)
    styles = rng.normal(size=(5, 9))
    styles[3, 7] = np.nan
    dataset = store.EmbeddingDataset(images=unit_rows(rng, 5, 4),
                                     styles=styles)
    report = store.validate(dataset)
    assert not report.ok
    finding = next(f for f in report.findings if f.code == "styles_nonfinite")
    assert finding.first_index == (3, 7)
    assert finding.count == 1


def test_validate_flags_single_record_dataset():
    dataset = small_dataset(n=1)
    report = store.validate(dataset)
    codes = [f.code for f in report.findings]
    assert codes == ["insufficient_records"]
    assert "pair sampling" in report.findings[0].message


def test_validate_detects_each_invariant_separately():
    rng = np.random.default_rng(3)
    images = unit_rows(rng, 4, 6).copy()
    images[2] *= 3.0              # norm violation
    images[0, 1] = np.inf         # non-finite
    styles = rng.normal(size=(4, 5))
    styles[1, 2] = -np.inf
    report = store.validate(store.EmbeddingDataset(images=images,
                                                   styles=styles))
    codes = {f.code for f in report.findings}
    assert codes == {"images_nonfinite", "images_norm", "styles_nonfinite"}


# --------------------------------------------------------------------------
# text tables


def small_table(seed=0, n=4, clip=6):
    rng = np.random.default_rng(seed)
    names = tuple(f"prompt {i}" for i in range(n))
    return store.TextTable(names, unit_rows(rng, n, clip))


def test_text_table_round_trip(tmp_path):
    table = small_table()
    path = tmp_path / "t.dett"
    store.write_text_table(path, table)
    assert store.read_text_table(path, table.clip_dim) == table


def test_text_table_utf8_names(tmp_path):
    rng = np.random.default_rng(1)
    table = store.TextTable(("visage avec lunettes", "笑顔"),
                            unit_rows(rng, 2, 5))
    path = tmp_path / "t.dett"
    store.write_text_table(path, table)
    assert store.read_text_table(path, 5).names == table.names


def test_text_table_duplicate_names_refused(tmp_path):
    rng = np.random.default_rng(2)
    table = store.TextTable(("a", "a"), unit_rows(rng, 2, 4))
    with pytest.raises(ValidationError, match="duplicate"):
        store.write_text_table(tmp_path / "t.dett", table)


def test_text_table_truncation(tmp_path):
    table = small_table()
    path = tmp_path / "t.dett"
    store.write_text_table(path, table)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 3])
    with pytest.raises(TruncatedError):
        store.read_text_table(path, table.clip_dim)


def test_text_table_lookup():
    table = small_table()
    assert "prompt 2" in table
    with pytest.raises(KeyError):
        table.get("missing")


# --------------------------------------------------------------------------
# relevance files


def test_relevance_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    rows = unit_rows(rng, 7, 4).copy()
    rows[3] = 0.0  # dead channel stays exactly zero
    matrix = ds.RelevanceMatrix(rows=rows, probe=0.02, samples_per_channel=64)
    path = tmp_path / "r.derm"
    store.write_relevance(path, matrix)
    assert store.read_relevance(path) == matrix


def test_relevance_header_fields_survive(tmp_path):
    rng = np.random.default_rng(6)
    matrix = ds.RelevanceMatrix(rows=unit_rows(rng, 3, 5), probe=0.125,
                                samples_per_channel=9)
    path = tmp_path / "r.derm"
    store.write_relevance(path, matrix)
    back = store.read_relevance(path)
    assert back.probe == 0.125
    assert back.samples_per_channel == 9


def test_relevance_bad_rows_refused(tmp_path):
    rows = np.full((2, 3), 0.4, dtype=np.float32)
    matrix = ds.RelevanceMatrix(rows=rows, probe=0.1, samples_per_channel=4)
    with pytest.raises(ValidationError):
        store.write_relevance(tmp_path / "r.derm", matrix)


# --------------------------------------------------------------------------
# checkpoints


def micro_checkpoint(seed=0, with_state=True):
    rng = np.random.default_rng(seed)
    params = ds.init_mapper_params(ds.MICRO_LAYOUT, ds.MICRO_CLIP_DIM, rng)
    state = None
    if with_state:
        from deltastyle.delta_mapper import param_list
        from deltastyle.numerics import init_adam

        state = init_adam(param_list(params), lr=1e-3)
        state.step = 17
        for m in state.m:
            m += rng.normal(size=m.shape)
    return store.Checkpoint(params=params, seed=seed, config_digest=12345,
                            trainer_state=state)


def test_checkpoint_round_trip_reproduces_forward_bit_exactly(tmp_path):
    ckpt = micro_checkpoint(3)
    path = tmp_path / "c.dmap"
    store.write_checkpoint(path, ckpt)
    back = store.read_checkpoint(path)
    rng = np.random.default_rng(9)
    s = rng.normal(size=ds.MICRO_LAYOUT.total_channels)
    i = rng.normal(size=ds.MICRO_CLIP_DIM)
    c = rng.normal(size=ds.MICRO_CLIP_DIM)
    before, _ = ds.mapper_forward(ckpt.params, s, i, c)
    after, _ = ds.mapper_forward(back.params, s, i, c)
    assert np.array_equal(before, after)
    assert back.seed == ckpt.seed
    assert back.config_digest == ckpt.config_digest


def test_checkpoint_trainer_state_round_trip(tmp_path):
    ckpt = micro_checkpoint(4, with_state=True)
    path = tmp_path / "c.dmap"
    store.write_checkpoint(path, ckpt)
    back = store.read_checkpoint(path)
    assert back.trainer_state.step == 17
    for a, b in zip(ckpt.trainer_state.m, back.trainer_state.m):
        assert np.array_equal(a, b)
    for a, b in zip(ckpt.trainer_state.v, back.trainer_state.v):
        assert np.array_equal(a, b)


def test_checkpoint_without_state(tmp_path):
    ckpt = micro_checkpoint(5, with_state=False)
    path = tmp_path / "c.dmap"
    store.write_checkpoint(path, ckpt)
    assert store.read_checkpoint(path).trainer_state is None


def test_checkpoint_payload_corruption_detected(tmp_path):
    ckpt = micro_checkpoint(6)
    path = tmp_path / "c.dmap"
    store.write_checkpoint(path, ckpt)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(DigestError):
        store.read_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "c.dmap"
    path.write_bytes(b"WHAT" + b"\x00" * 64)
    with pytest.raises(BadMagicError):
        store.read_checkpoint(path)
