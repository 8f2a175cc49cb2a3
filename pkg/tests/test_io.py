import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rand_model
from moekit.core import TokenBatch
from moekit.io import (
    PRESETS,
    BadMagicError,
    SizeMismatchError,
    TruncatedError,
    VersionMismatchError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    dumps_report,
    load_batch,
    load_checkpoint,
    params_table,
    read_report,
    report_doc,
    save_batch,
    save_checkpoint,
    write_report,
)
from moekit.synth import PlantedSpec, gen_planted_model
from moekit.pipeline import hc_smoe
from moekit.calibration import collect_stats
from moekit.synth import gen_batch


def _same_model(a, b):
    assert (a.d_h, a.d_m, a.num_layers) == (b.d_h, b.d_m, b.num_layers)
    for la, lb in zip(a.layers, b.layers):
        assert la.remap == lb.remap and la.k == lb.k
        assert np.array_equal(la.router, lb.router)
        assert all(x.identical_to(y) for x, y in zip(la.experts, lb.experts))


def test_save_load_roundtrip(tmp_path, rng):
    model = rand_model(rng, L=3, n=5, k=2)
    save_checkpoint(model, tmp_path / "m.smck")
    _same_model(model, load_checkpoint(tmp_path / "m.smck"))


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    layers=st.integers(0, 3),
    experts=st.integers(1, 6),
    d_h=st.integers(1, 5),
    d_m=st.integers(1, 5),
    noise=st.sampled_from([0.0, 0.01, 0.3]),
)
def test_roundtrip_generated_models(seed, layers, experts, d_h, d_m, noise):
    spec = PlantedSpec(layers=layers, experts=experts, clusters=1 + seed % experts, d_h=d_h, d_m=d_m,
                       k=1 + seed % experts, noise=noise, seed=seed)
    model, _ = gen_planted_model(spec)
    data = checkpoint_bytes(model)
    back = checkpoint_from_bytes(data)
    _same_model(model, back)
    assert checkpoint_bytes(back) == data


def test_merged_model_roundtrip():
    spec = PlantedSpec(layers=2, seed=1)
    model, _ = gen_planted_model(spec)
    merged, _ = hc_smoe(model, collect_stats(model, gen_batch(spec)), 5)
    back = checkpoint_from_bytes(checkpoint_bytes(merged))
    _same_model(merged, back)
    assert back.layers[0].n == 16 and back.layers[0].n_storage == 5


def test_header_layout(rng):
    model = rand_model(rng, L=1, n=3, k=2, d_h=4, d_m=5)
    data = checkpoint_bytes(model)
    assert data[:4] == b"SMCK"
    assert struct.unpack_from("<HIII", data, 4) == (1, 1, 4, 5)
    assert struct.unpack_from("<III", data, 18) == (3, 2, 3)
    router = np.frombuffer(data, "<f4", count=12, offset=30 + 12).reshape(4, 3)
    assert np.array_equal(router, model.layers[0].router)


def test_bad_magic(rng):
    data = checkpoint_bytes(rand_model(rng))
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(b"XXXX" + data[4:])


def test_version_mismatch(rng):
    data = bytearray(checkpoint_bytes(rand_model(rng)))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionMismatchError):
        checkpoint_from_bytes(bytes(data))


def test_truncated(rng):
    data = checkpoint_bytes(rand_model(rng))
    for cut in (len(data) - 1, len(data) // 2, 10):
        with pytest.raises(TruncatedError):
            checkpoint_from_bytes(data[:cut])


def test_huge_claim_rejected_before_allocation():
    data = b"SMCK" + struct.pack("<HIII", 1, 1, 4, 4) + struct.pack("<III", 10**9, 2, 10**9)
    data += b"\0" * (100 - len(data))
    with pytest.raises(SizeMismatchError):
        checkpoint_from_bytes(data)


def test_trailing_bytes_rejected(rng):
    with pytest.raises(SizeMismatchError):
        checkpoint_from_bytes(checkpoint_bytes(rand_model(rng)) + b"\0")


def test_batch_roundtrip_and_errors(tmp_path, rng):
    b = TokenBatch(rng.standard_normal((7, 3)))
    save_batch(b, tmp_path / "b.f32mat")
    raw = (tmp_path / "b.f32mat").read_bytes()
    assert raw[:4] == b"F32M" and struct.unpack_from("<II", raw, 4) == (7, 3)
    assert np.array_equal(load_batch(tmp_path / "b.f32mat").vectors, b.vectors)
    (tmp_path / "t.f32mat").write_bytes(raw[:-4])
    with pytest.raises(TruncatedError):
        load_batch(tmp_path / "t.f32mat")
    (tmp_path / "m.f32mat").write_bytes(b"SMCK" + raw[4:])
    with pytest.raises(BadMagicError):
        load_batch(tmp_path / "m.f32mat")


def test_report_full_precision(tmp_path):
    x = 0.1 + 0.2
    doc = report_doc("t", {"seed": 1}, value=x)
    write_report(doc, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back["value"] == x and back["schema_version"] == 1
    text = dumps_report(doc)
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"


def test_params_presets():
    mix = PRESETS["mixtral-8x7b"]
    rows = {r["experts"]: r["total_billions"] for r in params_table(mix, [8, 6, 4])}
    assert rows[8] == pytest.approx(46.7, rel=0.02)
    assert rows[6] == pytest.approx(35.6, rel=0.02)
    assert rows[4] == pytest.approx(24.3, rel=0.02)
    qwen = PRESETS["qwen1.5-moe-a2.7b"]
    rows = {r["experts"]: r["total_billions"] for r in params_table(qwen, [60, 45, 30])}
    assert rows[60] == pytest.approx(14.3, rel=0.02)
    assert rows[45] == pytest.approx(11.2, rel=0.02)
    assert rows[30] == pytest.approx(8.1, rel=0.02)


def test_expert_params_halve(rng):
    mix = PRESETS["mixtral-8x7b"]
    assert params_table(mix, [4])[0]["expert_ratio"] == 0.5
