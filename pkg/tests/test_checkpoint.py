import numpy as np
import pytest

from mergelab import checkpoint as ckpt
from mergelab.errors import IncompatibleError, InputError
from mergelab.recmodel import init_params


def _model(seed=0, hidden=6):
    p = init_params(5, hidden, 3, 3, seed=seed).rounded()
    p.role, p.domain_id, p.seed = "finetuned", "arts", seed
    p.extra["config"] = "abc123"
    return p


def test_round_trip_is_bit_exact(tmp_path):
    p = _model()
    ckpt.save(p, tmp_path / "a.ckpt")
    q = ckpt.load(tmp_path / "a.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert (q.role, q.domain_id, q.seed, q.extra) == ("finetuned", "arts", 0, {"config": "abc123"})
    ckpt.save(q, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_manifest_is_readable_text():
    head = ckpt.to_bytes(_model()).split(b"\n---\n")[0].decode()
    assert head.splitlines()[0] == "mergelab-checkpoint 1"
    assert "layers: 3" in head and "layer.0.weight: 6x5" in head and "layer.2.bias: 3" in head


def test_payload_is_little_endian_float32():
    p = _model()
    blob = ckpt.to_bytes(p)
    body = blob.split(b"\n---\n", 1)[1]
    assert len(body) == 4 * p.size
    assert np.array_equal(np.frombuffer(body, dtype="<f4")[: p.weights[0].size], p.weights[0].ravel().astype("<f4"))


def test_truncated_and_foreign_files_rejected(tmp_path):
    blob = ckpt.to_bytes(_model())
    with pytest.raises(InputError, match="payload"):
        ckpt.from_bytes(blob[:-4])
    with pytest.raises(InputError):
        ckpt.from_bytes(b"hello world")
    with pytest.raises(InputError, match="not found"):
        ckpt.load(tmp_path / "missing.ckpt")


def test_load_compatible_lists_offending_shapes(tmp_path):
    ckpt.save(_model(0), tmp_path / "a.ckpt")
    ckpt.save(_model(1, hidden=7), tmp_path / "b.ckpt")
    with pytest.raises(IncompatibleError, match=r"b\.ckpt.*\(7, 5\)"):
        ckpt.load_compatible([tmp_path / "a.ckpt", tmp_path / "b.ckpt"])
