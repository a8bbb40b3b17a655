import numpy as np
import pytest

from latentfluid import seqio
from latentfluid.errors import ContractViolation, DataFormatError
from latentfluid.metrics import metric_dbar, metric_dt, metric_report
from latentfluid.scenes import BoundarySet
from latentfluid.seqio import CameraSpec
from latentfluid.sph import Sequence


def test_sequence_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    seq = Sequence(rng.normal(size=(5, 17, 3)), rng.normal(size=(5, 17, 3)), 0.02)
    path = tmp_path / "a.lseq"
    seqio.write_sequence(path, seq)
    back = seqio.read_sequence(path)
    assert back.frame_dt == seq.frame_dt
    assert back.positions.tobytes() == seq.positions.tobytes()
    assert back.velocities.tobytes() == seq.velocities.tobytes()


def test_sequence_rejects_single_frame(tmp_path):
    with pytest.raises(ContractViolation):
        seqio.write_sequence(tmp_path / "b.lseq", Sequence(np.zeros((1, 3, 3)), np.zeros((1, 3, 3)), 0.02))


def test_sequence_parse_errors(tmp_path):
    p = tmp_path / "bad.lseq"
    p.write_bytes(b"XXXX")
    with pytest.raises(DataFormatError) as ei:
        seqio.read_sequence(p)
    assert "byte 0" in str(ei.value)

    seq = Sequence(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), 0.02)
    good = tmp_path / "good.lseq"
    seqio.write_sequence(good, seq)
    blob = good.read_bytes()
    (tmp_path / "trunc.lseq").write_bytes(blob[:-8])
    with pytest.raises(DataFormatError) as ei:
        seqio.read_sequence(tmp_path / "trunc.lseq")
    assert "truncated" in str(ei.value)
    (tmp_path / "extra.lseq").write_bytes(blob + b"\x00")
    with pytest.raises(DataFormatError):
        seqio.read_sequence(tmp_path / "extra.lseq")


def test_boundary_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    bnd = BoundarySet(rng.normal(size=(9, 3)), rng.normal(size=(9, 3)))
    seqio.write_boundary(tmp_path / "b.lbnd", bnd)
    back = seqio.read_boundary(tmp_path / "b.lbnd")
    assert back.positions.tobytes() == bnd.positions.tobytes()
    assert back.normals.tobytes() == bnd.normals.tobytes()


def test_cameras_roundtrip(tmp_path):
    cams = [
        CameraSpec(np.eye(4), 50.0, 64, 64),
        CameraSpec(np.arange(16, dtype=float).reshape(4, 4), 80.0, 32, 48),
    ]
    seqio.write_cameras(tmp_path / "cams.json", cams)
    back = seqio.read_cameras(tmp_path / "cams.json")
    assert len(back) == 2
    assert np.array_equal(back[1].c2w, cams[1].c2w)
    assert back[1].focal == 80.0 and back[1].width == 32 and back[1].height == 48


def test_image_roundtrip_quantized(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(16, 16, 3))
    p = tmp_path / seqio.image_name(3, 12)
    assert p.name == "view03_t012.png"
    seqio.write_image(p, img)
    back = seqio.read_image(p)
    assert back.shape == (16, 16, 3)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12


def metric_dbar_oracle(true_seq, pred_seq):
    import math

    total = 0.0
    count = 0
    for t in range(true_seq.shape[0]):
        for i in range(true_seq.shape[1]):
            best = math.inf
            for j in range(pred_seq.shape[1]):
                dx = true_seq[t, i, 0] - pred_seq[t, j, 0]
                dy = true_seq[t, i, 1] - pred_seq[t, j, 1]
                dz = true_seq[t, i, 2] - pred_seq[t, j, 2]
                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                if d < best:
                    best = d
            total += best
            count += 1
    return total / count


def test_dbar_matches_loop_oracle():
    rng = np.random.default_rng(3)
    true_seq = rng.uniform(size=(4, 12, 3))
    pred_seq = rng.uniform(size=(4, 9, 3))
    got = metric_dbar(true_seq, pred_seq)
    want = metric_dbar_oracle(true_seq, pred_seq)
    assert got == pytest.approx(want, rel=0, abs=1e-15)


def test_dbar_zero_on_identical_and_asymmetric():
    rng = np.random.default_rng(4)
    seq = rng.uniform(size=(3, 10, 3))
    assert metric_dbar(seq, seq) == 0.0
    # one-directional: extra predicted particles do not hurt
    extra = np.concatenate([seq, rng.uniform(size=(3, 5, 3)) + 10.0], axis=1)
    assert metric_dbar(seq, extra) == 0.0
    assert metric_dbar(extra, seq) > 0.0


def test_dt_horizons():
    true_seq = np.zeros((2, 4, 3))
    pred_seq = np.zeros((2, 4, 3))
    pred_seq[0, :, 0] = 0.1  # tau = 1
    pred_seq[1, :, 1] = 0.2  # tau = 2
    assert metric_dt(true_seq, pred_seq, 1) == pytest.approx(0.1)
    assert metric_dt(true_seq, pred_seq, 2) == pytest.approx(0.2)
    with pytest.raises(ContractViolation):
        metric_dt(true_seq, pred_seq, 3)


def test_metric_report_scales_display_units():
    rng = np.random.default_rng(5)
    true_seq = rng.uniform(size=(3, 8, 3))
    preds = [true_seq + 0.01, true_seq + 0.02]
    rep = metric_report(true_seq, preds, display_scale=1000.0)
    assert rep["n_samples"] == 2
    assert rep["dbar_mean_display"] == pytest.approx(rep["dbar_mean"] * 1000.0)
    assert rep["dt_1_mean"] > 0.0
