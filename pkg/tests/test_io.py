import numpy as np
import pytest

from dprgnet.errors import FormatError, IntegrityError, UnsupportedVersionError
from dprgnet.io import (
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    Checkpoint,
    checkpoint_from_training,
    dataset_to_bytes,
    decode,
    encode,
    load_checkpoint,
    load_dataset,
    restore_training,
    save_checkpoint,
    save_dataset,
)
from dprgnet.model import ParameterStore, init_parameters, predict, preset
from dprgnet.priors import build_priors
from dprgnet.synth import SynthConfig, generate_synthetic_dataset
from dprgnet.training import TrainConfig, train


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic_dataset(SynthConfig(num_subjects=2, steps_per_subject=6, grid=(16, 8),
                                                  stance_len=8, seed=4))


def test_envelope_round_trip():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    header, back = decode(encode(b"TESTTEST", {"x": 1}, arrays), b"TESTTEST")
    assert header["x"] == 1
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_dataset_round_trip(dataset, tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(dataset, path)
    back = load_dataset(path)
    assert back.grid == dataset.grid and back.stance_len == dataset.stance_len
    assert [s.id for s in back.subjects] == [s.id for s in dataset.subjects]
    for a, b in zip(dataset.samples, back.samples):
        np.testing.assert_array_equal(a.pressure, b.pressure)
        np.testing.assert_array_equal(a.targets, b.targets)
        assert a.subject_id == b.subject_id and a.speed_mps == b.speed_mps
    assert (tmp_path / "d.bin.txt").read_text().startswith("samples: 12")
    assert dataset_to_bytes(back) == dataset_to_bytes(dataset)


def test_corrupt_byte_detected(dataset):
    blob = bytearray(dataset_to_bytes(dataset))
    for pos in (3, 20, len(blob) // 2, len(blob) - 40, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(IntegrityError):
            decode(bytes(bad), DATASET_MAGIC)


def test_truncated_detected(dataset, tmp_path):
    blob = dataset_to_bytes(dataset)
    for n in (0, 10, 50, len(blob) - 1):
        path = tmp_path / f"t{n}.bin"
        path.write_bytes(blob[:n])
        with pytest.raises(IntegrityError):
            load_dataset(path)


def test_old_version_names_both(dataset):
    blob = dataset_to_bytes(dataset, version=0)
    with pytest.raises(UnsupportedVersionError, match=r"version 0.*version 1"):
        decode(blob, DATASET_MAGIC)


def test_wrong_magic(dataset):
    with pytest.raises(FormatError):
        decode(dataset_to_bytes(dataset), CHECKPOINT_MAGIC)


def _tiny(variant="dprgnet"):
    return preset("desk", variant, grid_h=16, grid_w=8, stance_len=8, cnn_feature_dim=4, pos_dim=4, cop_dim=4,
                  feature_embed_dim=4, bottleneck_dim=4, regional_lstm_hidden=3, global_lstm_hidden=3)


def test_checkpoint_probe_bit_exact(dataset, tmp_path):
    cfg = _tiny()
    params = init_parameters(cfg, 7)
    pri = build_priors(dataset.samples)
    from dprgnet.model import attention_prior

    prior = attention_prior(pri.partition.labels, cfg)
    ckpt = Checkpoint(cfg.to_dict(), params.state(), pri.partition.labels, pri.prior.P)
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    np.testing.assert_array_equal(back.partition, pri.partition.labels)
    restored = ParameterStore.from_state(back.params)
    probe = np.random.default_rng(0).uniform(0, 1, (2, 8, 16, 8))
    a = predict(probe, params, cfg, prior)
    b = predict(probe, restored, cfg, attention_prior(back.partition, cfg))
    np.testing.assert_array_equal(a, b)


def test_resume_from_checkpoint_matches(dataset, tmp_path):
    tr, va = dataset.samples[:9], dataset.samples[9:]
    pri = build_priors(tr)
    cfg, tc = _tiny(), TrainConfig(max_epochs=3, patience=3, batch_size=4, seed=2)
    full = train(cfg, tr, va, pri, tc)
    part = train(cfg, tr, va, pri, tc, stop_after_epoch=0)
    save_checkpoint(checkpoint_from_training(cfg, tc, part, pri), tmp_path / "p.ckpt")
    mc, tc2, params, state, pri2 = restore_training(load_checkpoint(tmp_path / "p.ckpt"))
    assert mc == cfg and tc2 == tc
    resumed = train(mc, tr, va, pri, tc2, resume=(params, state))
    assert resumed.history == full.history
    for k in full.params.params:
        np.testing.assert_array_equal(resumed.params[k].data, full.params[k].data)
