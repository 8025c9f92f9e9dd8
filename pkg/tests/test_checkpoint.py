import json

import numpy as np
import pytest

from engine.checkpoint import Checkpoint, checkpoint_from_run, load_checkpoint, payload_bytes, save_checkpoint
from engine.errors import CheckpointError, CheckpointTruncatedError, CheckpointVersionError, ChecksumError
from engine.gating import CentroidStore
from engine.predictor import predict_gated_batch, predict_oracle
from utils.tensor_io import HEADER, decode_tensor, encode_tensor


def saved(run, path):
    return save_checkpoint(checkpoint_from_run(run), path)


def manifest_of(path) -> dict:
    return json.loads((path / 'manifest.json').read_text(encoding='utf-8'))


def test_tensor_header_layout():
    blob = encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert HEADER.size == 16
    assert blob[:4] == b'NBT\x01'
    assert int.from_bytes(blob[4:6], 'little') == 1
    assert int.from_bytes(blob[6:8], 'little') == 2
    assert int.from_bytes(blob[8:16], 'little') == 3
    assert len(blob) == 16 + 2 * 4 + 3 * 4
    # dims and data are little-endian
    assert blob[16:20] == (1).to_bytes(4, 'little')
    assert blob[-4:] == np.array(3.0, dtype='<f4').tobytes()
    np.testing.assert_array_equal(decode_tensor(blob), [[1.0, 2.0, 3.0]])


def test_truncated_tensor_is_detected():
    blob = encode_tensor(np.ones(4, dtype=np.float32))
    with pytest.raises(CheckpointTruncatedError):
        decode_tensor(blob[:-1])


def test_save_load_save_is_byte_identical(tiny_run, tmp_path):
    first = saved(tiny_run, tmp_path / 'a')
    second = save_checkpoint(load_checkpoint(first), tmp_path / 'b')
    files = sorted(p.name for p in first.iterdir())
    assert files == sorted(p.name for p in second.iterdir())
    for name in files:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_loaded_checkpoint_predicts_identically(tiny_run, tmp_path):
    checkpoint = load_checkpoint(saved(tiny_run, tmp_path / 'ckpt'))
    backbone = checkpoint.backbone()
    images = np.stack([s.image for s in tiny_run.datasets[2].test])

    for task_id in tiny_run.task_ids:
        before = predict_oracle(tiny_run.backbone, tiny_run.registry, images, task_id)
        after = predict_oracle(backbone, checkpoint.registry, images, task_id)
        assert before.tobytes() == after.tobytes()

    _, weights_before, q_before = predict_gated_batch(tiny_run.backbone, tiny_run.registry, tiny_run.store, images)
    _, weights_after, q_after = predict_gated_batch(backbone, checkpoint.registry, checkpoint.store, images)
    assert weights_before.tobytes() == weights_after.tobytes()
    assert q_before.tobytes() == q_after.tobytes()


def test_loaded_banks_are_frozen(tiny_run, tmp_path):
    checkpoint = load_checkpoint(saved(tiny_run, tmp_path / 'ckpt'))
    assert checkpoint.registry.task_ids == tiny_run.task_ids
    assert all(bank.frozen for bank in checkpoint.registry.banks.values())
    assert checkpoint.registry.fingerprints() == tiny_run.registry.fingerprints()
    assert checkpoint.experiment['label'] == 'tiny'


def test_corrupted_payload_fails_the_checksum(tiny_run, tmp_path):
    path = saved(tiny_run, tmp_path / 'ckpt')
    victim = path / manifest_of(path)['payload'][3]['file']
    blob = bytearray(victim.read_bytes())
    blob[-2] ^= 0x01
    victim.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_truncated_payload_is_reported(tiny_run, tmp_path):
    path = saved(tiny_run, tmp_path / 'ckpt')
    victim = path / manifest_of(path)['payload'][0]['file']
    victim.write_bytes(victim.read_bytes()[:-8])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_missing_payload_is_reported(tiny_run, tmp_path):
    path = saved(tiny_run, tmp_path / 'ckpt')
    (path / manifest_of(path)['payload'][-1]['file']).unlink()
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_missing_manifest_is_reported(tmp_path):
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path)


def test_other_format_version_is_rejected(tiny_run, tmp_path):
    path = saved(tiny_run, tmp_path / 'ckpt')
    manifest = manifest_of(path)
    manifest['format_version'] = 2
    (path / 'manifest.json').write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(CheckpointVersionError) as excinfo:
        load_checkpoint(path)
    assert excinfo.value.code == 'version-mismatch'


def test_shape_disagreeing_with_manifest_is_rejected(tiny_run, tmp_path):
    path = saved(tiny_run, tmp_path / 'ckpt')
    manifest = manifest_of(path)
    manifest['payload'][0]['shape'] = [999]
    (path / 'manifest.json').write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_each_task_adds_the_same_number_of_bytes(tiny_run, tmp_path):
    ids = tiny_run.task_ids
    store = tiny_run.store
    sizes = []
    for t in range(1, len(ids) + 1):
        view = CentroidStore(store.k, store.stages, store.tau, store.metric,
                             {key: c for key, c in store.centroids.items() if key[0] in ids[:t]})
        checkpoint = Checkpoint(tiny_run.backbone.config, tiny_run.registry.prefix(t), view)
        sizes.append(payload_bytes(save_checkpoint(checkpoint, tmp_path / f'prefix-{t}')))
    growth = np.diff(sizes)
    assert growth[0] > 0
    assert np.all(growth == growth[0])
