import pytest
import torch

from conftest import tiny_model_config
from sparselift.checkpoint import load_checkpoint, load_model, save_checkpoint
from sparselift.errors import CheckpointError
from sparselift.network import UpliftModel
from sparselift.sequencing import token_layout


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        torch.manual_seed(0)
        model = UpliftModel(tiny_model_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, metadata={"phase": "test", "step": 42})
        state, config, metadata = load_checkpoint(path)
        assert metadata == {"phase": "test", "step": 42}
        assert config == model.config
        original = model.state_dict()
        assert set(state) == set(original)
        for name, tensor in original.items():
            assert torch.equal(state[name], tensor), name

    def test_loaded_model_reproduces_outputs(self, tmp_path):
        torch.manual_seed(1)
        cfg = tiny_model_config()
        model = UpliftModel(cfg).eval()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        restored, _ = load_model(path)
        layout = token_layout(cfg.schedule)
        x = torch.randn(2, layout.n_in, cfg.joints, 2)
        assert torch.equal(model(x, layout).center, restored(x, layout).center)

    def test_double_precision_round_trip(self, tmp_path):
        torch.manual_seed(2)
        model = UpliftModel(tiny_model_config()).double()
        path = tmp_path / "model64.ckpt"
        save_checkpoint(path, model)
        restored, _ = load_model(path)
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), restored.named_parameters()):
            assert n1 == n2
            assert p1.dtype == p2.dtype == torch.float64
            assert torch.equal(p1, p2)

    def test_checksum_detects_corruption(self, tmp_path):
        torch.manual_seed(0)
        model = UpliftModel(tiny_model_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        blob[-40] ^= 0xFF  # flip one payload byte
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
