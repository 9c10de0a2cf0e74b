import struct

import pytest
import torch
from torch import nn

from vsanet.checkpoint import (
    MAGIC,
    CheckpointError,
    load_into,
    module_tensors,
    read_checkpoint,
    write_checkpoint,
)
from vsanet.core import TrainConfig
from vsanet.csu_gan import CsuModel, Discriminator
from vsanet.svae import SvaeModel
from vsanet.training import load_checkpoint, save_translation


def sample_tensors():
    g = torch.Generator().manual_seed(0)
    return {"a.w": torch.randn(3, 4, generator=g), "a.b": torch.randn(4, generator=g),
            "scalar": torch.tensor(2.5), "big.k": torch.randn(2, 3, 5, 5, generator=g)}


def test_round_trip(tmp_path):
    tensors = sample_tensors()
    path = write_checkpoint(tmp_path / "x.vsan", tensors, {"stage": "svae", "n": 3})
    back, meta = read_checkpoint(path)
    assert meta == {"stage": "svae", "n": 3}
    assert list(back) == list(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])


def test_header_bytes(tmp_path):
    path = write_checkpoint(tmp_path / "x.vsan", {"t": torch.ones(2)}, {})
    data = path.read_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack_from("<II", data, 8) == (1, 2)
    assert data[-8:] == struct.pack("<2f", 1.0, 1.0)


def test_bad_magic(tmp_path):
    (tmp_path / "x.vsan").write_bytes(b"PK\x03\x04" + bytes(40))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "x.vsan")


def test_trailing_bytes(tmp_path):
    path = write_checkpoint(tmp_path / "x.vsan", sample_tensors())
    path.write_bytes(path.read_bytes() + b"\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_truncated(tmp_path):
    path = write_checkpoint(tmp_path / "x.vsan", sample_tensors())
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_missing_tensor():
    net = nn.Linear(3, 2)
    tensors = module_tensors("m", net)
    del tensors["m.bias"]
    with pytest.raises(CheckpointError, match="m.bias"):
        load_into(nn.Linear(3, 2), "m", tensors)


def test_shape_mismatch():
    tensors = module_tensors("m", nn.Linear(3, 2))
    with pytest.raises(CheckpointError, match=r"m.weight"):
        load_into(nn.Linear(4, 2), "m", tensors)


def test_translation_namespaces(tmp_path):
    cfg = TrainConfig(image_size=32, width_divisor=16, latent_dim=16)
    svae, csu, disc = SvaeModel(cfg), CsuModel(cfg), Discriminator(cfg)
    path = save_translation(tmp_path / "t.vsan", svae, csu, disc, cfg, 0)
    tensors, meta = read_checkpoint(path)
    assert meta["stage"] == "translation" and meta["config"] == cfg.to_dict()
    prefixes = {k.split(".")[0] for k in tensors}
    assert prefixes == {"svae", "csu", "sca", "disc"}
    assert {k.split(".")[1] for k in tensors if k.startswith("sca.")} == {"0", "1", "2", "3"}
    for j in range(4):
        for head in ("f", "g", "h", "m", "gamma"):
            assert any(k.startswith(f"sca.{j}.{head}") for k in tensors), (j, head)
    models = load_checkpoint(path)
    for a, b in ((models.svae, svae), (models.csu, csu), (models.disc, disc)):
        sa, sb = a.state_dict(), b.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sb)
